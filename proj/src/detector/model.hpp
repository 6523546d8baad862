#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "binary/binary_ops.hpp"
#include "detector/anchors.hpp"
#include "tensor/ops.hpp"

namespace bidet {

template <typename T>
struct ConvLayer {
  std::string name;
  Tensor<T> weight;  // OIHW
  Tensor<T> bias;    // feature layer and heads only
  Tensor<T> bn_gamma, bn_beta;
  ops::BatchNormStats<T> bn;
  Tensor<T> projection;  // 1x1 shortcut projection, when shapes change
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool binarized = false;

  bool has_bn() const { return bn_gamma.defined(); }
};

template <typename T>
struct DetectorModel {
  DetectorConfig config;
  // widths.size() conv+BN layers followed by the feature layer.
  std::vector<ConvLayer<T>> backbone;
  ConvLayer<T> cls_head, loc_head, logvar_head;

  static DetectorModel init(const DetectorConfig& config, std::uint64_t seed);

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  // Batch-norm running statistics.
  std::vector<std::pair<std::string, Tensor<T>>> named_buffers() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  DetectorModel clone() const;
  template <typename U>
  DetectorModel<U> cast() const;
};

template <typename T>
struct HeadOutputs {
  Tensor<T> class_logits;  // [N, blocks, anchors, classes + 1]
  Tensor<T> loc_mean;      // [N, blocks, anchors, 4]
  Tensor<T> loc_logvar;    // [N, blocks, anchors, 4]
  FeatureDistribution<T> features;
  Tensor<T> sample;  // binary feature map F in {-1, +1}
};

enum class FeatureMode {
  sample,     // Bernoulli draw (training)
  threshold,  // sign of the logits (inference)
};

template <typename T>
struct ForwardOptions {
  ops::BatchNormMode bn = ops::BatchNormMode::train;
  FeatureMode feature = FeatureMode::sample;
  std::mt19937_64* rng = nullptr;
  // When non-empty, freezes the Bernoulli draw (one uniform per feature element).
  std::span<const double> uniforms;
};

template <typename T>
HeadOutputs<T> forward(Tape<T>& tape, DetectorModel<T>& model, const Tensor<T>& images, const ForwardOptions<T>& opts);

template <typename T>
HeadOutputs<T> forward_train(Tape<T>& tape, DetectorModel<T>& model, const Tensor<T>& images, std::mt19937_64& rng) {
  return forward(tape, model, images, ForwardOptions<T>{ops::BatchNormMode::train, FeatureMode::sample, &rng, {}});
}

// Read-only inference over an immutable snapshot of a model. The bitpacked
// variant routes binarized layers through the xnor-popcount kernel.
class InferenceEngine {
 public:
  InferenceEngine(const DetectorModel<float>& model, bool bitpacked);

  HeadOutputs<float> run(const Tensor<float>& images) const;
  // Pre-NMS detections per image.
  std::vector<std::vector<Detection>> detect(const Tensor<float>& images, std::size_t first_image_id = 0) const;

  bool bitpacked() const { return bitpacked_; }
  const DetectorModel<float>& model() const { return model_; }
  const AnchorGrid& anchors() const { return anchors_; }

 private:
  DetectorModel<float> model_;
  AnchorGrid anchors_;
  bool bitpacked_;
  std::vector<PackedWeights> packed_;
  std::vector<std::vector<float>> alphas_;
};

// Per block/anchor: class = argmax softmax; background argmax emits nothing;
// box decoded from the mean offsets only and clipped to the image.
std::vector<std::vector<Detection>> decode_detections(const HeadOutputs<float>& heads, const AnchorGrid& anchors,
                                                      std::size_t first_image_id = 0);

std::vector<std::vector<Detection>> forward_infer(const DetectorModel<float>& model, const Tensor<float>& images,
                                                  bool use_bitpacked);

extern template struct DetectorModel<float>;
extern template struct DetectorModel<double>;

}  // namespace bidet
