#include "detector/model.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace bidet {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
ConvLayer<T> make_conv(std::string name, std::size_t in, std::size_t out, std::size_t k, double stddev,
                       std::mt19937_64& rng) {
  ConvLayer<T> layer;
  layer.name = std::move(name);
  layer.weight = normal_tensor<T>(Shape{out, in, k, k}, stddev, rng);
  layer.pad = k / 2;
  return layer;
}

template <typename T>
void add_bn(ConvLayer<T>& layer, std::size_t channels) {
  layer.bn_gamma = Tensor<T>(Shape{channels}, T(1));
  layer.bn_beta = Tensor<T>(Shape{channels}, T(0));
  layer.bn = ops::BatchNormStats<T>::init(channels);
}

template <typename T, typename U>
Tensor<U> cast_or_empty(const Tensor<T>& t) {
  return t.defined() ? t.template cast<U>() : Tensor<U>();
}

template <typename T>
Tensor<T> clone_or_empty(const Tensor<T>& t) {
  return t.defined() ? t.clone() : Tensor<T>();
}

template <typename T, typename U>
ConvLayer<U> cast_layer(const ConvLayer<T>& l) {
  ConvLayer<U> out;
  out.name = l.name;
  out.weight = cast_or_empty<T, U>(l.weight);
  out.bias = cast_or_empty<T, U>(l.bias);
  out.bn_gamma = cast_or_empty<T, U>(l.bn_gamma);
  out.bn_beta = cast_or_empty<T, U>(l.bn_beta);
  out.bn.running_mean = cast_or_empty<T, U>(l.bn.running_mean);
  out.bn.running_var = cast_or_empty<T, U>(l.bn.running_var);
  out.bn.momentum = static_cast<U>(l.bn.momentum);
  out.projection = cast_or_empty<T, U>(l.projection);
  out.stride = l.stride;
  out.pad = l.pad;
  out.binarized = l.binarized;
  return out;
}

template <typename T>
ConvLayer<T> clone_layer(const ConvLayer<T>& l) {
  ConvLayer<T> out = l;
  out.weight = clone_or_empty(l.weight);
  out.bias = clone_or_empty(l.bias);
  out.bn_gamma = clone_or_empty(l.bn_gamma);
  out.bn_beta = clone_or_empty(l.bn_beta);
  out.bn.running_mean = clone_or_empty(l.bn.running_mean);
  out.bn.running_var = clone_or_empty(l.bn.running_var);
  out.projection = clone_or_empty(l.projection);
  return out;
}

template <typename T>
void for_each_layer(const DetectorModel<T>& m, auto&& fn) {
  for (const auto& l : m.backbone) fn(l);
  fn(m.cls_head);
  fn(m.loc_head);
  fn(m.logvar_head);
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where) {
  for (auto v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      fail(ErrorCode::numeric, "forward: non-finite activation after " + where);
}

constexpr float kBnEps = 1e-5f;

}  // namespace

template <typename T>
DetectorModel<T> DetectorModel<T>::init(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DetectorModel<T> m;
  m.config = config;
  const auto flags = config.binarize_flags();
  std::size_t in = 3;
  for (std::size_t i = 0; i < config.widths.size(); ++i) {
    const std::size_t out = config.widths[i];
    // Latent weights of binarized layers only matter through their sign, but
    // must sit inside the STE window to receive gradient.
    const double stddev = flags[i] ? 0.1 : std::sqrt(2.0 / static_cast<double>(in * 9));
    auto layer = make_conv<T>("backbone." + std::to_string(i), in, out, 3, stddev, rng);
    layer.stride = config.strides[i];
    layer.binarized = flags[i];
    add_bn(layer, out);
    if (config.shortcut && i >= 1 && (in != out || layer.stride != 1))
      layer.projection = normal_tensor<T>(Shape{out, in, 1, 1}, std::sqrt(1.0 / static_cast<double>(in)), rng);
    m.backbone.push_back(std::move(layer));
    in = out;
  }
  const std::size_t fi = config.widths.size();
  auto feat = make_conv<T>("backbone." + std::to_string(fi), in, config.feature_channels, 3,
                           std::sqrt(2.0 / static_cast<double>(in * 9)), rng);
  feat.bias = Tensor<T>(Shape{config.feature_channels}, T(0));
  m.backbone.push_back(std::move(feat));

  const std::size_t fc = config.feature_channels, a = config.anchors_per_block;
  const double head_std = 0.01;
  m.cls_head = make_conv<T>("head.cls", fc, a * config.class_slots(), 3, head_std, rng);
  m.loc_head = make_conv<T>("head.loc", fc, a * 4, 3, head_std, rng);
  m.logvar_head = make_conv<T>("head.logvar", fc, a * 4, 3, head_std, rng);
  for (auto* h : {&m.cls_head, &m.loc_head, &m.logvar_head}) h->bias = Tensor<T>(Shape{h->weight.dim(0)}, T(0));
  return m;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DetectorModel<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for_each_layer(*this, [&](const ConvLayer<T>& l) {
    out.emplace_back(l.name + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(l.name + ".bias", l.bias);
    if (l.has_bn()) {
      out.emplace_back(l.name + ".bn.gamma", l.bn_gamma);
      out.emplace_back(l.name + ".bn.beta", l.bn_beta);
    }
    if (l.projection.defined()) out.emplace_back(l.name + ".projection", l.projection);
  });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DetectorModel<T>::named_buffers() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for_each_layer(*this, [&](const ConvLayer<T>& l) {
    if (!l.has_bn()) return;
    out.emplace_back(l.name + ".bn.running_mean", l.bn.running_mean);
    out.emplace_back(l.name + ".bn.running_var", l.bn.running_var);
  });
  return out;
}

template <typename T>
std::vector<Tensor<T>> DetectorModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename T>
std::size_t DetectorModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template <typename T>
DetectorModel<T> DetectorModel<T>::clone() const {
  DetectorModel<T> out;
  out.config = config;
  for (const auto& l : backbone) out.backbone.push_back(clone_layer(l));
  out.cls_head = clone_layer(cls_head);
  out.loc_head = clone_layer(loc_head);
  out.logvar_head = clone_layer(logvar_head);
  return out;
}

template <typename T>
template <typename U>
DetectorModel<U> DetectorModel<T>::cast() const {
  DetectorModel<U> out;
  out.config = config;
  for (const auto& l : backbone) out.backbone.push_back(cast_layer<T, U>(l));
  out.cls_head = cast_layer<T, U>(cls_head);
  out.loc_head = cast_layer<T, U>(loc_head);
  out.logvar_head = cast_layer<T, U>(logvar_head);
  return out;
}

namespace {

// One conv+BN backbone layer. `packed` (optional) replaces the float binary
// convolution with the xnor-popcount kernel.
template <typename T>
Tensor<T> backbone_layer(Tape<T>& tape, ConvLayer<T>& layer, const Tensor<T>& a, std::size_t index, bool scale_factors,
                         ops::BatchNormMode bn_mode, const PackedWeights* packed, const std::vector<T>* alpha) {
  Tensor<T> y;
  if (layer.binarized) {
    if (packed) {
      const PackedActivations act = pack_activations<T>(a.data(), a.shape(), layer.pad);
      const IntTensor r = binary_conv2d_packed(act, *packed, layer.stride);
      std::vector<T> v(r.data.begin(), r.data.end());
      y = Tensor<T>(r.shape, std::move(v));
    } else {
      const Tensor<T> xb = sign_ste(tape, a);
      const Tensor<T> wb = sign_ste(tape, layer.weight);
      y = ops::conv2d(tape, xb, wb, {layer.stride, layer.pad, -1.0});
    }
    if (scale_factors) {
      const std::vector<T> f = alpha ? *alpha : weight_scale_factors(layer.weight);
      y = ops::scale_channels(tape, y, std::span<const T>(f));
    }
  } else {
    const Tensor<T> x = index == 0 ? a : ops::relu(tape, a);
    y = ops::conv2d(tape, x, layer.weight, {layer.stride, layer.pad, 0.0});
  }
  return ops::batch_norm(tape, y, layer.bn_gamma, layer.bn_beta, layer.bn, static_cast<T>(kBnEps), bn_mode);
}

template <typename T>
Tensor<T> head_conv(Tape<T>& tape, const ConvLayer<T>& layer, const Tensor<T>& f, std::size_t anchors) {
  Tensor<T> y = ops::conv2d(tape, f, layer.weight, {1, layer.pad, 0.0});
  y = ops::add_channel_bias(tape, y, layer.bias);
  return ops::to_block_major(tape, y, anchors);
}

template <typename T>
HeadOutputs<T> forward_impl(Tape<T>& tape, DetectorModel<T>& model, const Tensor<T>& images, const ForwardOptions<T>& opts,
                            const std::vector<PackedWeights>* packed, const std::vector<std::vector<T>>* alphas) {
  const DetectorConfig& cfg = model.config;
  require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == cfg.height && images.dim(3) == cfg.width,
          ErrorCode::shape_mismatch,
          "forward: expected images [N,3," + std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "], got " +
              shape_str(images.shape()));
  const std::size_t nl = cfg.widths.size();
  Tensor<T> a = images;
  for (std::size_t i = 0; i < nl; ++i) {
    ConvLayer<T>& layer = model.backbone[i];
    const PackedWeights* pw = (packed && layer.binarized) ? &(*packed)[i] : nullptr;
    const std::vector<T>* al = (alphas && layer.binarized) ? &(*alphas)[i] : nullptr;
    Tensor<T> y = backbone_layer(tape, layer, a, i, cfg.scale_factors, opts.bn, pw, al);
    if (cfg.shortcut && i >= 1) {
      const Tensor<T> skip =
          layer.projection.defined() ? ops::conv2d(tape, a, layer.projection, {layer.stride, 0, 0.0}) : a;
      y = ops::add(tape, y, skip);
    }
    require_finite(y, layer.name);
    a = y;
  }

  ConvLayer<T>& feat = model.backbone[nl];
  Tensor<T> z = ops::conv2d(tape, ops::relu(tape, a), feat.weight, {feat.stride, feat.pad, 0.0});
  z = ops::add_channel_bias(tape, z, feat.bias);
  require_finite(z, feat.name);

  HeadOutputs<T> out;
  out.features = feature_distribution(tape, z);
  if (opts.feature == FeatureMode::sample) {
    if (!opts.uniforms.empty()) {
      out.sample = bernoulli_st_sample(tape, out.features.prob, opts.uniforms);
    } else {
      require(opts.rng != nullptr, ErrorCode::invalid_argument, "forward: sampling mode needs an rng");
      out.sample = bernoulli_st_sample(tape, out.features.prob, *opts.rng);
    }
  } else {
    Tape<T> quiet(false);
    out.sample = sign_ste(quiet, z);
  }

  const std::size_t anchors = cfg.anchors_per_block;
  out.class_logits = head_conv(tape, model.cls_head, out.sample, anchors);
  out.loc_mean = head_conv(tape, model.loc_head, out.sample, anchors);
  out.loc_logvar = head_conv(tape, model.logvar_head, out.sample, anchors);
  return out;
}

}  // namespace

template <typename T>
HeadOutputs<T> forward(Tape<T>& tape, DetectorModel<T>& model, const Tensor<T>& images, const ForwardOptions<T>& opts) {
  return forward_impl<T>(tape, model, images, opts, nullptr, nullptr);
}

InferenceEngine::InferenceEngine(const DetectorModel<float>& model, bool bitpacked)
    : model_(model.clone()), anchors_(build_anchors(model.config)), bitpacked_(bitpacked) {
  if (!bitpacked_) return;
  packed_.resize(model_.backbone.size());
  alphas_.resize(model_.backbone.size());
  for (std::size_t i = 0; i < model_.backbone.size(); ++i) {
    const auto& l = model_.backbone[i];
    if (!l.binarized) continue;
    packed_[i] = pack_weights<float>(l.weight.data(), l.weight.shape());
    if (model_.config.scale_factors) alphas_[i] = weight_scale_factors(l.weight);
  }
}

HeadOutputs<float> InferenceEngine::run(const Tensor<float>& images) const {
  Tape<float> quiet(false);
  // The snapshot is only read in infer mode; the copy shares its tensors.
  DetectorModel<float> view = model_;
  ForwardOptions<float> opts{ops::BatchNormMode::infer, FeatureMode::threshold, nullptr, {}};
  return forward_impl<float>(quiet, view, images, opts, bitpacked_ ? &packed_ : nullptr, bitpacked_ ? &alphas_ : nullptr);
}

std::vector<std::vector<Detection>> InferenceEngine::detect(const Tensor<float>& images, std::size_t first_image_id) const {
  return decode_detections(run(images), anchors_, first_image_id);
}

std::vector<std::vector<Detection>> decode_detections(const HeadOutputs<float>& heads, const AnchorGrid& anchors,
                                                      std::size_t first_image_id) {
  const Tensor<float>& logits = heads.class_logits;
  const std::size_t n = logits.dim(0), nb = logits.dim(1), na = logits.dim(2), k = logits.dim(3);
  std::vector<std::vector<Detection>> out(n);
  std::vector<double> prob(k);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t blk = 0; blk < nb; ++blk)
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t row = (b * nb + blk) * na + a;
        const float* z = logits.data().data() + row * k;
        const double zmax = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) total += prob[c] = std::exp(static_cast<double>(z[c]) - zmax);
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
          if (prob[c] > prob[best]) best = c;
        if (best == 0) continue;
        const float* mu = heads.loc_mean.data().data() + row * 4;
        const Offsets off{mu[0], mu[1], mu[2], mu[3]};
        Detection d;
        d.box = decode_offsets(anchors, off, blk, a, true);
        if (d.box.area() <= 0.0) continue;
        d.class_id = static_cast<int>(best);
        d.score = prob[best] / total;
        d.image_id = first_image_id + b;
        d.anchor_index = blk * na + a;
        out[b].push_back(d);
      }
  return out;
}

std::vector<std::vector<Detection>> forward_infer(const DetectorModel<float>& model, const Tensor<float>& images,
                                                  bool use_bitpacked) {
  return InferenceEngine(model, use_bitpacked).detect(images);
}

template struct DetectorModel<float>;
template struct DetectorModel<double>;
template DetectorModel<double> DetectorModel<float>::cast<double>() const;
template DetectorModel<float> DetectorModel<double>::cast<float>() const;
template DetectorModel<float> DetectorModel<float>::cast<float>() const;
template HeadOutputs<float> forward(Tape<float>&, DetectorModel<float>&, const Tensor<float>&, const ForwardOptions<float>&);
template HeadOutputs<double> forward(Tape<double>&, DetectorModel<double>&, const Tensor<double>&,
                                     const ForwardOptions<double>&);

}  // namespace bidet
