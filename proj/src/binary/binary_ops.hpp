#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "tensor/tensor.hpp"

namespace bidet {

// Sign with the clipped straight-through gradient: forward +1 for x >= 0
// else -1; backward passes the upstream gradient where |x| <= 1.
template <typename T>
Tensor<T> sign_ste(Tape<T>& tape, const Tensor<T>& x);

// Optional Xnor-style per-output-channel factors mean|W_o| for an OIHW weight.
// Binarized layers apply them to the conv output as constants.
template <typename T>
std::vector<T> weight_scale_factors(const Tensor<T>& weight);

// Per-element probabilities of the binary feature map being +1, together with
// the logits they were produced from (kept for numerically stable losses).
template <typename T>
struct FeatureDistribution {
  Tensor<T> logits;
  Tensor<T> prob;
};

template <typename T>
FeatureDistribution<T> feature_distribution(Tape<T>& tape, const Tensor<T>& logits);

// Uniform [0,1) draws for a Bernoulli sample; exposed so a sample can be frozen.
std::vector<double> draw_uniforms(std::size_t count, std::mt19937_64& rng);

// Straight-through Bernoulli: +1 with probability p else -1. Backward treats
// the forward as its expectation 2p-1, i.e. d(sample)/dp = 2.
template <typename T>
Tensor<T> bernoulli_st_sample(Tape<T>& tape, const Tensor<T>& prob, std::mt19937_64& rng);
template <typename T>
Tensor<T> bernoulli_st_sample(Tape<T>& tape, const Tensor<T>& prob, std::span<const double> uniforms);

// Bit k set <=> element k is +1. Words are little-endian within the stream;
// bits past `size` are zero.
struct PackedBits {
  std::vector<std::uint64_t> words;
  std::size_t size = 0;
};

template <typename T>
PackedBits bitpack(std::span<const T> values);
std::vector<float> unpack(const PackedBits& bits);

// Σ a_i b_i over the ±1 vectors, as 2·popcount(xnor(a, b) masked to n) - n.
std::int64_t xnor_popcount_dot(const PackedBits& a, const PackedBits& b);

struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;
};

// Activations repacked per pixel: each padded (y, x) holds the channel bits in
// ceil(C/64) words. Padding pixels are all-zero words, i.e. logical -1.
struct PackedActivations {
  std::size_t n = 0, channels = 0, height = 0, width = 0, pad = 0;
  std::size_t words_per_pixel = 0;
  std::vector<std::uint64_t> bits;

  std::size_t padded_height() const { return height + 2 * pad; }
  std::size_t padded_width() const { return width + 2 * pad; }
};

struct PackedWeights {
  std::size_t out_channels = 0, in_channels = 0, kh = 0, kw = 0;
  std::size_t words_per_pixel = 0;
  std::vector<std::uint64_t> bits;
};

// Sign-packs real-valued NCHW activations (x >= 0 -> bit set).
template <typename T>
PackedActivations pack_activations(std::span<const T> nchw, const Shape& shape, std::size_t pad);
template <typename T>
PackedWeights pack_weights(std::span<const T> oihw, const Shape& shape);

IntTensor binary_conv2d_packed(const PackedActivations& input, const PackedWeights& weight, std::size_t stride);

// Integer-exact binary convolution on bitpacked NCHW input and OIHW weight.
// Padding contributes -1, matching conv2d with pad_value = -1.
IntTensor binary_conv2d_bitpacked(const PackedBits& input, const Shape& input_shape, const PackedBits& weight,
                                  const Shape& weight_shape, std::size_t stride, std::size_t pad);

}  // namespace bidet
