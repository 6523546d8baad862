#pragma once

#include <span>

#include "tensor/tensor.hpp"

// Differentiable primitives. Every op takes the tape it records on; with a
// disabled tape (or inputs that require no grad) nothing is recorded.
namespace bidet::ops {

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a);
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a);
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);
template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a);

// Σ coeffs[i] * terms[i] over scalar tensors.
template <typename T>
Tensor<T> linear_combination(Tape<T>& tape, const std::vector<Tensor<T>>& terms, std::span<const T> coeffs);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  // Binarized layers pad with -1 so the float path agrees with the bitpacked
  // kernel, where a padded position is a zero bit.
  double pad_value = 0.0;
};

// input NCHW, weight OIHW; plain cross-correlation.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Conv2dParams& params);

template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);

// x NCHW times a per-channel constant (not differentiated w.r.t. the factors).
template <typename T>
Tensor<T> scale_channels(Tape<T>& tape, const Tensor<T>& x, std::span<const T> factors);

enum class BatchNormMode { train, infer };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);

  static BatchNormStats init(std::size_t channels) {
    return {Tensor<T>(Shape{channels}, T(0)), Tensor<T>(Shape{channels}, T(1)), T(0.1)};
  }
};

// Per-channel normalization over (N, H, W) for NCHW input or N for NC input.
// Train mode normalizes by batch statistics and folds them into `stats`.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, T eps, BatchNormMode mode);

// [N, A*K, G, G] head output -> [N, G*G, A, K], block index = gy*G + gx.
template <typename T>
Tensor<T> to_block_major(Tape<T>& tape, const Tensor<T>& x, std::size_t anchors);

// Plain dense kernels shared with other modules.
namespace kernels {
// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T pad_value, std::size_t oh, std::size_t ow, T* cols);
}  // namespace kernels

}  // namespace bidet::ops
