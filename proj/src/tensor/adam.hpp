#pragma once

#include <cstdint>
#include <vector>

#include "tensor/tensor.hpp"

namespace bidet {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  std::uint64_t step = 0;

  static AdamState init(const std::vector<Tensor<float>>& params);
};

// Bias-corrected Adam. A parameter whose gradient has a non-finite entry is
// left untouched (moments included) for this step; the step counter still
// advances. Returns the number of skipped parameters.
std::size_t adam_step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
                      const AdamConfig& cfg);

// Step schedule with one-based epochs: lr · factor^(#boundaries b with epoch ≥ b).
// Boundaries {6, 10} over 12 epochs give base lr for 1-5, ×0.1 for 6-9, ×0.01 for 10-12.
float lr_for_epoch(float base_lr, const std::vector<int>& decay_epochs, float factor, int epoch);

}  // namespace bidet
