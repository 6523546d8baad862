#include "tensor/adam.hpp"

#include <cmath>

#include "error.hpp"

namespace bidet {

AdamState AdamState::init(const std::vector<Tensor<float>>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.shape(), 0.0f);
    s.v.emplace_back(p.shape(), 0.0f);
  }
  return s;
}

std::size_t adam_step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  require(params.size() == grads.size() && params.size() == state.m.size() && params.size() == state.v.size(),
          ErrorCode::shape_mismatch, "adam_step: parameter, gradient and state counts differ");
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  const float step_size = static_cast<float>(cfg.lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));

  std::size_t skipped = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    auto g = grads[k].data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(), ErrorCode::shape_mismatch,
            "adam_step: shape mismatch for parameter " + std::to_string(k));
    bool finite = true;
    for (float x : g) finite = finite && std::isfinite(x);
    if (!finite) {
      ++skipped;
      log_incident("adam_step: non-finite gradient for parameter " + std::to_string(k) + " at step " +
                   std::to_string(state.step) + ", update skipped");
      continue;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + cfg.eps);
    }
  }
  return skipped;
}

float lr_for_epoch(float base_lr, const std::vector<int>& decay_epochs, float factor, int epoch) {
  float lr = base_lr;
  for (int b : decay_epochs)
    if (epoch >= b) lr *= factor;
  return lr;
}

}  // namespace bidet
