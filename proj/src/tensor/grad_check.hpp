#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tensor/tensor.hpp"

namespace bidet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Flat index (across all checked tensors, in order) of the worst coordinate.
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  // Coordinates where f was non-finite at x ± eps.
  std::vector<std::size_t> non_finite;

  bool ok(double tol) const { return non_finite.empty() && max_rel_error < tol; }
};

// A scalar-valued map built on the tape. It is evaluated repeatedly: once with
// a recording tape for the analytic gradient and twice per coordinate with a
// non-recording tape for central differences.
using ScalarFn = std::function<Tensor<double>(Tape<double>&)>;

// Compares dF/dθ for every tensor in `points` against
// (f(θ+eps·e) − f(θ−eps·e)) / (2·eps). Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). `relaxed` puts the tape in relaxed
// straight-through mode for both evaluations.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>> points, double eps, bool relaxed = false);

// Single-input convenience form: fn receives the point tensor.
GradCheckResult grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& fn,
                           Tensor<double> point, double eps);

}  // namespace bidet
