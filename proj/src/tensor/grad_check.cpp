#include "tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace bidet {

GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>> points, double eps, bool relaxed) {
  require(eps > 0.0 && eps <= 1e-2, ErrorCode::invalid_argument, "grad_check: eps must lie in (0, 1e-2]");
  for (auto& p : points) p.set_requires_grad(true);

  Tape<double> tape;
  tape.set_relaxed(relaxed);
  Tensor<double> f0 = fn(tape);
  GradientMap<double> grads = tape.backward(f0);

  auto eval = [&]() {
    Tape<double> quiet(false);
    quiet.set_relaxed(relaxed);
    return fn(quiet).item();
  };

  GradCheckResult res;
  std::size_t flat = 0;
  for (auto& p : points) {
    const Tensor<double> analytic = grads.get(p);
    for (std::size_t i = 0; i < p.numel(); ++i, ++flat) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double fp = eval();
      p[i] = saved - eps;
      const double fm = eval();
      p[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        res.non_finite.push_back(flat);
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_rel_error || !std::isfinite(rel)) {
        res.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        res.worst_index = flat;
      }
    }
  }
  res.coordinates = flat;
  return res;
}

GradCheckResult grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& fn,
                           Tensor<double> point, double eps) {
  return grad_check([&](Tape<double>& tape) { return fn(tape, point); }, {point}, eps);
}

}  // namespace bidet
