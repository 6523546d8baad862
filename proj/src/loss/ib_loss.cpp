#include "loss/ib_loss.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "error.hpp"
#include "tensor/ops.hpp"

namespace bidet {

namespace {

constexpr double kLn2 = std::numbers::ln2;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Every feature bit carries equal weight: the divisor is the element count.
template <typename T>
std::size_t info_denominator(const Tensor<T>& t) {
  return std::max<std::size_t>(t.numel(), 1);
}

// Row-wise softmax of a [rows, k] view.
void softmax_row(const double* z, std::size_t k, double* p) {
  const double zmax = *std::max_element(z, z + k);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) total += p[c] = std::exp(z[c] - zmax);
  for (std::size_t c = 0; c < k; ++c) p[c] /= total;
}

template <typename T>
void check_head_shape(const Tensor<T>& t, std::span<const BlockLabels> labels, std::size_t last, const char* what) {
  require(t.rank() == 4 && t.dim(0) == labels.size() && (last == 0 || t.dim(3) == last), ErrorCode::shape_mismatch,
          std::string(what) + ": head shape " + shape_str(t.shape()) + " does not match " + std::to_string(labels.size()) +
              " label sets");
  for (const auto& l : labels)
    require(l.cls.size() == t.dim(1) && l.mask.size() == t.dim(1), ErrorCode::shape_mismatch,
            std::string(what) + ": label block count differs from head block count");
}

}  // namespace

void LossWeights::validate() const {
  require(beta > 0, ErrorCode::invalid_argument, "loss weights: beta must be positive");
  require(gamma >= 0, ErrorCode::invalid_argument, "loss weights: gamma must be non-negative");
  require(tau > 0 && tau < 1, ErrorCode::invalid_argument, "loss weights: tau must lie in (0,1)");
  require(info_weight >= 0, ErrorCode::invalid_argument, "loss weights: info_weight must be non-negative");
}

bool LossBreakdown::finite() const {
  return std::isfinite(info_xf) && std::isfinite(class_term) && std::isfinite(loc_term) && std::isfinite(sparse_term) &&
         std::isfinite(total);
}

template <typename T>
Tensor<T> info_xf(Tape<T>& tape, const Tensor<T>& prob) {
  const std::size_t n = info_denominator(prob);
  double acc = 0.0;
  for (auto v : prob.data()) {
    const double p = v;
    require(p >= 0.0 && p <= 1.0, ErrorCode::invalid_argument, "info_xf: probability outside [0,1]");
    acc += kLn2 + xlogx(p) + xlogx(1.0 - p);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  auto *pn = prob.node(), *on = out.node();
  tape.record({prob}, out, [pn, on, n] {
    const double g = static_cast<double>(on->grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < pn->data.size(); ++i) {
      const double p = std::clamp(static_cast<double>(pn->data[i]), 1e-12, 1.0 - 1e-12);
      pn->grad[i] += static_cast<T>(g * (std::log(p) - std::log1p(-p)));
    }
  });
  return out;
}

template <typename T>
Tensor<T> info_xf_from_logits(Tape<T>& tape, const Tensor<T>& logits) {
  const std::size_t n = info_denominator(logits);
  double acc = 0.0;
  for (auto v : logits.data()) {
    const double z = v;
    const double p = 1.0 / (1.0 + std::exp(-z));
    // ln 2 + p ln p + (1-p) ln(1-p) with ln p = -softplus(-z), ln(1-p) = -softplus(z)
    acc += kLn2 - p * softplus(-z) - (1.0 - p) * softplus(z);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  auto *zn = logits.node(), *on = out.node();
  tape.record({logits}, out, [zn, on, n] {
    const double g = static_cast<double>(on->grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < zn->data.size(); ++i) {
      const double z = zn->data[i];
      const double p = 1.0 / (1.0 + std::exp(-z));
      zn->grad[i] += static_cast<T>(g * p * (1.0 - p) * z);
    }
  });
  return out;
}

template <typename T>
Tensor<T> info_xf(Tape<T>& tape, const FeatureDistribution<T>& dist) {
  return dist.logits.defined() ? info_xf_from_logits(tape, dist.logits) : info_xf(tape, dist.prob);
}

template <typename T>
Tensor<T> class_term(Tape<T>& tape, const Tensor<T>& class_logits, std::span<const BlockLabels> labels) {
  check_head_shape(class_logits, labels, 0, "class_term");
  const std::size_t n = class_logits.dim(0), nb = class_logits.dim(1), na = class_logits.dim(2), k = class_logits.dim(3);

  // (row, label, weight): a positive block reads its matched anchor; a
  // background block spreads its unit weight over all of its anchors.
  struct Supervised {
    std::size_t row;
    std::size_t label;
    double weight;
  };
  std::vector<Supervised> rows;
  rows.reserve(n * nb * na);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t blk = 0; blk < nb; ++blk) {
      const BlockLabels& l = labels[b];
      require(l.cls[blk] >= 0 && static_cast<std::size_t>(l.cls[blk]) < k, ErrorCode::invalid_argument,
              "class_term: label " + std::to_string(l.cls[blk]) + " out of range for " + std::to_string(k) + " classes");
      const std::size_t base = (b * nb + blk) * na;
      if (l.mask[blk]) {
        require(l.anchor[blk] >= 0 && static_cast<std::size_t>(l.anchor[blk]) < na, ErrorCode::invalid_argument,
                "class_term: matched anchor out of range");
        rows.push_back({base + static_cast<std::size_t>(l.anchor[blk]), static_cast<std::size_t>(l.cls[blk]), 1.0});
      } else {
        for (std::size_t a = 0; a < na; ++a)
          rows.push_back({base + a, static_cast<std::size_t>(l.cls[blk]), 1.0 / static_cast<double>(na)});
      }
    }

  const double denom = static_cast<double>(n * nb);
  std::vector<double> z(k), p(k);
  double acc = 0.0;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < k; ++c) z[c] = class_logits[r.row * k + c];
    const double zmax = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (std::size_t c = 0; c < k; ++c) lse += std::exp(z[c] - zmax);
    acc += r.weight * (z[r.label] - zmax - std::log(lse));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / denom));
  auto *ln = class_logits.node(), *on = out.node();
  tape.record({class_logits}, out, [=, rows = std::move(rows)] {
    const double g = static_cast<double>(on->grad[0]) / denom;
    std::vector<double> zz(k), pp(k);
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < k; ++c) zz[c] = ln->data[r.row * k + c];
      softmax_row(zz.data(), k, pp.data());
      for (std::size_t c = 0; c < k; ++c)
        ln->grad[r.row * k + c] += static_cast<T>(g * r.weight * ((c == r.label ? 1.0 : 0.0) - pp[c]));
    }
  });
  return out;
}

template <typename T>
Tensor<T> loc_term(Tape<T>& tape, const Tensor<T>& loc_mean, const Tensor<T>& loc_logvar,
                   std::span<const BlockLabels> labels) {
  check_head_shape(loc_mean, labels, 4, "loc_term");
  require(loc_logvar.shape() == loc_mean.shape(), ErrorCode::shape_mismatch, "loc_term: mean/log-variance shapes differ");
  const std::size_t n = loc_mean.dim(0), nb = loc_mean.dim(1), na = loc_mean.dim(2);

  std::vector<std::pair<std::size_t, Offsets>> rows;  // (row, target)
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t blk = 0; blk < nb; ++blk)
      if (labels[b].mask[blk]) {
        const auto a = static_cast<std::size_t>(labels[b].anchor[blk]);
        require(a < na, ErrorCode::invalid_argument, "loc_term: matched anchor out of range");
        rows.emplace_back((b * nb + blk) * na + a, labels[b].target[blk]);
      }

  double acc = 0.0;
  for (const auto& [row, t] : rows)
    for (std::size_t c = 0; c < 4; ++c) {
      const double mu = loc_mean[row * 4 + c];
      const double lv = std::max(static_cast<double>(loc_logvar[row * 4 + c]), kMinLogVariance);
      const double d = t[c] - mu;
      acc += -kHalfLog2Pi - 0.5 * lv - 0.5 * d * d * std::exp(-lv);
    }
  // Same per-block normalisation as class_term; background blocks add zero.
  const double denom = static_cast<double>(n * nb);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / denom));
  auto *mn = loc_mean.node(), *vn = loc_logvar.node(), *on = out.node();
  tape.record({loc_mean, loc_logvar}, out, [=] {
    const double g = static_cast<double>(on->grad[0]) / denom;
    for (const auto& [row, t] : rows)
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t i = row * 4 + c;
        const double mu = mn->data[i];
        const double raw = vn->data[i];
        const double lv = std::max(raw, kMinLogVariance);
        const double inv_var = std::exp(-lv);
        const double d = t[c] - mu;
        if (mn->requires_grad) mn->grad[i] += static_cast<T>(g * d * inv_var);
        if (vn->requires_grad && raw >= kMinLogVariance) vn->grad[i] += static_cast<T>(g * (-0.5 + 0.5 * d * d * inv_var));
      }
  });
  return out;
}

template <typename T>
Tensor<T> sparse_entropy(Tape<T>& tape, const Tensor<T>& s) {
  const double m = static_cast<double>(s.numel());
  double acc = 0.0;
  for (auto v : s.data()) acc += xlogx(static_cast<double>(v));
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-acc / m));
  auto *sn = s.node(), *on = out.node();
  tape.record({s}, out, [sn, on, m] {
    const double g = static_cast<double>(on->grad[0]);
    for (std::size_t i = 0; i < sn->data.size(); ++i) {
      const double v = std::max(static_cast<double>(sn->data[i]), 1e-300);
      sn->grad[i] += static_cast<T>(-g * (std::log(v) + 1.0) / m);
    }
  });
  return out;
}

namespace {

struct SparseRow {
  std::size_t row;
  std::size_t best;  // argmax foreground class
  double conf;
};

// Foreground candidates (c > τ) of one image.
template <typename T>
std::vector<SparseRow> sparse_candidates(const T* logits, std::size_t rows, std::size_t k, double tau,
                                         std::size_t row_offset) {
  std::vector<SparseRow> out;
  std::vector<double> z(k), p(k);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < k; ++c) z[c] = logits[r * k + c];
    softmax_row(z.data(), k, p.data());
    std::size_t best = 1;
    for (std::size_t c = 2; c < k; ++c)
      if (p[c] > p[best]) best = c;
    if (p[best] > tau) out.push_back({row_offset + r, best, p[best]});
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sparse_prior_loss(Tape<T>& tape, const Tensor<T>& class_logits, const LossWeights& weights) {
  require(class_logits.rank() == 4 && class_logits.dim(3) >= 2, ErrorCode::shape_mismatch,
          "sparse_prior_loss: expected [N, blocks, anchors, classes+1] logits, got " + shape_str(class_logits.shape()));
  const std::size_t n = class_logits.dim(0), rows = class_logits.dim(1) * class_logits.dim(2), k = class_logits.dim(3);
  const double tau = weights.tau;

  std::vector<std::vector<SparseRow>> sets(n);
  double acc = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    sets[b] = sparse_candidates(class_logits.data().data() + b * rows * k, rows, k, tau, b * rows);
    const auto& set = sets[b];
    if (set.size() <= 1) continue;
    double total = 0.0;
    for (const auto& r : set) total += r.conf;
    double h = 0.0;
    for (const auto& r : set) h += xlogx(r.conf / total);
    acc += -h / static_cast<double>(set.size());
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  auto *ln = class_logits.node(), *on = out.node();
  tape.record({class_logits}, out, [=] {
    const double up = static_cast<double>(on->grad[0]) / static_cast<double>(n);
    std::vector<double> z(k), p(k);
    for (const auto& set : sets) {
      const std::size_t m = set.size();
      if (m <= 1) continue;
      double total = 0.0;
      for (const auto& r : set) total += r.conf;
      // dH/ds_i = -(ln s_i + 1)/m ; dH/dc_j = (g_j - Σ g_i s_i) / C
      std::vector<double> g(m), s(m);
      double gs = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        s[i] = set[i].conf / total;
        g[i] = -(std::log(s[i]) + 1.0) / static_cast<double>(m);
        gs += g[i] * s[i];
      }
      for (std::size_t i = 0; i < m; ++i) {
        const double dc = up * (g[i] - gs) / total;
        const std::size_t row = set[i].row;
        for (std::size_t c = 0; c < k; ++c) z[c] = ln->data[row * k + c];
        softmax_row(z.data(), k, p.data());
        const double conf = p[set[i].best];
        for (std::size_t c = 0; c < k; ++c)
          ln->grad[row * k + c] += static_cast<T>(dc * conf * ((c == set[i].best ? 1.0 : 0.0) - p[c]));
      }
    }
  });
  return out;
}

template <typename T>
Objective<T> total_objective(Tape<T>& tape, const Tensor<T>& info, const Tensor<T>& cls, const Tensor<T>& loc,
                             const Tensor<T>& sparse, const LossWeights& weights) {
  weights.validate();
  LossBreakdown parts;
  parts.info_xf = info.item();
  parts.class_term = cls.item();
  parts.loc_term = loc.item();
  parts.sparse_term = sparse.item();
  parts.total = weights.info_weight * parts.info_xf - weights.beta * (parts.class_term + parts.loc_term) +
                weights.gamma * parts.sparse_term;
  require(parts.finite(), ErrorCode::numeric, "total_objective: non-finite loss term");
  const std::vector<T> coeffs = {static_cast<T>(weights.info_weight), static_cast<T>(-weights.beta),
                                 static_cast<T>(-weights.beta), static_cast<T>(weights.gamma)};
  Objective<T> out;
  out.total = ops::linear_combination(tape, {info, cls, loc, sparse}, std::span<const T>(coeffs));
  out.parts = parts;
  return out;
}

double class_prior_log_density(std::span<const BlockLabels> labels, std::size_t num_classes) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& l : labels)
    for (std::size_t blk = 0; blk < l.mask.size(); ++blk, ++count)
      if (l.mask[blk]) acc -= std::log(static_cast<double>(num_classes + 1));
  return count ? acc / static_cast<double>(count) : 0.0;
}

double loc_prior_log_density(std::span<const BlockLabels> labels) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& l : labels) {
    count += l.mask.size();
    for (std::size_t blk = 0; blk < l.mask.size(); ++blk)
      if (l.mask[blk])
        for (double t : l.target[blk]) acc += -kHalfLog2Pi - 0.5 * t * t;
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

#define BIDET_INSTANTIATE_LOSS(T)                                                                                    \
  template Tensor<T> info_xf(Tape<T>&, const Tensor<T>&);                                                            \
  template Tensor<T> info_xf_from_logits(Tape<T>&, const Tensor<T>&);                                                \
  template Tensor<T> info_xf(Tape<T>&, const FeatureDistribution<T>&);                                               \
  template Tensor<T> class_term(Tape<T>&, const Tensor<T>&, std::span<const BlockLabels>);                           \
  template Tensor<T> loc_term(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const BlockLabels>);           \
  template Tensor<T> sparse_entropy(Tape<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> sparse_prior_loss(Tape<T>&, const Tensor<T>&, const LossWeights&);                              \
  template Objective<T> total_objective(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                        const Tensor<T>&, const LossWeights&);

BIDET_INSTANTIATE_LOSS(float)
BIDET_INSTANTIATE_LOSS(double)

}  // namespace bidet
