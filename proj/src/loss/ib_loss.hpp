#pragma once

#include <span>
#include <vector>

#include "binary/binary_ops.hpp"
#include "detector/anchors.hpp"
#include "tensor/tensor.hpp"

namespace bidet {

struct LossWeights {
  double beta = 10.0;
  double gamma = 0.2;
  // Confidence above which a block/anchor counts as a predicted foreground object.
  double tau = 0.3;
  // 1 for the full objective, 0 to ablate the compression term.
  double info_weight = 1.0;

  void validate() const;
};

// All terms in nats. total = info_weight·info_xf − β·(class_term + loc_term) + γ·sparse_term.
struct LossBreakdown {
  double info_xf = 0;
  double class_term = 0;
  double loc_term = 0;
  double sparse_term = 0;
  double total = 0;

  bool finite() const;
};

// log σ² floor, σ >= 1e-3.
inline constexpr double kMinLogVariance = -13.815510557964274;

// Mean over feature elements (batch included) of KL(Bernoulli(p) || Bernoulli(1/2)),
// so the value lies in [0, ln 2]. 0·ln 0 = 0.
template <typename T>
Tensor<T> info_xf(Tape<T>& tape, const Tensor<T>& prob);
// Same quantity from the logits (stable for saturated probabilities).
template <typename T>
Tensor<T> info_xf_from_logits(Tape<T>& tape, const Tensor<T>& logits);
template <typename T>
Tensor<T> info_xf(Tape<T>& tape, const FeatureDistribution<T>& dist);

// Mean over blocks of ln softmax(K_i)[c_i]. A positive block reads its matched
// anchor's row; a background block contributes the mean over its anchors.
template <typename T>
Tensor<T> class_term(Tape<T>& tape, const Tensor<T>& class_logits, std::span<const BlockLabels> labels);

// Diagonal Gaussian log-density of the groundtruth offsets under
// (μ, exp(logvar)), summed over positive blocks and divided by the total block
// count like class_term; 0 without positives.
template <typename T>
Tensor<T> loc_term(Tape<T>& tape, const Tensor<T>& loc_mean, const Tensor<T>& loc_logvar,
                   std::span<const BlockLabels> labels);

// −(1/m) Σ s_i ln s_i over a vector s (m = its length).
template <typename T>
Tensor<T> sparse_entropy(Tape<T>& tape, const Tensor<T>& s);

// Per image: confidences c = max foreground softmax probability of every
// block/anchor, the m entries above τ are normalized to s and scored with
// sparse_entropy (0 when m <= 1). Averaged over the batch.
template <typename T>
Tensor<T> sparse_prior_loss(Tape<T>& tape, const Tensor<T>& class_logits, const LossWeights& weights);

template <typename T>
struct Objective {
  Tensor<T> total;
  LossBreakdown parts;
};

template <typename T>
Objective<T> total_objective(Tape<T>& tape, const Tensor<T>& info, const Tensor<T>& cls, const Tensor<T>& loc,
                             const Tensor<T>& sparse, const LossWeights& weights);

// Parameter-independent prior log-densities of the groundtruth labels: class
// prior (uniform over n+1 for positive blocks, certain background otherwise),
// averaged over blocks; standard-normal offset prior over positives, also
// divided by the block count.
double class_prior_log_density(std::span<const BlockLabels> labels, std::size_t num_classes);
double loc_prior_log_density(std::span<const BlockLabels> labels);

}  // namespace bidet
