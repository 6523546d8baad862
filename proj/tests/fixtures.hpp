#pragma once

// Small models and objectives shared by unit and acceptance tests.

#include <random>
#include <span>
#include <vector>

#include "data/synth_data.hpp"
#include "detector/model.hpp"
#include "loss/ib_loss.hpp"
#include "tensor/grad_check.hpp"

namespace fixture {

using namespace bidet;

// 16x16 input, 2x2 grid, narrow layers: cheap enough for per-coordinate checks.
inline DetectorConfig toy_config() {
  DetectorConfig c;
  c.height = c.width = 16;
  c.grid = 2;
  c.widths = {3, 4, 4, 4, 4};
  c.feature_channels = 4;
  return c;
}

inline std::vector<Scene> toy_scenes(std::size_t n, std::uint64_t seed) {
  SceneConfig sc;
  sc.width = sc.height = 16;
  sc.grid = 2;
  sc.min_size = 4;
  sc.max_size = 7;
  sc.max_objects = 2;
  return generate_scenes(seed, n, sc);
}

// Full objective (all four terms) on a batch, with the Bernoulli draw frozen.
template <typename T>
Tensor<T> full_objective(Tape<T>& tape, DetectorModel<T>& model, const Tensor<T>& images,
                         std::span<const BlockLabels> labels, std::span<const double> uniforms, const LossWeights& w) {
  ForwardOptions<T> opts;
  opts.uniforms = uniforms;
  const HeadOutputs<T> h = forward(tape, model, images, opts);
  const Tensor<T> info = info_xf(tape, h.features);
  const Tensor<T> cls = class_term(tape, h.class_logits, labels);
  const Tensor<T> loc = loc_term(tape, h.loc_mean, h.loc_logvar, labels);
  const Tensor<T> sparse = sparse_prior_loss(tape, h.class_logits, w);
  return total_objective(tape, info, cls, loc, sparse, w).total;
}

struct ObjectiveCheck {
  // Head parameters under the hard forward with the Bernoulli draw fixed.
  GradCheckResult frozen;
  // Feature layer and heads with straight-through primitives relaxed, which
  // checks the gradient routed through the sampled feature map. Interior
  // layers are left out: their relaxed forward is piecewise linear
  // (hardtanh, ReLU) and central differences straddle the kinks.
  GradCheckResult relaxed;
};

// One random point: fresh model from `seed`, two toy images.
inline ObjectiveCheck check_full_objective(std::uint64_t seed, double eps = 1e-4) {
  const DetectorConfig cfg = toy_config();
  auto model = DetectorModel<double>::init(cfg, seed);
  // Scatter class logits so the sparse term has several candidates. Loc and
  // log-variance heads stay small: a large |f| drowns small gradients in
  // roundoff of the central difference.
  std::mt19937_64 rng(seed * 7919 + 1);
  std::normal_distribution<double> wide(0.0, 0.5), narrow(0.0, 0.05);
  for (auto& v : model.cls_head.weight.data()) v = wide(rng);
  for (auto* h : {&model.loc_head, &model.logvar_head})
    for (auto& v : h->weight.data()) v = narrow(rng);
  const auto scenes = toy_scenes(2, seed);
  const AnchorGrid anchors = build_anchors(cfg);
  std::vector<BlockLabels> labels;
  for (const auto& s : scenes) labels.push_back(assign_blocks(s.objects, anchors));
  const Tensor<double> images = scenes_to_tensor(scenes).cast<double>();
  const std::size_t feat = 2 * cfg.feature_channels * cfg.grid * cfg.grid;
  const std::vector<double> u = draw_uniforms(feat, rng);
  LossWeights w;
  w.tau = 0.2;

  ObjectiveCheck out;
  auto fn = [&](Tape<double>& tape) {
    return full_objective<double>(tape, model, images, std::span<const BlockLabels>(labels), u, w);
  };
  std::vector<Tensor<double>> heads;
  for (auto* h : {&model.cls_head, &model.loc_head, &model.logvar_head}) {
    heads.push_back(h->weight);
    heads.push_back(h->bias);
  }
  out.frozen = grad_check(fn, heads, eps, false);
  std::vector<Tensor<double>> top = heads;
  top.push_back(model.backbone.back().weight);
  top.push_back(model.backbone.back().bias);
  out.relaxed = grad_check(fn, top, eps, true);
  return out;
}

}  // namespace fixture
