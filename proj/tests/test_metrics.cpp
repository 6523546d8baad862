#include <cmath>
#include <random>
#include <vector>

#include "data/synth_data.hpp"
#include "doctest.h"
#include "eval/metrics.hpp"
#include "oracles.hpp"

using namespace bidet;

namespace {

Detection det(Box b, int cls, double score, std::size_t anchor = 0, std::size_t image = 0) {
  Detection d;
  d.box = b;
  d.class_id = cls;
  d.score = score;
  d.anchor_index = anchor;
  d.image_id = image;
  return d;
}

}  // namespace

TEST_CASE("iou basics") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(a, Box{1, 1, 1, 3}) == 0.0);
}

TEST_CASE("nms examples") {
  // IoU of these two is 0.8: 8x10 inside 10x10.
  const Box big{0, 0, 10, 10}, inner{0, 0, 8, 10};
  REQUIRE(iou(big, inner) == doctest::Approx(0.8));
  std::vector<Detection> two{det(inner, 1, 0.7, 0), det(big, 1, 0.9, 1)};
  auto kept = nms(two, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  std::vector<Detection> disjoint{det({0, 0, 2, 2}, 1, 0.9), det({5, 5, 7, 7}, 1, 0.8, 1)};
  CHECK(nms(disjoint, 0.5).size() == 2);

  std::vector<Detection> classes{det(big, 1, 0.9), det(big, 2, 0.8, 1)};
  CHECK(nms(classes, 0.5).size() == 2);

  // Equal scores: lower anchor index survives.
  std::vector<Detection> tie{det(big, 1, 0.5, 7), det(inner, 1, 0.5, 3)};
  auto t = nms(tie, 0.5);
  REQUIRE(t.size() == 1);
  CHECK(t[0].anchor_index == 3);
}

TEST_CASE("match_and_count examples") {
  const std::vector<std::vector<LabeledBox>> gt{{{{0, 0, 10, 10}, 1}, {{20, 20, 30, 30}, 2}}};
  std::vector<Detection> perfect{det({0, 0, 10, 10}, 1, 0.9), det({20, 20, 30, 30}, 2, 0.8, 1)};
  auto c = match_and_count(perfect, gt);
  CHECK(c.tp == 2);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);

  auto none = match_and_count(std::vector<Detection>{}, gt);
  CHECK(none.tp == 0);
  CHECK(none.fp == 0);
  CHECK(none.fn == 2);

  const std::vector<std::vector<LabeledBox>> one{{{{0, 0, 10, 10}, 1}}};
  std::vector<Detection> dup{det({0, 0, 10, 10}, 1, 0.9), det({0, 0, 9, 10}, 1, 0.8, 1)};
  auto d = match_and_count(dup, one);
  CHECK(d.tp == 1);
  CHECK(d.fp == 1);
  CHECK(d.fn == 0);

  // Scores at or below the threshold do not participate.
  auto low = match_and_count(perfect, gt, 0.5, 0.85);
  CHECK(low.tp == 1);
  CHECK(low.fn == 1);
}

TEST_CASE("average precision examples") {
  const std::vector<std::vector<LabeledBox>> one{{{{0, 0, 10, 10}, 1}}};
  std::vector<Detection> hit{det({0, 0, 10, 10}, 1, 0.9)};
  CHECK(average_precision(hit, one, 1).map == 1.0);
  std::vector<Detection> hit_fp{det({0, 0, 10, 10}, 1, 0.9), det({30, 30, 40, 40}, 1, 0.3, 1)};
  CHECK(average_precision(hit_fp, one, 1).map == 1.0);
  // FP first: precision 1/2 at recall 1.
  std::vector<Detection> fp_hit{det({0, 0, 10, 10}, 1, 0.3), det({30, 30, 40, 40}, 1, 0.9, 1)};
  CHECK(average_precision(fp_hit, one, 1).map == doctest::Approx(0.5));

  // Class 2 has no groundtruth: excluded from the mean.
  auto r = average_precision(hit, one, 2);
  CHECK(r.per_class[1] == -1.0);
  REQUIRE(r.excluded_classes.size() == 1);
  CHECK(r.excluded_classes[0] == 2);
  CHECK(r.map == 1.0);
}

TEST_CASE("eleven-point AP on a hand-computed curve") {
  // 2 gt; ranked TP, FP, TP: P = 1, 1/2, 2/3 at R = .5, .5, 1.
  // Interpolated: r <= .5 -> 1, r > .5 -> 2/3. 11-point: (6*1 + 5*2/3)/11.
  const std::vector<std::uint8_t> flags{1, 0, 1};
  CHECK(ap_from_flags(flags, 2, ApMode::eleven_point) == doctest::Approx((6.0 + 5.0 * 2.0 / 3.0) / 11.0));
  CHECK(ap_from_flags(flags, 2, ApMode::all_point) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
}

TEST_CASE("nms and AP agree with brute-force oracles on 500 micro-instances") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 500; ++t) {
    const auto m = oracle::random_micro_instance(rng);
    const auto mask = oracle::nms_keep_mask(m.dets, 0.45);
    REQUIRE(mask.size() == m.dets.size());
    const auto kept = nms(m.dets, 0.45);
    std::size_t expected = 0;
    for (bool b : mask) expected += b;
    REQUIRE(kept.size() == expected);
    for (const auto& k : kept) {
      bool present = false;
      for (std::size_t i = 0; i < m.dets.size(); ++i)
        if (mask[i] && m.dets[i].anchor_index == k.anchor_index) present = true;
      CHECK(present);
    }
    for (bool eleven : {false, true}) {
      const auto r = average_precision(m.dets, m.gt, m.num_classes, 0.5, eleven ? ApMode::eleven_point : ApMode::all_point);
      for (std::size_t c = 1; c <= m.num_classes; ++c) {
        const double want = oracle::class_ap(m.dets, m.gt, static_cast<int>(c), 0.5, eleven);
        CHECK(r.per_class[c - 1] == want);
      }
    }
    const auto counts = match_and_count(m.dets, m.gt, 0.5, 0.0);
    std::size_t gt_total = 0;
    for (const auto& g : m.gt) gt_total += g.size();
    CHECK(counts.tp + counts.fn == gt_total);
    CHECK(counts.tp + counts.fp == m.dets.size());
  }
}

TEST_CASE("complexity accounting") {
  DetectorConfig cfg;  // backbone.1 is a binarized 3x3 16->32 conv
  const auto bin = complexity_report(cfg);
  const auto real = complexity_report(cfg, true);
  const LayerComplexity* b1 = nullptr;
  const LayerComplexity* r1 = nullptr;
  for (const auto& l : bin.layers)
    if (l.name == "backbone.1") b1 = &l;
  for (const auto& l : real.layers)
    if (l.name == "backbone.1") r1 = &l;
  REQUIRE(b1);
  REQUIRE(r1);
  CHECK(b1->binarized);
  CHECK(b1->parameters == 3u * 3u * 16u * 32u);
  CHECK(b1->bytes == 576.0);
  CHECK(r1->bytes == 18432.0);
  CHECK(r1->bytes / b1->bytes == 32.0);
  CHECK(r1->flops / b1->flops == 64.0);

  double bytes = 0, flops = 0;
  for (const auto& l : bin.layers) {
    bytes += l.bytes;
    flops += l.flops;
  }
  CHECK(bytes == bin.total_bytes);
  CHECK(flops == bin.total_flops);

  // First layer, feature layer and heads stay real in both reports.
  for (std::size_t i = 0; i < bin.layers.size(); ++i) {
    CHECK(bin.layers[i].name == real.layers[i].name);
    if (!bin.layers[i].binarized) CHECK(bin.layers[i].bytes == real.layers[i].bytes);
  }
}

TEST_CASE("info_plane proxy is zero at p = 0.5 and deterministic") {
  DetectorConfig cfg;
  cfg.widths = {4, 8, 8, 8, 8};
  cfg.feature_channels = 8;
  auto model = DetectorModel<float>::init(cfg, 3);
  auto& feat = model.backbone.back();
  for (auto& w : feat.weight.data()) w = 0.0f;
  for (auto& b : feat.bias.data()) b = 0.0f;
  const auto scenes = generate_scenes(5, 6, SceneConfig{});
  const auto p = info_plane(model, scenes, 6);
  CHECK(p.point.ixf == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(p.images == 6);

  auto trained = DetectorModel<float>::init(cfg, 4);
  const auto a = info_plane(trained, scenes, 6);
  const auto b = info_plane(trained, scenes, 6);
  CHECK(a.point.ixf == b.point.ixf);
  CHECK(a.point.ify == b.point.ify);
  CHECK(a.point.ixf >= 0.0);
}

TEST_CASE("evaluate: score threshold 1 leaves every groundtruth unmatched") {
  const std::vector<std::vector<LabeledBox>> gt{{{{0, 0, 10, 10}, 1}}, {{{5, 5, 15, 15}, 2}}};
  std::vector<Detection> dets{det({0, 0, 10, 10}, 1, 1.0), det({5, 5, 15, 15}, 2, 0.99, 0, 1)};
  EvalOptions o;
  o.score_thresh = 1.0;
  const auto rep = evaluate(dets, gt, 2, o);
  CHECK(rep.counts.tp == 0);
  CHECK(rep.counts.fp == 0);
  CHECK(rep.counts.fn == 2);
  CHECK(rep.ap.map == 1.0);
}
