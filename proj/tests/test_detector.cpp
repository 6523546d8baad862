#include <cmath>
#include <random>
#include <vector>

#include "data/synth_data.hpp"
#include "detector/anchors.hpp"
#include "detector/model.hpp"
#include "doctest.h"
#include "error.hpp"
#include "fixtures.hpp"

using namespace bidet;

TEST_CASE("anchor grid geometry") {
  DetectorConfig cfg;
  const auto g = build_anchors(cfg);
  CHECK(g.block_size == 8.0);
  CHECK(g.anchors.size() == 108);
  CHECK(g.at(0, 0).cx == 4.0);
  CHECK(g.at(0, 0).cy == 4.0);
  for (std::size_t b = 0; b < g.blocks(); ++b)
    for (std::size_t a = 0; a < g.per_block; ++a) {
      const auto& an = g.at(b, a);
      const double gx = static_cast<double>(b % g.grid), gy = static_cast<double>(b / g.grid);
      CHECK(an.cx > gx * 8.0);
      CHECK(an.cx < (gx + 1) * 8.0);
      CHECK(an.cy > gy * 8.0);
      CHECK(an.cy < (gy + 1) * 8.0);
      CHECK(an.h * an.w == doctest::Approx(12.0 * 12.0));
    }
  // square, tall, wide
  CHECK(g.at(0, 0).h == g.at(0, 0).w);
  CHECK(g.at(0, 1).h > g.at(0, 1).w);
  CHECK(g.at(0, 2).h < g.at(0, 2).w);

  DetectorConfig bad = cfg;
  bad.height = bad.width = 50;
  CHECK_THROWS_AS(build_anchors(bad), Error);
}

TEST_CASE("assign_blocks") {
  const auto g = build_anchors(DetectorConfig{});
  SUBCASE("empty image") {
    const auto l = assign_blocks(std::vector<LabeledBox>{}, g);
    CHECK(l.positives() == 0);
    for (int c : l.cls) CHECK(c == 0);
  }
  SUBCASE("one object in block (gx 2, gy 3)") {
    const Box b{17, 25, 29, 37};  // center (23, 31)
    const auto l = assign_blocks(std::vector<LabeledBox>{{b, 2}}, g);
    CHECK(l.positives() == 1);
    const std::size_t blk = 3 * 6 + 2;
    CHECK(l.mask[blk] == 1);
    CHECK(l.cls[blk] == 2);
    for (std::size_t i = 0; i < l.mask.size(); ++i)
      if (i != blk) CHECK((l.mask[i] == 0 && l.cls[i] == 0));
  }
  SUBCASE("groundtruth equal to an anchor gives zero targets") {
    const Box b = g.at(14, 1).box();
    const auto l = assign_blocks(std::vector<LabeledBox>{{b, 1}}, g);
    CHECK(l.anchor[14] == 1);
    for (double t : l.target[14]) CHECK(std::abs(t) < 1e-12);
  }
  SUBCASE("two centers in one block: larger area wins") {
    set_incident_logging(false);
    const auto l = assign_blocks(std::vector<LabeledBox>{{{1, 1, 7, 7}, 1}, {{0, 0, 8, 8}, 3}}, g);
    set_incident_logging(true);
    CHECK(l.positives() == 1);
    CHECK(l.cls[0] == 3);
    CHECK(l.collisions == 1);
  }
}

TEST_CASE("decode_offsets") {
  AnchorGrid g;
  g.grid = 1;
  g.per_block = 1;
  g.block_size = 48;
  g.image_width = g.image_height = 48;
  g.anchors = {Anchor{10, 10, 4, 4}};
  const Box id = decode_offsets(g, {0, 0, 0, 0}, 0, 0);
  CHECK(id == g.anchors[0].box());
  const Box b = decode_offsets(g, {1, -2, std::log(2.0), 0}, 0, 0);
  CHECK(b.cx() == doctest::Approx(11));
  CHECK(b.cy() == doctest::Approx(8));
  CHECK(b.height() == doctest::Approx(8));
  CHECK(b.width() == doctest::Approx(4));
  // clipping
  const Box c = decode_offsets(g, {-20, 0, 0, 0}, 0, 0);
  CHECK(c.x_min == 0.0);
}

TEST_CASE("assign then decode reproduces the groundtruth box") {
  const auto g = build_anchors(DetectorConfig{});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> pos(2.0, 46.0), size(4.0, 20.0);
  for (int t = 0; t < 200; ++t) {
    const double cx = pos(rng), cy = pos(rng), w = size(rng), h = size(rng);
    const Box b{std::max(0.0, cx - w / 2), std::max(0.0, cy - h / 2), std::min(48.0, cx + w / 2), std::min(48.0, cy + h / 2)};
    const auto l = assign_blocks(std::vector<LabeledBox>{{b, 1}}, g);
    const std::size_t blk = g.block_of(b.cx(), b.cy());
    REQUIRE(l.mask[blk] == 1);
    const Box d = decode_offsets(g, l.target[blk], blk, static_cast<std::size_t>(l.anchor[blk]));
    CHECK(std::abs(d.x_min - b.x_min) < 1e-5);
    CHECK(std::abs(d.y_min - b.y_min) < 1e-5);
    CHECK(std::abs(d.x_max - b.x_max) < 1e-5);
    CHECK(std::abs(d.y_max - b.y_max) < 1e-5);
  }
}

TEST_CASE("forward_train shape contract") {
  DetectorConfig cfg;
  auto model = DetectorModel<float>::init(cfg, 1);
  const auto scenes = generate_scenes(3, 2, SceneConfig{});
  std::mt19937_64 rng(1);
  Tape<float> tape;
  const auto h = forward_train(tape, model, scenes_to_tensor(scenes), rng);
  CHECK(h.class_logits.shape() == Shape{2, 36, 3, 4});
  CHECK(h.loc_mean.shape() == Shape{2, 36, 3, 4});
  CHECK(h.loc_logvar.shape() == Shape{2, 36, 3, 4});
  CHECK(h.features.prob.shape() == Shape{2, cfg.feature_channels, 6, 6});
  CHECK(h.sample.shape() == h.features.prob.shape());
  for (float v : h.sample.data()) CHECK((v == 1.0f || v == -1.0f));

  CHECK_THROWS_AS(forward_train(tape, model, Tensor<float>(Shape{1, 3, 32, 32}), rng), Error);
}

TEST_CASE("first and last layers and heads stay real") {
  DetectorConfig cfg;
  auto model = DetectorModel<float>::init(cfg, 1);
  CHECK_FALSE(model.backbone.front().binarized);
  CHECK_FALSE(model.backbone.back().binarized);
  for (std::size_t i = 1; i + 1 < model.backbone.size(); ++i) CHECK(model.backbone[i].binarized);
  CHECK_FALSE(model.cls_head.binarized);
  CHECK_FALSE(model.loc_head.binarized);
  CHECK_FALSE(model.logvar_head.binarized);
}

TEST_CASE("full objective passes grad_check (toy 16x16 detector)") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = fixture::check_full_objective(seed);
    CHECK_MESSAGE(r.frozen.ok(1e-4), "seed " << seed << " err " << r.frozen.max_rel_error << " at " << r.frozen.worst_index);
    CHECK_MESSAGE(r.relaxed.ok(1e-4), "seed " << seed << " err " << r.relaxed.max_rel_error << " at " << r.relaxed.worst_index);
  }
}

TEST_CASE("inference: uniform scores with zeroed heads, boxes in bounds, float == bitpacked") {
  DetectorConfig cfg;
  const auto scenes = generate_scenes(11, 8, SceneConfig{});
  const auto images = scenes_to_tensor(scenes);

  // Fresh model: zero biases and small head weights. Individual rows wander
  // (logit spread ~0.24) but every class averages to 1/(n+1).
  const auto fresh = InferenceEngine(DetectorModel<float>::init(cfg, 2), false).run(images);
  const auto& z = fresh.class_logits;
  const std::size_t rows = z.numel() / 4;
  double mean_p[4] = {0, 0, 0, 0};
  for (std::size_t r = 0; r < rows; ++r) {
    double e[4], sum = 0;
    for (int k = 0; k < 4; ++k) sum += e[k] = std::exp(static_cast<double>(z[r * 4 + k]));
    for (int k = 0; k < 4; ++k) mean_p[k] += e[k] / sum / static_cast<double>(rows);
  }
  for (double p : mean_p) CHECK(std::abs(p - 0.25) < 0.02);

  auto flat = DetectorModel<float>::init(cfg, 2);
  for (auto& v : flat.cls_head.weight.data()) v = 0.0f;
  const auto heads = InferenceEngine(flat, false).run(images);
  for (float z : heads.class_logits.data()) CHECK(z == 0.0f);
  const auto dets0 = forward_infer(flat, images, false);
  for (const auto& per : dets0)
    for (const auto& d : per) CHECK(d.score == doctest::Approx(1.0 / 4));

  // Push foreground so detections are emitted.
  auto model = DetectorModel<float>::init(cfg, 3);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 0.3f);
  for (auto* h : {&model.cls_head, &model.loc_head})
    for (auto& v : h->weight.data()) v = n(rng);
  const auto a = forward_infer(model, images, false);
  const auto b = forward_infer(model, images, true);
  REQUIRE(a.size() == b.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      const auto& x = a[i][k];
      const auto& y = b[i][k];
      CHECK(x.class_id == y.class_id);
      CHECK(x.anchor_index == y.anchor_index);
      CHECK(std::abs(x.score - y.score) < 1e-5);
      CHECK(std::abs(x.box.x_min - y.box.x_min) < 1e-4);
      CHECK(std::abs(x.box.y_max - y.box.y_max) < 1e-4);
      CHECK(x.box.x_min >= 0.0);
      CHECK(x.box.y_min >= 0.0);
      CHECK(x.box.x_max <= 48.0);
      CHECK(x.box.y_max <= 48.0);
      CHECK(x.box.x_min < x.box.x_max);
      CHECK(x.box.y_min < x.box.y_max);
      CHECK(x.class_id >= 1);
    }
    total += a[i].size();
  }
  CHECK(total > 0);
}

TEST_CASE("shortcut flag adds only the projection layers") {
  DetectorConfig plain;
  DetectorConfig sc = plain;
  sc.shortcut = true;
  const auto m0 = DetectorModel<float>::init(plain, 1);
  const auto m1 = DetectorModel<float>::init(sc, 1);
  std::size_t proj = 0;
  for (const auto& l : m1.backbone)
    if (l.projection.defined()) proj += l.projection.numel();
  CHECK(proj > 0);
  CHECK(m1.parameter_count() == m0.parameter_count() + proj);

  auto run = DetectorModel<float>::init(sc, 1);
  std::mt19937_64 rng(1);
  Tape<float> tape(false);
  const auto h = forward_train(tape, run, scenes_to_tensor(generate_scenes(1, 2, SceneConfig{})), rng);
  CHECK(h.class_logits.shape() == Shape{2, 36, 3, 4});
}

TEST_CASE("model cast and clone are independent copies") {
  auto m = DetectorModel<float>::init(DetectorConfig{}, 5);
  auto c = m.clone();
  c.cls_head.bias[0] = 42.0f;
  CHECK(m.cls_head.bias[0] == 0.0f);
  auto d = m.cast<double>();
  CHECK(d.parameter_count() == m.parameter_count());
}
