#include <cmath>
#include <random>
#include <vector>

#include "binary/binary_ops.hpp"
#include "doctest.h"
#include "error.hpp"
#include "tensor/adam.hpp"
#include "tensor/grad_check.hpp"
#include "tensor/ops.hpp"

using namespace bidet;

namespace {

std::vector<float> random_pm1(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  std::vector<float> v(n);
  for (auto& x : v) x = b(rng) ? 1.0f : -1.0f;
  return v;
}

}  // namespace

TEST_CASE("sign_ste forward and clipped backward") {
  Tensor<double> x(Shape{4}, std::vector<double>{0.3, -0.2, 1.5, 0.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  auto s = sign_ste(tape, x);
  CHECK(s[0] == 1.0);
  CHECK(s[1] == -1.0);
  CHECK(s[2] == 1.0);
  CHECK(s[3] == 1.0);
  auto g = tape.backward(ops::sum(tape, ops::scale(tape, s, 2.0))).get(x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 2.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 2.0);
}

TEST_CASE("sign_ste output is always +-1 and gradient vanishes outside [-1, 1]") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> v(500);
  for (auto& e : v) e = n(rng);
  Tensor<double> x(Shape{500}, v);
  x.set_requires_grad(true);
  Tape<double> tape;
  auto s = sign_ste(tape, x);
  auto g = tape.backward(ops::sum(tape, s)).get(x);
  for (std::size_t i = 0; i < 500; ++i) {
    CHECK((s[i] == 1.0 || s[i] == -1.0));
    if (std::abs(v[i]) > 1.0) CHECK(g[i] == 0.0);
    else CHECK(g[i] == 1.0);
  }
}

TEST_CASE("binarized layer trained through sign_ste fits a 2-class toy problem") {
  // Teacher: label = sign(w* . x) with w*, x in {-1,+1}^9; student binarizes its weights.
  const std::size_t d = 9, samples = 200;
  std::mt19937_64 rng(42);
  const auto teacher = random_pm1(d, rng);
  std::vector<std::vector<float>> xs;
  std::vector<float> ys;
  for (std::size_t i = 0; i < samples; ++i) {
    xs.push_back(random_pm1(d, rng));
    float dot = 0;
    for (std::size_t k = 0; k < d; ++k) dot += teacher[k] * xs.back()[k];
    ys.push_back(dot > 0 ? 1.0f : 0.0f);
  }
  std::normal_distribution<float> init(0.0f, 0.1f);
  std::vector<float> w0(d);
  for (auto& w : w0) w = init(rng);
  std::vector<Tensor<float>> params{Tensor<float>(Shape{d}, w0)};
  params[0].set_requires_grad(true);
  auto state = AdamState::init(params);
  AdamConfig cfg;
  cfg.lr = 0.01f;

  auto errors = [&]() {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < samples; ++i) {
      float dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += (params[0][k] >= 0 ? 1.0f : -1.0f) * xs[i][k];
      wrong += (dot > 0) != (ys[i] > 0.5f);
    }
    return static_cast<double>(wrong) / samples;
  };

  for (int epoch = 0; epoch < 30; ++epoch) {
    Tape<float> tape;
    std::vector<Tensor<float>> terms;
    for (std::size_t i = 0; i < samples; ++i) {
      auto wb = sign_ste(tape, params[0]);
      auto dot = ops::sum(tape, ops::mul(tape, wb, Tensor<float>(Shape{d}, xs[i])));
      auto p = ops::sigmoid(tape, ops::scale(tape, dot, 0.5f));
      auto diff = ops::add(tape, p, Tensor<float>::scalar(-ys[i]));
      terms.push_back(ops::square(tape, diff));
    }
    std::vector<float> co(samples, 1.0f / samples);
    auto loss = ops::linear_combination(tape, terms, std::span<const float>(co));
    auto g = tape.backward(loss).get(params[0]);
    adam_step(params, {g}, state, cfg);
  }
  CHECK(errors() < 0.05);
}

TEST_CASE("bernoulli_st_sample degenerate and empirical mean") {
  Tape<double> tape(false);
  std::mt19937_64 rng(2);
  auto ones = bernoulli_st_sample(tape, Tensor<double>(Shape{50}, 1.0), rng);
  auto negs = bernoulli_st_sample(tape, Tensor<double>(Shape{50}, 0.0), rng);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(ones[i] == 1.0);
    CHECK(negs[i] == -1.0);
  }
  auto half = bernoulli_st_sample(tape, Tensor<double>(Shape{100000}, 0.5), rng);
  double mean = 0;
  for (std::size_t i = 0; i < half.numel(); ++i) {
    REQUIRE((half[i] == 1.0 || half[i] == -1.0));
    mean += half[i];
  }
  mean /= half.numel();
  CHECK(std::abs(mean) < 0.02);

  auto p3 = bernoulli_st_sample(tape, Tensor<double>(Shape{100000}, 0.8), rng);
  double m3 = 0;
  for (std::size_t i = 0; i < p3.numel(); ++i) m3 += p3[i];
  CHECK(std::abs(m3 / p3.numel() - 0.6) < 0.02);
}

TEST_CASE("bernoulli_st_sample backward gives 2g") {
  Tensor<double> p(Shape{6}, std::vector<double>{0.1, 0.5, 0.9, 0.0, 1.0, 0.3});
  p.set_requires_grad(true);
  Tensor<double> up(Shape{6}, std::vector<double>{1, -2, 0.5, 3, -1, 4});
  Tape<double> tape;
  std::mt19937_64 rng(3);
  auto s = bernoulli_st_sample(tape, p, rng);
  auto g = tape.backward(ops::sum(tape, ops::mul(tape, s, up))).get(p);
  for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(2.0 * up[i]));
}

TEST_CASE("bernoulli_st_sample rejects probabilities outside [0,1]") {
  Tape<double> tape(false);
  std::mt19937_64 rng(3);
  CHECK_THROWS_AS(bernoulli_st_sample(tape, Tensor<double>(Shape{2}, 1.5), rng), Error);
}

TEST_CASE("bitpack layout and round trip") {
  const std::vector<float> v{1, -1, 1};
  auto b = bitpack<float>(v);
  CHECK(b.size == 3);
  REQUIRE(b.words.size() == 1);
  CHECK(b.words[0] == 0b101u);

  const std::vector<float> neg(64, -1.0f);
  auto z = bitpack<float>(neg);
  REQUIRE(z.words.size() == 1);
  CHECK(z.words[0] == 0u);

  std::mt19937_64 rng(4);
  auto r = random_pm1(1000, rng);
  auto packed = bitpack<float>(r);
  CHECK(packed.words.size() == 16);
  CHECK((packed.words.back() >> (1000 - 960)) == 0u);
  CHECK(unpack(packed) == r);

  const std::vector<float> bad{1, 0.5f};
  CHECK_THROWS_AS(bitpack<float>(bad), Error);
}

TEST_CASE("xnor_popcount_dot") {
  const std::vector<float> a{1, -1, 1}, b{1, 1, -1};
  CHECK(xnor_popcount_dot(bitpack<float>(a), bitpack<float>(b)) == -1);
  CHECK(xnor_popcount_dot(bitpack<float>(a), bitpack<float>(a)) == 3);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> len(1, 500);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = len(rng);
    auto x = random_pm1(n, rng), y = random_pm1(n, rng);
    double dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>(x[i]) * y[i];
    REQUIRE(xnor_popcount_dot(bitpack<float>(x), bitpack<float>(y)) == static_cast<std::int64_t>(dot));
  }
  const std::vector<float> shorter{1, 1};
  CHECK_THROWS_AS(xnor_popcount_dot(bitpack<float>(a), bitpack<float>(shorter)), Error);
}

TEST_CASE("binary conv trivial kernels") {
  std::mt19937_64 rng(6);
  auto in = random_pm1(2 * 1 * 5 * 4, rng);
  const Shape ishape{2, 1, 5, 4};
  auto out = binary_conv2d_bitpacked(bitpack<float>(in), ishape, bitpack<float>(std::vector<float>{1}), Shape{1, 1, 1, 1}, 1, 0);
  REQUIRE(out.shape == ishape);
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(out.data[i] == static_cast<int>(in[i]));

  const std::vector<float> ones_in(1 * 1 * 4 * 4, 1.0f), ones_w(9, 1.0f);
  auto nine = binary_conv2d_bitpacked(bitpack<float>(ones_in), Shape{1, 1, 4, 4}, bitpack<float>(ones_w), Shape{1, 1, 3, 3}, 1, 0);
  REQUIRE(nine.data.size() == 4);
  for (int v : nine.data) CHECK(v == 9);
}

TEST_CASE("binary conv equals float conv on +-1 tensors across 200 configurations") {
  std::mt19937_64 rng(7);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  Tape<double> tape(false);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = pick(1, 2), c = pick(1, 130), o = pick(1, 6), k = pick(1, 3);
    const std::size_t stride = pick(1, 3), pad = pick(0, 2);
    const std::size_t h = pick(k, 9), w = pick(k, 9);
    const Shape is{n, c, h, w}, ws{o, c, k, k};
    auto x = random_pm1(shape_numel(is), rng), wt = random_pm1(shape_numel(ws), rng);
    auto out = binary_conv2d_bitpacked(bitpack<float>(x), is, bitpack<float>(wt), ws, stride, pad);
    auto ref = ops::conv2d(tape, Tensor<float>(is, x).cast<double>(), Tensor<float>(ws, wt).cast<double>(),
                           {stride, pad, -1.0});
    REQUIRE(out.shape == ref.shape());
    bool equal = true;
    for (std::size_t i = 0; i < out.data.size(); ++i) equal = equal && static_cast<double>(out.data[i]) == ref[i];
    REQUIRE_MESSAGE(equal, "config " << t << " c=" << c << " k=" << k << " stride=" << stride << " pad=" << pad);
  }
}

TEST_CASE("binary conv rejects shape mismatch") {
  const std::vector<float> x(2 * 3 * 3, 1.0f), w(3 * 3 * 3, 1.0f);
  CHECK_THROWS_AS(binary_conv2d_bitpacked(bitpack<float>(x), Shape{1, 2, 3, 3}, bitpack<float>(w), Shape{1, 3, 3, 3}, 1, 0),
                  Error);
}

TEST_CASE("relaxed straight-through primitives pass grad_check at 10 random points") {
  // Relaxed forwards are the functions the backward rules differentiate:
  // hardtanh for sign, 2p-1 for the Bernoulli sample.
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> inside(-0.95, 0.95), prob(0.02, 0.98), coef(-1.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(12), p(12), c(12);
    for (auto& v : x) v = inside(rng);
    for (auto& v : p) v = prob(rng);
    for (auto& v : c) v = coef(rng);
    const Tensor<double> weights(Shape{12}, c);
    const std::vector<double> u(12, 0.5);
    auto r1 = grad_check(
        [&](Tape<double>& tp) { return ops::sum(tp, ops::mul(tp, sign_ste(tp, Tensor<double>(Shape{12}, x)), weights)); },
        {}, 1e-4, true);
    Tensor<double> xt(Shape{12}, x), pt(Shape{12}, p);
    auto r2 = grad_check(
        [&](Tape<double>& tp) { return ops::sum(tp, ops::square(tp, ops::mul(tp, sign_ste(tp, xt), weights))); }, {xt},
        1e-4, true);
    auto r3 = grad_check(
        [&](Tape<double>& tp) {
          return ops::sum(tp, ops::mul(tp, bernoulli_st_sample(tp, pt, std::span<const double>(u)), weights));
        },
        {pt}, 1e-4, true);
    CHECK(r1.coordinates == 0);
    CHECK(r2.ok(1e-4));
    CHECK(r3.ok(1e-4));
  }
}
