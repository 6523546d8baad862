#include "binary/binary_ops.hpp"

#include <bit>
#include <cmath>

#include "error.hpp"

namespace bidet {

namespace {

constexpr std::size_t kWordBits = 64;

std::size_t words_for(std::size_t n) { return (n + kWordBits - 1) / kWordBits; }

std::uint64_t tail_mask(std::size_t n, std::size_t word) {
  const std::size_t used = n - word * kWordBits;
  return used >= kWordBits ? ~std::uint64_t{0} : ((std::uint64_t{1} << used) - 1);
}

}  // namespace

template <typename T>
Tensor<T> sign_ste(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const bool relaxed = tape.relaxed();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    if (relaxed)
      out[i] = v > T(1) ? T(1) : (v < T(-1) ? T(-1) : v);
    else
      out[i] = v >= T(0) ? T(1) : T(-1);
  }
  auto *xn = x.node(), *on = out.node();
  tape.record({x}, out, [xn, on] {
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      if (std::abs(xn->data[i]) <= T(1)) xn->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
std::vector<T> weight_scale_factors(const Tensor<T>& weight) {
  const std::size_t o = weight.dim(0), per = weight.numel() / o;
  std::vector<T> alpha(o);
  for (std::size_t k = 0; k < o; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += std::abs(static_cast<double>(weight[k * per + i]));
    alpha[k] = static_cast<T>(acc / static_cast<double>(per));
  }
  return alpha;
}

template <typename T>
FeatureDistribution<T> feature_distribution(Tape<T>& tape, const Tensor<T>& logits) {
  Tensor<T> prob(logits.shape());
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const T z = logits[i];
    if (z >= T(0)) {
      prob[i] = T(1) / (T(1) + std::exp(-z));
    } else {
      const T e = std::exp(z);
      prob[i] = e / (T(1) + e);
    }
  }
  auto *zn = logits.node(), *pn = prob.node();
  tape.record({logits}, prob, [zn, pn] {
    for (std::size_t i = 0; i < pn->grad.size(); ++i) zn->grad[i] += pn->grad[i] * pn->data[i] * (T(1) - pn->data[i]);
  });
  return {logits, prob};
}

std::vector<double> draw_uniforms(std::size_t count, std::mt19937_64& rng) {
  std::vector<double> u(count);
  for (auto& v : u) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return u;
}

template <typename T>
Tensor<T> bernoulli_st_sample(Tape<T>& tape, const Tensor<T>& prob, std::mt19937_64& rng) {
  const std::vector<double> u = draw_uniforms(prob.numel(), rng);
  return bernoulli_st_sample(tape, prob, std::span<const double>(u));
}

template <typename T>
Tensor<T> bernoulli_st_sample(Tape<T>& tape, const Tensor<T>& prob, std::span<const double> uniforms) {
  require(uniforms.size() == prob.numel(), ErrorCode::shape_mismatch, "bernoulli_st_sample: uniform count mismatch");
  Tensor<T> out(prob.shape());
  const bool relaxed = tape.relaxed();
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    const T p = prob[i];
    require(p >= T(0) && p <= T(1), ErrorCode::invalid_argument, "bernoulli_st_sample: probability outside [0,1]");
    out[i] = relaxed ? T(2) * p - T(1) : (uniforms[i] < static_cast<double>(p) ? T(1) : T(-1));
  }
  auto *pn = prob.node(), *on = out.node();
  tape.record({prob}, out, [pn, on] {
    for (std::size_t i = 0; i < on->grad.size(); ++i) pn->grad[i] += T(2) * on->grad[i];
  });
  return out;
}

template <typename T>
PackedBits bitpack(std::span<const T> values) {
  PackedBits out;
  out.size = values.size();
  out.words.assign(words_for(values.size()), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T v = values[i];
    require(v == T(1) || v == T(-1), ErrorCode::invalid_argument,
            "bitpack: element " + std::to_string(i) + " is not exactly +1 or -1");
    if (v == T(1)) out.words[i / kWordBits] |= std::uint64_t{1} << (i % kWordBits);
  }
  return out;
}

std::vector<float> unpack(const PackedBits& bits) {
  std::vector<float> out(bits.size);
  for (std::size_t i = 0; i < bits.size; ++i)
    out[i] = ((bits.words[i / kWordBits] >> (i % kWordBits)) & 1u) ? 1.0f : -1.0f;
  return out;
}

std::int64_t xnor_popcount_dot(const PackedBits& a, const PackedBits& b) {
  require(a.size == b.size, ErrorCode::shape_mismatch,
          "xnor_popcount_dot: length mismatch " + std::to_string(a.size) + " vs " + std::to_string(b.size));
  std::int64_t matches = 0;
  const std::size_t nw = words_for(a.size);
  for (std::size_t w = 0; w < nw; ++w) matches += std::popcount(~(a.words[w] ^ b.words[w]) & tail_mask(a.size, w));
  return 2 * matches - static_cast<std::int64_t>(a.size);
}

template <typename T>
PackedActivations pack_activations(std::span<const T> nchw, const Shape& shape, std::size_t pad) {
  require(shape.size() == 4 && shape_numel(shape) == nchw.size(), ErrorCode::shape_mismatch,
          "pack_activations: expected NCHW data matching " + shape_str(shape));
  PackedActivations out;
  out.n = shape[0];
  out.channels = shape[1];
  out.height = shape[2];
  out.width = shape[3];
  out.pad = pad;
  out.words_per_pixel = words_for(out.channels);
  const std::size_t ph = out.padded_height(), pw = out.padded_width(), wpp = out.words_per_pixel;
  out.bits.assign(out.n * ph * pw * wpp, 0);
  for (std::size_t b = 0; b < out.n; ++b)
    for (std::size_t c = 0; c < out.channels; ++c) {
      const T* plane = nchw.data() + (b * out.channels + c) * out.height * out.width;
      const std::uint64_t bit = std::uint64_t{1} << (c % kWordBits);
      const std::size_t word = c / kWordBits;
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
          if (plane[y * out.width + x] >= T(0)) out.bits[((b * ph + y + pad) * pw + x + pad) * wpp + word] |= bit;
    }
  return out;
}

template <typename T>
PackedWeights pack_weights(std::span<const T> oihw, const Shape& shape) {
  require(shape.size() == 4 && shape_numel(shape) == oihw.size(), ErrorCode::shape_mismatch,
          "pack_weights: expected OIHW data matching " + shape_str(shape));
  PackedWeights out;
  out.out_channels = shape[0];
  out.in_channels = shape[1];
  out.kh = shape[2];
  out.kw = shape[3];
  out.words_per_pixel = words_for(out.in_channels);
  const std::size_t wpp = out.words_per_pixel;
  out.bits.assign(out.out_channels * out.kh * out.kw * wpp, 0);
  for (std::size_t o = 0; o < out.out_channels; ++o)
    for (std::size_t c = 0; c < out.in_channels; ++c)
      for (std::size_t ky = 0; ky < out.kh; ++ky)
        for (std::size_t kx = 0; kx < out.kw; ++kx)
          if (oihw[((o * out.in_channels + c) * out.kh + ky) * out.kw + kx] >= T(0))
            out.bits[((o * out.kh + ky) * out.kw + kx) * wpp + c / kWordBits] |= std::uint64_t{1} << (c % kWordBits);
  return out;
}

IntTensor binary_conv2d_packed(const PackedActivations& input, const PackedWeights& weight, std::size_t stride) {
  require(input.channels == weight.in_channels, ErrorCode::shape_mismatch,
          "binary_conv2d: input has " + std::to_string(input.channels) + " channels but weight expects " +
              std::to_string(weight.in_channels));
  require(stride > 0, ErrorCode::invalid_argument, "binary_conv2d: stride must be positive");
  const std::size_t ph = input.padded_height(), pw = input.padded_width();
  require(ph >= weight.kh && pw >= weight.kw, ErrorCode::shape_mismatch, "binary_conv2d: kernel larger than padded input");
  const std::size_t oh = (ph - weight.kh) / stride + 1, ow = (pw - weight.kw) / stride + 1;
  const std::size_t wpp = input.words_per_pixel;

  // Unused tail bits are zero on both sides, so counting mismatches needs no mask.
  const std::int32_t taps = static_cast<std::int32_t>(input.channels * weight.kh * weight.kw);

  IntTensor out;
  out.shape = {input.n, weight.out_channels, oh, ow};
  out.data.assign(shape_numel(out.shape), 0);
  for (std::size_t b = 0; b < input.n; ++b)
    for (std::size_t o = 0; o < weight.out_channels; ++o) {
      const std::uint64_t* wk = weight.bits.data() + o * weight.kh * weight.kw * wpp;
      std::int32_t* dst = out.data.data() + (b * weight.out_channels + o) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::int32_t mismatches = 0;
          for (std::size_t ky = 0; ky < weight.kh; ++ky) {
            const std::uint64_t* row = input.bits.data() + ((b * ph + oy * stride + ky) * pw + ox * stride) * wpp;
            const std::uint64_t* wrow = wk + ky * weight.kw * wpp;
            for (std::size_t i = 0; i < weight.kw * wpp; ++i) mismatches += std::popcount(row[i] ^ wrow[i]);
          }
          dst[oy * ow + ox] = taps - 2 * mismatches;
        }
    }
  return out;
}

IntTensor binary_conv2d_bitpacked(const PackedBits& input, const Shape& input_shape, const PackedBits& weight,
                                  const Shape& weight_shape, std::size_t stride, std::size_t pad) {
  require(input_shape.size() == 4 && weight_shape.size() == 4, ErrorCode::shape_mismatch,
          "binary_conv2d_bitpacked: expected NCHW input and OIHW weight shapes");
  require(input.size == shape_numel(input_shape) && weight.size == shape_numel(weight_shape), ErrorCode::shape_mismatch,
          "binary_conv2d_bitpacked: packed lengths do not match shapes");
  require(input_shape[1] == weight_shape[1], ErrorCode::shape_mismatch,
          "binary_conv2d_bitpacked: input has " + std::to_string(input_shape[1]) + " channels but weight expects " +
              std::to_string(weight_shape[1]));
  const std::vector<float> in = unpack(input);
  const std::vector<float> wt = unpack(weight);
  return binary_conv2d_packed(pack_activations(std::span<const float>(in), input_shape, pad),
                              pack_weights(std::span<const float>(wt), weight_shape), stride);
}

#define BIDET_INSTANTIATE_BINARY(T)                                                                      \
  template Tensor<T> sign_ste(Tape<T>&, const Tensor<T>&);                                               \
  template std::vector<T> weight_scale_factors(const Tensor<T>&);                                        \
  template FeatureDistribution<T> feature_distribution(Tape<T>&, const Tensor<T>&);                      \
  template Tensor<T> bernoulli_st_sample(Tape<T>&, const Tensor<T>&, std::mt19937_64&);                  \
  template Tensor<T> bernoulli_st_sample(Tape<T>&, const Tensor<T>&, std::span<const double>);           \
  template PackedBits bitpack<T>(std::span<const T>);                                                    \
  template PackedActivations pack_activations<T>(std::span<const T>, const Shape&, std::size_t);         \
  template PackedWeights pack_weights<T>(std::span<const T>, const Shape&);

BIDET_INSTANTIATE_BINARY(float)
BIDET_INSTANTIATE_BINARY(double)

}  // namespace bidet
