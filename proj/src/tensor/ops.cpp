#include "tensor/ops.hpp"

#include <cmath>

#include "error.hpp"

namespace bidet::ops {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& a, T (*f)(T), T (*df)(T x, T y)) {
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  auto* an = a.node();
  auto* on = out.node();
  tape.record({a}, out, [an, on, df] {
    for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i] * df(an->data[i], on->data[i]);
  });
  return out;
}

// C[R,P] += A[O,R]^T * B[O,P]
template <typename T>
void gemm_at_b(std::size_t o, std::size_t r, std::size_t p, const T* a, const T* b, T* c) {
  std::size_t oi = 0;
  for (; oi + 4 <= o; oi += 4) {
    const T *b0 = b + oi * p, *b1 = b0 + p, *b2 = b1 + p, *b3 = b2 + p;
    for (std::size_t ri = 0; ri < r; ++ri) {
      const T a0 = a[oi * r + ri], a1 = a[(oi + 1) * r + ri], a2 = a[(oi + 2) * r + ri], a3 = a[(oi + 3) * r + ri];
      T* crow = c + ri * p;
      for (std::size_t pi = 0; pi < p; ++pi) crow[pi] += a0 * b0[pi] + a1 * b1[pi] + a2 * b2[pi] + a3 * b3[pi];
    }
  }
  for (; oi < o; ++oi) {
    const T* brow = b + oi * p;
    for (std::size_t ri = 0; ri < r; ++ri) {
      const T av = a[oi * r + ri];
      T* crow = c + ri * p;
      for (std::size_t pi = 0; pi < p; ++pi) crow[pi] += av * brow[pi];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename T>
void col2im_acc(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* image) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        const T* src = cols + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            image[(c * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
}

}  // namespace

namespace kernels {

template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    std::size_t kk = 0;
    // four rows of B per pass over the output row
    for (; kk + 4 <= k; kk += 4) {
      const T a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
      const T *b0 = b + kk * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T pad_value, std::size_t oh, std::size_t ow, T* cols) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        T* dst = cols + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          const bool row_in = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool in = row_in && ix >= 0 && ix < static_cast<std::ptrdiff_t>(w);
            dst[oy * ow + ox] = in ? image[(c * h + iy) * w + ix] : pad_value;
          }
        }
      }
}

template void gemm_acc<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_acc<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void im2col<float>(const float*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,
                            std::size_t, float, std::size_t, std::size_t, float*);
template void im2col<double>(const double*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,
                             std::size_t, std::size_t, double, std::size_t, std::size_t, double*);

}  // namespace kernels

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  tape.record({a, b}, out, [an, bn, on] {
    if (an->requires_grad)
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  tape.record({a, b}, out, [an, bn, on] {
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += on->grad[i] * bn->data[i];
      if (bn->requires_grad) bn->grad[i] += on->grad[i] * an->data[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  auto *an = a.node(), *on = out.node();
  tape.record({a}, out, [an, on, factor] {
    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& a) {
  return unary<T>(
      tape, a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return unary<T>(
      tape, a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  return unary<T>(
      tape, a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  auto *an = a.node(), *on = out.node();
  tape.record({a}, out, [an, on] {
    for (auto& g : an->grad) g += on->grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> linear_combination(Tape<T>& tape, const std::vector<Tensor<T>>& terms, std::span<const T> coeffs) {
  require(terms.size() == coeffs.size(), ErrorCode::invalid_argument, "linear_combination: term/coefficient count mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].numel() == 1, ErrorCode::shape_mismatch, "linear_combination: terms must be scalars");
    acc += coeffs[i] * terms[i].item();
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  std::vector<TensorNode<T>*> nodes;
  for (const auto& t : terms) nodes.push_back(t.node());
  std::vector<T> c(coeffs.begin(), coeffs.end());
  auto* on = out.node();
  tape.record(terms, out, [nodes, c, on] {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i]->requires_grad) nodes[i]->grad[0] += c[i] * on->grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Conv2dParams& params) {
  require(input.rank() == 4 && weight.rank() == 4, ErrorCode::shape_mismatch,
          "conv2d: expected NCHW input and OIHW weight, got " + shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  require(params.stride > 0, ErrorCode::invalid_argument, "conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == c, ErrorCode::shape_mismatch,
          "conv2d: input has " + std::to_string(c) + " channels but weight expects " + std::to_string(weight.dim(1)));
  require(h + 2 * params.pad >= kh && w + 2 * params.pad >= kw, ErrorCode::shape_mismatch,
          "conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(input.shape()));
  const std::size_t oh = (h + 2 * params.pad - kh) / params.stride + 1;
  const std::size_t ow = (w + 2 * params.pad - kw) / params.stride + 1;
  const std::size_t r = c * kh * kw, p = oh * ow;

  Tensor<T> out(Shape{n, o, oh, ow});
  auto cols = std::make_shared<std::vector<T>>(n * r * p);
  const T pad_value = static_cast<T>(params.pad_value);
  for (std::size_t b = 0; b < n; ++b) {
    T* cb = cols->data() + b * r * p;
    kernels::im2col(input.data().data() + b * c * h * w, c, h, w, kh, kw, params.stride, params.pad, pad_value, oh, ow, cb);
    kernels::gemm_acc(o, p, r, weight.data().data(), cb, out.data().data() + b * o * p);
  }

  auto *in_n = input.node(), *w_n = weight.node(), *out_n = out.node();
  const std::size_t stride = params.stride, pad = params.pad;
  tape.record({input, weight}, out, [=] {
    std::vector<T> buf;
    for (std::size_t b = 0; b < n; ++b) {
      const T* dy = out_n->grad.data() + b * o * p;
      const T* cb = cols->data() + b * r * p;
      if (w_n->requires_grad) {
        buf.assign(p * r, T(0));
        transpose(r, p, cb, buf.data());
        kernels::gemm_acc(o, r, p, dy, buf.data(), w_n->grad.data());
      }
      if (in_n->requires_grad) {
        buf.assign(r * p, T(0));
        gemm_at_b(o, r, p, w_n->data.data(), dy, buf.data());
        col2im_acc(buf.data(), c, h, w, kh, kw, stride, pad, oh, ow, in_n->grad.data() + b * c * h * w);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  require(x.rank() >= 2 && bias.numel() == x.dim(1), ErrorCode::shape_mismatch,
          "add_channel_bias: bias " + shape_str(bias.shape()) + " does not match channels of " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t idx = (b * c + ch) * s + i;
        out[idx] = x[idx] + bias[ch];
      }
  auto *xn = x.node(), *bn = bias.node(), *on = out.node();
  tape.record({x, bias}, out, [=] {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t idx = (b * c + ch) * s + i;
          if (xn->requires_grad) xn->grad[idx] += on->grad[idx];
          if (bn->requires_grad) bn->grad[ch] += on->grad[idx];
        }
  });
  return out;
}

template <typename T>
Tensor<T> scale_channels(Tape<T>& tape, const Tensor<T>& x, std::span<const T> factors) {
  require(x.rank() >= 2 && factors.size() == x.dim(1), ErrorCode::shape_mismatch, "scale_channels: factor count mismatch");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  std::vector<T> f(factors.begin(), factors.end());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < s; ++i) out[(b * c + ch) * s + i] = x[(b * c + ch) * s + i] * f[ch];
  auto *xn = x.node(), *on = out.node();
  tape.record({x}, out, [=] {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < s; ++i) xn->grad[(b * c + ch) * s + i] += on->grad[(b * c + ch) * s + i] * f[ch];
  });
  return out;
}

template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, T eps, BatchNormMode mode) {
  require(x.rank() == 2 || x.rank() == 4, ErrorCode::shape_mismatch, "batch_norm: expected NC or NCHW input, got " + shape_str(x.shape()));
  require(eps > T(0), ErrorCode::invalid_argument, "batch_norm: eps must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  require(gamma.numel() == c && beta.numel() == c, ErrorCode::shape_mismatch,
          "batch_norm: gamma/beta length must equal channel count " + std::to_string(c));
  require(stats.running_mean.numel() == c && stats.running_var.numel() == c, ErrorCode::shape_mismatch,
          "batch_norm: running statistics length must equal channel count");
  const std::size_t count = n * s;

  std::vector<T> mu(c), inv_std(c);
  if (mode == BatchNormMode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < s; ++i) acc += x[(b * c + ch) * s + i];
      const double m = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const double d = x[(b * c + ch) * s + i] - m;
          var += d * d;
        }
      var /= static_cast<double>(count);
      mu[ch] = static_cast<T>(m);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      const T mom = stats.momentum;
      stats.running_mean[ch] = (T(1) - mom) * stats.running_mean[ch] + mom * static_cast<T>(m);
      stats.running_var[ch] = (T(1) - mom) * stats.running_var[ch] + mom * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t idx = (b * c + ch) * s + i;
        (*xhat)[idx] = (x[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gamma[ch] * (*xhat)[idx] + beta[ch];
      }

  auto *xn = x.node(), *gn = gamma.node(), *bn = beta.node(), *on = out.node();
  const bool batch_stats = mode == BatchNormMode::train;
  tape.record({x, gamma, beta}, out, [=] {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t idx = (b * c + ch) * s + i;
          sum_dy += on->grad[idx];
          sum_dy_xhat += on->grad[idx] * (*xhat)[idx];
        }
      if (gn->requires_grad) gn->grad[ch] += static_cast<T>(sum_dy_xhat);
      if (bn->requires_grad) bn->grad[ch] += static_cast<T>(sum_dy);
      if (!xn->requires_grad) continue;
      const T scale_ch = gn->data[ch] * inv_std[ch];
      const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(count));
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t idx = (b * c + ch) * s + i;
          if (batch_stats)
            xn->grad[idx] += scale_ch * (on->grad[idx] - mean_dy - (*xhat)[idx] * mean_dy_xhat);
          else
            xn->grad[idx] += scale_ch * on->grad[idx];
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> to_block_major(Tape<T>& tape, const Tensor<T>& x, std::size_t anchors) {
  require(x.rank() == 4 && anchors > 0 && x.dim(1) % anchors == 0, ErrorCode::shape_mismatch,
          "to_block_major: channel count of " + shape_str(x.shape()) + " is not a multiple of " + std::to_string(anchors));
  const std::size_t n = x.dim(0), k = x.dim(1) / anchors, gh = x.dim(2), gw = x.dim(3), blocks = gh * gw;
  Tensor<T> out(Shape{n, blocks, anchors, k});
  auto src_index = [=](std::size_t b, std::size_t blk, std::size_t a, std::size_t kk) {
    return ((b * anchors + a) * k + kk) * blocks + blk;
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t blk = 0; blk < blocks; ++blk)
      for (std::size_t a = 0; a < anchors; ++a)
        for (std::size_t kk = 0; kk < k; ++kk) out[((b * blocks + blk) * anchors + a) * k + kk] = x[src_index(b, blk, a, kk)];
  auto *xn = x.node(), *on = out.node();
  tape.record({x}, out, [=] {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t blk = 0; blk < blocks; ++blk)
        for (std::size_t a = 0; a < anchors; ++a)
          for (std::size_t kk = 0; kk < k; ++kk)
            xn->grad[src_index(b, blk, a, kk)] += on->grad[((b * blocks + blk) * anchors + a) * k + kk];
  });
  return out;
}

#define BIDET_INSTANTIATE_OPS(T)                                                                                     \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                          \
  template Tensor<T> square(Tape<T>&, const Tensor<T>&);                                                            \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                                           \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                              \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                               \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                                              \
  template Tensor<T> linear_combination(Tape<T>&, const std::vector<Tensor<T>>&, std::span<const T>);               \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dParams&);                     \
  template Tensor<T> add_channel_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale_channels(Tape<T>&, const Tensor<T>&, std::span<const T>);                                \
  template Tensor<T> batch_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, \
                                T, BatchNormMode);                                                                  \
  template Tensor<T> to_block_major(Tape<T>&, const Tensor<T>&, std::size_t);

BIDET_INSTANTIATE_OPS(float)
BIDET_INSTANTIATE_OPS(double)

}  // namespace bidet::ops
