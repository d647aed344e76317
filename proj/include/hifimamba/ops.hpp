/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>

#include "hifimamba/autograd.hpp"

/// Differentiable tensor operations. Feature maps are channels-last
/// ([B, H, W, C]); token sequences are [B, L, C] in row-major raster order.
namespace hifi::ag {

namespace detail {

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, df](Node& self) {
    Tensor& g = an->grad_buffer();
    const auto& x = an->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i]);
  });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline void accumulate(const std::shared_ptr<Node>& n, const Tensor& g) {
  if (n->requires_grad) n->grad_buffer() += g;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  Tensor out = a.value() + b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    detail::accumulate(an, self.grad);
    detail::accumulate(bn, self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tensor out = a.value() - b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    detail::accumulate(an, self.grad);
    if (bn->requires_grad) bn->grad_buffer() -= self.grad;
  });
}

inline Var mul(const Var& a, const Var& b) {
  a.value().require_same(b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      Tensor& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value() * s;
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, s](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var silu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * detail::sigmoid(x); },
      [](double x) {
        const double s = detail::sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Var gelu(const Var& a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double x) { return detail::sigmoid(x); },
      [](double x) {
        const double s = detail::sigmoid(x);
        return s * (1.0 - s);
      });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

inline Var softplus(const Var& a) {
  return detail::unary(
      a, [](double x) { return detail::softplus(x); }, [](double x) { return detail::sigmoid(x); });
}

// ---------------------------------------------------------------- reductions

/// Sum of squares, as a scalar.
inline Var sum_sq(const Var& a) {
  Tensor out({1}, hifi::sum_sq(a.value()));
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& self) {
    Tensor& g = an->grad_buffer();
    const double s = 2.0 * self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * an->value[i];
  });
}

/// Mean absolute difference against a constant target (the l1 loss).
inline Var l1_loss(const Var& pred, const Tensor& target) {
  pred.value().require_same(target);
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pred.value()[i] - target[i]);
  auto pn = pred.node();
  return make_result(Tensor({1}, s / static_cast<double>(n)), {pred}, [pn, target, n](Node& self) {
    Tensor& g = pn->grad_buffer();
    const double k = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pn->value[i] - target[i];
      g[i] += d > 0 ? k : (d < 0 ? -k : 0.0);
    }
  });
}

/// Weighted sum with a constant weight tensor; handy for gradient probes.
inline Var dot_const(const Var& a, const Tensor& w) {
  a.value().require_same(w);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  auto an = a.node();
  return make_result(Tensor({1}, s), {a}, [an, w](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(const Var& a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Channels [start, start+len) of the last dimension.
inline Var slice_last(const Var& a, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  const std::size_t c = s.back();
  if (start + len > c) throw ShapeMismatch("slice beyond last dimension");
  const std::size_t rows = a.size() / c;
  Shape os = s;
  os.back() = len;
  Tensor out(os);
  const auto& av = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < len; ++k) out[r * len + k] = av[r * c + start + k];
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, rows, c, start, len](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < len; ++k) g[r * c + start + k] += self.grad[r * len + k];
  });
}

inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  Shape s = parts.front().shape();
  const std::size_t rows = parts.front().size() / s.back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.size() / p.shape().back() != rows || p.shape().size() != s.size())
      throw ShapeMismatch("concat_last leading dims differ");
    widths.push_back(p.shape().back());
    total += widths.back();
  }
  s.back() = total;
  Tensor out(s);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < widths[p]; ++k) out[r * total + off + k] = pv[r * widths[p] + k];
    off += widths[p];
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(std::move(out), parts, [nodes, widths, rows, total](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      if (nodes[p]->requires_grad) {
        Tensor& g = nodes[p]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < widths[p]; ++k)
            g[r * widths[p] + k] += self.grad[r * total + off + k];
      }
      off += widths[p];
    }
  });
}

/// [B, X, Y] -> [B, Y, X].
inline Var transpose_last2(const Var& a) {
  if (a.shape().size() != 3) throw ShapeMismatch("transpose_last2 expects rank 3");
  const std::size_t b = a.dim(0), x = a.dim(1), y = a.dim(2);
  Tensor out({b, y, x});
  const auto& av = a.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < x; ++i)
      for (std::size_t j = 0; j < y; ++j) out[(n * y + j) * x + i] = av[(n * x + i) * y + j];
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, b, x, y](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t i = 0; i < x; ++i)
        for (std::size_t j = 0; j < y; ++j) g[(n * x + i) * y + j] += self.grad[(n * y + j) * x + i];
  });
}

namespace detail {
// Index map between [B,H,W,C] and [B,H/P,W/P,P*P*C]; patch vector is (py, px, c).
template <typename F>
void for_each_patch_index(std::size_t b, std::size_t h, std::size_t w, std::size_t c, std::size_t p,
                          F&& f) {
  const std::size_t hp = h / p, wp = w / p, d = p * p * c;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t src = ((n * h + y) * w + x) * c + k;
          const std::size_t dst =
              ((n * hp + y / p) * wp + x / p) * d + ((y % p) * p + (x % p)) * c + k;
          f(src, dst);
        }
}
}  // namespace detail

/// Non-overlapping PxP patches gathered into channels.
inline Var space_to_depth(const Var& a, std::size_t p) {
  const std::size_t b = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
  if (h % p || w % p) throw IndivisibleShape("patch size " + std::to_string(p) + " vs " + shape_str(a.shape()));
  Tensor out({b, h / p, w / p, p * p * c});
  const auto& av = a.value();
  detail::for_each_patch_index(b, h, w, c, p, [&](std::size_t s, std::size_t d) { out[d] = av[s]; });
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, b, h, w, c, p](Node& self) {
    Tensor& g = an->grad_buffer();
    detail::for_each_patch_index(b, h, w, c, p,
                                 [&](std::size_t s, std::size_t d) { g[s] += self.grad[d]; });
  });
}

inline Var depth_to_space(const Var& a, std::size_t p) {
  const std::size_t b = a.dim(0), hp = a.dim(1), wp = a.dim(2), d = a.dim(3);
  if (d % (p * p)) throw IndivisibleShape("channels not divisible by patch area");
  const std::size_t c = d / (p * p), h = hp * p, w = wp * p;
  Tensor out({b, h, w, c});
  const auto& av = a.value();
  detail::for_each_patch_index(b, h, w, c, p, [&](std::size_t s, std::size_t dd) { out[s] = av[dd]; });
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, b, h, w, c, p](Node& self) {
    Tensor& g = an->grad_buffer();
    detail::for_each_patch_index(b, h, w, c, p,
                                 [&](std::size_t s, std::size_t dd) { g[dd] += self.grad[s]; });
  });
}

// ---------------------------------------------------------------- layers

/// y = x W^T + b over the last dimension. W is [out, in]; bias may be undefined.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const std::size_t in = weight.dim(1), outc = weight.dim(0);
  if (x.shape().back() != in)
    throw ShapeMismatch("linear expects last dim " + std::to_string(in) + ", got " + shape_str(x.shape()));
  const std::size_t rows = x.size() / in;
  Shape os = x.shape();
  os.back() = outc;
  Tensor out(os);
  {
    detail::CMapMat X(x.value().data().data(), rows, in);
    detail::CMapMat W(weight.value().data().data(), outc, in);
    detail::MapMat Y(out.data().data(), rows, outc);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data().data(), outc);
      Y.rowwise() += bv;
    }
  }
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Var> ins{x, weight};
  if (bias.defined()) ins.push_back(bias);
  return make_result(std::move(out), ins, [xn, wn, bn, rows, in, outc](Node& self) {
    detail::CMapMat G(self.grad.data().data(), rows, outc);
    if (xn->requires_grad) {
      detail::MapMat GX(xn->grad_buffer().data().data(), rows, in);
      detail::CMapMat W(wn->value.data().data(), outc, in);
      GX.noalias() += G * W;
    }
    if (wn->requires_grad) {
      detail::MapMat GW(wn->grad_buffer().data().data(), outc, in);
      detail::CMapMat X(xn->value.data().data(), rows, in);
      GW.noalias() += G.transpose() * X;
    }
    if (bn && bn->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd> gb(bn->grad_buffer().data().data(), outc);
      gb += G.colwise().sum();
    }
  });
}

/// Layer normalisation over the last dimension with affine gamma/beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(rows);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean += xv[r * c + k];
    mean /= static_cast<double>(c);
    for (std::size_t k = 0; k < c; ++k) {
      const double d = xv[r * c + k] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) {
      const double xh = (xv[r * c + k] - mean) * rstd[r];
      xhat[r * c + k] = xh;
      out[r * c + k] = xh * gv[k] + bv[k];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(std::move(out), {x, gamma, beta},
                     [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), rows, c](Node& self) {
                       const auto& G = self.grad;
                       if (gn->requires_grad || bn->requires_grad) {
                         Tensor& gg = gn->grad_buffer();
                         Tensor& gb = bn->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t k = 0; k < c; ++k) {
                             gg[k] += G[r * c + k] * xhat[r * c + k];
                             gb[k] += G[r * c + k];
                           }
                       }
                       if (!xn->requires_grad) return;
                       Tensor& gx = xn->grad_buffer();
                       const auto& gam = gn->value;
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t k = 0; k < c; ++k) {
                           const double gh = G[r * c + k] * gam[k];
                           s1 += gh;
                           s2 += gh * xhat[r * c + k];
                         }
                         for (std::size_t k = 0; k < c; ++k) {
                           const double gh = G[r * c + k] * gam[k];
                           gx[r * c + k] += rstd[r] * (gh - inv_c * s1 - xhat[r * c + k] * inv_c * s2);
                         }
                       }
                     });
}

/// Depthwise KxK convolution on [B,H,W,C], zero padding K/2. Weight [C,K,K], bias [C].
inline Var dwconv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride = 1) {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t k = weight.dim(1);
  if (weight.dim(0) != c || weight.dim(2) != k) throw ShapeMismatch("dwconv2d weight shape");
  const long pad = static_cast<long>(k / 2);
  const std::size_t ho = (h + 2 * (k / 2) - k) / stride + 1, wo = (w + 2 * (k / 2) - k) / stride + 1;
  Tensor out({b, ho, wo, c});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  // Visits every (output, input, tap) triple that lands inside the image.
  auto sweep = [=](auto&& f) {
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t o = ((n * ho + oy) * wo + ox) * c;
              const std::size_t i = ((n * h + iy) * w + ix) * c;
              f(o, i, ky * k + kx);
            }
        }
  };
  for (std::size_t o = 0; o < out.size(); o += c)
    for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] = bv[ch];
  sweep([&](std::size_t o, std::size_t i, std::size_t tap) {
    for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += xv[i + ch] * wv[ch * k * k + tap];
  });
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result(std::move(out), {x, weight, bias}, [xn, wn, bn, sweep, c, k](Node& self) {
    const auto& G = self.grad;
    const auto& xv = xn->value;
    const auto& wv = wn->value;
    Tensor* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    Tensor* gw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
    if (bn->requires_grad) {
      Tensor& gb = bn->grad_buffer();
      for (std::size_t o = 0; o < G.size(); o += c)
        for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += G[o + ch];
    }
    sweep([&](std::size_t o, std::size_t i, std::size_t tap) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = G[o + ch];
        if (gx) (*gx)[i + ch] += g * wv[ch * k * k + tap];
        if (gw) (*gw)[ch * k * k + tap] += g * xv[i + ch];
      }
    });
  });
}

/// Depthwise 1D convolution along L on [B,D,L], zero padding K/2. Weight [D,K], bias [D].
inline Var dwconv1d(const Var& x, const Var& weight, const Var& bias) {
  const std::size_t b = x.dim(0), d = x.dim(1), l = x.dim(2), k = weight.dim(1);
  if (weight.dim(0) != d) throw ShapeMismatch("dwconv1d weight channels");
  const long pad = static_cast<long>(k / 2);
  Tensor out(x.shape());
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < d; ++ch) {
      const double* xr = &xv[(n * d + ch) * l];
      double* yr = &out[(n * d + ch) * l];
      for (std::size_t t = 0; t < l; ++t) {
        double s = bv[ch];
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(t + j) - pad;
          if (src >= 0 && src < static_cast<long>(l)) s += wv[ch * k + j] * xr[src];
        }
        yr[t] = s;
      }
    }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result(std::move(out), {x, weight, bias}, [xn, wn, bn, b, d, l, k, pad](Node& self) {
    const auto& G = self.grad;
    Tensor* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    Tensor* gw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
    Tensor* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < d; ++ch) {
        const std::size_t row = (n * d + ch) * l;
        for (std::size_t t = 0; t < l; ++t) {
          const double g = G[row + t];
          if (gb) (*gb)[ch] += g;
          for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(t + j) - pad;
            if (src < 0 || src >= static_cast<long>(l)) continue;
            if (gx) (*gx)[row + src] += g * wn->value[ch * k + j];
            if (gw) (*gw)[ch * k + j] += g * xn->value[row + src];
          }
        }
      }
  });
}

namespace detail {
struct Tap2 {
  std::size_t i0, i1;
  double w0, w1;
};
// Half-pixel bilinear 2x weights with edge clamping.
inline std::vector<Tap2> bilinear2x_taps(std::size_t n) {
  std::vector<Tap2> taps(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    taps[2 * i] = {i, i == 0 ? 0 : i - 1, 0.75, 0.25};
    taps[2 * i + 1] = {i, i + 1 < n ? i + 1 : n - 1, 0.75, 0.25};
  }
  return taps;
}
}  // namespace detail

/// Bilinear 2x upsampling of [B,h,w,C] (half-pixel centres, clamped edges), times `gain`.
inline Var upsample2x(const Var& x, double gain = 1.0) {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const auto ty = detail::bilinear2x_taps(h), tx = detail::bilinear2x_taps(w);
  const std::size_t H = 2 * h, W = 2 * w;
  Tensor out({b, H, W, c});
  const auto& xv = x.value();
  auto sweep = [=](auto&& f) {
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t oy = 0; oy < H; ++oy)
        for (std::size_t ox = 0; ox < W; ++ox) {
          const auto& a = ty[oy];
          const auto& bb = tx[ox];
          const std::size_t o = ((n * H + oy) * W + ox) * c;
          const std::size_t iy[2] = {a.i0, a.i1};
          const std::size_t ix[2] = {bb.i0, bb.i1};
          const double wy[2] = {a.w0, a.w1};
          const double wx[2] = {bb.w0, bb.w1};
          for (int p = 0; p < 2; ++p)
            for (int q = 0; q < 2; ++q) f(o, ((n * h + iy[p]) * w + ix[q]) * c, gain * wy[p] * wx[q]);
        }
  };
  sweep([&](std::size_t o, std::size_t i, double wt) {
    for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += wt * xv[i + ch];
  });
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, sweep, c](Node& self) {
    Tensor& g = xn->grad_buffer();
    sweep([&](std::size_t o, std::size_t i, double wt) {
      for (std::size_t ch = 0; ch < c; ++ch) g[i + ch] += wt * self.grad[o + ch];
    });
  });
}

/// Orthonormal Haar LL band of [B,H,W,C]: (a+b+c+d)/2 over each 2x2 block.
inline Var haar_ll(const Var& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 || w % 2) throw OddDimension("haar_ll on " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({b, ho, wo, c});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              s += xv[((n * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch];
          out[((n * ho + y) * wo + xx) * c + ch] = 0.5 * s;
        }
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, b, h, w, c, ho, wo](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gg = 0.5 * self.grad[((n * ho + y) * wo + xx) * c + ch];
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) g[((n * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch] += gg;
          }
  });
}

/// Spatial mean of [B,H,W,C] -> [B,C].
inline Var global_avg_pool(const Var& x) {
  const std::size_t b = x.dim(0), c = x.dim(3), hw = x.dim(1) * x.dim(2);
  Tensor out({b, c});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[n * c + ch] += xv[(n * hw + p) * c + ch];
  out *= 1.0 / static_cast<double>(hw);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, b, c, hw](Node& self) {
    Tensor& g = xn->grad_buffer();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) g[(n * hw + p) * c + ch] += inv * self.grad[n * c + ch];
  });
}

/// x [B,...,C] scaled per (batch, channel) by w [B,C].
inline Var mul_channel(const Var& x, const Var& w) {
  const std::size_t b = x.dim(0), c = x.shape().back(), inner = x.size() / (b * c);
  if (w.dim(0) != b || w.dim(1) != c) throw ShapeMismatch("mul_channel weights");
  Tensor out(x.shape());
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < inner; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = (n * inner + p) * c + ch;
        out[i] = xv[i] * wv[n * c + ch];
      }
  auto xn = x.node(), wn = w.node();
  return make_result(std::move(out), {x, w}, [xn, wn, b, c, inner](Node& self) {
    Tensor* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    Tensor* gw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t p = 0; p < inner; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = (n * inner + p) * c + ch;
          if (gx) (*gx)[i] += self.grad[i] * wn->value[n * c + ch];
          if (gw) (*gw)[n * c + ch] += self.grad[i] * xn->value[i];
        }
  });
}

}  // namespace hifi::ag
