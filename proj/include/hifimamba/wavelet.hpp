/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "hifimamba/ops.hpp"

namespace hifi::wavelet {

/// One-level orthonormal Haar subbands, each (H/2) x (W/2) x C.
///
/// LH holds horizontal detail (high-pass along columns), HL vertical detail
/// (high-pass along rows) and HH the diagonal.
struct Subbands {
  Tensor LL, LH, HL, HH;
};

/// Low-frequency base and its exact residual.
struct FreqPair {
  Tensor low, high;
};

namespace detail {
inline void require_hwc_even(const Shape& s) {
  if (s.size() != 3) throw ShapeMismatch("expected [H,W,C], got " + shape_str(s));
  if (s[0] % 2 || s[1] % 2) throw OddDimension("Haar DWT needs even H and W, got " + shape_str(s));
}
}  // namespace detail

/// Channel-wise one-level orthonormal Haar DWT of an [H,W,C] tensor.
inline Subbands dwt2(const Tensor& x) {
  detail::require_hwc_even(x.shape());
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), ho = h / 2, wo = w / 2;
  Subbands s{Tensor({ho, wo, c}), Tensor({ho, wo, c}), Tensor({ho, wo, c}), Tensor({ho, wo, c})};
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t xx = 0; xx < wo; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = x.at(2 * y, 2 * xx, ch), b = x.at(2 * y, 2 * xx + 1, ch);
        const double cc = x.at(2 * y + 1, 2 * xx, ch), d = x.at(2 * y + 1, 2 * xx + 1, ch);
        s.LL.at(y, xx, ch) = 0.5 * (a + b + cc + d);
        s.LH.at(y, xx, ch) = 0.5 * (a - b + cc - d);
        s.HL.at(y, xx, ch) = 0.5 * (a + b - cc - d);
        s.HH.at(y, xx, ch) = 0.5 * (a - b - cc + d);
      }
  return s;
}

/// Inverse of dwt2.
inline Tensor idwt2(const Subbands& s) {
  if (!s.LL.same_shape(s.LH) || !s.LL.same_shape(s.HL) || !s.LL.same_shape(s.HH) || s.LL.rank() != 3)
    throw ShapeMismatch("subband shapes differ");
  const std::size_t ho = s.LL.dim(0), wo = s.LL.dim(1), c = s.LL.dim(2);
  Tensor x({2 * ho, 2 * wo, c});
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t xx = 0; xx < wo; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double ll = s.LL.at(y, xx, ch), lh = s.LH.at(y, xx, ch);
        const double hl = s.HL.at(y, xx, ch), hh = s.HH.at(y, xx, ch);
        x.at(2 * y, 2 * xx, ch) = 0.5 * (ll + lh + hl + hh);
        x.at(2 * y, 2 * xx + 1, ch) = 0.5 * (ll - lh + hl - hh);
        x.at(2 * y + 1, 2 * xx, ch) = 0.5 * (ll + lh - hl - hh);
        x.at(2 * y + 1, 2 * xx + 1, ch) = 0.5 * (ll - lh - hl + hh);
      }
  return x;
}

/// Haar LL gain is 2 on constants; the 1/2 gain brings the base back to scale.
inline constexpr double kLowGain = 0.5;

/// Differentiable W-Laplacian split of a [B,H,W,C] feature map.
inline std::pair<ag::Var, ag::Var> wl_decompose(const ag::Var& f) {
  if (f.shape().size() != 4) throw ShapeMismatch("wl_decompose expects [B,H,W,C]");
  if (f.dim(1) % 2 || f.dim(2) % 2) throw OddDimension("wl_decompose on " + shape_str(f.shape()));
  ag::Var low = ag::upsample2x(ag::haar_ll(f), kLowGain);
  ag::Var high = ag::sub(f, low);
  return {low, high};
}

/// 2x bilinear upsampling of an LL band with gain 1/2: [h,w,C] -> [2h,2w,C].
inline Tensor upsample_ll(const Tensor& ll) {
  if (ll.rank() != 3) throw ShapeMismatch("upsample_ll expects [h,w,C]");
  ag::NoGradGuard ng;
  ag::Var v(ll.reshaped({1, ll.dim(0), ll.dim(1), ll.dim(2)}));
  const ag::Var up = ag::upsample2x(v, kLowGain);
  return up.value().reshaped({2 * ll.dim(0), 2 * ll.dim(1), ll.dim(2)});
}

/// low = upsample_ll(dwt2(f).LL); high = f - low.
inline FreqPair wl_decompose(const Tensor& f) {
  detail::require_hwc_even(f.shape());
  FreqPair p;
  p.low = upsample_ll(dwt2(f).LL);
  p.high = f - p.low;
  return p;
}

}  // namespace hifi::wavelet
