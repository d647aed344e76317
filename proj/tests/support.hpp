/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "hifimamba/hifimamba.hpp"

namespace testing_support {

using hifi::Tensor;
namespace ag = hifi::ag;

struct GradReport {
  double max_rel = 0;  ///< worst |analytic - numeric| / max(|analytic|, |numeric|, floor)
  std::size_t checked = 0;
};

/// Central-difference check of d loss / d leaf for up to `per_leaf` random
/// entries of every leaf. `loss` must rebuild the graph from the leaves.
/// Uses the five-point stencil, so truncation error is O(eps^4) and a fairly
/// large step keeps round-off out of the estimate.
/// The denominator floor is `floor` plus 1e-3 of the leaf's largest analytic
/// gradient, so entries sitting at a stationary point do not dominate.
inline GradReport gradcheck(const std::function<ag::Var()>& loss, std::vector<ag::Var> leaves,
                            std::size_t per_leaf = 24, double eps = 1e-4, double floor = 1e-6,
                            std::uint64_t seed = 7) {
  for (auto& v : leaves) v.zero_grad();
  ag::backward(loss());
  std::vector<Tensor> analytic;
  for (auto& v : leaves) analytic.push_back(v.grad());
  GradReport rep;
  std::mt19937_64 rng(seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& x = leaves[li].mutable_value();
    const double leaf_floor = floor + 1e-3 * hifi::max_abs(analytic[li]);
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_leaf, idx.size()));
    for (std::size_t i : idx) {
      const double orig = x[i];
      auto at = [&](double step) {
        x[i] = orig + step;
        return loss().value()[0];
      };
      double num;
      {
        ag::NoGradGuard ng;
        num = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps);
      }
      x[i] = orig;
      const double an = analytic[li][i];
      const double rel = std::abs(an - num) / std::max({std::abs(an), std::abs(num), leaf_floor});
      rep.max_rel = std::max(rep.max_rel, rel);
      ++rep.checked;
    }
  }
  return rep;
}

/// Centred orthonormal 2D DFT by direct summation.
inline std::vector<std::complex<double>> direct_centered_dft(const std::vector<std::complex<double>>& x, std::size_t h,
                                                             std::size_t w, bool inverse = false) {
  const double sgn = inverse ? 1.0 : -1.0;
  std::vector<std::complex<double>> out(h * w);
  for (std::size_t ky = 0; ky < h; ++ky)
    for (std::size_t kx = 0; kx < w; ++kx) {
      std::complex<double> s = 0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double ph = 2 * std::numbers::pi *
                            ((double(ky) - h / 2.0) * (double(y) - h / 2.0) / h + (double(kx) - w / 2.0) * (double(xx) - w / 2.0) / w);
          s += x[y * w + xx] * std::polar(1.0, sgn * ph);
        }
      out[ky * w + kx] = s / std::sqrt(double(h * w));
    }
  return out;
}

inline Tensor random_tensor(hifi::Shape s, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return hifi::randn(std::move(s), rng, stddev);
}

inline hifi::ComplexImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  return hifi::ComplexImage(random_tensor({h, w, 2}, seed));
}

/// Small phantom-like real image in [0,1].
inline hifi::ComplexImage phantom(std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return hifi::ComplexImage::from_real(hifi::normalize_minmax(hifi::train::phantom_image(size, rng)));
}

}  // namespace testing_support
