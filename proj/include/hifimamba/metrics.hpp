/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hifimamba/kspace.hpp"

namespace hifi::metrics {

inline constexpr double kPsnrCap = 100.0;

namespace detail {
inline void require_2d_pair(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape())
    throw ShapeMismatch("metrics need equal [H,W] images, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}
}  // namespace detail

/// 10 log10(range^2 / MSE), capped at 100 dB (also the value for MSE == 0).
inline double psnr(const Tensor& pred, const Tensor& gt, double data_range = 1.0) {
  detail::require_2d_pair(pred, gt);
  if (!(data_range > 0)) throw ConfigError("data_range must be positive");
  double se = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) se += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  const double mse = se / static_cast<double>(gt.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

/// ||pred - gt||^2 / ||gt||^2
inline double nmse(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw ShapeMismatch("nmse shapes differ");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    num += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    den += gt[i] * gt[i];
  }
  if (den == 0) throw ZeroReference("nmse reference has zero norm");
  return num / den;
}

struct SsimParams {
  std::size_t window = 7;
  double k1 = 0.01, k2 = 0.03;
  double data_range = 1.0;
};

/// Mean SSIM over all fully contained windows, uniform weights, sample
/// (N-1) covariance. Window sums come from summed-area tables.
inline double ssim(const Tensor& pred, const Tensor& gt, const SsimParams& p = {}) {
  detail::require_2d_pair(pred, gt);
  const std::size_t h = gt.dim(0), w = gt.dim(1), k = p.window;
  if (h < k || w < k) throw ImageTooSmall("ssim needs images of at least " + std::to_string(k) + " px, got " + shape_str(gt.shape()));
  const std::size_t sw = w + 1;
  std::vector<double> sx((h + 1) * sw), sy(sx.size()), sxx(sx.size()), syy(sx.size()), sxy(sx.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double a = pred[y * w + x], b = gt[y * w + x];
      const std::size_t i = (y + 1) * sw + x + 1, up = y * sw + x + 1, lf = (y + 1) * sw + x, ul = y * sw + x;
      sx[i] = a + sx[up] + sx[lf] - sx[ul];
      sy[i] = b + sy[up] + sy[lf] - sy[ul];
      sxx[i] = a * a + sxx[up] + sxx[lf] - sxx[ul];
      syy[i] = b * b + syy[up] + syy[lf] - syy[ul];
      sxy[i] = a * b + sxy[up] + sxy[lf] - sxy[ul];
    }
  auto box = [&](const std::vector<double>& s, std::size_t y, std::size_t x) {
    return s[(y + k) * sw + x + k] - s[y * sw + x + k] - s[(y + k) * sw + x] + s[y * sw + x];
  };
  const double np = static_cast<double>(k * k), cov_norm = np / (np - 1.0);
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range), c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  double total = 0;
  for (std::size_t y = 0; y + k <= h; ++y)
    for (std::size_t x = 0; x + k <= w; ++x) {
      const double ux = box(sx, y, x) / np, uy = box(sy, y, x) / np;
      const double vx = cov_norm * (box(sxx, y, x) / np - ux * ux);
      const double vy = cov_norm * (box(syy, y, x) / np - uy * uy);
      const double vxy = cov_norm * (box(sxy, y, x) / np - ux * uy);
      total += ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>((h - k + 1) * (w - k + 1));
}

struct SliceMetrics {
  std::string slice_id;
  double psnr = 0, ssim = 0, nmse = 0;
};

/// Metric triplet on magnitude images.
inline SliceMetrics evaluate(const ComplexImage& pred, const ComplexImage& gt, std::string slice_id = {}) {
  const Tensor mp = pred.magnitude(), mg = gt.magnitude();
  return {std::move(slice_id), psnr(mp, mg), ssim(mp, mg), nmse(mp, mg)};
}

struct ReconReport {
  std::vector<SliceMetrics> per_slice;
  nlohmann::json meta = nlohmann::json::object();  ///< dataset, af, mask_hash, checkpoint

  SliceMetrics aggregate() const {
    SliceMetrics m{"mean"};
    if (per_slice.empty()) return m;
    for (const auto& s : per_slice) {
      m.psnr += s.psnr;
      m.ssim += s.ssim;
      m.nmse += s.nmse;
    }
    const double n = static_cast<double>(per_slice.size());
    m.psnr /= n;
    m.ssim /= n;
    m.nmse /= n;
    return m;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17) << "slice_id,psnr,ssim,nmse\n";
    for (const auto& s : per_slice) os << s.slice_id << ',' << s.psnr << ',' << s.ssim << ',' << s.nmse << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    const auto a = aggregate();
    return {{"meta", meta}, {"count", per_slice.size()}, {"psnr", a.psnr}, {"ssim", a.ssim}, {"nmse", a.nmse}};
  }

  /// Writes <prefix>.csv and <prefix>.json.
  void write(const std::filesystem::path& prefix) const {
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
    std::ofstream csv(prefix.string() + ".csv");
    std::ofstream js(prefix.string() + ".json");
    if (!csv || !js) throw IoError("cannot write report " + prefix.string());
    csv << to_csv();
    js << to_json().dump(2) << '\n';
  }
};

}  // namespace hifi::metrics
