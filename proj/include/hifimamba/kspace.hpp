/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hifimamba/autograd.hpp"
#include "hifimamba/fft.hpp"
#include "hifimamba/nn.hpp"
#include "hifimamba/tensor.hpp"

namespace hifi {

using fft::cplx;

/// Complex-valued H x W grid (k-space or complex image), row-major.
class ComplexGrid {
 public:
  ComplexGrid() = default;
  ComplexGrid(std::size_t h, std::size_t w) : h_(h), w_(w), data_(h * w) {}

  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::span<cplx> data() noexcept { return data_; }
  std::span<const cplx> data() const noexcept { return data_; }
  cplx& at(std::size_t y, std::size_t x) { return data_[y * w_ + x]; }
  cplx at(std::size_t y, std::size_t x) const { return data_[y * w_ + x]; }

  double norm() const {
    double s = 0.0;
    for (const auto& v : data_) s += std::norm(v);
    return std::sqrt(s);
  }

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<cplx> data_;
};

/// Two-channel real/imaginary image, data is [H, W, 2].
class ComplexImage {
 public:
  ComplexImage() = default;
  explicit ComplexImage(Tensor data) : data_(std::move(data)) {
    if (data_.rank() != 3 || data_.dim(2) != 2)
      throw ShapeMismatch("complex image must be [H,W,2], got " + shape_str(data_.shape()));
    if (data_.dim(0) < 8 || data_.dim(1) < 8 || data_.dim(0) % 2 || data_.dim(1) % 2)
      throw OddDimension("complex image needs even H,W >= 8, got " + shape_str(data_.shape()));
    if (!data_.all_finite()) throw NonFiniteInput("complex image contains non-finite values");
  }

  static ComplexImage from_real(const Tensor& real) {
    Tensor t({real.dim(0), real.dim(1), 2});
    for (std::size_t i = 0; i < real.size(); ++i) t[2 * i] = real[i];
    return ComplexImage(std::move(t));
  }
  static ComplexImage from_grid(const ComplexGrid& g) {
    Tensor t({g.height(), g.width(), 2});
    auto d = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      t[2 * i] = d[i].real();
      t[2 * i + 1] = d[i].imag();
    }
    return ComplexImage(std::move(t));
  }

  std::size_t height() const { return data_.dim(0); }
  std::size_t width() const { return data_.dim(1); }
  const Tensor& tensor() const noexcept { return data_; }

  ComplexGrid to_grid() const {
    ComplexGrid g(height(), width());
    auto d = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = {data_[2 * i], data_[2 * i + 1]};
    return g;
  }

  /// |re + i im| as an H x W tensor.
  Tensor magnitude() const {
    Tensor m({height(), width()});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::hypot(data_[2 * i], data_[2 * i + 1]);
    return m;
  }

 private:
  Tensor data_;
};

/// Column-sampling pattern over the phase-encode (width) axis of centred k-space.
struct SamplingMask {
  std::vector<std::uint8_t> lines;
  int acceleration_factor = 1;
  double center_fraction = 0.0;
  std::uint64_t seed = 0;
  std::size_t center_count = 0;

  std::size_t width() const noexcept { return lines.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : lines) n += v;
    return n;
  }
  bool sampled(std::size_t col) const { return lines[col] != 0; }

  std::string to_csv() const {
    std::string s;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i) s += ',';
      s += lines[i] ? '1' : '0';
    }
    return s + "\n";
  }

  nlohmann::json header() const {
    return {{"W", width()}, {"af", acceleration_factor}, {"center_fraction", center_fraction}, {"seed", seed}};
  }

  std::uint64_t hash() const {
    std::string s = to_csv() + header().dump();
    return nn::fnv1a64(s);
  }
};

namespace detail {
inline std::size_t round_half_up(double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); }
}  // namespace detail

/// Affine rescale of an image to [0,1].
inline Tensor normalize_minmax(const Tensor& img) {
  if (img.empty() || !img.all_finite()) throw NonFiniteInput("normalize_minmax needs finite input");
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) throw ConstantImage("max == min, slice is degenerate");
  Tensor out(img.shape());
  const double inv = 1.0 / (mx - mn);
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = (img[i] - mn) * inv;
  return out;
}

/// Orthonormal centred 2D DFT of a complex grid.
inline ComplexGrid fft2c(const ComplexGrid& in, bool inverse = false) {
  const std::size_t h = in.height(), w = in.width();
  ComplexGrid tmp(h, w), out(h, w);
  // ifftshift, transform, fftshift.
  fft::roll2(in.data(), tmp.data(), h, w, h - h / 2, w - w / 2);
  fft::dft2_inplace(tmp.data(), h, w, inverse);
  fft::roll2(tmp.data(), out.data(), h, w, h / 2, w / 2);
  const double s = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (auto& v : out.data()) v *= s;
  return out;
}

inline ComplexGrid fft2c(const ComplexImage& img) { return fft2c(img.to_grid(), false); }

inline ComplexImage ifft2c(const ComplexGrid& ksp) {
  for (const auto& v : ksp.data())
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw NonFiniteInput("ifft2c input");
  return ComplexImage::from_grid(fft2c(ksp, true));
}

/// Equispaced Cartesian column mask with a fully sampled centre block.
///
/// The centre holds round_half_up(cf*W) contiguous columns; the remaining
/// round(W/af) - centre lines are spread at a constant stride over the columns
/// outside the block. The seed only picks the phase of that stride.
inline SamplingMask make_equispaced_mask(std::size_t width, int af, double center_fraction, std::uint64_t seed) {
  if (af < 1) throw ConfigError("acceleration factor must be >= 1");
  if (width < static_cast<std::size_t>(af)) throw ConfigError("W must be >= af");
  if (!(center_fraction > 0.0 && center_fraction < 1.0)) throw ConfigError("center_fraction must lie in (0,1)");
  const std::size_t total = detail::round_half_up(static_cast<double>(width) / af);
  const std::size_t center = detail::round_half_up(center_fraction * static_cast<double>(width));
  if (center > total)
    throw InfeasibleMask("centre block of " + std::to_string(center) + " lines exceeds budget of " +
                         std::to_string(total) + " (W=" + std::to_string(width) + ", af=" + std::to_string(af) + ")");

  SamplingMask m;
  m.lines.assign(width, 0);
  m.acceleration_factor = af;
  m.center_fraction = center_fraction;
  m.seed = seed;
  m.center_count = center;
  const std::size_t pad = (width - center + 1) / 2;
  for (std::size_t i = pad; i < pad + center; ++i) m.lines[i] = 1;

  std::vector<std::size_t> outside;
  for (std::size_t i = 0; i < width; ++i)
    if (!m.lines[i]) outside.push_back(i);
  const std::size_t rest = total - center;
  if (rest > 0) {
    const double stride = static_cast<double>(outside.size()) / static_cast<double>(rest);
    const double phase = static_cast<double>(nn::splitmix64(seed) >> 11) * 0x1.0p-53 * stride;
    for (std::size_t j = 0; j < rest; ++j) {
      auto idx = static_cast<std::size_t>(std::floor(phase + static_cast<double>(j) * stride));
      m.lines[outside[std::min(idx, outside.size() - 1)]] = 1;
    }
  }
  return m;
}

inline SamplingMask mask_from_csv(const std::string& csv, const nlohmann::json& header) {
  SamplingMask m;
  for (char ch : csv) {
    if (ch == '0' || ch == '1') m.lines.push_back(ch == '1');
  }
  if (m.lines.size() != header.at("W").get<std::size_t>()) throw CorruptFile("mask width disagrees with header");
  m.acceleration_factor = header.at("af").get<int>();
  m.center_fraction = header.at("center_fraction").get<double>();
  m.seed = header.at("seed").get<std::uint64_t>();
  m.center_count = detail::round_half_up(m.center_fraction * static_cast<double>(m.width()));
  return m;
}

/// Writes <prefix>.csv (one line of 0/1) and <prefix>.json (the header).
inline void save_mask(const SamplingMask& m, const std::string& prefix) {
  std::ofstream csv(prefix + ".csv", std::ios::binary), js(prefix + ".json", std::ios::binary);
  if (!csv || !js) throw IoError("cannot write mask files at " + prefix);
  csv << m.to_csv();
  js << m.header().dump(2) << "\n";
}

inline SamplingMask load_mask(const std::string& prefix) {
  std::ifstream csv(prefix + ".csv"), js(prefix + ".json");
  if (!csv || !js) throw MissingDataset("mask files not found at " + prefix);
  std::string line;
  std::getline(csv, line);
  nlohmann::json header;
  try {
    js >> header;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("mask header: ") + e.what());
  }
  return mask_from_csv(line, header);
}

/// Acquired k-space: the full spectrum, its mask and the retained samples.
struct KSpace {
  ComplexGrid data;
  SamplingMask mask;
  ComplexGrid measured;

  static KSpace acquire(ComplexGrid full, SamplingMask mask) {
    if (mask.width() != full.width())
      throw ShapeMismatch("mask width " + std::to_string(mask.width()) + " vs k-space width " +
                          std::to_string(full.width()));
    KSpace k{std::move(full), std::move(mask), {}};
    k.measured = ComplexGrid(k.data.height(), k.data.width());
    for (std::size_t y = 0; y < k.data.height(); ++y)
      for (std::size_t x = 0; x < k.data.width(); ++x)
        if (k.mask.sampled(x)) k.measured.at(y, x) = k.data.at(y, x);
    return k;
  }
};

/// Simulated acquisition: returns the zero-filled image and the k-space record.
inline std::pair<ComplexImage, KSpace> undersample(const ComplexImage& full, const SamplingMask& mask) {
  KSpace k = KSpace::acquire(fft2c(full), mask);
  ComplexImage zf = ifft2c(k.measured);
  return {std::move(zf), std::move(k)};
}

/// Hard data consistency: keep measured columns, predicted spectrum elsewhere.
inline ComplexGrid replace_sampled(ComplexGrid spec, const KSpace& ksp) {
  if (spec.height() != ksp.measured.height() || spec.width() != ksp.measured.width())
    throw ShapeMismatch("data consistency shape mismatch");
  for (std::size_t y = 0; y < spec.height(); ++y)
    for (std::size_t x = 0; x < spec.width(); ++x)
      if (ksp.mask.sampled(x)) spec.at(y, x) = ksp.measured.at(y, x);
  return spec;
}

inline ComplexImage apply_dc(const ComplexImage& pred, const KSpace& ksp) {
  return ifft2c(replace_sampled(fft2c(pred), ksp));
}

namespace detail {
inline ComplexGrid grid_from_slab(const double* p, std::size_t h, std::size_t w) {
  ComplexGrid g(h, w);
  auto d = g.data();
  for (std::size_t i = 0; i < h * w; ++i) d[i] = {p[2 * i], p[2 * i + 1]};
  return g;
}
inline void grid_to_slab(const ComplexGrid& g, double* p) {
  auto d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    p[2 * i] = d[i].real();
    p[2 * i + 1] = d[i].imag();
  }
}
}  // namespace detail

/// Differentiable batched data consistency on [B,H,W,2] images.
///
/// The map is affine; its linear part F^H (I - M) F is self-adjoint, so the
/// backward pass reuses it with the measurements zeroed.
inline ag::Var data_consistency(const ag::Var& x, std::span<const KSpace> ksp) {
  if (x.shape().size() != 4 || x.dim(3) != 2 || ksp.size() != x.dim(0))
    throw ShapeMismatch("data_consistency expects [B,H,W,2] with B k-spaces, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out(x.shape());
  const std::size_t slab = h * w * 2;
  for (std::size_t n = 0; n < b; ++n) {
    auto spec = fft2c(detail::grid_from_slab(&x.value()[n * slab], h, w));
    detail::grid_to_slab(fft2c(replace_sampled(std::move(spec), ksp[n]), true), &out[n * slab]);
  }
  std::vector<SamplingMask> masks;
  for (const auto& k : ksp) masks.push_back(k.mask);
  auto xn = x.node();
  return ag::make_result(std::move(out), {x}, [xn, masks = std::move(masks), b, h, w, slab](ag::Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t n = 0; n < b; ++n) {
      auto spec = fft2c(detail::grid_from_slab(&self.grad[n * slab], h, w));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t c = 0; c < w; ++c)
          if (masks[n].sampled(c)) spec.at(y, c) = 0.0;
      Tensor tmp({slab});
      detail::grid_to_slab(fft2c(spec, true), tmp.data().data());
      for (std::size_t i = 0; i < slab; ++i) g[n * slab + i] += tmp[i];
    }
  });
}

}  // namespace hifi
