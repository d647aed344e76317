/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>
#include <span>
#include <tuple>

#include "hifimamba/error.hpp"

namespace hifi::fft {

using cplx = std::complex<double>;

namespace detail {

// FFTW planning is not thread-safe; execution on a finished plan is.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int h, int w, int sign) {
    std::lock_guard lock(mu_);
    auto key = std::make_tuple(h, w, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    auto* buf = fftw_alloc_complex(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    fftw_plan p = fftw_plan_dft_2d(h, w, buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(buf);
    if (!p) throw Error(ErrorClass::numeric, "FFTW could not plan a " + std::to_string(h) + "x" + std::to_string(w) + " transform");
    plans_.emplace(key, p);
    return p;
  }

  ~PlanCache() {
    for (auto& [_, p] : plans_) fftw_destroy_plan(p);
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

}  // namespace detail

/// Unnormalised in-place 2D DFT of a row-major h x w grid.
inline void dft2_inplace(std::span<cplx> data, std::size_t h, std::size_t w, bool inverse) {
  if (data.size() != h * w) throw ShapeMismatch("dft2 buffer size");
  fftw_plan p = detail::PlanCache::instance().get(static_cast<int>(h), static_cast<int>(w),
                                                  inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  auto* ptr = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(p, ptr, ptr);
}

/// Circular shift by (dy, dx), out of place.
inline void roll2(std::span<const cplx> in, std::span<cplx> out, std::size_t h, std::size_t w, std::size_t dy,
                  std::size_t dx) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[((y + dy) % h) * w + (x + dx) % w] = in[y * w + x];
}

}  // namespace hifi::fft
