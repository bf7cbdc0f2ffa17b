#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "varegress/errors.hpp"
#include "varegress/image.hpp"

namespace varegress::eval {

struct SSIMConfig {
  std::size_t window = 8;  // square, sliding with stride 1
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const noexcept { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const noexcept { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  void validate(const ImageShape& s) const {
    if (window == 0 || window > s.height || window > s.width) {
      throw Error("ssim: window " + std::to_string(window) + " does not fit image " + s.to_string());
    }
    if (!(c1() > 0.0) || !(c2() > 0.0)) throw Error("ssim: stabilizers must be positive");
  }
};

namespace detail {

// SSIM of the window with top-left corner (r, c) in channel ch.
inline double window_ssim(std::span<const double> a, std::span<const double> b, const ImageShape& s,
                          const SSIMConfig& cfg, std::size_t r, std::size_t c, std::size_t ch) {
  const std::size_t w = cfg.window;
  const double n = static_cast<double>(w * w);
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < w; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t k = s.index(r + i, c + j, ch);
      sa += a[k];
      sb += b[k];
      saa += a[k] * a[k];
      sbb += b[k] * b[k];
      sab += a[k] * b[k];
    }
  }
  const double ma = sa / n, mb = sb / n;
  const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
  return ((2 * ma * mb + cfg.c1()) * (2 * cov + cfg.c2())) / ((ma * ma + mb * mb + cfg.c1()) * (va + vb + cfg.c2()));
}

inline void check_pair(std::span<const double> a, std::span<const double> b, const ImageShape& s) {
  if (a.size() != s.pixels() || b.size() != s.pixels()) {
    throw ShapeError("ssim: images must both hold " + std::to_string(s.pixels()) + " values");
  }
}

}  // namespace detail

/// Mean local SSIM over every window position and channel.
inline double ssim(std::span<const double> a, std::span<const double> b, const ImageShape& s,
                   const SSIMConfig& cfg = {}) {
  detail::check_pair(a, b, s);
  cfg.validate(s);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t ch = 0; ch < s.channels; ++ch)
    for (std::size_t r = 0; r + cfg.window <= s.height; ++r)
      for (std::size_t c = 0; c + cfg.window <= s.width; ++c, ++count) acc += detail::window_ssim(a, b, s, cfg, r, c, ch);
  return acc / static_cast<double>(count);
}

/// Mean local SSIM over windows at least half covered by the H x W mask.
inline double masked_ssim(std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> mask,
                          const ImageShape& s, const SSIMConfig& cfg = {}) {
  detail::check_pair(a, b, s);
  cfg.validate(s);
  if (mask.size() != s.height * s.width) throw ShapeError("masked_ssim: mask must be H x W");
  const std::size_t w = cfg.window;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + w <= s.height; ++r) {
    for (std::size_t c = 0; c + w <= s.width; ++c) {
      std::size_t covered = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) covered += mask[(r + i) * s.width + c + j] ? 1 : 0;
      if (2 * covered < w * w) continue;
      for (std::size_t ch = 0; ch < s.channels; ++ch, ++count) acc += detail::window_ssim(a, b, s, cfg, r, c, ch);
    }
  }
  if (count == 0) throw Error("masked_ssim: no window is at least half covered by the mask");
  return acc / static_cast<double>(count);
}

}  // namespace varegress::eval
