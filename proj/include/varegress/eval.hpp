#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>
#include <vector>

#include "varegress/data.hpp"
#include "varegress/gp.hpp"
#include "varegress/linalg.hpp"
#include "varegress/model.hpp"
#include "varegress/regress.hpp"
#include "varegress/ssim.hpp"

/// Baselines, the sigma sweep and the fine-tuning diagnostics.
namespace varegress::eval {

/// Runs f(i) for i in [0, n) on up to `threads` workers. Callers write results
/// into slot i, so the output order never depends on scheduling. The first
/// exception is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
  return m;
}

// ------------------------------------------------------------------- MOGP

enum class PriorMean { zero, observed };

struct MogpConfig {
  std::vector<double> lengthscales{0.01, 0.015, 0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0};
  double jitter = 1e-6;
  PriorMean prior_mean = PriorMean::zero;
};

struct MogpFit {
  double lengthscale = 1.0;
  double log_likelihood = 0.0;
  std::vector<double> prior;  // per-pixel prior mean
};

namespace detail {

inline std::vector<double> unit_gram(const data::Pairs& obs, double lengthscale, double jitter) {
  const std::size_t n = obs.size();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      k[i * n + j] = gp::kernel(obs.x_row(i), obs.x_row(j), 1.0, 1.0, lengthscale) + (i == j ? jitter : 0.0);
  return k;
}

// Centered N x P response block.
inline std::vector<double> centered(const data::Pairs& obs, const std::vector<double>& prior) {
  std::vector<double> r(obs.y);
  for (std::size_t i = 0; i < obs.size(); ++i)
    for (std::size_t p = 0; p < obs.pixels; ++p) r[i * obs.pixels + p] -= prior[p];
  return r;
}

}  // namespace detail

/// Picks the grid lengthscale maximizing the joint marginal likelihood of all
/// pixels, with the shared signal variance profiled out.
inline MogpFit mogp_fit(const data::Pairs& obs, const MogpConfig& cfg = {}) {
  if (obs.size() < 2) throw Error("mogp: need at least 2 observed pairs");
  bool distinct = false;
  for (std::size_t i = 1; i < obs.size() && !distinct; ++i) distinct = gp::squared_distance(obs.x_row(0), obs.x_row(i)) > 0.0;
  if (!distinct) throw Error("mogp: all observed domain points are identical");
  const std::size_t n = obs.size(), p = obs.pixels;
  MogpFit best;
  best.prior.assign(p, 0.0);
  if (cfg.prior_mean == PriorMean::observed) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t q = 0; q < p; ++q) best.prior[q] += obs.y[i * p + q] / static_cast<double>(n);
  }
  const auto r = detail::centered(obs, best.prior);
  best.log_likelihood = -std::numeric_limits<double>::infinity();
  for (double ell : cfg.lengthscales) {
    const auto chol = linalg::Cholesky::factor(detail::unit_gram(obs, ell, cfg.jitter), n);
    if (!chol) continue;
    auto alpha = r;
    chol->solve_in_place(alpha, p);
    double quad = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) quad += r[k] * alpha[k];
    const double np = static_cast<double>(n * p);
    const double s2 = std::max(quad / np, 1e-300);
    const double ll = -0.5 * np * std::log(s2) - 0.5 * static_cast<double>(p) * chol->log_det();
    if (ll > best.log_likelihood) {
      best.log_likelihood = ll;
      best.lengthscale = ell;
    }
  }
  if (!std::isfinite(best.log_likelihood)) throw FactorizationError("mogp: no grid lengthscale factorizes", cfg.jitter);
  return best;
}

/// Independent per-pixel GP predictions at Q query points (Q x n(X) block),
/// clamped to [0, 1].
inline std::vector<double> mogp_baseline(const data::Pairs& obs, std::span<const double> queries,
                                         const MogpConfig& cfg = {}, MogpFit* fit_out = nullptr) {
  const MogpFit fit = mogp_fit(obs, cfg);
  const std::size_t n = obs.size(), p = obs.pixels, nx = obs.domain_dim;
  if (queries.size() % nx != 0) throw ShapeError("mogp: query block is not Q x n(X)");
  const std::size_t q = queries.size() / nx;
  const auto chol = linalg::Cholesky::factor(detail::unit_gram(obs, fit.lengthscale, cfg.jitter), n);
  auto alpha = detail::centered(obs, fit.prior);
  chol->solve_in_place(alpha, p);
  std::vector<double> out(q * p);
  for (std::size_t j = 0; j < q; ++j) {
    const auto xq = queries.subspan(j * nx, nx);
    for (std::size_t i = 0; i < n; ++i) {
      const double k = gp::kernel(xq, obs.x_row(i), 1.0, 1.0, fit.lengthscale);
      for (std::size_t c = 0; c < p; ++c) out[j * p + c] += k * alpha[i * p + c];
    }
    for (std::size_t c = 0; c < p; ++c) out[j * p + c] = std::clamp(out[j * p + c] + fit.prior[c], 0.0, 1.0);
  }
  if (fit_out) *fit_out = fit;
  return out;
}

// --------------------------------------------------------------------- NN

/// Decodes the latent mean of the observed pair nearest to each query (ties go
/// to the lower index).
inline std::vector<double> nn_baseline(const model::ModelWeights& w, const data::Pairs& obs,
                                       std::span<const double> queries) {
  if (obs.size() == 0) throw Error("nn_baseline: no observed pairs");
  const std::size_t nx = obs.domain_dim;
  if (queries.size() % nx != 0 || nx != w.config().domain_dim) throw ShapeError("nn_baseline: query block is not Q x n(X)");
  const std::size_t q = queries.size() / nx;
  ad::Tape tape;
  const auto g = model::latent_gaussian(tape, ad::Tensor::matrix(obs.size(), nx, obs.x),
                                        ad::Tensor::matrix(obs.size(), obs.pixels, obs.y), w);
  const auto recon = model::decode(tape, g.mean(tape), w).to_vector();
  std::vector<double> out;
  out.reserve(q * obs.pixels);
  for (std::size_t j = 0; j < q; ++j) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const double d = gp::squared_distance(queries.subspan(j * nx, nx), obs.x_row(i));
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    out.insert(out.end(), recon.begin() + static_cast<long>(best * obs.pixels),
               recon.begin() + static_cast<long>((best + 1) * obs.pixels));
  }
  return out;
}

// ------------------------------------------------------------ sigma sweep

/// SSIM per (scale, query) of decode(m_* + scale sqrt(sigma_*) eps) against
/// the ground truth, with eps drawn once per query from `seed`.
inline std::vector<std::vector<double>> sigma_sweep(const model::ModelWeights& w, const data::Pairs& obs,
                                                    std::span<const double> queries, std::span<const double> truth,
                                                    const std::vector<double>& scales, std::uint64_t seed,
                                                    const gp::KernelConfig& kernel = {}, const SSIMConfig& ssim_cfg = {}) {
  const auto& mc = w.config();
  const std::size_t q = queries.size() / mc.domain_dim, px = mc.image.pixels();
  if (truth.size() != q * px) throw ShapeError("sigma_sweep: ground truth must be Q x pixels");
  Rng rng(seed);
  const auto eps = rng.normals(q * mc.latent_dim());
  std::vector<std::vector<double>> table;
  for (double s : scales) {
    const auto r = regress(w, obs, queries, kernel, s, eps);
    std::vector<double> row(q);
    for (std::size_t j = 0; j < q; ++j) {
      row[j] = ssim(std::span(r.images).subspan(j * px, px), truth.subspan(j * px, px), mc.image, ssim_cfg);
    }
    table.push_back(std::move(row));
  }
  return table;
}

// ------------------------------------------------------------ diagnostics

/// KL(N(m1, v1 I) || N(m2, diag s2^2)); v1 is a variance, s2 standard
/// deviations.
inline double gaussian_kl(std::span<const double> m1, double v1, std::span<const double> m2,
                          std::span<const double> s2) {
  if (m1.size() != m2.size() || m2.size() != s2.size()) throw ShapeError("gaussian_kl: dimension mismatch");
  if (!(v1 > 0.0)) throw Error("gaussian_kl: variance must be positive");
  double kl = 0.0;
  for (std::size_t d = 0; d < m1.size(); ++d) {
    const double b = s2[d] * s2[d], diff = m2[d] - m1[d];
    kl += 0.5 * (v1 / b + diff * diff / b - 1.0 + std::log(b / v1));
  }
  return kl;
}

struct Diagnostics {
  std::vector<double> kl;         // per held-out pair
  std::vector<double> nll_ratio;  // per held-out pair; NaN when skipped
};

/// For each held-out pair: the KL between the regression posterior at x
/// (built from the observed pairs) and the reconstruction posterior from
/// (x, y), and |y - D(m_*)|^2 / |y - D(m)|^2. The regression variance is
/// floored at the kernel jitter so the KL stays finite at observed inputs.
inline Diagnostics diagnose(const model::ModelWeights& w, const data::Pairs& obs, const data::Pairs& held_out,
                            const gp::KernelConfig& kernel = {}) {
  const auto& mc = w.config();
  const std::size_t d = mc.latent_dim(), px = mc.image.pixels(), q = held_out.size();
  const auto reg = regress(w, obs, held_out.x, kernel, 0.0);
  ad::Tape tape;
  const auto g = model::latent_gaussian(tape, ad::Tensor::matrix(q, mc.domain_dim, held_out.x),
                                        ad::Tensor::matrix(q, px, held_out.y), w);
  const auto m = g.mean(tape).to_vector();
  const auto s = g.sigma(tape).to_vector();
  const auto recon = model::decode(tape, g.mean(tape), w).to_vector();
  Diagnostics out;
  for (std::size_t j = 0; j < q; ++j) {
    out.kl.push_back(gaussian_kl(std::span(reg.mean).subspan(j * d, d), std::max(reg.variance[j], kernel.jitter),
                                 std::span(m).subspan(j * d, d), std::span(s).subspan(j * d, d)));
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < px; ++c) {
      const double y = held_out.y[j * px + c];
      num += (y - reg.images[j * px + c]) * (y - reg.images[j * px + c]);
      den += (y - recon[j * px + c]) * (y - recon[j * px + c]);
    }
    out.nll_ratio.push_back(den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

/// Mean of the finite ratios.
inline double mean_ratio(const std::vector<double>& ratios) {
  double acc = 0.0;
  std::size_t n = 0;
  for (double r : ratios)
    if (std::isfinite(r)) acc += r, ++n;
  if (n == 0) throw Error("nll_ratio: every pair had a zero denominator");
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------- arm measurements

struct ArmReading {
  std::vector<double> relative_angles;  // one per link
  double brightness = 0.0;
};

/// Reads joint angles off a rendered arm with intensity-weighted centroids:
/// link k's direction is the centroid of an annulus around its proximal joint,
/// with pixels near the already-found links excluded. Brightness is the mean
/// of the 10 brightest pixels.
inline ArmReading read_arm(std::span<const double> img, const ImageShape& s, std::size_t links) {
  if (img.size() != s.pixels()) throw ShapeError("read_arm: image size mismatch");
  const auto len = data::detail::link_lengths(links, s);
  const double unit = data::detail::extent(s) / 32.0;
  ArmReading out;
  std::vector<data::detail::Segment> found;
  double px = data::detail::center_x(s), py = data::detail::center_y(s), prev = 0.0;
  for (std::size_t k = 0; k < links; ++k) {
    const double lo = (k == 0 ? 0.2 : 0.35) * len[k], hi = (k == 0 ? 0.65 : 1.0) * len[k] + 0.5;
    double wx = 0.0, wy = 0.0, wsum = 0.0;
    data::detail::for_each_pixel(s, [&](std::size_t r, std::size_t c, double cx, double cy) {
      const double dist = std::hypot(cx - px, cy - py);
      if (dist < lo || dist > hi) return;
      if (!found.empty() && data::detail::min_distance(found, cx, cy) < 2.5 * unit) return;
      const double v = img[s.index(r, c, 0)];
      wx += v * (cx - px);
      wy += v * (cy - py);
      wsum += v;
    });
    const double theta = wsum > 0.0 ? std::atan2(-wy, wx) : prev;
    double rel = theta - prev;
    rel = std::remainder(rel, 2.0 * std::numbers::pi);
    out.relative_angles.push_back(rel);
    const double qx = px + len[k] * std::cos(theta), qy = py - len[k] * std::sin(theta);
    found.push_back({px, py, qx, qy});
    px = qx;
    py = qy;
    prev = theta;
  }
  std::vector<double> v;
  for (std::size_t r = 0; r < s.height; ++r)
    for (std::size_t c = 0; c < s.width; ++c) v.push_back(img[s.index(r, c, 0)]);
  const std::size_t top = std::min<std::size_t>(10, v.size());
  std::partial_sort(v.begin(), v.begin() + static_cast<long>(top), v.end(), std::greater<>());
  out.brightness = std::accumulate(v.begin(), v.begin() + static_cast<long>(top), 0.0) / static_cast<double>(top);
  return out;
}

/// Wrapped absolute difference of two angles.
inline double angle_error(double a, double b) { return std::abs(std::remainder(a - b, 2.0 * std::numbers::pi)); }

}  // namespace varegress::eval
