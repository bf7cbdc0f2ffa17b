#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "varegress/autodiff.hpp"
#include "varegress/linalg.hpp"

/// Differentiable Gaussian-process regression in latent space.
///
/// Kernel: k(x_i, x_j) = sqrt(s_i s_j) exp(-|x_i - x_j|^2 / l^2) with one
/// encoder-produced scale s per observed point. The query point has no image,
/// so its scale is the mean of the observed scales. Posterior over the N
/// observed latent rows Z (N x D):
///   m_*     = K_* K^{-1} Z
///   sigma_* = K_** - K_* K^{-1} K_*^T   (isotropic, clamped at 0)
/// Everything is recorded on a tape, so gradients reach Z and the scales.
namespace varegress::gp {

using ad::Tape;
using ad::Tensor;

struct KernelConfig {
  double lengthscale = 1.0;
  double jitter = 1e-6;      // initial diagonal jitter
  double max_jitter = 1e-2;  // doubling stops here
};

inline double squared_distance(std::span<const double> a, std::span<const double> b, double lengthscale = 1.0) {
  if (a.size() != b.size()) throw ShapeError("kernel: domain dimension mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) / lengthscale;
    d2 += d * d;
  }
  return d2;
}

inline double kernel(std::span<const double> xi, std::span<const double> xj, double si, double sj,
                     double lengthscale = 1.0) {
  if (!(si > 0.0) || !(sj > 0.0)) throw Error("kernel: scales must be positive");
  return std::sqrt(si * sj) * std::exp(-squared_distance(xi, xj, lengthscale));
}

/// Observed domain points, latent rows and per-point kernel scales.
struct GPModel {
  Tensor x;        // N x n(X), constant
  Tensor z;        // N x D
  Tensor sigma_k;  // N x 1, positive
  KernelConfig kernel{};

  std::size_t size() const { return x.rows(); }

  void validate() const {
    if (x.rank() != 2 || z.rank() != 2 || sigma_k.rank() != 2) throw ShapeError("GPModel: tensors must be matrices");
    if (x.rows() == 0 || z.rows() != x.rows() || sigma_k.rows() != x.rows() || sigma_k.cols() != 1) {
      throw ShapeError("GPModel: row counts of x, z and sigma_k must agree");
    }
    for (double s : sigma_k.values())
      if (!(s > 0.0)) throw Error("GPModel: sigma_k entries must be positive");
    if (!(kernel.jitter > 0.0) || !(kernel.lengthscale > 0.0)) throw Error("GPModel: jitter and lengthscale must be positive");
  }
};

struct GPPosterior {
  Tensor mean;      // M x D
  Tensor variance;  // M x 1, non-negative
};

struct Gram {
  Tensor matrix;  // K + jitter I, on the tape
  double jitter;
};

namespace detail {

// exp(-|a_i - b_j|^2 / l^2) for rows of a (Na x n) and b (Nb x n).
inline std::vector<double> exp_distance(const Tensor& a, const Tensor& b, double lengthscale) {
  const std::size_t na = a.rows(), nb = b.rows(), n = a.cols();
  if (b.cols() != n) throw ShapeError("kernel: domain dimension mismatch");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(na * nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j)
      out[i * nb + j] = std::exp(-squared_distance(av.subspan(i * n, n), bv.subspan(j * n, n), lengthscale));
  return out;
}

}  // namespace detail

/// K with K_ij = kernel(x_i, x_j, s_i, s_j), plus the smallest jitter in
/// {j0, 2 j0, 4 j0, ...} <= max_jitter for which K + jitter I factorizes.
inline Gram gram(Tape& tape, const GPModel& model) {
  model.validate();
  const std::size_t n = model.size();
  const Tensor e = Tensor::matrix(n, n, detail::exp_distance(model.x, model.x, model.kernel.lengthscale));
  const Tensor root = tape.sqrt(model.sigma_k);
  const Tensor k = tape.multiply(tape.matmul(root, tape.transpose(root)), e);

  double jitter = model.kernel.jitter;
  std::vector<double> trial(k.values().begin(), k.values().end());
  for (;;) {
    for (std::size_t i = 0; i < n; ++i) trial[i * n + i] = k.values()[i * n + i] + jitter;
    if (linalg::Cholesky::factor(trial, n)) break;
    if (jitter * 2.0 > model.kernel.max_jitter) {
      throw FactorizationError("gram: kernel matrix is not positive definite", jitter);
    }
    jitter *= 2.0;
  }
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = jitter;
  return {tape.add(k, Tensor::matrix(n, n, std::move(eye))), jitter};
}

/// Posterior at M query points (x_star is M x n(X)).
inline GPPosterior posterior(Tape& tape, const GPModel& model, const Tensor& x_star) {
  model.validate();
  if (x_star.rank() != 2 || x_star.cols() != model.x.cols()) {
    throw ShapeError("posterior: query must be M x " + std::to_string(model.x.cols()));
  }
  const std::size_t m = x_star.rows();
  const std::size_t n = model.size();
  const Gram g = gram(tape, model);

  const Tensor root = tape.sqrt(model.sigma_k);      // N x 1
  const Tensor mean_scale = tape.mean(model.sigma_k);  // s_* for the query
  const Tensor e_star = Tensor::matrix(m, n, detail::exp_distance(x_star, model.x, model.kernel.lengthscale));
  const Tensor scales = tape.broadcast_to(tape.transpose(root), {m, n});
  const Tensor k_star =
      tape.multiply(tape.multiply(scales, e_star), tape.sqrt(mean_scale));  // M x N

  const Tensor alpha = tape.spd_solve(g.matrix, model.z);  // N x D
  const Tensor mean = tape.matmul(k_star, alpha);            // M x D

  const Tensor beta = tape.spd_solve(g.matrix, tape.transpose(k_star));        // N x M
  const Tensor reduce = tape.sum(tape.multiply(k_star, tape.transpose(beta)), 1);  // M x 1
  const Tensor variance = tape.relu(tape.subtract(tape.broadcast_to(mean_scale, {m, 1}), reduce));
  return {mean, variance};
}

inline GPPosterior posterior(Tape& tape, const GPModel& model, std::span<const double> x_star) {
  return posterior(tape, model, Tensor::matrix(1, x_star.size(), {x_star.begin(), x_star.end()}));
}

/// z_* = m_* + scale * sqrt(sigma_*) * noise; noise is M x D.
inline Tensor sample_posterior(Tape& tape, const GPPosterior& p, const Tensor& noise, double scale) {
  if (scale < 0.0) throw Error("sample_posterior: scale must be non-negative");
  if (noise.shape() != p.mean.shape()) {
    throw ShapeError("sample_posterior: noise shape " + ad::shape_string(noise.shape()) + " differs from mean " +
                     ad::shape_string(p.mean.shape()));
  }
  if (scale == 0.0) return p.mean;
  const Tensor sd = tape.broadcast_to(tape.scale(tape.sqrt(p.variance), scale), p.mean.shape());
  return tape.add(p.mean, tape.multiply(sd, noise));
}

}  // namespace varegress::gp
