#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "varegress/errors.hpp"

namespace varegress::linalg {

/// Lower-triangular Cholesky factor of a dense symmetric positive definite
/// matrix stored row-major. Only the lower triangle of the input is read.
class Cholesky {
 public:
  // Returns nullopt when a pivot is not strictly positive.
  static std::optional<Cholesky> factor(std::span<const double> a, std::size_t n) {
    if (a.size() != n * n) throw ShapeError("Cholesky: matrix size does not match n*n");
    std::vector<double> l(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double diag = a[j * n + j];
      for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
      if (!(diag > 0.0) || !std::isfinite(diag)) return std::nullopt;
      const double ljj = std::sqrt(diag);
      l[j * n + j] = ljj;
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = a[i * n + j];
        for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
        l[i * n + j] = s / ljj;
      }
    }
    return Cholesky(std::move(l), n);
  }

  std::size_t dim() const noexcept { return n_; }
  std::span<const double> lower() const noexcept { return l_; }

  // Solves (L L^T) X = B in place; b is n x cols row-major.
  void solve_in_place(std::span<double> b, std::size_t cols) const {
    if (b.size() != n_ * cols) throw ShapeError("Cholesky::solve: right-hand side has wrong size");
    for (std::size_t c = 0; c < cols; ++c) {
      for (std::size_t i = 0; i < n_; ++i) {
        double s = b[i * cols + c];
        for (std::size_t k = 0; k < i; ++k) s -= l_[i * n_ + k] * b[k * cols + c];
        b[i * cols + c] = s / l_[i * n_ + i];
      }
      for (std::size_t ii = n_; ii-- > 0;) {
        double s = b[ii * cols + c];
        for (std::size_t k = ii + 1; k < n_; ++k) s -= l_[k * n_ + ii] * b[k * cols + c];
        b[ii * cols + c] = s / l_[ii * n_ + ii];
      }
    }
  }

  std::vector<double> solve(std::span<const double> b, std::size_t cols) const {
    std::vector<double> x(b.begin(), b.end());
    solve_in_place(x, cols);
    return x;
  }

  double log_det() const noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += std::log(l_[i * n_ + i]);
    return 2.0 * s;
  }

 private:
  Cholesky(std::vector<double> l, std::size_t n) : l_(std::move(l)), n_(n) {}

  std::vector<double> l_;
  std::size_t n_;
};

}  // namespace varegress::linalg
