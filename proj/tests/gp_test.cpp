#include <cmath>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "test_support.hpp"
#include "varegress/gp.hpp"

namespace varegress::gp {
namespace {

using testing::gradient_check;
using testing::random_tensor;

GPModel make_model(std::vector<double> x, std::size_t dx, std::vector<double> z, std::size_t dz,
                   std::vector<double> s, double jitter = 1e-6) {
  const std::size_t n = s.size();
  GPModel m;
  m.x = Tensor::matrix(n, dx, std::move(x));
  m.z = Tensor::matrix(n, dz, std::move(z), true);
  m.sigma_k = Tensor::matrix(n, 1, std::move(s), true);
  m.kernel.jitter = jitter;
  return m;
}

GPModel random_model(Rng& rng, std::size_t n, std::size_t dx, std::size_t dz, double spread = 3.0) {
  std::vector<double> x(n * dx), z(n * dz), s(n);
  for (auto& v : x) v = rng.uniform(0.0, spread);
  for (auto& v : z) v = rng.uniform(-2.0, 2.0);
  for (auto& v : s) v = rng.uniform(0.3, 2.0);
  return make_model(std::move(x), dx, std::move(z), dz, std::move(s));
}

TEST(Kernel, Examples) {
  const std::vector<double> zero{0.0}, one{1.0};
  EXPECT_DOUBLE_EQ(kernel(zero, zero, 1.0, 1.0), 1.0);
  EXPECT_NEAR(kernel(zero, one, 1.0, 1.0), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(kernel(zero, one, 1.0, 1.0), 0.3679, 1e-4);
}

TEST(Kernel, Symmetric) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    std::vector<double> b{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const double s = rng.uniform(0.1, 3), t = rng.uniform(0.1, 3);
    EXPECT_EQ(kernel(a, b, s, t), kernel(b, a, t, s));
  }
}

TEST(Kernel, Errors) {
  const std::vector<double> a{0.0}, b{0.0, 1.0};
  EXPECT_THROW(kernel(a, b, 1.0, 1.0), ShapeError);
  EXPECT_THROW(kernel(a, a, 0.0, 1.0), Error);
  EXPECT_THROW(kernel(a, a, 1.0, -1.0), Error);
}

TEST(Gram, SinglePoint) {
  Tape tape;
  const auto g = gram(tape, make_model({0.0}, 1, {2.0}, 1, {1.0}));
  EXPECT_DOUBLE_EQ(g.matrix.item(), 1.0 + 1e-6);
  EXPECT_EQ(g.jitter, 1e-6);
}

TEST(Gram, MatchesDoubleLoopAndIsSymmetric) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const GPModel m = random_model(rng, 3, 2, 2);
    Tape tape;
    const auto g = gram(tape, m);
    const auto x = m.x.values();
    const auto s = m.sigma_k.values();
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        const double d0 = x[2 * i] - x[2 * j], d1 = x[2 * i + 1] - x[2 * j + 1];
        double expected = std::sqrt(s[i] * s[j]) * std::exp(-(d0 * d0 + d1 * d1));
        if (i == j) expected += g.jitter;
        EXPECT_NEAR(g.matrix.at(i, j), expected, 1e-12);
        EXPECT_EQ(g.matrix.at(i, j), g.matrix.at(j, i));
      }
    }
  }
}

TEST(Gram, JitterEscalatesThenReportsFailure) {
  // Three coincident points: K = 1 1^T is singular.
  GPModel m = make_model({0.0, 0.0, 0.0}, 1, {1.0, 1.0, 1.0}, 1, {1.0, 1.0, 1.0}, 1e-300);
  {
    Tape tape;
    const auto g = gram(tape, m);
    EXPECT_GT(g.jitter, 1e-300);
    EXPECT_LE(g.jitter, m.kernel.max_jitter);
  }
  m.kernel.max_jitter = 1e-299;
  Tape tape;
  try {
    gram(tape, m);
    FAIL() << "expected FactorizationError";
  } catch (const FactorizationError& e) {
    EXPECT_GT(e.jitter(), 0.0);
  }
}

TEST(Posterior, SinglePointHandEvaluation) {
  const double j = 1e-6;
  Tape tape;
  const auto p = posterior(tape, make_model({0.0}, 1, {2.0}, 1, {1.0}, j), std::vector<double>{1.0});
  const double k = std::exp(-1.0);
  EXPECT_NEAR(p.mean.item(), k * 2.0 / (1.0 + j), 1e-10);
  EXPECT_NEAR(p.mean.item(), 0.7358, 1e-4);
  EXPECT_NEAR(p.variance.item(), 1.0 - k * k / (1.0 + j), 1e-10);
}

TEST(Posterior, TwoPointHandEvaluation) {
  // Explicit 2x2 inverse written out by hand.
  const double j = 1e-6;
  const double x1 = 0.2, x2 = 1.1, s1 = 0.7, s2 = 1.6, xs = 0.5;
  const double z1 = 1.5, z2 = -0.5;
  Tape tape;
  const auto p = posterior(tape, make_model({x1, x2}, 1, {z1, z2}, 1, {s1, s2}, j), std::vector<double>{xs});
  const double k12 = std::sqrt(s1 * s2) * std::exp(-(x1 - x2) * (x1 - x2));
  const double a = s1 + j, d = s2 + j, det = a * d - k12 * k12;
  const double sbar = 0.5 * (s1 + s2);
  const double ks1 = std::sqrt(sbar * s1) * std::exp(-(xs - x1) * (xs - x1));
  const double ks2 = std::sqrt(sbar * s2) * std::exp(-(xs - x2) * (xs - x2));
  const double w1 = (ks1 * d - ks2 * k12) / det;
  const double w2 = (-ks1 * k12 + ks2 * a) / det;
  EXPECT_NEAR(p.mean.item(), w1 * z1 + w2 * z2, 1e-10);
  EXPECT_NEAR(p.variance.item(), sbar - (w1 * ks1 + w2 * ks2), 1e-10);
}

TEST(Posterior, InterpolatesObservedPoints) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    // Well separated inputs keep K well conditioned; equal scales make the
    // query scale match every observed scale.
    const std::size_t n = 5;
    std::vector<double> x(n), z(n * 3), s(n, rng.uniform(0.5, 2));
    for (std::size_t i = 0; i < n; ++i) x[i] = 1.5 * static_cast<double>(i) + rng.uniform(-0.2, 0.2);
    for (auto& v : z) v = rng.uniform(-2, 2);
    const GPModel m = make_model(x, 1, z, 3, s);
    Tape tape;
    const auto p = posterior(tape, m, m.x);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(p.mean.at(i, d), z[i * 3 + d], 1e-4);
      EXPECT_LT(p.variance.at(i, 0), 1e-4);
    }
  }
}

TEST(Posterior, UnequalScalesRescaleObservedPoints) {
  // At an observed input the query row is sqrt(s_bar / s_i) times row i of K.
  Rng rng(15);
  const std::size_t n = 4;
  std::vector<double> x(n), z(n * 2), s(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 2.0 * static_cast<double>(i);
  for (auto& v : z) v = rng.uniform(-2, 2);
  for (auto& v : s) v = rng.uniform(0.5, 2);
  const GPModel m = make_model(x, 1, z, 2, s);
  const double sbar = (s[0] + s[1] + s[2] + s[3]) / 4.0;
  Tape tape;
  const auto p = posterior(tape, m, m.x);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(p.mean.at(i, d), std::sqrt(sbar / s[i]) * z[i * 2 + d], 1e-4);
}

TEST(Posterior, VarianceNeverNegative) {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    const GPModel m = random_model(rng, n, 1 + rng.below(3), 2, rng.uniform(0.1, 3.0));
    Tape tape;
    const Tensor q = random_tensor({3, m.x.cols()}, rng, 0.0, 3.0, false);
    const auto p = posterior(tape, m, tape.concat({q, m.x}, 0));
    for (double v : p.variance.values()) EXPECT_GE(v, 0.0);
  }
}

TEST(Posterior, MeanIsLinearInLatents) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const GPModel m1 = random_model(rng, 6, 2, 3);
    GPModel m2 = m1;
    m2.z = random_tensor({6, 3}, rng);
    GPModel mix = m1;
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    std::vector<double> zmix(18);
    for (std::size_t k = 0; k < 18; ++k) zmix[k] = alpha * m1.z.values()[k] + beta * m2.z.values()[k];
    mix.z = Tensor::matrix(6, 3, zmix);
    const Tensor q = random_tensor({4, 2}, rng, 0, 3, false);
    Tape tape;
    const auto p1 = posterior(tape, m1, q), p2 = posterior(tape, m2, q), pm = posterior(tape, mix, q);
    for (std::size_t k = 0; k < 12; ++k) {
      EXPECT_NEAR(pm.mean.values()[k], alpha * p1.mean.values()[k] + beta * p2.mean.values()[k], 1e-10);
    }
  }
}

TEST(Posterior, SolveMatchesExplicitInverse) {
  Rng rng(8);
  for (std::size_t n = 1; n <= 10; ++n) {
    const GPModel m = random_model(rng, n, 2, 3, 4.0);
    const Tensor q = random_tensor({5, 2}, rng, 0, 4, false);
    Tape tape;
    const auto p = posterior(tape, m, q);
    // Oracle: Eigen explicit inverse on the same matrices.
    const auto x = m.x.values(), s = m.sigma_k.values();
    Eigen::MatrixXd k(n, n), ks(5, n), z(n, 3);
    double sbar = 0.0;
    for (std::size_t i = 0; i < n; ++i) sbar += s[i] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t jj = 0; jj < n; ++jj) {
        k(i, jj) = kernel(x.subspan(2 * i, 2), x.subspan(2 * jj, 2), s[i], s[jj]) + (i == jj ? 1e-6 : 0.0);
      }
      for (std::size_t d = 0; d < 3; ++d) z(i, d) = m.z.at(i, d);
      for (std::size_t r = 0; r < 5; ++r) ks(r, i) = kernel(q.values().subspan(2 * r, 2), x.subspan(2 * i, 2), sbar, s[i]);
    }
    const Eigen::MatrixXd kinv = k.inverse();
    const Eigen::MatrixXd mean = ks * kinv * z;
    const Eigen::MatrixXd var = (ks * kinv * ks.transpose()).diagonal();
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(p.mean.at(r, d), mean(r, d), 1e-8) << "n=" << n;
      EXPECT_NEAR(p.variance.at(r, 0), std::max(0.0, sbar - var(r)), 1e-8) << "n=" << n;
    }
  }
}

TEST(Posterior, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    GPModel m = random_model(rng, 4, 2, 3, 2.0);
    const Tensor q = random_tensor({2, 2}, rng, 0, 2, false);
    auto f = [&](Tape& t) {
      const auto p = posterior(t, m, q);
      return t.add(t.sum(t.square(p.mean)), t.sum(p.variance));
    };
    EXPECT_LT(gradient_check(f, {m.z, m.sigma_k}), 1e-4) << "trial " << trial;
  }
}

TEST(Posterior, DimensionMismatch) {
  const GPModel m = make_model({0.0, 1.0}, 1, {1.0, 2.0}, 1, {1.0, 1.0});
  Tape tape;
  EXPECT_THROW(posterior(tape, m, std::vector<double>{0.0, 1.0}), ShapeError);
  GPModel bad = m;
  bad.z = Tensor::matrix(3, 1, {1, 2, 3});
  EXPECT_THROW(posterior(tape, bad, std::vector<double>{0.0}), ShapeError);
}

TEST(SamplePosterior, ScaleZeroAndZeroVariance) {
  Tape tape;
  const GPPosterior p{Tensor::matrix(1, 3, {1, 2, 3}), Tensor::matrix(1, 1, {0.0})};
  const Tensor noise = Tensor::matrix(1, 3, {0.3, -1.2, 2.0});
  EXPECT_EQ(sample_posterior(tape, p, noise, 1.0).to_vector(), p.mean.to_vector());
  const GPPosterior q{p.mean, Tensor::matrix(1, 1, {0.5})};
  EXPECT_EQ(sample_posterior(tape, q, noise, 0.0).to_vector(), p.mean.to_vector());
  EXPECT_THROW(sample_posterior(tape, q, Tensor::matrix(1, 2, {0, 0}), 1.0), ShapeError);
}

TEST(SamplePosterior, MonteCarloVariance) {
  const double var = 0.37;
  const std::size_t draws = 100000;
  Rng rng(10);
  Tape tape;
  const GPPosterior p{Tensor::matrix(draws, 1, std::vector<double>(draws, 0.5)),
                      Tensor::matrix(draws, 1, std::vector<double>(draws, var))};
  const Tensor z = sample_posterior(tape, p, Tensor::matrix(draws, 1, rng.normals(draws)), 1.0);
  double mean = 0.0, sq = 0.0;
  for (double v : z.values()) mean += v;
  mean /= static_cast<double>(draws);
  for (double v : z.values()) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(sq / static_cast<double>(draws - 1), var, 0.03 * var);
}

}  // namespace
}  // namespace varegress::gp
