#pragma once

#include <cstdint>
#include <vector>

#include "varegress/data.hpp"
#include "varegress/gp.hpp"
#include "varegress/model.hpp"

/// Inference: encode the observed pairs, regress latents at query points with
/// the GP, decode.
namespace varegress {

struct Regression {
  std::size_t queries = 0;
  std::vector<double> mean;      // Q x D posterior latent means
  std::vector<double> variance;  // Q
  std::vector<double> images;    // Q x pixels
};

/// The GP is built on the observed latent means (no sampling on the observed
/// side). The query latent is m_* + scale * sqrt(sigma_*) * noise, with noise a
/// Q x D block of standard normals; noise may be empty when scale is 0.
inline Regression regress(const model::ModelWeights& w, const data::Pairs& observed, std::span<const double> queries,
                          const gp::KernelConfig& kernel, double scale, std::span<const double> noise = {}) {
  const auto& mc = w.config();
  const std::size_t nx = mc.domain_dim, d = mc.latent_dim();
  if (observed.size() == 0) throw Error("regress: no observed pairs");
  if (queries.size() % nx != 0 || queries.empty()) throw ShapeError("regress: query block is not Q x n(X)");
  const std::size_t q = queries.size() / nx;
  ad::Tape tape;
  const ad::Tensor x = ad::Tensor::matrix(observed.size(), nx, observed.x);
  const ad::Tensor y = ad::Tensor::matrix(observed.size(), mc.image.pixels(), observed.y);
  model::EncoderOutput enc;
  const auto g = model::latent_gaussian(tape, x, y, w, &enc);
  gp::GPModel gm{x, g.mean(tape), enc.sigma_k, kernel};
  const auto post = gp::posterior(tape, gm, ad::Tensor::matrix(q, nx, {queries.begin(), queries.end()}));
  ad::Tensor z = post.mean;
  if (scale != 0.0) {
    if (noise.size() != q * d) throw ShapeError("regress: noise must be Q x D");
    z = gp::sample_posterior(tape, post, ad::Tensor::matrix(q, d, {noise.begin(), noise.end()}), scale);
  }
  return {q, post.mean.to_vector(), post.variance.to_vector(), model::decode(tape, z, w).to_vector()};
}

}  // namespace varegress
