#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "varegress/adam.hpp"
#include "varegress/data.hpp"
#include "varegress/gp.hpp"
#include "varegress/model.hpp"

/// Regression-aware mini-batches, the three-term loss and the training and
/// fine-tuning loops.
///
/// Minimized objective per batch:
///   KL(q(z|x,y) || N(0,I)) + lambda sum |y - D(z)|^2 + lambda sum |y_* - D(z_*)|^2
/// where z_* is sampled from the GP posterior built on the encoded pairs of the
/// same sequence.
namespace varegress::training {

using ad::AdamConfig;
using ad::AdamState;
using ad::Tape;
using ad::Tensor;

struct TrainConfig {
  std::size_t K = 4;  // sequences per batch
  std::size_t N = 8;  // encoded pairs per sequence
  std::size_t M = 4;  // regressed pairs per sequence; 0 trains the plain VAE ablation
  std::size_t epochs = 60;
  std::size_t finetune_iters = 50;
  std::uint64_t seed = 0;
  AdamConfig adam{};
  double scale = 1.0;  // latent sampling scale
  gp::KernelConfig kernel{};
  bool freeze_decoder = false;  // fine-tuning only

  std::size_t L() const noexcept { return N + M; }

  void validate() const {
    if (K < 1) throw ConfigError("K must be at least 1");
    if (N < 1) throw ConfigError("N must be at least 1");
    if (scale < 0.0) throw ConfigError("scale must be non-negative");
  }
};

struct BatchSlot {
  bool test = false;          // observed test pairs: encoded split only
  std::size_t sequence = 0;   // dataset index (training slots)
  data::Pairs encoded;
  data::Pairs regressed;      // ground truth for the regression term; never encoded
};

struct Batch {
  std::vector<BatchSlot> slots;

  std::size_t encoded_count() const {
    std::size_t n = 0;
    for (const auto& s : slots) n += s.encoded.size();
    return n;
  }
};

struct LossBreakdown {
  Tensor kl, recon, regression, total;  // scalars on the tape

  double kl_value() const { return kl.item(); }
  double recon_value() const { return recon.item(); }
  double regression_value() const { return regression.item(); }
  double total_value() const { return total.item(); }
};

struct LossRecord {
  std::size_t step = 0;
  double kl = 0.0, recon = 0.0, regression = 0.0, total = 0.0;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& log) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path, "cannot open for writing");
  out << "step,kl,recon,regression,total\n";
  for (const auto& r : log) {
    out << r.step << ',' << kv::format_double(r.kl) << ',' << kv::format_double(r.recon) << ','
        << kv::format_double(r.regression) << ',' << kv::format_double(r.total) << '\n';
  }
  if (!out) throw FormatError(path, "write failed");
}

/// K sequences uniformly without replacement; in each, L pairs uniformly
/// without replacement, the first N encoded and the last M regressed.
inline Batch compose_minibatch(const data::Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ds.size() < cfg.K) {
    throw Error("compose_minibatch: dataset has " + std::to_string(ds.size()) + " sequences, K = " + std::to_string(cfg.K));
  }
  Batch b;
  for (auto k : rng.sample_without_replacement(ds.size(), cfg.K)) {
    const auto& seq = ds.sequences[k];
    if (seq.length() < cfg.L()) {
      throw Error("compose_minibatch: sequence " + seq.id + " has " + std::to_string(seq.length()) +
                  " pairs, L = " + std::to_string(cfg.L()));
    }
    const auto pick = rng.sample_without_replacement(seq.length(), cfg.L());
    BatchSlot slot;
    slot.sequence = k;
    slot.encoded = data::gather(seq, std::span(pick).first(cfg.N));
    slot.regressed = data::gather(seq, std::span(pick).subspan(cfg.N));
    b.slots.push_back(std::move(slot));
  }
  return b;
}

/// Slot 0 holds every observed pair, topped up to L by uniform repetition when
/// fewer than L are observed; it has no regressed split. The other K-1 slots
/// are training slots as in compose_minibatch.
inline Batch compose_finetune_batch(const data::Pairs& observed, const data::Dataset& training_set,
                                    const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (observed.size() == 0) throw Error("compose_finetune_batch: no observed pairs");
  std::vector<std::size_t> rows(observed.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  while (rows.size() < cfg.L()) rows.push_back(rng.below(observed.size()));

  BatchSlot test;
  test.test = true;
  test.encoded = {observed.domain_dim, observed.pixels, {}, {}, {}};
  test.regressed = {observed.domain_dim, observed.pixels, {}, {}, {}};
  for (auto r : rows) {
    test.encoded.index.push_back(observed.index[r]);
    const auto xr = observed.x_row(r);
    const auto yr = observed.y_row(r);
    test.encoded.x.insert(test.encoded.x.end(), xr.begin(), xr.end());
    test.encoded.y.insert(test.encoded.y.end(), yr.begin(), yr.end());
  }
  Batch b;
  b.slots.push_back(std::move(test));
  if (cfg.K > 1) {
    TrainConfig rest = cfg;
    rest.K = cfg.K - 1;
    for (auto& s : compose_minibatch(training_set, rest, rng).slots) b.slots.push_back(std::move(s));
  }
  return b;
}

namespace detail {

inline void check_slot(const BatchSlot& s) {
  if (s.test && s.regressed.size() != 0) throw std::logic_error("test slot carries a regressed split");
  if (s.test) return;
  for (auto r : s.regressed.index) {
    if (std::find(s.encoded.index.begin(), s.encoded.index.end(), r) != s.encoded.index.end()) {
      throw std::logic_error("regressed pair " + std::to_string(r) + " also appears in the encoded split");
    }
  }
}

}  // namespace detail

/// One encoder pass over every encoded pair, one GP per slot with a regressed
/// split, one decoder pass over reconstructions and regressions together.
inline LossBreakdown compute_loss(Tape& tape, const Batch& batch, const model::ModelWeights& w, const TrainConfig& cfg,
                                  Rng& rng) {
  const auto& mc = w.config();
  const std::size_t nx = mc.domain_dim, px = mc.image.pixels(), d = mc.latent_dim();
  const std::size_t b = batch.encoded_count();
  if (b == 0) throw Error("compute_loss: empty batch");
  std::vector<double> xs, ys;
  xs.reserve(b * nx);
  ys.reserve(b * px);
  for (const auto& s : batch.slots) {
    detail::check_slot(s);
    if (s.encoded.domain_dim != nx || s.encoded.pixels != px) throw ShapeError("compute_loss: batch/model shape mismatch");
    xs.insert(xs.end(), s.encoded.x.begin(), s.encoded.x.end());
    ys.insert(ys.end(), s.encoded.y.begin(), s.encoded.y.end());
  }
  const Tensor x = Tensor::matrix(b, nx, std::move(xs));
  const Tensor y = Tensor::matrix(b, px, std::move(ys));

  model::EncoderOutput enc;
  const auto g = model::latent_gaussian(tape, x, y, w, &enc);
  const Tensor kl = model::kl_to_prior(tape, g, mc.kl_y_only);
  const Tensor z = model::sample_latent(tape, g, Tensor::matrix(b, d, rng.normals(b * d)), cfg.scale);

  std::vector<Tensor> to_decode{z};
  std::vector<double> targets(y.values().begin(), y.values().end());
  std::size_t row = 0, regressed_rows = 0;
  for (const auto& s : batch.slots) {
    const std::size_t n = s.encoded.size(), m = s.regressed.size();
    if (m > 0) {
      gp::GPModel gm;
      gm.x = tape.slice(x, 0, row, row + n);
      gm.z = tape.slice(z, 0, row, row + n);
      gm.sigma_k = tape.slice(enc.sigma_k, 0, row, row + n);
      gm.kernel = cfg.kernel;
      const auto post = gp::posterior(tape, gm, Tensor::matrix(m, nx, s.regressed.x));
      to_decode.push_back(gp::sample_posterior(tape, post, Tensor::matrix(m, d, rng.normals(m * d)), cfg.scale));
      targets.insert(targets.end(), s.regressed.y.begin(), s.regressed.y.end());
      regressed_rows += m;
    }
    row += n;
  }
  const Tensor decoded = model::decode(tape, to_decode.size() == 1 ? z : tape.concat(to_decode, 0), w);
  const Tensor target = Tensor::matrix(b + regressed_rows, px, std::move(targets));

  LossBreakdown out;
  out.kl = kl;
  out.recon = model::recon_nll(tape, tape.slice(target, 0, 0, b), tape.slice(decoded, 0, 0, b), mc.recon_weight);
  out.regression = regressed_rows == 0
                       ? Tensor::scalar(0.0)
                       : model::recon_nll(tape, tape.slice(target, 0, b, b + regressed_rows),
                                          tape.slice(decoded, 0, b, b + regressed_rows), mc.recon_weight);
  out.total = tape.add(tape.add(out.kl, out.recon), out.regression);
  return out;
}

/// Steps per epoch: enough batches to touch every training pair once in
/// expectation.
inline std::size_t steps_per_epoch(const data::Dataset& ds, const TrainConfig& cfg) {
  const std::size_t per_batch = cfg.K * cfg.L();
  return (ds.total_pairs() + per_batch - 1) / per_batch;
}

namespace detail {

inline LossRecord optimize_step(const Batch& batch, const model::ModelWeights& w, std::vector<Tensor>& params,
                                AdamState& adam, const TrainConfig& cfg, Rng& noise, std::size_t step) {
  Tape tape;
  LossBreakdown loss;
  try {
    loss = compute_loss(tape, batch, w, cfg, noise);
    tape.backward(loss.total);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(step) + ": " + e.what());
  } catch (const FactorizationError& e) {
    throw NumericError("step " + std::to_string(step) + ": " + e.what());
  }
  adam.step(params);
  return {step, loss.kl_value(), loss.recon_value(), loss.regression_value(), loss.total_value()};
}

}  // namespace detail

struct TrainResult {
  model::ModelWeights weights;
  std::vector<LossRecord> log;
};

inline TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const model::ModelWeights& initial,
                         const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  if (ds.domain_dim != initial.config().domain_dim || !(ds.image == initial.config().image)) {
    throw ShapeError("train: dataset " + ds.image.to_string() + " does not match model " +
                     initial.config().image.to_string());
  }
  TrainResult r{initial.clone(), {}};
  auto params = r.weights.parameters();
  AdamState adam(params, cfg.adam);
  Rng batches(derive_seed(cfg.seed, 1)), noise(derive_seed(cfg.seed, 2));
  const std::size_t total = cfg.epochs * steps_per_epoch(ds, cfg);
  r.log.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const Batch batch = compose_minibatch(ds, cfg, batches);
    r.log.push_back(detail::optimize_step(batch, r.weights, params, adam, cfg, noise, step));
    if (on_step) on_step(r.log.back());
  }
  return r;
}

/// finetune_iters steps on batches from compose_finetune_batch. The callback
/// sees the weights after each iteration (iteration 0 is the starting point).
inline model::ModelWeights finetune(
    const data::Pairs& observed, const data::Dataset& training_set, const TrainConfig& cfg,
    const model::ModelWeights& initial,
    const std::function<void(std::size_t, const model::ModelWeights&)>& on_iteration = {},
    std::vector<LossRecord>* log = nullptr) {
  cfg.validate();
  model::ModelWeights w = initial.clone();
  auto params = w.parameters(!cfg.freeze_decoder);
  AdamState adam(params, cfg.adam);
  Rng batches(derive_seed(cfg.seed, 3)), noise(derive_seed(cfg.seed, 4));
  if (on_iteration) on_iteration(0, w);
  for (std::size_t it = 0; it < cfg.finetune_iters; ++it) {
    const Batch batch = compose_finetune_batch(observed, training_set, cfg, batches);
    const auto rec = detail::optimize_step(batch, w, params, adam, cfg, noise, it);
    if (log) log->push_back(rec);
    // Frozen parameters still collect gradient on the tape; drop it.
    if (cfg.freeze_decoder)
      for (auto& t : w.decoder_parameters()) t.zero_grad();
    if (on_iteration) on_iteration(it + 1, w);
  }
  return w;
}

}  // namespace varegress::training
