#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "varegress/config.hpp"
#include "varegress/data.hpp"
#include "varegress/eval.hpp"
#include "varegress/regress.hpp"
#include "varegress/training.hpp"

// The evaluation pipeline shared by the command-line tool and the benchmark
// checks: fine-tune on a test sequence's observed frames, regress the
// queries, score every method.
namespace varegress::experiment {

inline constexpr const char* kMethods[] = {"proposed", "r-vae", "mogp", "nn"};

// Seed streams; every derived quantity draws from its own.
enum Stream : std::uint64_t {
  train_data = 10,
  test_data = 11,
  init = 20,
  split = 30,
  finetune = 40,
  sweep = 50,
};

inline model::ModelConfig model_config(const config::RunConfig& cfg, const data::Dataset& ds) {
  model::ModelConfig mc = cfg.model;
  mc.image = ds.image;
  mc.domain_dim = ds.domain_dim;
  return mc;
}

inline training::TrainConfig train_config(const config::RunConfig& cfg, bool ablation) {
  training::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  if (ablation) tc.M = 0;
  return tc;
}

inline const data::Sequence& find_sequence(const data::Dataset& ds, const std::string& key) {
  for (const auto& s : ds.sequences)
    if (s.id == key) return s;
  if (!key.empty() && std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    const auto i = kv::parse_uint(key, "sequence");
    if (i < ds.size()) return ds.sequences[i];
  }
  throw Error("no sequence '" + key + "' in dataset " + ds.name);
}

inline data::Split split_for(const data::Sequence& seq, std::size_t index, const config::RunConfig& cfg) {
  return data::split_observed(seq.length(), cfg.observed, cfg.split, derive_seed(derive_seed(cfg.seed, split), index));
}

struct QuerySet {
  std::size_t domain_dim = 1;
  std::vector<double> x;
  std::vector<double> truth;
  std::vector<std::vector<std::uint8_t>> masks;

  std::size_t size() const noexcept { return x.size() / domain_dim; }
};

/// Scalar domains with a query count: that many evenly spaced points on
/// [0, 1], with ground truth re-rendered from the sequence's parameters.
/// Otherwise the held-out frames themselves.
inline QuerySet make_queries(const data::Sequence& seq, const data::Split& split, std::size_t count) {
  QuerySet q;
  q.domain_dim = seq.domain_dim;
  if (seq.domain_dim == 1 && count > 0) {
    for (std::size_t j = 0; j < count; ++j) {
      const double x = count == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(count - 1);
      const std::vector<double> xv{x};
      q.x.push_back(x);
      const auto img = data::render_frame(seq, xv);
      q.truth.insert(q.truth.end(), img.begin(), img.end());
      q.masks.push_back(data::foreground_mask(seq, xv));
    }
    return q;
  }
  for (auto t : split.held_out) {
    const auto x = seq.x_row(t), y = seq.y_row(t);
    q.x.insert(q.x.end(), x.begin(), x.end());
    q.truth.insert(q.truth.end(), y.begin(), y.end());
    q.masks.push_back(data::foreground_mask(seq, x));
  }
  return q;
}

struct Scores {
  std::vector<double> full, masked;  // per query
};

inline Scores score(std::span<const double> images, const QuerySet& q, const ImageShape& shape,
                    const eval::SSIMConfig& cfg) {
  const std::size_t px = shape.pixels();
  Scores s;
  for (std::size_t j = 0; j < q.size(); ++j) {
    const auto img = images.subspan(j * px, px);
    const auto gt = std::span<const double>(q.truth).subspan(j * px, px);
    s.full.push_back(eval::ssim(img, gt, shape, cfg));
    s.masked.push_back(eval::masked_ssim(img, gt, q.masks[j], shape, cfg));
  }
  return s;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw Error("mean of an empty list");
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

/// Per fine-tuning iteration (0 = before), diagnostics on held-out frames.
using DiagnosticTrace = std::vector<eval::Diagnostics>;

struct FinetuneResult {
  model::ModelWeights weights;
  DiagnosticTrace trace;
  std::vector<training::LossRecord> log;
};

inline FinetuneResult finetune_with_trace(const model::ModelWeights& w, const data::Pairs& obs,
                                          const data::Pairs& held_out, const data::Dataset& train_set,
                                          training::TrainConfig tc, std::uint64_t seed) {
  tc.seed = seed;
  DiagnosticTrace trace;
  std::vector<training::LossRecord> log;
  auto weights = training::finetune(
      obs, train_set, tc, w,
      [&](std::size_t, const model::ModelWeights& cur) {
        if (held_out.size() > 0) trace.push_back(eval::diagnose(cur, obs, held_out, tc.kernel));
      },
      &log);
  return {std::move(weights), std::move(trace), std::move(log)};
}

struct SequenceResult {
  std::string id;
  std::map<std::string, Scores> methods;
  std::map<std::string, std::vector<double>> images;  // Q x pixels at scale 0
  // [seed][scale] -> per-query SSIM
  std::vector<std::vector<std::vector<double>>> sweep_proposed, sweep_ablation;
  DiagnosticTrace trace_proposed, trace_ablation;
  QuerySet queries;
};

inline SequenceResult evaluate_sequence(const model::ModelWeights& proposed, const model::ModelWeights& ablation,
                                        const data::Dataset& train_set, const data::Sequence& seq,
                                        std::size_t index, const config::RunConfig& cfg) {
  const auto sp = split_for(seq, index, cfg);
  const auto obs = data::gather(seq, sp.observed);
  const auto held = data::gather(seq, sp.held_out);
  SequenceResult r;
  r.id = seq.id;
  r.queries = make_queries(seq, sp, cfg.queries);
  const auto& q = r.queries;
  const std::uint64_t ft_seed = derive_seed(derive_seed(cfg.seed, finetune), index);
  auto fp = finetune_with_trace(proposed, obs, held, train_set, train_config(cfg, false), ft_seed);
  auto fa = finetune_with_trace(ablation, obs, held, train_set, train_config(cfg, true), ft_seed);
  r.trace_proposed = std::move(fp.trace);
  r.trace_ablation = std::move(fa.trace);
  const auto& kernel = cfg.train.kernel;

  r.images["proposed"] = regress(fp.weights, obs, q.x, kernel, 0.0).images;
  r.images["r-vae"] = regress(fa.weights, obs, q.x, kernel, 0.0).images;
  eval::MogpConfig mcfg;
  mcfg.prior_mean = cfg.mogp_prior;
  r.images["mogp"] = eval::mogp_baseline(obs, q.x, mcfg);
  r.images["nn"] = eval::nn_baseline(ablation, obs, q.x);
  for (const char* m : kMethods) r.methods[m] = score(r.images[m], q, seq.image, cfg.ssim);

  for (std::size_t s = 0; s < cfg.sweep_seeds; ++s) {
    const std::uint64_t sw = derive_seed(derive_seed(cfg.seed, sweep), index * 1000 + s);
    r.sweep_proposed.push_back(eval::sigma_sweep(fp.weights, obs, q.x, q.truth, cfg.sigma_scales, sw, kernel, cfg.ssim));
    r.sweep_ablation.push_back(eval::sigma_sweep(fa.weights, obs, q.x, q.truth, cfg.sigma_scales, sw, kernel, cfg.ssim));
  }
  return r;
}

struct Report {
  std::vector<SequenceResult> sequences;

  /// Median over sequences of the per-sequence mean SSIM.
  double summary(const std::string& method, bool masked) const {
    std::vector<double> v;
    for (const auto& s : sequences) {
      const auto& sc = s.methods.at(method);
      v.push_back(mean(masked ? sc.masked : sc.full));
    }
    return eval::median(v);
  }

  /// Median over sequences of the per-sequence mean SSIM for one sweep seed
  /// and scale index.
  double sweep(bool ablation, std::size_t seed, std::size_t scale) const {
    std::vector<double> v;
    for (const auto& s : sequences) v.push_back(mean((ablation ? s.sweep_ablation : s.sweep_proposed)[seed][scale]));
    return eval::median(v);
  }

  /// Pooled over every held-out pair of every sequence.
  std::pair<double, double> diagnostics(bool ablation, std::size_t iteration) const {
    std::vector<double> kl, ratio;
    for (const auto& s : sequences) {
      const auto& d = (ablation ? s.trace_ablation : s.trace_proposed).at(iteration);
      kl.insert(kl.end(), d.kl.begin(), d.kl.end());
      ratio.insert(ratio.end(), d.nll_ratio.begin(), d.nll_ratio.end());
    }
    return {eval::median(kl), eval::mean_ratio(ratio)};
  }

  std::size_t iterations() const {
    return sequences.empty() ? 0 : sequences.front().trace_proposed.size();
  }
};

inline Report evaluate(const model::ModelWeights& proposed, const model::ModelWeights& ablation,
                       const data::Dataset& train_set, const data::Dataset& test_set, const config::RunConfig& cfg,
                       std::size_t threads = 1) {
  config::validate(cfg);
  if (test_set.size() == 0) throw Error("evaluate: test set is empty");
  Report r;
  r.sequences.resize(test_set.size());
  eval::parallel_for(test_set.size(), threads, [&](std::size_t i) {
    r.sequences[i] = evaluate_sequence(proposed, ablation, train_set, test_set.sequences[i], i, cfg);
  });
  return r;
}

// ------------------------------------------------------------- reports

inline std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path, "cannot open for writing");
  return out;
}

inline void write_table(const std::string& path, const Report& r) {
  auto out = open_csv(path);
  out << "method,full_ssim,masked_ssim\n";
  for (const char* m : kMethods)
    out << m << ',' << kv::format_double(r.summary(m, false)) << ',' << kv::format_double(r.summary(m, true)) << '\n';
}

inline void write_sequences(const std::string& path, const Report& r) {
  auto out = open_csv(path);
  out << "sequence,method,full_ssim,masked_ssim\n";
  for (const auto& s : r.sequences)
    for (const char* m : kMethods)
      out << s.id << ',' << m << ',' << kv::format_double(mean(s.methods.at(m).full)) << ','
          << kv::format_double(mean(s.methods.at(m).masked)) << '\n';
}

inline void write_sweep(const std::string& path, const Report& r, const std::vector<double>& scales) {
  auto out = open_csv(path);
  out << "seed,scale,proposed,r-vae\n";
  const std::size_t seeds = r.sequences.empty() ? 0 : r.sequences.front().sweep_proposed.size();
  for (std::size_t s = 0; s < seeds; ++s)
    for (std::size_t k = 0; k < scales.size(); ++k)
      out << s << ',' << kv::format_double(scales[k]) << ',' << kv::format_double(r.sweep(false, s, k)) << ','
          << kv::format_double(r.sweep(true, s, k)) << '\n';
}

inline void write_diagnostics(const std::string& path, const DiagnosticTrace& trace) {
  auto out = open_csv(path);
  out << "iteration,median_kl,mean_nll_ratio\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out << i << ',' << kv::format_double(eval::median(trace[i].kl)) << ','
        << kv::format_double(eval::mean_ratio(trace[i].nll_ratio)) << '\n';
}

inline void write_report_diagnostics(const std::string& path, const Report& r) {
  auto out = open_csv(path);
  out << "iteration,proposed_median_kl,proposed_mean_nll_ratio,r-vae_median_kl,r-vae_mean_nll_ratio\n";
  for (std::size_t i = 0; i < r.iterations(); ++i) {
    const auto [pk, pr] = r.diagnostics(false, i);
    const auto [ak, ar] = r.diagnostics(true, i);
    out << i << ',' << kv::format_double(pk) << ',' << kv::format_double(pr) << ',' << kv::format_double(ak) << ','
        << kv::format_double(ar) << '\n';
  }
}

}  // namespace varegress::experiment
