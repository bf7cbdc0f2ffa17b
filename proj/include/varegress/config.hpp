#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "varegress/data.hpp"
#include "varegress/eval.hpp"
#include "varegress/kv.hpp"
#include "varegress/model.hpp"
#include "varegress/training.hpp"

namespace varegress::config {

/// Everything a pipeline command needs besides paths. Loaded from flat
/// key=value text, then overridden key by key.
struct RunConfig {
  std::uint64_t seed = 0;

  std::string kind = std::string(data::kRotatingBar);
  std::size_t sequences = 40;
  std::size_t frames = 60;
  std::size_t test_sequences = 8;
  std::size_t test_frames = 100;
  data::GeneratorConfig generator{};

  model::ModelConfig model{};
  training::TrainConfig train{};

  std::size_t observed = 20;
  std::size_t queries = 100;  // scalar domains only; 0 regresses the held-out frames
  data::SplitStrategy split = data::SplitStrategy::uniform;
  std::vector<double> sigma_scales{0.5, 1.0, 1.5};
  std::size_t sweep_seeds = 5;
  eval::PriorMean mogp_prior = eval::PriorMean::zero;
  eval::SSIMConfig ssim{};
};

namespace detail {

inline std::vector<double> parse_list(std::string_view s, const std::string& what) {
  std::vector<double> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    out.push_back(kv::parse_double(kv::trim(s.substr(0, comma)), what));
    s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
  }
  return out;
}

inline std::vector<std::size_t> parse_widths(std::string_view s, const std::string& what) {
  std::vector<std::size_t> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    out.push_back(kv::parse_uint(kv::trim(s.substr(0, comma)), what));
    s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) out += kv::format_double(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, std::string_view, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define VAREGRESS_UINT(member) \
  Field{[](RunConfig& c, std::string_view v, const std::string& k) { c.member = kv::parse_uint(v, k); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define VAREGRESS_DOUBLE(member) \
  Field{[](RunConfig& c, std::string_view v, const std::string& k) { c.member = kv::parse_double(v, k); }, \
        [](const RunConfig& c) { return kv::format_double(c.member); }}
#define VAREGRESS_BOOL(member) \
  Field{[](RunConfig& c, std::string_view v, const std::string& k) { c.member = kv::parse_bool(v, k); }, \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}

inline const std::map<std::string, Field>& schema() {
  static const std::map<std::string, Field> fields = {
      {"seed", VAREGRESS_UINT(seed)},
      {"data.kind",
       {[](RunConfig& c, std::string_view v, const std::string& k) {
          if (v != data::kRotatingBar && v != data::kPendulum) {
            throw ConfigError(k + ": '" + std::string(v) + "' is not rotating-bar or pendulum-joints");
          }
          c.kind = v;
        },
        [](const RunConfig& c) { return c.kind; }}},
      {"data.sequences", VAREGRESS_UINT(sequences)},
      {"data.frames", VAREGRESS_UINT(frames)},
      {"data.test_sequences", VAREGRESS_UINT(test_sequences)},
      {"data.test_frames", VAREGRESS_UINT(test_frames)},
      {"data.height", VAREGRESS_UINT(generator.image.height)},
      {"data.width", VAREGRESS_UINT(generator.image.width)},
      {"data.links", VAREGRESS_UINT(generator.links)},
      {"model.latent_y_dim", VAREGRESS_UINT(model.latent_y_dim)},
      {"model.encoder_hidden",
       {[](RunConfig& c, std::string_view v, const std::string& k) { c.model.encoder_hidden = parse_widths(v, k); },
        [](const RunConfig& c) { return join(c.model.encoder_hidden); }}},
      {"model.decoder_hidden",
       {[](RunConfig& c, std::string_view v, const std::string& k) { c.model.decoder_hidden = parse_widths(v, k); },
        [](const RunConfig& c) { return join(c.model.decoder_hidden); }}},
      {"model.recon_weight", VAREGRESS_DOUBLE(model.recon_weight)},
      {"model.kl_y_only", VAREGRESS_BOOL(model.kl_y_only)},
      {"train.K", VAREGRESS_UINT(train.K)},
      {"train.N", VAREGRESS_UINT(train.N)},
      {"train.M", VAREGRESS_UINT(train.M)},
      {"train.epochs", VAREGRESS_UINT(train.epochs)},
      {"train.finetune_iters", VAREGRESS_UINT(train.finetune_iters)},
      {"train.scale", VAREGRESS_DOUBLE(train.scale)},
      {"train.freeze_decoder", VAREGRESS_BOOL(train.freeze_decoder)},
      {"adam.learning_rate", VAREGRESS_DOUBLE(train.adam.learning_rate)},
      {"adam.beta1", VAREGRESS_DOUBLE(train.adam.beta1)},
      {"adam.beta2", VAREGRESS_DOUBLE(train.adam.beta2)},
      {"adam.epsilon", VAREGRESS_DOUBLE(train.adam.epsilon)},
      {"kernel.lengthscale", VAREGRESS_DOUBLE(train.kernel.lengthscale)},
      {"kernel.jitter", VAREGRESS_DOUBLE(train.kernel.jitter)},
      {"kernel.max_jitter", VAREGRESS_DOUBLE(train.kernel.max_jitter)},
      {"eval.observed", VAREGRESS_UINT(observed)},
      {"eval.queries", VAREGRESS_UINT(queries)},
      {"eval.split",
       {[](RunConfig& c, std::string_view v, const std::string& k) {
          try {
            c.split = data::parse_split_strategy(std::string(v));
          } catch (const Error& e) {
            throw ConfigError(k + ": " + e.what());
          }
        },
        [](const RunConfig& c) { return std::string(c.split == data::SplitStrategy::uniform ? "uniform" : "random"); }}},
      {"eval.sigma_scales",
       {[](RunConfig& c, std::string_view v, const std::string& k) { c.sigma_scales = parse_list(v, k); },
        [](const RunConfig& c) { return join(c.sigma_scales); }}},
      {"eval.sweep_seeds", VAREGRESS_UINT(sweep_seeds)},
      {"eval.mogp_prior",
       {[](RunConfig& c, std::string_view v, const std::string& k) {
          if (v == "zero") c.mogp_prior = eval::PriorMean::zero;
          else if (v == "observed") c.mogp_prior = eval::PriorMean::observed;
          else throw ConfigError(k + ": '" + std::string(v) + "' is not zero or observed");
        },
        [](const RunConfig& c) { return std::string(c.mogp_prior == eval::PriorMean::zero ? "zero" : "observed"); }}},
      {"ssim.window", VAREGRESS_UINT(ssim.window)},
      {"ssim.k1", VAREGRESS_DOUBLE(ssim.k1)},
      {"ssim.k2", VAREGRESS_DOUBLE(ssim.k2)},
      {"ssim.dynamic_range", VAREGRESS_DOUBLE(ssim.dynamic_range)},
  };
  return fields;
}

#undef VAREGRESS_UINT
#undef VAREGRESS_DOUBLE
#undef VAREGRESS_BOOL

}  // namespace detail

inline std::vector<std::string> keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::schema()) out.push_back(k);
  return out;
}

inline void set(RunConfig& cfg, const std::string& key, std::string_view value) {
  const auto& s = detail::schema();
  const auto it = s.find(key);
  if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, value, key);
}

inline std::string get(const RunConfig& cfg, const std::string& key) {
  const auto& s = detail::schema();
  const auto it = s.find(key);
  if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(cfg);
}

/// Applies entries in order; a repeated key is an error within one source.
inline void apply(RunConfig& cfg, const kv::Entries& entries, const std::string& source) {
  std::map<std::string, bool> seen;
  for (const auto& [k, v] : entries) {
    if (seen[k]) throw ConfigError(source + ": key '" + k + "' given twice");
    seen[k] = true;
    try {
      set(cfg, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": " + e.what());
    }
  }
}

/// "key=value" from the command line.
inline std::pair<std::string, std::string> split_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + text + "' is not key=value");
  return {std::string(kv::trim(std::string_view(text).substr(0, eq))),
          std::string(kv::trim(std::string_view(text).substr(eq + 1)))};
}

/// Layers: defaults, then VAREGRESS_SEED, then the file, then overrides.
inline RunConfig load(const std::optional<std::string>& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (const char* env = std::getenv("VAREGRESS_SEED"); env && *env) cfg.seed = kv::parse_uint(env, "VAREGRESS_SEED");
  if (path) apply(cfg, kv::read_file(*path), *path);
  kv::Entries ov;
  for (const auto& o : overrides) ov.push_back(split_override(o));
  apply(cfg, ov, "command line");
  return cfg;
}

/// Semantic checks that need more than one key.
inline void validate(const RunConfig& cfg) {
  cfg.train.validate();
  if (cfg.observed == 0) throw ConfigError("eval.observed must be positive");
  if (cfg.sigma_scales.empty()) throw ConfigError("eval.sigma_scales must not be empty");
  for (double s : cfg.sigma_scales)
    if (!(s >= 0.0)) throw ConfigError("eval.sigma_scales must be non-negative");
  if (!(cfg.train.kernel.lengthscale > 0.0)) throw ConfigError("kernel.lengthscale must be positive");
}

inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& [k, f] : detail::schema()) out << k << " = " << f.get(cfg) << '\n';
  return out.str();
}

}  // namespace varegress::config
