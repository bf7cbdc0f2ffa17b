// Command-line front end: gen-data, train, finetune, regress, eval.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "varegress/config.hpp"
#include "varegress/experiment.hpp"
#include "varegress/png.hpp"

namespace fs = std::filesystem;
using namespace varegress;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

// Thrown for problems the user can fix by changing the command line.
struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value run configuration file");
    app->add_option("--set", overrides, "override one config key (key=value), repeatable");
    app->add_option("--seed", seed, "global seed (falls back to VAREGRESS_SEED, then the config)");
  }

  config::RunConfig load() const {
    std::vector<std::string> ov = overrides;
    if (seed) ov.push_back("seed=" + std::to_string(*seed));
    auto cfg = config::load(config_path.empty() ? std::nullopt : std::optional(config_path), ov);
    config::validate(cfg);
    return cfg;
  }
};

void require_files(const std::vector<std::pair<std::string, std::string>>& items) {
  std::string missing;
  for (const auto& [what, path] : items) {
    if (!fs::exists(path)) missing += "\n  " + what + ": " + path;
  }
  if (!missing.empty()) throw Error("missing prerequisite artifacts:" + missing);
}

std::string dataset_manifest(const std::string& dir) { return data::manifest_path(dir); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(dir, "cannot create directory: " + ec.message());
}

std::string join_path(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

/// `columns` evenly spaced query indices out of `total`.
inline std::vector<std::size_t> pick(std::size_t total, std::size_t columns) {
  std::vector<std::size_t> out;
  columns = std::min(columns, total);
  for (std::size_t i = 0; i < columns; ++i)
    out.push_back(columns == 1 ? 0 : i * (total - 1) / (columns - 1));
  return out;
}

/// Ground truth on the first row, then one row per method.
inline png::Canvas comparison_grid(const experiment::SequenceResult& s, const ImageShape& shape, std::size_t columns = 10) {
  const std::size_t px = shape.pixels();
  const auto cols = pick(s.queries.size(), columns);
  std::vector<std::vector<std::span<const double>>> rows(1);
  for (auto j : cols) rows[0].push_back(std::span<const double>(s.queries.truth).subspan(j * px, px));
  for (const char* m : experiment::kMethods) {
    rows.emplace_back();
    for (auto j : cols) rows.back().push_back(std::span<const double>(s.images.at(m)).subspan(j * px, px));
  }
  return png::grid(rows, shape);
}

// ------------------------------------------------------------- commands

struct GenData {
  Common common;
  std::string kind, out, split = "train";
  std::optional<std::size_t> sequences, frames;

  int run() const {
    auto cfg = common.load();
    if (split != "train" && split != "test") throw UsageError("--split must be train or test");
    if (kind != data::kRotatingBar && kind != data::kPendulum) {
      throw UsageError("--kind must be rotating-bar or pendulum-joints, got '" + kind + "'");
    }
    const bool test = split == "test";
    const std::size_t n = sequences.value_or(test ? cfg.test_sequences : cfg.sequences);
    const std::size_t t = frames.value_or(test ? cfg.test_frames : cfg.frames);
    const auto seed = derive_seed(cfg.seed, test ? experiment::test_data : experiment::train_data);
    auto ds = data::generate(kind, n, t, cfg.generator, seed);
    ds.name = kind + "-" + split;
    data::save_dataset(ds, out);
    std::printf("%s: %zu sequences x %zu frames, image %s, domain %zu, %zu pairs -> %s\n", ds.name.c_str(), ds.size(),
                t, ds.image.to_string().c_str(), ds.domain_dim, ds.total_pairs(), out.c_str());
    return 0;
  }
};

struct Train {
  Common common;
  std::string data_dir, out;
  bool ablation = false;
  std::optional<std::size_t> epochs;

  int run() const {
    auto cfg = common.load();
    if (epochs) cfg.train.epochs = *epochs;
    require_files({{"training data", dataset_manifest(data_dir)}});
    const auto ds = data::load_dataset(data_dir);
    const auto init = model::ModelWeights::initialize(experiment::model_config(cfg, ds),
                                                      derive_seed(cfg.seed, experiment::init));
    const auto tc = experiment::train_config(cfg, ablation);
    std::fprintf(stderr, "training %s: %zu epochs x %zu steps\n", ablation ? "r-vae" : "proposed", tc.epochs,
                 training::steps_per_epoch(ds, tc));
    const auto r = training::train(ds, tc, init);
    ensure_dir(out);
    r.weights.save(join_path(out, "model.varw"));
    training::write_loss_csv(join_path(out, "loss.csv"), r.log);
    if (!r.log.empty()) std::printf("final loss %s over %zu steps\n", kv::format_double(r.log.back().total).c_str(), r.log.size());
    return 0;
  }
};

struct Finetune {
  Common common;
  std::string checkpoint, train_dir, data_dir, sequence = "0", out;
  bool ablation = false;

  int run() const {
    const auto cfg = common.load();
    require_files({{"checkpoint", checkpoint},
                   {"training data", dataset_manifest(train_dir)},
                   {"test data", dataset_manifest(data_dir)}});
    const auto w = model::ModelWeights::load(checkpoint);
    const auto train_set = data::load_dataset(train_dir);
    const auto test_set = data::load_dataset(data_dir);
    const auto& seq = experiment::find_sequence(test_set, sequence);
    const std::size_t index = static_cast<std::size_t>(&seq - test_set.sequences.data());
    const auto sp = experiment::split_for(seq, index, cfg);
    const auto r = experiment::finetune_with_trace(
        w, data::gather(seq, sp.observed), data::gather(seq, sp.held_out), train_set,
        experiment::train_config(cfg, ablation), derive_seed(derive_seed(cfg.seed, experiment::finetune), index));
    ensure_dir(out);
    r.weights.save(join_path(out, "model.varw"));
    training::write_loss_csv(join_path(out, "loss.csv"), r.log);
    experiment::write_diagnostics(join_path(out, "diagnostics.csv"), r.trace);
    return 0;
  }
};

struct Regress {
  Common common;
  std::string checkpoint, train_dir, data_dir, sequence = "0", out;
  std::optional<std::size_t> queries;
  double scale = 0.0;
  bool no_finetune = false;

  int run() const {
    auto cfg = common.load();
    if (queries) cfg.queries = *queries;
    std::vector<std::pair<std::string, std::string>> need{{"checkpoint", checkpoint},
                                                          {"test data", dataset_manifest(data_dir)}};
    if (!no_finetune) {
      if (train_dir.empty()) throw UsageError("--train-data is required unless --no-finetune is given");
      need.emplace_back("training data", dataset_manifest(train_dir));
    }
    require_files(need);
    if (scale < 0.0) throw UsageError("--scale must be non-negative");
    auto w = model::ModelWeights::load(checkpoint);
    const auto test_set = data::load_dataset(data_dir);
    const auto& seq = experiment::find_sequence(test_set, sequence);
    const std::size_t index = static_cast<std::size_t>(&seq - test_set.sequences.data());
    const auto sp = experiment::split_for(seq, index, cfg);
    const auto obs = data::gather(seq, sp.observed);
    if (!no_finetune) {
      const auto train_set = data::load_dataset(train_dir);
      auto tc = experiment::train_config(cfg, false);
      tc.seed = derive_seed(derive_seed(cfg.seed, experiment::finetune), index);
      w = training::finetune(obs, train_set, tc, w);
    }
    const auto q = experiment::make_queries(seq, sp, cfg.queries);
    std::vector<double> noise;
    if (scale != 0.0) {
      Rng rng(derive_seed(derive_seed(cfg.seed, experiment::sweep), index));
      noise = rng.normals(q.size() * w.config().latent_dim());
    }
    const auto r = regress(w, obs, q.x, cfg.train.kernel, scale, noise);
    const auto s = experiment::score(r.images, q, seq.image, cfg.ssim);
    const std::size_t px = seq.image.pixels();

    ensure_dir(out);
    {
      auto csv = experiment::open_csv(join_path(out, "ssim.csv"));
      csv << "query";
      for (std::size_t k = 0; k < q.domain_dim; ++k) csv << ",x" << k;
      csv << ",ssim,masked_ssim\n";
      for (std::size_t j = 0; j < q.size(); ++j) {
        csv << j;
        for (std::size_t k = 0; k < q.domain_dim; ++k) csv << ',' << kv::format_double(q.x[j * q.domain_dim + k]);
        csv << ',' << kv::format_double(s.full[j]) << ',' << kv::format_double(s.masked[j]) << '\n';
      }
    }
    // Observed frames and their reconstructions through the (fine-tuned) model.
    const auto recon = model::reconstruct_mean(ad::Tensor::matrix(obs.size(), seq.domain_dim, obs.x),
                                               ad::Tensor::matrix(obs.size(), px, obs.y), w);
    {
      auto csv = experiment::open_csv(join_path(out, "observed.csv"));
      csv << "frame,ssim\n";
      for (std::size_t i = 0; i < obs.size(); ++i) {
        csv << obs.index[i] << ','
            << kv::format_double(eval::ssim(std::span(recon).subspan(i * px, px), obs.y_row(i), seq.image, cfg.ssim))
            << '\n';
      }
    }
    // Rows of ten: observed / reconstruction pairs, then truth / regression pairs.
    std::vector<std::vector<std::span<const double>>> rows;
    auto add_pairs = [&](std::span<const double> top, std::span<const double> bottom, std::size_t n) {
      for (std::size_t b = 0; b < n; b += 10) {
        rows.emplace_back();
        rows.emplace_back();
        for (std::size_t j = b; j < std::min(n, b + 10); ++j) {
          rows[rows.size() - 2].push_back(top.subspan(j * px, px));
          rows.back().push_back(bottom.subspan(j * px, px));
        }
      }
    };
    add_pairs(obs.y, recon, obs.size());
    add_pairs(q.truth, r.images, q.size());
    png::write(join_path(out, "grid.png"), png::grid(rows, seq.image));
    std::printf("%s: %zu queries, mean SSIM %s, mean masked SSIM %s\n", seq.id.c_str(), q.size(),
                kv::format_double(experiment::mean(s.full)).c_str(), kv::format_double(experiment::mean(s.masked)).c_str());
    return 0;
  }
};

struct Evaluate {
  Common common;
  std::string proposed, ablation, train_dir, data_dir, out;
  std::size_t threads = 1;

  int run() const {
    const auto cfg = common.load();
    if (threads == 0) throw UsageError("--threads must be at least 1");
    require_files({{"proposed checkpoint", proposed},
                   {"r-vae checkpoint", ablation},
                   {"training data", dataset_manifest(train_dir)},
                   {"test data", dataset_manifest(data_dir)}});
    const auto wp = model::ModelWeights::load(proposed);
    const auto wa = model::ModelWeights::load(ablation);
    const auto train_set = data::load_dataset(train_dir);
    const auto test_set = data::load_dataset(data_dir);
    const auto r = experiment::evaluate(wp, wa, train_set, test_set, cfg, threads);
    ensure_dir(out);
    experiment::write_table(join_path(out, "table.csv"), r);
    experiment::write_sequences(join_path(out, "sequences.csv"), r);
    experiment::write_sweep(join_path(out, "sigma_sweep.csv"), r, cfg.sigma_scales);
    experiment::write_report_diagnostics(join_path(out, "diagnostics.csv"), r);
    png::write(join_path(out, "grid.png"), comparison_grid(r.sequences.front(), test_set.image));
    std::printf("%-9s %8s %8s\n", "method", "full", "masked");
    for (const char* m : experiment::kMethods)
      std::printf("%-9s %8.4f %8.4f\n", m, r.summary(m, false), r.summary(m, true));
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational autoencoded regression pipeline"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen.common.attach(g);
  g->add_option("--kind", gen.kind, "rotating-bar or pendulum-joints")->required();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--split", gen.split, "train or test (picks counts and seed stream)");
  g->add_option("--sequences", gen.sequences, "number of sequences");
  g->add_option("--frames", gen.frames, "frames per sequence");

  Train train;
  auto* t = app.add_subcommand("train", "train a model and write model.varw and loss.csv");
  train.common.attach(t);
  t->add_option("--data", train.data_dir, "training dataset directory")->required();
  t->add_option("--out", train.out, "output directory")->required();
  t->add_flag("--ablation", train.ablation, "train the plain VAE (no regression term)");
  t->add_option("--epochs", train.epochs, "override train.epochs");

  Finetune ft;
  auto* f = app.add_subcommand("finetune", "fine-tune on one test sequence's observed frames");
  ft.common.attach(f);
  f->add_option("--checkpoint", ft.checkpoint, "trained VARW checkpoint")->required();
  f->add_option("--train-data", ft.train_dir, "training dataset directory")->required();
  f->add_option("--data", ft.data_dir, "test dataset directory")->required();
  f->add_option("--sequence", ft.sequence, "sequence id or index");
  f->add_option("--out", ft.out, "output directory")->required();
  f->add_flag("--ablation", ft.ablation, "fine-tune without the regression term");

  Regress reg;
  auto* r = app.add_subcommand("regress", "regress one test sequence and write a PNG grid and SSIM CSV");
  reg.common.attach(r);
  r->add_option("--checkpoint", reg.checkpoint, "VARW checkpoint")->required();
  r->add_option("--data", reg.data_dir, "test dataset directory")->required();
  r->add_option("--train-data", reg.train_dir, "training dataset directory (for fine-tuning)");
  r->add_option("--sequence", reg.sequence, "sequence id or index");
  r->add_option("--queries", reg.queries, "evenly spaced queries on [0,1] (scalar domains)");
  r->add_option("--scale", reg.scale, "latent sampling scale (0 regresses the mean)");
  r->add_flag("--no-finetune", reg.no_finetune, "use the checkpoint as is");
  r->add_option("--out", reg.out, "output directory")->required();

  Evaluate ev;
  auto* e = app.add_subcommand("eval", "score every method on a test set");
  ev.common.attach(e);
  e->add_option("--proposed", ev.proposed, "checkpoint trained with the regression term")->required();
  e->add_option("--ablation", ev.ablation, "checkpoint trained without it")->required();
  e->add_option("--train-data", ev.train_dir, "training dataset directory")->required();
  e->add_option("--data", ev.data_dir, "test dataset directory")->required();
  e->add_option("--out", ev.out, "report directory")->required();
  e->add_option("--threads", ev.threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (g->parsed()) return gen.run();
    if (t->parsed()) return train.run();
    if (f->parsed()) return ft.run();
    if (r->parsed()) return reg.run();
    if (e->parsed()) return ev.run();
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}
