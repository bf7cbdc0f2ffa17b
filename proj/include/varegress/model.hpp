#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "varegress/autodiff.hpp"
#include "varegress/binary_io.hpp"
#include "varegress/image.hpp"
#include "varegress/rng.hpp"

/// Encoder E(y; W_E), domain map f(x; W_x), decoder D(z; W_D) and the
/// diagonal-Gaussian latent machinery.
///
/// The latent of one pair is z = [z_y, z_x]. The encoder trunk is an MLP over
/// the flattened image; its last hidden layer feeds two linear heads: the
/// encoder head emits [m_y, raw sigma_y, raw sigma_k] and the domain head
/// (W_x) emits raw sigma_x. Together they form the single concatenated output
/// layer of width 2*dy + n(X) + 1. The domain mean is the domain point itself.
namespace varegress::model {

using ad::Tape;
using ad::Tensor;

struct ModelConfig {
  ImageShape image{};
  std::size_t domain_dim = 1;
  std::size_t latent_y_dim = 16;
  std::vector<std::size_t> encoder_hidden{512, 256};
  std::vector<std::size_t> decoder_hidden{256, 512};
  double recon_weight = 1.0;  // lambda: inverse of the fixed decoder variance, up to 1/2
  bool kl_y_only = false;     // restrict the prior KL to the image slice of z

  std::size_t latent_dim() const noexcept { return latent_y_dim + domain_dim; }

  void validate() const {
    if (image.height == 0 || image.width == 0 || image.channels == 0) throw Error("ModelConfig: empty image shape");
    if (domain_dim == 0) throw Error("ModelConfig: domain_dim must be positive");
    if (latent_y_dim == 0) throw Error("ModelConfig: latent_y_dim must be positive");
    for (auto w : encoder_hidden)
      if (w == 0) throw Error("ModelConfig: encoder widths must be positive");
    for (auto w : decoder_hidden)
      if (w == 0) throw Error("ModelConfig: decoder widths must be positive");
    if (!(recon_weight > 0.0)) throw Error("ModelConfig: recon_weight must be positive");
  }
};

struct Dense {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Tensor forward(Tape& tape, const Tensor& x) const {
    const Tensor h = tape.matmul(x, weight);
    return tape.add(h, tape.broadcast_to(bias, h.shape()));
  }

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

namespace detail {

inline Dense make_dense(std::size_t in, std::size_t out, double bound, Rng& rng) {
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return {Tensor::matrix(in, out, std::move(w), true), Tensor::zeros({1, out}, true)};
}

// He-uniform for layers followed by relu.
inline Dense make_hidden(std::size_t in, std::size_t out, Rng& rng) {
  return make_dense(in, out, std::sqrt(6.0 / static_cast<double>(in)), rng);
}

// Glorot-uniform for output layers.
inline Dense make_output(std::size_t in, std::size_t out, Rng& rng) {
  return make_dense(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

inline Dense copy_dense(const Dense& d) {
  return {Tensor(d.weight.shape(), d.weight.to_vector(), true), Tensor(d.bias.shape(), d.bias.to_vector(), true)};
}

}  // namespace detail

class ModelWeights {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  static ModelWeights initialize(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x5741524d));
    ModelWeights w;
    w.cfg_ = cfg;
    std::size_t in = cfg.image.pixels();
    for (auto width : cfg.encoder_hidden) {
      w.encoder_.push_back(detail::make_hidden(in, width, rng));
      in = width;
    }
    w.encoder_head_ = detail::make_output(in, 2 * cfg.latent_y_dim + 1, rng);
    w.domain_head_ = detail::make_output(in, cfg.domain_dim, rng);
    in = cfg.latent_dim();
    for (auto width : cfg.decoder_hidden) {
      w.decoder_.push_back(detail::make_hidden(in, width, rng));
      in = width;
    }
    w.decoder_.push_back(detail::make_output(in, cfg.image.pixels(), rng));
    return w;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ModelConfig& mutable_config() noexcept { return cfg_; }

  const std::vector<Dense>& encoder_trunk() const noexcept { return encoder_; }
  const Dense& encoder_head() const noexcept { return encoder_head_; }
  const Dense& domain_head() const noexcept { return domain_head_; }
  const std::vector<Dense>& decoder() const noexcept { return decoder_; }

  // W_E: trunk and encoder head.
  std::vector<Tensor> encoder_parameters() const {
    std::vector<Tensor> out;
    for (const auto& d : encoder_) append(out, d);
    append(out, encoder_head_);
    return out;
  }

  // W_x: the domain head.
  std::vector<Tensor> domain_parameters() const { return {domain_head_.weight, domain_head_.bias}; }

  // W_D.
  std::vector<Tensor> decoder_parameters() const {
    std::vector<Tensor> out;
    for (const auto& d : decoder_) append(out, d);
    return out;
  }

  std::vector<Tensor> parameters(bool include_decoder = true) const {
    auto out = encoder_parameters();
    for (auto& t : domain_parameters()) out.push_back(t);
    if (include_decoder)
      for (auto& t : decoder_parameters()) out.push_back(t);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add = [&](const std::string& name, const Dense& d) {
      out.emplace_back(name + ".weight", d.weight);
      out.emplace_back(name + ".bias", d.bias);
    };
    for (std::size_t i = 0; i < encoder_.size(); ++i) add("enc." + std::to_string(i), encoder_[i]);
    add("enc.head", encoder_head_);
    add("dom.head", domain_head_);
    for (std::size_t i = 0; i + 1 < decoder_.size(); ++i) add("dec." + std::to_string(i), decoder_[i]);
    add("dec.out", decoder_.back());
    return out;
  }

  // Deep copy with fresh gradient slots.
  ModelWeights clone() const {
    ModelWeights w;
    w.cfg_ = cfg_;
    for (const auto& d : encoder_) w.encoder_.push_back(detail::copy_dense(d));
    w.encoder_head_ = detail::copy_dense(encoder_head_);
    w.domain_head_ = detail::copy_dense(domain_head_);
    for (const auto& d : decoder_) w.decoder_.push_back(detail::copy_dense(d));
    return w;
  }

  bool bit_equal(const ModelWeights& other) const {
    const auto a = named_parameters();
    const auto b = other.named_parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
      const auto x = a[i].second.values();
      const auto y = b[i].second.values();
      if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
    }
    return cfg_.recon_weight == other.cfg_.recon_weight && cfg_.kl_y_only == other.cfg_.kl_y_only &&
           cfg_.image == other.cfg_.image;
  }

  /// VARW checkpoint: "VARW", u32 version, u32 tensor count, then per tensor
  /// {u32 name length, name, u32 rank, u32 dims..., float64 data}, all
  /// little-endian. Image shape, lambda and the KL flag travel as meta.* tensors.
  void save(const std::string& path) const {
    std::vector<std::pair<std::string, Tensor>> tensors = named_parameters();
    tensors.emplace_back("meta.image_shape",
                         Tensor({3}, {static_cast<double>(cfg_.image.height), static_cast<double>(cfg_.image.width),
                                      static_cast<double>(cfg_.image.channels)}));
    tensors.emplace_back("meta.recon_weight", Tensor({1}, {cfg_.recon_weight}));
    tensors.emplace_back("meta.kl_y_only", Tensor({1}, {cfg_.kl_y_only ? 1.0 : 0.0}));
    io::ByteWriter out;
    out.bytes("VARW");
    out.u32(kFormatVersion);
    out.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      out.u32(static_cast<std::uint32_t>(name.size()));
      out.bytes(name);
      out.u32(static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
      for (double v : t.values()) out.f64(v);
    }
    out.write_file(path);
  }

  static ModelWeights load(const std::string& path) {
    auto in = io::ByteReader::from_file(path);
    if (in.bytes(4) != "VARW") throw FormatError(path, "bad magic (expected VARW)");
    if (const auto v = in.u32(); v != kFormatVersion) {
      throw FormatError(path, "unsupported version " + std::to_string(v));
    }
    const std::uint32_t count = in.u32();
    std::map<std::string, Tensor> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = in.u32();
      if (name_len == 0 || name_len > 4096) throw FormatError(path, "bad tensor name length");
      std::string name = in.bytes(name_len);
      const std::uint32_t rank = in.u32();
      if (rank > 8) throw FormatError(path, "tensor '" + name + "' has unsupported rank");
      ad::Shape shape(rank);
      std::uint64_t n = 1;
      for (auto& d : shape) {
        d = in.u32();
        if (d == 0) throw FormatError(path, "tensor '" + name + "' has a zero dimension");
        n *= d;
      }
      in.require(n * 8);
      std::vector<double> data(n);
      for (auto& v : data) v = in.f64();
      if (!tensors.emplace(name, Tensor(std::move(shape), std::move(data), !name.starts_with("meta."))).second) {
        throw FormatError(path, "duplicate tensor '" + name + "'");
      }
    }
    if (in.remaining() != 0) throw FormatError(path, "trailing bytes after last tensor");
    return from_tensors(tensors, path);
  }

 private:
  static void append(std::vector<Tensor>& out, const Dense& d) {
    out.push_back(d.weight);
    out.push_back(d.bias);
  }

  static ModelWeights from_tensors(std::map<std::string, Tensor>& tensors, const std::string& path) {
    auto take = [&](const std::string& name) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw FormatError(path, "missing tensor '" + name + "'");
      Tensor t = it->second;
      tensors.erase(it);
      return t;
    };
    auto take_dense = [&](const std::string& name) {
      Dense d{take(name + ".weight"), take(name + ".bias")};
      if (d.weight.rank() != 2 || d.bias.rank() != 2 || d.bias.rows() != 1 || d.bias.cols() != d.weight.cols()) {
        throw FormatError(path, "layer '" + name + "' has inconsistent shapes");
      }
      return d;
    };
    ModelWeights w;
    const Tensor shape = take("meta.image_shape");
    if (shape.size() != 3) throw FormatError(path, "meta.image_shape must hold 3 values");
    w.cfg_.image = {static_cast<std::size_t>(shape.values()[0]), static_cast<std::size_t>(shape.values()[1]),
                    static_cast<std::size_t>(shape.values()[2])};
    w.cfg_.recon_weight = take("meta.recon_weight").values()[0];
    w.cfg_.kl_y_only = take("meta.kl_y_only").values()[0] != 0.0;

    w.cfg_.encoder_hidden.clear();
    for (std::size_t i = 0; tensors.count("enc." + std::to_string(i) + ".weight"); ++i) {
      w.encoder_.push_back(take_dense("enc." + std::to_string(i)));
      w.cfg_.encoder_hidden.push_back(w.encoder_.back().out());
    }
    w.encoder_head_ = take_dense("enc.head");
    w.domain_head_ = take_dense("dom.head");
    w.cfg_.decoder_hidden.clear();
    for (std::size_t i = 0; tensors.count("dec." + std::to_string(i) + ".weight"); ++i) {
      w.decoder_.push_back(take_dense("dec." + std::to_string(i)));
      w.cfg_.decoder_hidden.push_back(w.decoder_.back().out());
    }
    w.decoder_.push_back(take_dense("dec.out"));
    if (!tensors.empty()) throw FormatError(path, "unexpected tensor '" + tensors.begin()->first + "'");

    if (w.encoder_head_.out() % 2 != 1) throw FormatError(path, "encoder head width must be odd");
    w.cfg_.latent_y_dim = (w.encoder_head_.out() - 1) / 2;
    w.cfg_.domain_dim = w.domain_head_.out();
    // Chain consistency.
    std::size_t in = w.cfg_.image.pixels();
    for (const auto& d : w.encoder_) {
      if (d.in() != in) throw FormatError(path, "encoder layer input width mismatch");
      in = d.out();
    }
    if (w.encoder_head_.in() != in || w.domain_head_.in() != in) throw FormatError(path, "head input width mismatch");
    in = w.cfg_.latent_dim();
    for (const auto& d : w.decoder_) {
      if (d.in() != in) throw FormatError(path, "decoder layer input width mismatch");
      in = d.out();
    }
    if (in != w.cfg_.image.pixels()) throw FormatError(path, "decoder output width does not match image shape");
    try {
      w.cfg_.validate();
    } catch (const Error& e) {
      throw FormatError(path, e.what());
    }
    return w;
  }

  ModelConfig cfg_;
  std::vector<Dense> encoder_;
  Dense encoder_head_;
  Dense domain_head_;
  std::vector<Dense> decoder_;
};

/// Encoder outputs for a batch of B images. sigma_y and sigma_k are already
/// positive; sigma_x_raw is the domain head's pre-activation, consumed by
/// domain_embed.
struct EncoderOutput {
  Tensor m_y;          // B x dy
  Tensor sigma_y;      // B x dy
  Tensor sigma_k;      // B x 1
  Tensor sigma_x_raw;  // B x n(X)
};

/// Diagonal Gaussian over z = [z_y, z_x]; sigma holds standard deviations.
struct LatentGaussian {
  Tensor m_y, sigma_y, m_x, sigma_x;

  Tensor mean(Tape& tape) const { return tape.concat({m_y, m_x}, 1); }
  Tensor sigma(Tape& tape) const { return tape.concat({sigma_y, sigma_x}, 1); }
};

inline EncoderOutput encode(Tape& tape, const Tensor& y, const ModelWeights& w) {
  const auto& cfg = w.config();
  if (y.rank() != 2 || y.cols() != cfg.image.pixels()) {
    throw ShapeError("encode: expected B x " + std::to_string(cfg.image.pixels()) + " images, got " +
                     ad::shape_string(y.shape()));
  }
  Tensor h = y;
  for (const auto& layer : w.encoder_trunk()) h = tape.relu(layer.forward(tape, h));
  const Tensor head = w.encoder_head().forward(tape, h);
  const std::size_t dy = cfg.latent_y_dim;
  EncoderOutput out;
  out.m_y = tape.slice(head, 1, 0, dy);
  out.sigma_y = tape.softplus(tape.slice(head, 1, dy, 2 * dy));
  out.sigma_k = tape.softplus(tape.slice(head, 1, 2 * dy, 2 * dy + 1));
  out.sigma_x_raw = w.domain_head().forward(tape, h);
  return out;
}

/// m_x is the domain point itself; sigma_x = softplus(raw head output).
inline std::pair<Tensor, Tensor> domain_embed(Tape& tape, const Tensor& x, const Tensor& sigma_x_raw,
                                              const ModelWeights& w) {
  const std::size_t n = w.config().domain_dim;
  if (x.rank() != 2 || x.cols() != n) {
    throw ShapeError("domain_embed: expected B x " + std::to_string(n) + " domain points, got " +
                     ad::shape_string(x.shape()));
  }
  if (sigma_x_raw.shape() != x.shape()) throw ShapeError("domain_embed: sigma_x_raw does not match x");
  return {x, tape.softplus(sigma_x_raw)};
}

inline LatentGaussian latent_gaussian(Tape& tape, const Tensor& x, const Tensor& y, const ModelWeights& w,
                                      EncoderOutput* raw = nullptr) {
  EncoderOutput enc = encode(tape, y, w);
  if (x.rows() != y.rows()) throw ShapeError("latent_gaussian: x and y row counts differ");
  auto [m_x, sigma_x] = domain_embed(tape, x, enc.sigma_x_raw, w);
  LatentGaussian g{enc.m_y, enc.sigma_y, m_x, sigma_x};
  if (raw) *raw = std::move(enc);
  return g;
}

/// z = m + scale * sigma (.) noise. Noise is B x D.
inline Tensor sample_latent(Tape& tape, const LatentGaussian& g, const Tensor& noise, double scale) {
  if (scale < 0.0) throw Error("sample_latent: scale must be non-negative");
  const Tensor m = g.mean(tape);
  if (noise.shape() != m.shape()) {
    throw ShapeError("sample_latent: noise shape " + ad::shape_string(noise.shape()) + " differs from latent " +
                     ad::shape_string(m.shape()));
  }
  if (scale == 0.0) return m;
  return tape.add(m, tape.multiply(tape.scale(g.sigma(tape), scale), noise));
}

inline Tensor decode(Tape& tape, const Tensor& z, const ModelWeights& w) {
  const auto& cfg = w.config();
  if (z.rank() != 2 || z.cols() != cfg.latent_dim()) {
    throw ShapeError("decode: expected B x " + std::to_string(cfg.latent_dim()) + " latents, got " +
                     ad::shape_string(z.shape()));
  }
  Tensor h = z;
  const auto& layers = w.decoder();
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = tape.relu(layers[i].forward(tape, h));
  return tape.sigmoid(layers.back().forward(tape, h));
}

/// Sum over rows of KL(N(m, diag sigma^2) || N(0, I))
///   = 1/2 sum_d (m_d^2 + sigma_d^2 - 1 - ln sigma_d^2).
inline Tensor kl_to_prior(Tape& tape, const LatentGaussian& g, bool y_only = false) {
  auto part = [&](const Tensor& m, const Tensor& s) {
    for (double v : s.values())
      if (!(v > 0.0)) throw NumericError("kl_to_prior: non-positive sigma");
    const Tensor s2 = tape.square(s);
    const Tensor terms = tape.subtract(tape.add(tape.square(m), s2), tape.log(s2));
    // The -1 per dimension is folded in as a constant.
    return tape.add(tape.scale(tape.sum(terms), 0.5), Tensor::scalar(-0.5 * static_cast<double>(m.size())));
  };
  const Tensor kl_y = part(g.m_y, g.sigma_y);
  if (y_only) return kl_y;
  return tape.add(kl_y, part(g.m_x, g.sigma_x));
}

/// lambda * sum (y - y_hat)^2.
inline Tensor recon_nll(Tape& tape, const Tensor& y, const Tensor& y_hat, double lambda) {
  if (y.shape() != y_hat.shape()) {
    throw ShapeError("recon_nll: shape mismatch " + ad::shape_string(y.shape()) + " vs " +
                     ad::shape_string(y_hat.shape()));
  }
  return tape.scale(tape.sum(tape.square(tape.subtract(y, y_hat))), lambda);
}

// Convenience: deterministic reconstruction decode([m_y, x]) for a batch.
inline std::vector<double> reconstruct_mean(const Tensor& x, const Tensor& y, const ModelWeights& w) {
  Tape tape;
  const LatentGaussian g = latent_gaussian(tape, x, y, w);
  return decode(tape, g.mean(tape), w).to_vector();
}

}  // namespace varegress::model
