#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "varegress/binary_io.hpp"
#include "varegress/errors.hpp"
#include "varegress/image.hpp"
#include "varegress/kv.hpp"
#include "varegress/rng.hpp"

/// Synthetic image-sequence datasets and their on-disk format.
///
/// rotating-bar: scalar domain x in [0,1]; a bar rotates through pi radians
/// over a static low-frequency background.
/// pendulum-joints: an articulated arm; the domain is (cos, sin) of each
/// relative joint angle, the appearance (brightness, thickness) is fixed per
/// sequence.
///
/// Every sequence stores its generator parameters, so any frame or foreground
/// mask can be re-rendered at an arbitrary domain point.
namespace varegress::data {

inline constexpr const char* kRotatingBar = "rotating-bar";
inline constexpr const char* kPendulum = "pendulum-joints";
inline constexpr std::uint32_t kFormatVersion = 1;

using Params = std::map<std::string, double>;

struct Sequence {
  std::string id;
  std::string kind;
  ImageShape image;
  std::size_t domain_dim = 1;
  std::vector<double> x;  // T x n(X)
  std::vector<double> y;  // T x pixels, in [0,1]
  Params params;

  std::size_t length() const noexcept { return domain_dim == 0 ? 0 : x.size() / domain_dim; }
  std::span<const double> x_row(std::size_t t) const { return {x.data() + t * domain_dim, domain_dim}; }
  std::span<const double> y_row(std::size_t t) const { return {y.data() + t * image.pixels(), image.pixels()}; }
};

struct Dataset {
  std::string name;
  std::string kind;
  std::uint64_t seed = 0;
  ImageShape image;
  std::size_t domain_dim = 1;
  std::vector<Sequence> sequences;

  std::size_t size() const noexcept { return sequences.size(); }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.length();
    return n;
  }
};

/// A gathered subset of one sequence's pairs.
struct Pairs {
  std::size_t domain_dim = 1;
  std::size_t pixels = 0;
  std::vector<std::size_t> index;  // positions in the source sequence
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const noexcept { return index.size(); }
  std::span<const double> x_row(std::size_t i) const { return {x.data() + i * domain_dim, domain_dim}; }
  std::span<const double> y_row(std::size_t i) const { return {y.data() + i * pixels, pixels}; }
};

inline Pairs gather(const Sequence& seq, std::span<const std::size_t> indices) {
  Pairs p{seq.domain_dim, seq.image.pixels(), {}, {}, {}};
  for (auto t : indices) {
    if (t >= seq.length()) throw Error("gather: index " + std::to_string(t) + " out of range for " + seq.id);
    p.index.push_back(t);
    const auto xr = seq.x_row(t);
    const auto yr = seq.y_row(t);
    p.x.insert(p.x.end(), xr.begin(), xr.end());
    p.y.insert(p.y.end(), yr.begin(), yr.end());
  }
  return p;
}

// ---------------------------------------------------------------- rendering

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Anti-aliased coverage of a stroke of the given thickness.
inline double coverage(double distance, double thickness) {
  return std::clamp(thickness / 2.0 + 0.5 - distance, 0.0, 1.0);
}

struct Segment {
  double ax, ay, bx, by;
};

// Image plane: column = px - 0.5, row = py - 0.5; angles are counter-clockwise
// from the +column axis with rows pointing down.
inline double center_x(const ImageShape& s) { return static_cast<double>(s.width) / 2.0; }
inline double center_y(const ImageShape& s) { return static_cast<double>(s.height) / 2.0; }
inline double extent(const ImageShape& s) { return static_cast<double>(std::min(s.height, s.width)); }

inline double param(const Params& p, const std::string& key) {
  auto it = p.find(key);
  if (it == p.end()) throw Error("missing generator parameter '" + key + "'");
  return it->second;
}

inline Segment bar_segment(const Params& p, const ImageShape& s, double x) {
  const double theta = param(p, "start_angle") + std::numbers::pi * x;
  const double r0 = 0.1 * extent(s), r1 = 0.42 * extent(s);
  const double c = std::cos(theta), sn = std::sin(theta);
  return {center_x(s) + r0 * c, center_y(s) - r0 * sn, center_x(s) + r1 * c, center_y(s) - r1 * sn};
}

inline double bar_background(const Params& p, double u, double v) {
  const double dir = param(p, "bg_dir");
  const double wave = std::sin(2.0 * std::numbers::pi * param(p, "bg_freq") * (u * std::cos(dir) + v * std::sin(dir)) +
                               param(p, "bg_phase"));
  const double b = param(p, "bg_base") + param(p, "bg_gx") * (u - 0.5) + param(p, "bg_gy") * (v - 0.5) +
                   param(p, "bg_amp") * wave;
  return std::clamp(b, 0.05, 0.6);
}

inline std::vector<double> link_lengths(std::size_t links, const ImageShape& s) {
  double total = 0.0;
  std::vector<double> w(links);
  for (std::size_t k = 0; k < links; ++k) total += w[k] = static_cast<double>(links - k) + 1.5;
  for (auto& v : w) v *= 0.46 * extent(s) / total;
  return w;
}

inline std::vector<Segment> arm_segments(const Params& p, const ImageShape& s, std::span<const double> x) {
  const auto links = static_cast<std::size_t>(param(p, "links"));
  if (x.size() != 2 * links) throw ShapeError("pendulum: domain point must hold cos/sin per link");
  const auto len = link_lengths(links, s);
  std::vector<Segment> out;
  double px = center_x(s), py = center_y(s), theta = 0.0;
  for (std::size_t k = 0; k < links; ++k) {
    theta += std::atan2(x[2 * k + 1], x[2 * k]);
    const double qx = px + len[k] * std::cos(theta), qy = py - len[k] * std::sin(theta);
    out.push_back({px, py, qx, qy});
    px = qx;
    py = qy;
  }
  return out;
}

// Per-pixel minimum distance to a set of segments, evaluated at pixel centers.
template <class F>
void for_each_pixel(const ImageShape& s, F f) {
  for (std::size_t r = 0; r < s.height; ++r)
    for (std::size_t c = 0; c < s.width; ++c) f(r, c, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5);
}

inline double min_distance(const std::vector<Segment>& segs, double px, double py) {
  double d = 1e300;
  for (const auto& g : segs) d = std::min(d, segment_distance(px, py, g.ax, g.ay, g.bx, g.by));
  return d;
}

}  // namespace detail

/// The exact frame the generator produces at domain point x.
inline std::vector<double> render_frame(const std::string& kind, const Params& p, const ImageShape& s,
                                        std::span<const double> x) {
  std::vector<double> img(s.pixels());
  if (kind == kRotatingBar) {
    if (x.size() != 1) throw ShapeError("rotating-bar: domain is scalar");
    const auto seg = detail::bar_segment(p, s, x[0]);
    const double thick = detail::param(p, "thickness"), level = detail::param(p, "bar_level");
    detail::for_each_pixel(s, [&](std::size_t r, std::size_t c, double px, double py) {
      const double a = detail::coverage(detail::segment_distance(px, py, seg.ax, seg.ay, seg.bx, seg.by), thick);
      const double bg = detail::bar_background(p, px / static_cast<double>(s.width), py / static_cast<double>(s.height));
      const double v = detail::to_f32(bg * (1.0 - a) + level * a);
      for (std::size_t ch = 0; ch < s.channels; ++ch) img[s.index(r, c, ch)] = v;
    });
  } else if (kind == kPendulum) {
    const auto segs = detail::arm_segments(p, s, x);
    const double thick = detail::param(p, "thickness"), level = detail::param(p, "brightness");
    detail::for_each_pixel(s, [&](std::size_t r, std::size_t c, double px, double py) {
      const double v = detail::to_f32(level * detail::coverage(detail::min_distance(segs, px, py), thick));
      for (std::size_t ch = 0; ch < s.channels; ++ch) img[s.index(r, c, ch)] = v;
    });
  } else {
    throw Error("unknown generator kind '" + kind + "'");
  }
  return img;
}

/// H x W foreground mask: pixels within thickness/2 + 0.1 * min(H, W) of the
/// rendered shape.
inline std::vector<std::uint8_t> foreground_mask(const std::string& kind, const Params& p, const ImageShape& s,
                                                 std::span<const double> x) {
  std::vector<detail::Segment> segs;
  if (kind == kRotatingBar) {
    if (x.size() != 1) throw ShapeError("rotating-bar: domain is scalar");
    segs.push_back(detail::bar_segment(p, s, x[0]));
  } else if (kind == kPendulum) {
    segs = detail::arm_segments(p, s, x);
  } else {
    throw Error("unknown generator kind '" + kind + "'");
  }
  const double reach = detail::param(p, "thickness") / 2.0 + 0.1 * detail::extent(s);
  std::vector<std::uint8_t> mask(s.height * s.width);
  detail::for_each_pixel(s, [&](std::size_t r, std::size_t c, double px, double py) {
    mask[r * s.width + c] = detail::min_distance(segs, px, py) <= reach ? 1 : 0;
  });
  return mask;
}

inline std::vector<std::uint8_t> foreground_mask(const Sequence& seq, std::span<const double> x) {
  return foreground_mask(seq.kind, seq.params, seq.image, x);
}

inline std::vector<double> render_frame(const Sequence& seq, std::span<const double> x) {
  return render_frame(seq.kind, seq.params, seq.image, x);
}

// --------------------------------------------------------------- generators

struct GeneratorConfig {
  ImageShape image{};
  std::size_t links = 2;  // pendulum only
};

inline void check_image(const ImageShape& s) {
  if (s.height < 8 || s.width < 8) throw Error("generator: images must be at least 8x8, got " + s.to_string());
  if (s.channels == 0) throw Error("generator: channels must be positive");
}

inline std::string sequence_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04zu", i);
  return buf;
}

inline Dataset gen_rotating_bar(std::size_t num_sequences, std::size_t frames, const GeneratorConfig& cfg,
                                std::uint64_t seed) {
  check_image(cfg.image);
  if (frames < 2) throw Error("rotating-bar: at least 2 frames per sequence");
  Dataset ds{"rotating-bar", kRotatingBar, seed, cfg.image, 1, {}};
  const double unit = detail::extent(cfg.image) / 32.0;
  for (std::size_t i = 0; i < num_sequences; ++i) {
    Rng rng(derive_seed(seed, i));
    Params p;
    p["start_angle"] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p["thickness"] = rng.uniform(1.6, 2.4) * unit;
    p["bar_level"] = 0.95;
    p["bg_base"] = rng.uniform(0.2, 0.4);
    p["bg_gx"] = rng.uniform(-0.2, 0.2);
    p["bg_gy"] = rng.uniform(-0.2, 0.2);
    p["bg_amp"] = rng.uniform(0.0, 0.1);
    p["bg_freq"] = rng.uniform(0.5, 1.5);
    p["bg_dir"] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p["bg_phase"] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Sequence seq{sequence_id(i), kRotatingBar, cfg.image, 1, {}, {}, p};
    for (std::size_t t = 0; t < frames; ++t) {
      const double x = detail::to_f32(static_cast<double>(t) / static_cast<double>(frames - 1));
      seq.x.push_back(x);
      const auto img = render_frame(seq, std::span<const double>(&x, 1));
      seq.y.insert(seq.y.end(), img.begin(), img.end());
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

/// Relative joint angle of link k at normalized time tau.
inline double pendulum_angle(const Params& p, std::size_t k, double tau) {
  const std::string key = "link" + std::to_string(k) + ".";
  return detail::param(p, key + "center") +
         detail::param(p, key + "amp") *
             std::sin(2.0 * std::numbers::pi * detail::param(p, key + "freq") * tau + detail::param(p, key + "phase"));
}

inline Dataset gen_pendulum_joints(std::size_t num_sequences, std::size_t frames, const GeneratorConfig& cfg,
                                   std::uint64_t seed) {
  check_image(cfg.image);
  if (cfg.links != 1 && cfg.links != 2 && cfg.links != 4) {
    throw Error("pendulum-joints: link count must be 1, 2 or 4 (domain dimension 2, 4 or 8)");
  }
  if (frames < 2) throw Error("pendulum-joints: at least 2 frames per sequence");
  const std::size_t nx = 2 * cfg.links;
  Dataset ds{"pendulum-joints", kPendulum, seed, cfg.image, nx, {}};
  const double unit = detail::extent(cfg.image) / 32.0;
  for (std::size_t i = 0; i < num_sequences; ++i) {
    Rng rng(derive_seed(seed, i));
    Params p;
    p["links"] = static_cast<double>(cfg.links);
    p["brightness"] = rng.uniform(0.4, 1.0);
    p["thickness"] = rng.uniform(1.5, 3.5) * unit;
    for (std::size_t k = 0; k < cfg.links; ++k) {
      const std::string key = "link" + std::to_string(k) + ".";
      if (k == 0) {
        p[key + "center"] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p[key + "amp"] = rng.uniform(0.6, 1.6);
      } else {
        // Keeps |relative angle| <= 1.8 rad.
        const double c = rng.uniform(-0.6, 0.6);
        p[key + "center"] = c;
        p[key + "amp"] = rng.uniform(0.3, 1.8 - std::abs(c));
      }
      p[key + "freq"] = rng.uniform(0.5, 1.0);
      p[key + "phase"] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    Sequence seq{sequence_id(i), kPendulum, cfg.image, nx, {}, {}, p};
    for (std::size_t t = 0; t < frames; ++t) {
      const double tau = static_cast<double>(t) / static_cast<double>(frames - 1);
      const std::size_t row = seq.x.size();
      for (std::size_t k = 0; k < cfg.links; ++k) {
        const double phi = pendulum_angle(p, k, tau);
        seq.x.push_back(detail::to_f32(std::cos(phi)));
        seq.x.push_back(detail::to_f32(std::sin(phi)));
      }
      const auto img = render_frame(seq, std::span<const double>(seq.x.data() + row, nx));
      seq.y.insert(seq.y.end(), img.begin(), img.end());
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

inline Dataset generate(const std::string& kind, std::size_t num_sequences, std::size_t frames,
                        const GeneratorConfig& cfg, std::uint64_t seed) {
  if (kind == kRotatingBar) return gen_rotating_bar(num_sequences, frames, cfg, seed);
  if (kind == kPendulum) return gen_pendulum_joints(num_sequences, frames, cfg, seed);
  throw Error("unknown generator kind '" + kind + "' (expected rotating-bar or pendulum-joints)");
}

// -------------------------------------------------------------------- files

/// VARG: "VARG", u32 version, u32 T, u32 n(X), u32 H, u32 W, u32 C, then
/// T*n(X) float32 X and T*H*W*C float32 Y, little-endian.
inline void write_sequence(const std::string& path, const Sequence& seq) {
  io::ByteWriter out;
  out.bytes("VARG");
  out.u32(kFormatVersion);
  out.u32(static_cast<std::uint32_t>(seq.length()));
  out.u32(static_cast<std::uint32_t>(seq.domain_dim));
  out.u32(static_cast<std::uint32_t>(seq.image.height));
  out.u32(static_cast<std::uint32_t>(seq.image.width));
  out.u32(static_cast<std::uint32_t>(seq.image.channels));
  for (double v : seq.x) out.f32(static_cast<float>(v));
  for (double v : seq.y) out.f32(static_cast<float>(v));
  out.write_file(path);
}

inline Sequence read_sequence(const std::string& path) {
  auto in = io::ByteReader::from_file(path);
  in.require(28);
  if (in.bytes(4) != "VARG") throw FormatError(path, "bad magic (expected VARG)");
  if (const auto v = in.u32(); v != kFormatVersion) throw FormatError(path, "unsupported version " + std::to_string(v));
  Sequence seq;
  const std::uint64_t t = in.u32();
  seq.domain_dim = in.u32();
  seq.image = {in.u32(), in.u32(), in.u32()};
  if (t == 0 || seq.domain_dim == 0 || seq.image.pixels() == 0) throw FormatError(path, "zero dimension in header");
  const std::uint64_t floats = t * (seq.domain_dim + seq.image.pixels());
  if (in.remaining() != floats * 4) {
    throw FormatError(path, "payload size " + std::to_string(in.remaining()) + " does not match header (" +
                                std::to_string(floats * 4) + " bytes)");
  }
  seq.x.resize(t * seq.domain_dim);
  seq.y.resize(t * seq.image.pixels());
  for (auto& v : seq.x) v = in.f32();
  for (auto& v : seq.y) v = in.f32();
  return seq;
}

inline std::string manifest_path(const std::string& dir) { return (std::filesystem::path(dir) / "manifest.txt").string(); }

/// Directory with manifest.txt plus one VARG file per sequence.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError(dir, "cannot create directory: " + ec.message());
  std::string m;
  auto line = [&](const std::string& k, const std::string& v) { m += k + "=" + v + "\n"; };
  line("format_version", std::to_string(kFormatVersion));
  line("name", ds.name);
  line("kind", ds.kind);
  line("seed", std::to_string(ds.seed));
  line("height", std::to_string(ds.image.height));
  line("width", std::to_string(ds.image.width));
  line("channels", std::to_string(ds.image.channels));
  line("domain_dim", std::to_string(ds.domain_dim));
  line("sequence_count", std::to_string(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.sequences[i];
    const std::string prefix = "sequence." + std::to_string(i) + ".";
    const std::string file = s.id + ".varg";
    line(prefix + "id", s.id);
    line(prefix + "file", file);
    line(prefix + "frames", std::to_string(s.length()));
    for (const auto& [k, v] : s.params) line(prefix + "param." + k, kv::format_double(v));
    write_sequence((std::filesystem::path(dir) / file).string(), s);
  }
  std::ofstream out(manifest_path(dir), std::ios::binary | std::ios::trunc);
  out << m;
  if (!out) throw FormatError(manifest_path(dir), "write failed");
}

inline Dataset load_dataset(const std::string& dir) {
  const std::string mpath = manifest_path(dir);
  std::map<std::string, std::string> m;
  for (auto& [k, v] : kv::read_file(mpath)) {
    if (!m.emplace(k, v).second) throw FormatError(mpath, "duplicate key '" + k + "'");
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = m.find(k);
    if (it == m.end()) throw FormatError(mpath, "missing key '" + k + "'");
    return it->second;
  };
  auto get_uint = [&](const std::string& k) {
    try {
      return kv::parse_uint(get(k), k);
    } catch (const ConfigError& e) {
      throw FormatError(mpath, e.what());
    }
  };
  if (get_uint("format_version") != kFormatVersion) throw FormatError(mpath, "unsupported format_version");
  Dataset ds;
  ds.name = get("name");
  ds.kind = get("kind");
  if (ds.kind != kRotatingBar && ds.kind != kPendulum) throw FormatError(mpath, "unknown kind '" + ds.kind + "'");
  ds.seed = get_uint("seed");
  ds.image = {get_uint("height"), get_uint("width"), get_uint("channels")};
  ds.domain_dim = get_uint("domain_dim");
  const std::size_t count = get_uint("sequence_count");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string prefix = "sequence." + std::to_string(i) + ".";
    const std::string file = (std::filesystem::path(dir) / get(prefix + "file")).string();
    Sequence s = read_sequence(file);
    if (!(s.image == ds.image) || s.domain_dim != ds.domain_dim) {
      throw FormatError(file, "header dimensions disagree with manifest");
    }
    if (s.length() != get_uint(prefix + "frames")) throw FormatError(file, "frame count disagrees with manifest");
    s.id = get(prefix + "id");
    s.kind = ds.kind;
    const std::string pp = prefix + "param.";
    for (auto it = m.lower_bound(pp); it != m.end() && it->first.starts_with(pp); ++it) {
      try {
        s.params[it->first.substr(pp.size())] = kv::parse_double(it->second, it->first);
      } catch (const ConfigError& e) {
        throw FormatError(mpath, e.what());
      }
    }
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

// ------------------------------------------------------------------- splits

enum class SplitStrategy { uniform, random };

inline SplitStrategy parse_split_strategy(const std::string& s) {
  if (s == "uniform" || s == "uniform-spaced") return SplitStrategy::uniform;
  if (s == "random") return SplitStrategy::random;
  throw ConfigError("unknown split strategy '" + s + "' (expected uniform or random)");
}

struct Split {
  std::vector<std::size_t> observed;  // ascending
  std::vector<std::size_t> held_out;  // ascending
};

/// Uniform-spaced picks floor(i * T / n); random picks n indices uniformly
/// without replacement.
inline Split split_observed(std::size_t length, std::size_t n_observed, SplitStrategy strategy, std::uint64_t seed) {
  if (n_observed < 1 || n_observed >= length) {
    throw Error("split_observed: need 1 <= n_observed < " + std::to_string(length) + ", got " +
                std::to_string(n_observed));
  }
  std::vector<std::uint8_t> chosen(length, 0);
  if (strategy == SplitStrategy::uniform) {
    for (std::size_t i = 0; i < n_observed; ++i) chosen[i * length / n_observed] = 1;
  } else {
    Rng rng(seed);
    for (auto t : rng.sample_without_replacement(length, n_observed)) chosen[t] = 1;
  }
  Split s;
  for (std::size_t t = 0; t < length; ++t) (chosen[t] ? s.observed : s.held_out).push_back(t);
  return s;
}

}  // namespace varegress::data
