#pragma once

// Planted-concept synthetic datasets and the EMB1 embedding file format.
//
// EMB1 layout (all integers little-endian u32 unless noted):
//   "CCTE" | version=1 | N | L | D | C (0 without targets) | u8 flags
//   flags bit0: spatial targets present, bit1: global targets present
//   per sample: L*D f32 features (row-major) | y | [L*C f32] | [C f32]

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cct/tensor.hpp"

namespace cct {

/// Malformed or truncated binary input; offset() is the byte position.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct Sample {
  Tensor features;                  // L x D
  std::size_t label = 0;
  std::optional<Tensor> h_spatial;  // L x C
  std::optional<Tensor> h_global;   // 1 x C
  int planted_concept = -1;
};

struct Dataset {
  std::size_t num_features = 0;  // L
  std::size_t input_dim = 0;     // D
  std::size_t concepts = 0;      // C, 0 when no targets are stored
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct SynthConfig {
  std::size_t num_classes = 4;
  std::size_t concepts = 12;
  /// class -> concept indices; empty means contiguous equal blocks.
  std::vector<std::vector<std::size_t>> concepts_per_class;
  std::size_t num_features = 8;
  std::size_t input_dim = 32;
  double noise_std = 0.3;
  std::size_t samples_per_class = 500;
  double carrier_fraction = 0.5;
  bool orthogonalize = true;

  /// Assigns concepts to classes in contiguous blocks of C / n_c.
  static std::vector<std::vector<std::size_t>> contiguous(std::size_t classes,
                                                          std::size_t concepts) {
    if (classes == 0 || concepts % classes != 0) {
      throw ConfigError("concept count " + std::to_string(concepts) +
                        " is not a multiple of the class count " + std::to_string(classes));
    }
    std::vector<std::vector<std::size_t>> out(classes);
    const std::size_t per = concepts / classes;
    for (std::size_t c = 0; c < concepts; ++c) out[c / per].push_back(c);
    return out;
  }

  std::vector<std::vector<std::size_t>> mapping() const {
    return concepts_per_class.empty() ? contiguous(num_classes, concepts) : concepts_per_class;
  }

  std::size_t carriers() const {
    return static_cast<std::size_t>(
        std::ceil(carrier_fraction * static_cast<double>(num_features) - 1e-9));
  }

  void validate() const {
    if (num_classes == 0 || concepts == 0 || num_features == 0 || input_dim == 0) {
      throw ConfigError("synthetic dimensions must be positive");
    }
    if (!(carrier_fraction > 0.0 && carrier_fraction <= 1.0)) {
      throw ConfigError("carrier_fraction must lie in (0, 1]");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
    if (orthogonalize && input_dim < concepts) {
      throw ConfigError("cannot orthogonalize " + std::to_string(concepts) +
                        " prototypes in dimension " + std::to_string(input_dim));
    }
    const auto map = mapping();
    if (map.size() != num_classes) throw ConfigError("concept mapping must list every class");
    std::set<std::size_t> covered;
    for (const auto& subset : map) {
      if (subset.empty()) throw ConfigError("every class needs at least one concept");
      for (std::size_t c : subset) {
        if (c >= concepts) throw ConfigError("concept index out of range in mapping");
        covered.insert(c);
      }
    }
    if (covered.size() != concepts) throw ConfigError("concept mapping must cover every concept");
  }
};

namespace detail {

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

}  // namespace detail

/// In-place Fisher-Yates shuffle.
template <class V>
void fisher_yates(std::vector<V>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[detail::uniform_index(rng, i)]);
  }
}

/// Targets for a sample whose concept is planted in the `carriers` rows.
inline std::pair<Tensor, Tensor> build_targets(const std::vector<std::size_t>& carriers,
                                               std::size_t planted, std::size_t num_features,
                                               std::size_t concepts) {
  if (planted >= concepts) throw std::out_of_range("build_targets: concept index out of range");
  Tensor spatial(Shape{num_features, concepts});
  for (std::size_t row : carriers) {
    if (row >= num_features) throw std::out_of_range("build_targets: carrier row out of range");
    spatial(row, planted) = 1.0;
  }
  Tensor global(Shape{1, concepts});
  global(0, planted) = 1.0;
  return {std::move(spatial), std::move(global)};
}

/// C x D prototypes; orthogonal with norm sqrt(D) when requested.
inline Tensor make_prototypes(const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t C = cfg.concepts, D = cfg.input_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor protos(Shape{C, D});
  for (auto& v : protos.data()) v = normal(rng);
  if (!cfg.orthogonalize) return protos;
  const double target = std::sqrt(static_cast<double>(D));
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < D; ++k) dot += protos(i, k) * protos(j, k);
      for (std::size_t k = 0; k < D; ++k) protos(i, k) -= dot * protos(j, k);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < D; ++k) norm += protos(i, k) * protos(i, k);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < D; ++k) protos(i, k) /= norm;
  }
  for (auto& v : protos.data()) v *= target;
  return protos;
}

/// Deterministic planted-concept dataset. Every class contributes exactly
/// samples_per_class samples, interleaved class by class.
inline Dataset gen_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const Tensor protos = make_prototypes(cfg, rng);
  const auto map = cfg.mapping();
  const std::size_t L = cfg.num_features, D = cfg.input_dim, C = cfg.concepts;
  const std::size_t n_carriers = cfg.carriers();
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset ds;
  ds.num_features = L;
  ds.input_dim = D;
  ds.concepts = C;
  ds.samples.reserve(cfg.samples_per_class * cfg.num_classes);
  std::vector<std::size_t> rows(L);
  for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
    for (std::size_t y = 0; y < cfg.num_classes; ++y) {
      const std::size_t planted = map[y][detail::uniform_index(rng, map[y].size())];
      for (std::size_t r = 0; r < L; ++r) rows[r] = r;
      fisher_yates(rows, rng);
      std::vector<std::size_t> carriers(rows.begin(), rows.begin() + static_cast<long>(n_carriers));
      std::vector<bool> is_carrier(L, false);
      for (std::size_t r : carriers) is_carrier[r] = true;

      Sample s;
      s.features = Tensor(Shape{L, D});
      for (std::size_t r = 0; r < L; ++r) {
        for (std::size_t k = 0; k < D; ++k) {
          const double base = is_carrier[r] ? protos(planted, k) : 0.0;
          s.features(r, k) = cfg.noise_std > 0.0 ? base + cfg.noise_std * noise(rng) : base;
        }
      }
      s.label = y;
      auto [hs, hg] = build_targets(carriers, planted, L, C);
      s.h_spatial = std::move(hs);
      s.h_global = std::move(hg);
      s.planted_concept = static_cast<int>(planted);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Splits off the trailing `held_out` samples. Generated data is interleaved
/// by class, so a multiple of the class count keeps both parts balanced.
inline std::pair<Dataset, Dataset> split_tail(const Dataset& ds, std::size_t held_out) {
  if (held_out > ds.size()) {
    throw std::invalid_argument("cannot hold out " + std::to_string(held_out) + " of " +
                                std::to_string(ds.size()) + " samples");
  }
  Dataset head = ds, tail = ds;
  head.samples.assign(ds.samples.begin(), ds.samples.end() - static_cast<long>(held_out));
  tail.samples.assign(ds.samples.end() - static_cast<long>(held_out), ds.samples.end());
  return {std::move(head), std::move(tail)};
}

// ---------------------------------------------------------------------------
// EMB1

inline constexpr char kEmbMagic[4] = {'C', 'C', 'T', 'E'};
inline constexpr std::uint32_t kEmbVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw std::length_error(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<long>(pos_),
                  bytes_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::uint64_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline int planted_from_targets(const Sample& s) {
  auto argmax_nonzero = [](const Tensor& t, std::size_t row) -> int {
    int best = -1;
    double hi = 0.0;
    for (std::size_t c = 0; c < t.cols(); ++c) {
      if (t(row, c) > hi) {
        hi = t(row, c);
        best = static_cast<int>(c);
      }
    }
    return best;
  };
  if (s.h_global) return argmax_nonzero(*s.h_global, 0);
  if (s.h_spatial) {
    for (std::size_t r = 0; r < s.h_spatial->rows(); ++r) {
      const int c = argmax_nonzero(*s.h_spatial, r);
      if (c >= 0) return c;
    }
  }
  return -1;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_emb(const Dataset& ds) {
  const std::size_t L = ds.num_features, D = ds.input_dim, C = ds.concepts;
  bool spatial = !ds.empty() && ds.samples.front().h_spatial.has_value();
  bool global = !ds.empty() && ds.samples.front().h_global.has_value();
  for (const auto& s : ds.samples) {
    if (s.features.shape() != Shape{L, D}) {
      throw ShapeError("sample features " + shape_string(s.features.shape()) + " do not match " +
                       shape_string({L, D}));
    }
    if (s.h_spatial.has_value() != spatial || s.h_global.has_value() != global) {
      throw std::invalid_argument("EMB1 needs every sample to carry the same target kinds");
    }
    if (spatial && s.h_spatial->shape() != Shape{L, C}) throw ShapeError("spatial target shape mismatch");
    if (global && s.h_global->size() != C) throw ShapeError("global target shape mismatch");
  }
  if ((spatial || global) && C == 0) throw std::invalid_argument("targets present but C is 0");

  std::vector<std::uint8_t> out(std::begin(kEmbMagic), std::end(kEmbMagic));
  detail::put_u32(out, kEmbVersion);
  detail::put_u32(out, detail::checked_u32(ds.size(), "sample count"));
  detail::put_u32(out, detail::checked_u32(L, "L"));
  detail::put_u32(out, detail::checked_u32(D, "D"));
  detail::put_u32(out, detail::checked_u32(spatial || global ? C : 0, "C"));
  out.push_back(static_cast<std::uint8_t>((spatial ? 1 : 0) | (global ? 2 : 0)));
  for (const auto& s : ds.samples) {
    for (double v : s.features.data()) detail::put_f32(out, v);
    detail::put_u32(out, detail::checked_u32(s.label, "label"));
    if (spatial)
      for (double v : s.h_spatial->data()) detail::put_f32(out, v);
    if (global)
      for (double v : s.h_global->data()) detail::put_f32(out, v);
  }
  return out;
}

inline Dataset decode_emb(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  if (in.bytes(4, "magic") != std::string(kEmbMagic, 4)) throw FormatError("bad EMB1 magic", 0);
  const std::uint32_t version = in.u32("version");
  if (version != kEmbVersion) {
    throw FormatError("unsupported EMB1 version " + std::to_string(version), 4);
  }
  const std::uint64_t dims_at = in.offset();
  const std::uint64_t n = in.u32("header"), L = in.u32("header"), D = in.u32("header"),
                      C = in.u32("header");
  const std::uint8_t flags = in.u8("header");
  if (flags & ~0x3u) throw FormatError("unknown EMB1 flag bits", in.offset() - 1);
  const bool spatial = flags & 1, global = flags & 2;
  if ((spatial || global) && C == 0) throw FormatError("targets flagged but C is 0", dims_at + 12);

  // 32-bit dims multiply into at most ~2^66 floats, so check in 128 bits.
  const unsigned __int128 floats = static_cast<unsigned __int128>(L) * D +
                                   (spatial ? static_cast<unsigned __int128>(L) * C : 0) +
                                   (global ? C : 0);
  const unsigned __int128 per_sample = floats * 4 + 4;
  if (per_sample * n > in.remaining()) {
    if (per_sample * n > (static_cast<unsigned __int128>(1) << 62)) {
      throw FormatError("EMB1 dimensions overflow", dims_at);
    }
    throw FormatError("truncated EMB1 payload: header promises " +
                          std::to_string(static_cast<std::uint64_t>(per_sample * n)) +
                          " bytes, file holds " + std::to_string(in.remaining()),
                      in.offset());
  }

  Dataset ds;
  ds.num_features = L;
  ds.input_dim = D;
  ds.concepts = C;
  ds.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.features = Tensor(Shape{L, D});
    for (auto& v : s.features.data()) v = in.f32("features");
    s.label = in.u32("label");
    if (spatial) {
      Tensor h(Shape{L, C});
      for (auto& v : h.data()) v = in.f32("spatial target");
      s.h_spatial = std::move(h);
    }
    if (global) {
      Tensor h(Shape{1, C});
      for (auto& v : h.data()) v = in.f32("global target");
      s.h_global = std::move(h);
    }
    s.planted_concept = detail::planted_from_targets(s);
    ds.samples.push_back(std::move(s));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after EMB1 payload", in.offset());
  return ds;
}

inline void write_emb(const Dataset& ds, const std::string& path) {
  detail::write_file(path, encode_emb(ds));
}

inline Dataset read_emb(const std::string& path) { return decode_emb(detail::read_file(path)); }

}  // namespace cct
