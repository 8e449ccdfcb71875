#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "cct/data.hpp"

using cct::Dataset;
using cct::SynthConfig;
using cct::Tensor;

namespace {

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.num_classes = 4;
  cfg.concepts = 12;
  cfg.num_features = 8;
  cfg.input_dim = 32;
  cfg.samples_per_class = 25;
  return cfg;
}

void u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void f32(std::vector<std::uint8_t>& out, float v) { u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint64_t format_offset(const std::vector<std::uint8_t>& bytes) {
  try {
    cct::decode_emb(bytes);
  } catch (const cct::FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected FormatError";
  return 0;
}

Dataset random_dataset(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 5), count(0, 6), label(0, 9);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal(0.0, 10.0);
  Dataset ds;
  ds.num_features = dim(rng);
  ds.input_dim = dim(rng);
  const bool spatial = coin(rng), global = coin(rng);
  ds.concepts = (spatial || global) ? dim(rng) : 0;
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    cct::Sample s;
    s.features = Tensor(cct::Shape{ds.num_features, ds.input_dim});
    for (auto& v : s.features.data()) v = static_cast<float>(normal(rng));
    s.label = label(rng);
    if (spatial) {
      s.h_spatial = Tensor(cct::Shape{ds.num_features, ds.concepts});
      for (auto& v : s.h_spatial->data()) v = coin(rng) ? 1.0 : 0.0;
    }
    if (global) {
      s.h_global = Tensor(cct::Shape{1, ds.concepts});
      for (auto& v : s.h_global->data()) v = static_cast<float>(normal(rng));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generation

TEST(GenSynthetic, SameSeedGivesIdenticalBytes) {
  const SynthConfig cfg = small_synth();
  EXPECT_EQ(cct::encode_emb(cct::gen_synthetic(cfg, 42)), cct::encode_emb(cct::gen_synthetic(cfg, 42)));
  EXPECT_NE(cct::encode_emb(cct::gen_synthetic(cfg, 42)), cct::encode_emb(cct::gen_synthetic(cfg, 43)));
}

TEST(GenSynthetic, NoiseFreeFullCarriersEqualPrototypes) {
  SynthConfig cfg = small_synth();
  cfg.noise_std = 0.0;
  cfg.carrier_fraction = 1.0;
  const Dataset ds = cct::gen_synthetic(cfg, 1);
  std::mt19937_64 rng(1);
  const Tensor protos = cct::make_prototypes(cfg, rng);
  for (const auto& s : ds.samples) {
    ASSERT_GE(s.planted_concept, 0);
    for (std::size_t r = 0; r < cfg.num_features; ++r) {
      for (std::size_t k = 0; k < cfg.input_dim; ++k) {
        ASSERT_EQ(s.features(r, k), protos(static_cast<std::size_t>(s.planted_concept), k));
      }
    }
  }
}

TEST(GenSynthetic, PrototypesAreOrthogonal) {
  const SynthConfig cfg = small_synth();
  std::mt19937_64 rng(8);
  const Tensor p = cct::make_prototypes(cfg, rng);
  for (std::size_t i = 0; i < cfg.concepts; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < cfg.input_dim; ++k) dot += p(i, k) * p(j, k);
      EXPECT_NEAR(dot, i == j ? static_cast<double>(cfg.input_dim) : 0.0, 1e-9);
    }
  }
}

TEST(GenSynthetic, ClassRecoverableFromPlantedConcept) {
  const SynthConfig cfg = small_synth();
  const auto map = cfg.mapping();
  std::vector<std::size_t> inverse(cfg.concepts);
  for (std::size_t y = 0; y < map.size(); ++y) {
    EXPECT_EQ(map[y].size(), 3u);
    for (std::size_t c : map[y]) inverse[c] = y;
  }
  for (const auto& s : cct::gen_synthetic(cfg, 3).samples) {
    EXPECT_EQ(inverse[static_cast<std::size_t>(s.planted_concept)], s.label);
  }
}

TEST(GenSynthetic, LabelMarginalsMatchSamplesPerClass) {
  const SynthConfig cfg = small_synth();
  const Dataset ds = cct::gen_synthetic(cfg, 4);
  std::vector<std::size_t> counts(cfg.num_classes);
  for (const auto& s : ds.samples) ++counts[s.label];
  for (std::size_t c : counts) EXPECT_EQ(c, cfg.samples_per_class);
}

TEST(GenSynthetic, TargetsFollowCarrierRows) {
  SynthConfig cfg = small_synth();
  cfg.carrier_fraction = 0.3;  // ceil(2.4) = 3 rows
  for (const auto& s : cct::gen_synthetic(cfg, 5).samples) {
    double total = 0.0;
    for (std::size_t r = 0; r < cfg.num_features; ++r) {
      double row = 0.0;
      for (std::size_t c = 0; c < cfg.concepts; ++c) row += (*s.h_spatial)(r, c);
      EXPECT_TRUE(row == 0.0 || (row == 1.0 && (*s.h_spatial)(r, static_cast<std::size_t>(s.planted_concept)) == 1.0));
      total += row;
    }
    EXPECT_EQ(total, 3.0);
    EXPECT_EQ((*s.h_global)(0, static_cast<std::size_t>(s.planted_concept)), 1.0);
  }
}

TEST(GenSynthetic, NearestPrototypeRecoversEveryConceptWithoutNoise) {
  SynthConfig cfg = small_synth();
  cfg.noise_std = 0.0;
  const Dataset ds = cct::gen_synthetic(cfg, 6);
  std::mt19937_64 rng(6);
  const Tensor protos = cct::make_prototypes(cfg, rng);
  std::size_t rows = 0, hits = 0;
  for (const auto& s : ds.samples) {
    for (std::size_t r = 0; r < cfg.num_features; ++r) {
      if ((*s.h_spatial)(r, static_cast<std::size_t>(s.planted_concept)) != 1.0) continue;
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < cfg.concepts; ++c) {
        double d = 0.0;
        for (std::size_t k = 0; k < cfg.input_dim; ++k) {
          const double diff = s.features(r, k) - protos(c, k);
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      ++rows;
      hits += best == static_cast<std::size_t>(s.planted_concept);
    }
  }
  EXPECT_GT(rows, 0u);
  EXPECT_EQ(hits, rows);
}

TEST(GenSynthetic, RejectsTooFewDimensionsForOrthogonalPrototypes) {
  SynthConfig cfg = small_synth();
  cfg.input_dim = 8;
  EXPECT_THROW(cct::gen_synthetic(cfg, 0), cct::ConfigError);
  cfg.orthogonalize = false;
  EXPECT_NO_THROW(cct::gen_synthetic(cfg, 0));
}

TEST(GenSynthetic, RejectsBadConfigs) {
  SynthConfig cfg = small_synth();
  cfg.carrier_fraction = 0.0;
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
  cfg = small_synth();
  cfg.concepts_per_class = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {}};
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
  cfg.concepts_per_class = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {9, 10}};
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
}

TEST(BuildTargets, SingleCarrierRow) {
  const auto [hs, hg] = cct::build_targets({0}, 2, 2, 3);
  EXPECT_EQ(hs, Tensor::matrix({{0, 0, 1}, {0, 0, 0}}));
  EXPECT_EQ(hg, Tensor::matrix({{0, 0, 1}}));
}

TEST(BuildTargets, AllRowsCarrying) {
  const auto [hs, hg] = cct::build_targets({0, 1, 2}, 1, 3, 2);
  EXPECT_EQ(hs, Tensor::matrix({{0, 1}, {0, 1}, {0, 1}}));
}

TEST(SplitTail, KeepsOrderAndSizes) {
  const Dataset ds = cct::gen_synthetic(small_synth(), 9);
  const auto [head, tail] = cct::split_tail(ds, 20);
  EXPECT_EQ(head.size(), 80u);
  EXPECT_EQ(tail.size(), 20u);
  EXPECT_EQ(tail.samples.front().features, ds.samples[80].features);
  EXPECT_EQ(tail.input_dim, ds.input_dim);
  EXPECT_THROW(cct::split_tail(ds, 101), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// EMB1

TEST(Emb, HandBuiltFixtureParses) {
  std::vector<std::uint8_t> bytes{'C', 'C', 'T', 'E'};
  u32(bytes, 1);  // version
  u32(bytes, 1);  // N
  u32(bytes, 2);  // L
  u32(bytes, 2);  // D
  u32(bytes, 0);  // C
  bytes.push_back(0);
  for (float v : {1.5f, -2.0f, 0.25f, 3.0f}) f32(bytes, v);
  u32(bytes, 3);
  ASSERT_EQ(bytes.size(), 25u + 16u + 4u);

  const Dataset ds = cct::decode_emb(bytes);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.num_features, 2u);
  EXPECT_EQ(ds.input_dim, 2u);
  EXPECT_EQ(ds.concepts, 0u);
  EXPECT_EQ(ds.samples[0].features, Tensor::matrix({{1.5, -2.0}, {0.25, 3.0}}));
  EXPECT_EQ(ds.samples[0].label, 3u);
  EXPECT_FALSE(ds.samples[0].h_spatial);
  EXPECT_FALSE(ds.samples[0].h_global);
  EXPECT_EQ(cct::encode_emb(ds), bytes);
}

TEST(Emb, EmptyDatasetIsValid) {
  std::vector<std::uint8_t> bytes{'C', 'C', 'T', 'E'};
  u32(bytes, 1);
  u32(bytes, 0);
  u32(bytes, 4);
  u32(bytes, 3);
  u32(bytes, 0);
  bytes.push_back(0);
  const Dataset ds = cct::decode_emb(bytes);
  EXPECT_TRUE(ds.empty());
  EXPECT_EQ(ds.num_features, 4u);
  EXPECT_EQ(cct::encode_emb(ds), bytes);
}

TEST(Emb, FileRoundTripOfSyntheticData) {
  const Dataset ds = cct::gen_synthetic(small_synth(), 12);
  const auto path = (std::filesystem::temp_directory_path() / "cct_test_roundtrip.emb").string();
  cct::write_emb(ds, path);
  const Dataset back = cct::read_emb(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].planted_concept, ds.samples[i].planted_concept);
    EXPECT_EQ(back.samples[i].h_spatial, ds.samples[i].h_spatial);
  }
  EXPECT_EQ(cct::encode_emb(back), cct::encode_emb(ds));
}

TEST(EmbProperty, RandomDatasetsRoundTripBytes) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const Dataset ds = random_dataset(rng);
    const auto bytes = cct::encode_emb(ds);
    const Dataset back = cct::decode_emb(bytes);
    ASSERT_EQ(cct::encode_emb(back), bytes) << "trial " << trial;
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      ASSERT_EQ(back.samples[i].features, ds.samples[i].features);
      ASSERT_EQ(back.samples[i].label, ds.samples[i].label);
      ASSERT_EQ(back.samples[i].h_spatial, ds.samples[i].h_spatial);
      ASSERT_EQ(back.samples[i].h_global, ds.samples[i].h_global);
    }
  }
}

TEST(EmbErrors, BadMagicAtOffsetZero) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  bytes[0] = 'X';
  EXPECT_EQ(format_offset(bytes), 0u);
}

TEST(EmbErrors, UnsupportedVersion) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  bytes[4] = 2;
  EXPECT_EQ(format_offset(bytes), 4u);
}

TEST(EmbErrors, TruncatedHeader) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  bytes.resize(10);
  EXPECT_EQ(format_offset(bytes), 8u);
}

TEST(EmbErrors, TruncatedPayloadReportsPayloadStart) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  bytes.pop_back();
  EXPECT_EQ(format_offset(bytes), 25u);
}

TEST(EmbErrors, OverflowingDimensions) {
  std::vector<std::uint8_t> bytes{'C', 'C', 'T', 'E'};
  u32(bytes, 1);
  u32(bytes, 0xffffffffu);
  u32(bytes, 0xffffffffu);
  u32(bytes, 0xffffffffu);
  u32(bytes, 0);
  bytes.push_back(0);
  try {
    cct::decode_emb(bytes);
    FAIL() << "expected FormatError";
  } catch (const cct::FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
    EXPECT_NE(std::string(e.what()).find("overflow"), std::string::npos) << e.what();
  }
}

TEST(EmbErrors, TrailingBytes) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  const auto size = bytes.size();
  bytes.push_back(0);
  EXPECT_EQ(format_offset(bytes), size);
}

TEST(EmbErrors, UnknownFlagBits) {
  auto bytes = cct::encode_emb(cct::gen_synthetic(small_synth(), 1));
  bytes[24] |= 0x4;
  EXPECT_EQ(format_offset(bytes), 24u);
}

TEST(EmbErrors, MissingFile) {
  EXPECT_THROW(cct::read_emb("/nonexistent/dir/none.emb"), std::runtime_error);
}
