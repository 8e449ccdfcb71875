#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cct/checkpoint.hpp"
#include "cct/trainer.hpp"

using cct::Metrics;
using cct::Tensor;
using cct::TrainConfig;

namespace {

cct::Dataset tiny_data(std::size_t per_class = 12, std::uint64_t seed = 3) {
  cct::SynthConfig s;
  s.num_classes = 2;
  s.concepts = 4;
  s.num_features = 4;
  s.input_dim = 8;
  s.samples_per_class = per_class;
  return cct::gen_synthetic(s, seed);
}

TrainConfig tiny_config(const cct::Dataset& data) {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 5;
  cfg.lr = 1e-3;
  cfg.warmup_iters = 2;
  cfg.seed = 11;
  cfg.head.concepts = data.concepts;
  cfg.head.slot_dim = 8;
  cfg.head.input_dim = data.input_dim;
  cfg.head.num_features = data.num_features;
  cfg.head.num_classes = 2;
  return cfg;
}

std::vector<Tensor> snapshot(cct::ModelParams<double> p) {
  std::vector<Tensor> out;
  for (auto* t : p.tensors()) out.push_back(*t);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer and schedule

TEST(AdamW, OneStepHandValue) {
  Tensor theta = Tensor::vector({1.0});
  std::vector<Tensor*> params{&theta};
  std::vector<Tensor> grads{Tensor::vector({1.0})};
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cct::OptimizerState state;
  cct::adamw_step(params, grads, state, cfg, 1e-3);
  EXPECT_NEAR(theta[0], 1.0 - 1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(theta[0], 0.999000, 5e-7);
  EXPECT_EQ(state.step, 1u);
  EXPECT_NEAR(state.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(state.v[0][0], 0.001, 1e-15);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  Tensor theta = Tensor::vector({0.5, -2.0});
  const Tensor before = theta;
  std::vector<Tensor*> params{&theta};
  std::vector<Tensor> grads{Tensor::vector({0.0, 0.0})};
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cct::OptimizerState state;
  cct::adamw_step(params, grads, state, cfg, 1e-2);
  EXPECT_EQ(theta, before);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  Tensor theta = Tensor::vector({0.5, -2.0});
  std::vector<Tensor*> params{&theta};
  std::vector<Tensor> grads{Tensor::vector({0.0, 0.0})};
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  cct::OptimizerState state;
  cct::adamw_step(params, grads, state, cfg, 1e-2);
  EXPECT_DOUBLE_EQ(theta[0], 0.5 * (1.0 - 1e-3));
  EXPECT_DOUBLE_EQ(theta[1], -2.0 * (1.0 - 1e-3));
}

TEST(AdamW, NonFiniteGradientAbortsWithoutChanges) {
  Tensor a = Tensor::vector({1.0}), b = Tensor::vector({2.0});
  std::vector<Tensor*> params{&a, &b};
  std::vector<Tensor> grads{Tensor::vector({0.3}), Tensor::vector({std::nan("")})};
  TrainConfig cfg;
  cct::OptimizerState state;
  try {
    cct::adamw_step(params, grads, state, cfg, 1e-3);
    FAIL() << "expected TrainingError";
  } catch (const cct::TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter 1 index 0"), std::string::npos) << e.what();
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(b[0], 2.0);
  EXPECT_EQ(state.step, 0u);
  EXPECT_TRUE(state.m.empty());
}

TEST(LrSchedule, LinearWarmupThenConstant) {
  TrainConfig cfg;
  cfg.lr = 5e-5;
  cfg.warmup_iters = 10;
  EXPECT_DOUBLE_EQ(cct::lr_at(0, cfg), 5e-6);
  EXPECT_DOUBLE_EQ(cct::lr_at(4, cfg), 2.5e-5);
  EXPECT_EQ(cct::lr_at(9, cfg), 5e-5);
  EXPECT_EQ(cct::lr_at(10, cfg), 5e-5);
  EXPECT_EQ(cct::lr_at(1000, cfg), 5e-5);
  cfg.warmup_iters = 0;
  EXPECT_EQ(cct::lr_at(0, cfg), 5e-5);
}

TEST(TrainConfigCheck, RejectsInvalidValues) {
  TrainConfig cfg;
  cfg.beta1 = 1.0;
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
  cfg = TrainConfig{};
  cfg.weights.sparse = -1;
  EXPECT_THROW(cfg.validate(), cct::ConfigError);
}

// ---------------------------------------------------------------------------
// fit

TEST(Fit, TwoRunsAreBitIdentical) {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config(data);
  const auto a = cct::fit(data, cfg);
  const auto b = cct::fit(data, cfg);
  ASSERT_EQ(a.metrics.size(), 4u);
  EXPECT_EQ(a.metrics, b.metrics);
  EXPECT_EQ(snapshot(a.params), snapshot(b.params));
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(cct::format_metrics_row(a.metrics[i]), cct::format_metrics_row(b.metrics[i]));
  }
}

TEST(Fit, SeedChangesTheRun) {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config(data);
  const auto a = cct::fit(data, cfg);
  cfg.seed = 12;
  EXPECT_NE(a.metrics, cct::fit(data, cfg).metrics);
}

TEST(Fit, ZeroLearningRateLeavesParametersUnchanged) {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config(data);
  cfg.lr = 0.0;
  cfg.head.variant = cct::SlotVariant::BOQSA;
  for (double wd : {0.0, 1e-3}) {
    cfg.weight_decay = wd;
    const auto initial = snapshot(cct::init_model(cfg.head, cfg.seed));
    const auto run = cct::fit(data, cfg);
    EXPECT_EQ(snapshot(run.params), initial);
    for (const Metrics& m : run.metrics) {
      // sums run in shuffled order, so allow summation rounding only
      EXPECT_NEAR(m.loss_total, run.metrics[0].loss_total, 1e-12);
      EXPECT_EQ(m.class_acc, run.metrics[0].class_acc);
      EXPECT_EQ(m.concept_top1_acc, run.metrics[0].concept_top1_acc);
    }
  }
}

TEST(Fit, MemorizesASingleSample) {
  auto data = tiny_data(1);
  data.samples.resize(1);
  TrainConfig cfg = tiny_config(data);
  cfg.epochs = 400;
  cfg.batch_size = 1;
  cfg.lr = 1e-2;
  cfg.warmup_iters = 0;
  cfg.weight_decay = 0.0;
  cfg.weights = {0.0, 0.0};
  cfg.head.variant = cct::SlotVariant::BOQSA;
  const auto run = cct::fit(data, cfg);
  // cross-entropy is bounded below by 0
  EXPECT_LT(run.metrics.back().loss_total, 1e-3);
  EXPECT_EQ(run.metrics.back().class_acc, 1.0);
}

TEST(Fit, EmptyDatasetRejected) {
  cct::Dataset empty;
  const TrainConfig cfg = tiny_config(tiny_data());
  EXPECT_THROW(cct::fit(empty, cfg), std::invalid_argument);
}

TEST(Fit, NonFiniteInputAbortsWithLocation) {
  auto data = tiny_data();
  for (auto& s : data.samples) s.features(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const TrainConfig cfg = tiny_config(data);
  try {
    cct::fit(data, cfg);
    FAIL() << "expected TrainingError";
  } catch (const cct::TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1 batch 0"), std::string::npos) << msg;
  }
}

TEST(Fit, ExplanationLossDecreasesAfterWarmup) {
  cct::SynthConfig s;
  s.samples_per_class = 40;
  const auto data = cct::gen_synthetic(s, 21);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.lr = 1e-3;
  cfg.seed = 2;
  cfg.head.concepts = data.concepts;
  cfg.head.input_dim = data.input_dim;
  cfg.head.num_features = data.num_features;
  cfg.head.num_classes = 4;
  const auto run = cct::fit(data, cfg);
  const std::size_t warmup_epochs = 4;  // 10 steps at 3 batches per epoch
  for (std::size_t e = warmup_epochs; e < run.metrics.size(); ++e) {
    EXPECT_LE(run.metrics[e].loss_expl, run.metrics[e - 1].loss_expl * 1.05) << "epoch " << e + 1;
  }
  EXPECT_LT(run.metrics.back().loss_expl, run.metrics[warmup_epochs - 1].loss_expl);
}

TEST(Fit, SparsityLowersEntropyWithoutExplanations) {
  cct::SynthConfig s;
  s.samples_per_class = 40;
  const auto data = cct::gen_synthetic(s, 22);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1e-3;
  cfg.seed = 3;
  cfg.head.concepts = data.concepts;
  cfg.head.input_dim = data.input_dim;
  cfg.head.num_features = data.num_features;
  cfg.head.num_classes = 4;
  cfg.weights = {0.0, 0.5};
  const double with = cct::fit(data, cfg).metrics.back().mean_entropy;
  cfg.weights = {0.0, 0.0};
  const double without = cct::fit(data, cfg).metrics.back().mean_entropy;
  EXPECT_LT(with, without);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto data = tiny_data();
  std::vector<std::uint8_t> bytes;
  cct::fit(data, tiny_config(data), [&](const cct::TrainState& st, const Metrics& m) {
    if (m.epoch == 2) bytes = cct::encode_checkpoint(st);
  });
  ASSERT_FALSE(bytes.empty());
  const cct::TrainState back = cct::decode_checkpoint(bytes);
  EXPECT_EQ(back.epoch, 2u);
  EXPECT_EQ(cct::encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTripPreservesTensors) {
  const auto data = tiny_data();
  cct::TrainState state = cct::init_train_state(tiny_config(data));
  cct::train_epoch(state, data);
  const auto path = (std::filesystem::temp_directory_path() / "cct_test.ckpt").string();
  cct::save_checkpoint(state, path);
  cct::TrainState back = cct::load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(snapshot(back.params), snapshot(state.params));
  EXPECT_EQ(back.opt.m, state.opt.m);
  EXPECT_EQ(back.opt.v, state.opt.v);
  EXPECT_EQ(back.opt.step, state.opt.step);
  EXPECT_EQ(back.rng, state.rng);
  EXPECT_EQ(back.cfg.seed, state.cfg.seed);
  EXPECT_EQ(back.cfg.head.concepts, state.cfg.head.concepts);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config(data);
  cfg.epochs = 5;
  std::vector<std::uint8_t> at_two;
  const auto full = cct::fit(data, cfg, [&](const cct::TrainState& st, const Metrics& m) {
    if (m.epoch == 2) at_two = cct::encode_checkpoint(st);
  });
  cct::TrainState state = cct::decode_checkpoint(at_two);
  const auto rest = cct::resume(state, data);
  ASSERT_EQ(rest.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(cct::format_metrics_row(rest[i]), cct::format_metrics_row(full.metrics[i + 2]));
  }
  EXPECT_EQ(snapshot(state.params), snapshot(full.params));
}

TEST(Checkpoint, CorruptMagicIsRejected) {
  const auto data = tiny_data();
  auto bytes = cct::encode_checkpoint(cct::init_train_state(tiny_config(data)));
  bytes[0] = 'X';
  try {
    cct::decode_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const cct::FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, TruncationAndVersionAreRejected) {
  const auto data = tiny_data();
  const auto good = cct::encode_checkpoint(cct::init_train_state(tiny_config(data)));
  for (std::size_t cut : {std::size_t{6}, good.size() / 2, good.size() - 1}) {
    auto bytes = good;
    bytes.resize(cut);
    EXPECT_THROW(cct::decode_checkpoint(bytes), cct::FormatError) << "cut " << cut;
  }
  auto bytes = good;
  bytes[4] = 9;
  EXPECT_THROW(cct::decode_checkpoint(bytes), cct::FormatError);
}
