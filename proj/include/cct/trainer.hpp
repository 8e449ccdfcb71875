#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cct/data.hpp"
#include "cct/metrics.hpp"
#include "cct/model.hpp"

namespace cct {

/// Defaults follow the CIFAR100 super-class recipe: batch 64, warmup 10,
/// lr 5e-5, weight decay 1e-3, lambda_expl 1.0, lambda_sparse 0.5.
struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 5e-5;
  std::size_t warmup_iters = 10;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  LossWeights weights;
  HeadConfig head;
  /// Fills wall_seconds; off by default so metric logs are reproducible.
  bool record_wall_time = false;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("optimizer eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    weights.validate();
    head.validate();
  }
};

struct OptimizerState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

/// Raised when training hits a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear warmup lr * (iter + 1) / warmup over the first `warmup_iters`
/// optimizer steps, constant afterwards.
inline double lr_at(std::uint64_t iter, const TrainConfig& cfg) {
  if (cfg.warmup_iters == 0 || iter >= cfg.warmup_iters) return cfg.lr;
  return cfg.lr * static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup_iters);
}

/// AdamW with decoupled weight decay. Nothing is modified when a gradient is
/// not finite.
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                       OptimizerState& state, const TrainConfig& cfg, double lr_t) {
  if (params.size() != grads.size()) throw std::invalid_argument("adamw_step: gradient count mismatch");
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (grads[p].shape() != params[p]->shape()) {
      throw ShapeError("adamw_step: gradient shape mismatch for parameter " + std::to_string(p));
    }
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      if (!std::isfinite(grads[p][i])) {
        throw TrainingError("non-finite gradient at parameter " + std::to_string(p) + " index " +
                            std::to_string(i) + " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(Tensor::zeros_like(*p));
      state.v.push_back(Tensor::zeros_like(*p));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state size mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grads[p][i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] = theta[i] - lr_t * (m_hat / (std::sqrt(v_hat) + cfg.eps)) -
                 lr_t * cfg.weight_decay * theta[i];
    }
  }
}

/// Everything needed to continue training bit-identically.
struct TrainState {
  TrainConfig cfg;
  ModelParams<double> params;
  OptimizerState opt;
  std::size_t epoch = 0;  // completed epochs
  std::mt19937_64 rng;    // slot sampling
};

inline TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.params = init_model(cfg.head, cfg.seed);
  s.rng.seed(cfg.seed + 1);
  return s;
}

inline ConceptMode concept_mode(Pathway p) {
  return uses_global(p) ? ConceptMode::Global : ConceptMode::Spatial;
}

namespace detail {

/// Running sums that turn into one Metrics record.
struct MetricAccumulator {
  ConceptMode mode;
  double cls = 0, expl = 0, sparse = 0, total = 0, entropy = 0;
  std::size_t samples = 0, correct = 0, concept_hits = 0, concept_total = 0;

  template <class Out>
  void add(const Sample& s, const Out& out) {
    cls += out.cls;
    expl += out.expl;
    sparse += out.sparse;
    total += out.total;
    entropy += out.sparse;
    ++samples;
    correct += argmax_row(out.logits) == s.label;
    const Tensor* map = mode == ConceptMode::Global ? out.global_attention : out.spatial_attention;
    const auto& target = mode == ConceptMode::Global ? s.h_global : s.h_spatial;
    if (map && target) {
      const auto [h, n] = concept_matches(*map, *target, mode);
      concept_hits += h;
      concept_total += n;
    }
  }

  Metrics finish(std::size_t epoch) const {
    if (samples == 0) throw UndefinedMetric("no samples evaluated");
    const double n = static_cast<double>(samples);
    Metrics m;
    m.epoch = epoch;
    m.loss_cls = cls / n;
    m.loss_expl = expl / n;
    m.loss_sparse = sparse / n;
    m.loss_total = total / n;
    m.class_acc = static_cast<double>(correct) / n;
    m.concept_top1_acc =
        concept_total ? static_cast<double>(concept_hits) / static_cast<double>(concept_total) : 0.0;
    m.mean_entropy = entropy / n;
    return m;
  }
};

struct SampleValues {
  double cls, expl, sparse, total;
  Tensor logits;
  const Tensor* spatial_attention = nullptr;
  const Tensor* global_attention = nullptr;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// One pass over the dataset in seeded Fisher-Yates order (seed xor epoch).
/// Per-sample gradients are summed in batch order, then averaged.
inline Metrics train_epoch(TrainState& state, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = state.cfg;
  const std::size_t epoch = state.epoch + 1;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(cfg.seed ^ static_cast<std::uint64_t>(epoch));
  fisher_yates(order, shuffle_rng);

  auto params = state.params.tensors();
  std::vector<Tensor> grads;
  detail::MetricAccumulator acc{concept_mode(cfg.head.pathway)};

  for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += cfg.batch_size, ++batch) {
    const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
    grads.clear();
    for (auto* p : params) grads.push_back(Tensor::zeros_like(*p));
    try {
      for (std::size_t k = begin; k < end; ++k) {
        const Sample& s = data.samples[order[k]];
        Tape<double> tape;
        auto out = sample_loss(tape, state.params, cfg.head, s, cfg.weights, state.rng);
        tape.backward(out.total);
        for (std::size_t p = 0; p < params.size(); ++p) {
          if (!tape.has_param(*params[p])) continue;
          const Tensor g = tape.param_grad(*params[p]);
          for (std::size_t i = 0; i < g.size(); ++i) grads[p][i] += g[i];
        }
        detail::SampleValues vals{out.cls.value().item(), out.expl.value().item(),
                                  out.sparse.value().item(), out.total.value().item(),
                                  out.head.logits.value()};
        if (out.head.spatial) vals.spatial_attention = &out.head.spatial->ca.attention.value();
        if (out.head.global) vals.global_attention = &out.head.global->ca.attention.value();
        acc.add(s, vals);
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto& g : grads)
        for (auto& v : g.data()) v *= inv;
      adamw_step(params, grads, state.opt, cfg, lr_at(state.opt.step, cfg));
    } catch (const std::domain_error& e) {
      throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + " batch " +
                          std::to_string(batch) + ": " + e.what());
    } catch (const TrainingError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) +
                          ": " + e.what());
    }
  }
  state.epoch = epoch;
  Metrics m = acc.finish(epoch);
  if (cfg.record_wall_time) {
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return m;
}

struct FitResult {
  ModelParams<double> params;
  std::vector<Metrics> metrics;
};

/// Trains from scratch for cfg.epochs epochs. `on_epoch` sees the state after
/// every epoch (checkpointing, logging).
inline FitResult fit(const Dataset& data, const TrainConfig& cfg,
                     const std::function<void(const TrainState&, const Metrics&)>& on_epoch = {}) {
  TrainState state = init_train_state(cfg);
  FitResult result;
  while (state.epoch < cfg.epochs) {
    result.metrics.push_back(train_epoch(state, data));
    if (on_epoch) on_epoch(state, result.metrics.back());
  }
  result.params = std::move(state.params);
  return result;
}

/// Continues a saved state until state.cfg.epochs.
inline std::vector<Metrics> resume(TrainState& state, const Dataset& data,
                                   const std::function<void(const TrainState&, const Metrics&)>& on_epoch = {}) {
  std::vector<Metrics> rows;
  while (state.epoch < state.cfg.epochs) {
    rows.push_back(train_epoch(state, data));
    if (on_epoch) on_epoch(state, rows.back());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Tensor logits;
  std::optional<Tensor> spatial_attention;  // L x C
  std::optional<Tensor> global_attention;   // 1 x C
  Tensor gamma;  // relevance from the spatial map, or the global one when alone
  double cls = 0, expl = 0, sparse = 0, total = 0;
};

/// Slot sampling at evaluation uses a generator keyed on (seed, sample index)
/// so results do not depend on evaluation order.
inline Prediction predict(const ModelParams<double>& params, const TrainConfig& cfg,
                          const Sample& sample, std::size_t index) {
  std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ detail::splitmix64(index)));
  Tape<double> tape;
  auto out = sample_loss(tape, params, cfg.head, sample, cfg.weights, rng);
  Prediction p;
  p.logits = out.head.logits.value();
  if (out.head.spatial) p.spatial_attention = out.head.spatial->ca.attention.value();
  if (out.head.global) p.global_attention = out.head.global->ca.attention.value();
  const Var<double>& primary =
      out.head.spatial ? out.head.spatial->ca.attention : out.head.global->ca.attention;
  p.gamma = relevance(primary).value();
  p.cls = out.cls.value().item();
  p.expl = out.expl.value().item();
  p.sparse = out.sparse.value().item();
  p.total = out.total.value().item();
  return p;
}

inline Metrics evaluate(const ModelParams<double>& params, const TrainConfig& cfg,
                        const Dataset& data) {
  if (data.empty()) throw UndefinedMetric("cannot evaluate an empty dataset");
  detail::MetricAccumulator acc{concept_mode(cfg.head.pathway)};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Prediction p = predict(params, cfg, data.samples[i], i);
    detail::SampleValues vals{p.cls, p.expl, p.sparse, p.total, p.logits};
    if (p.spatial_attention) vals.spatial_attention = &*p.spatial_attention;
    if (p.global_attention) vals.global_attention = &*p.global_attention;
    acc.add(data.samples[i], vals);
  }
  return acc.finish(0);
}

}  // namespace cct
