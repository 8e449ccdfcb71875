#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cct/data.hpp"
#include "cct/head.hpp"
#include "cct/losses.hpp"

namespace cct {

/// Learnable state of the whole head: one or both pathways.
template <class T>
struct ModelParams {
  using value_type = T;

  std::optional<PathwayParams<T>> spatial;
  std::optional<PathwayParams<T>> global;

  template <class F>
  void visit(F&& f) {
    if (spatial) spatial->visit([&](const std::string& n, BasicTensor<T>& t) { f("spatial." + n, t); });
    if (global) global->visit([&](const std::string& n, BasicTensor<T>& t) { f("global." + n, t); });
  }

  std::vector<BasicTensor<T>*> tensors() {
    std::vector<BasicTensor<T>*> out;
    visit([&](const std::string&, BasicTensor<T>& t) { out.push_back(&t); });
    return out;
  }

  std::vector<std::string> names() {
    std::vector<std::string> out;
    visit([&](const std::string& n, BasicTensor<T>&) { out.push_back(n); });
    return out;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    if (spatial) out.spatial = cast_params<U>(*spatial);
    if (global) out.global = cast_params<U>(*global);
    return out;
  }
};

namespace detail {

inline Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal(rng);
  return t;
}

}  // namespace detail

inline PathwayParams<double> init_pathway(const HeadConfig& cfg, std::mt19937_64& rng) {
  const std::size_t C = cfg.concepts, d = cfg.slot_dim, D = cfg.input_dim, n = cfg.num_classes;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(D));
  const double slot_scale = 1.0 / std::sqrt(static_cast<double>(d));
  PathwayParams<double> p;
  auto& csa = p.csa;
  csa.query = detail::gaussian({d, d}, slot_scale, rng);
  csa.key = detail::gaussian({D, d}, in_scale, rng);
  csa.value = detail::gaussian({D, d}, in_scale, rng);
  csa.mu = detail::gaussian({d}, 1.0, rng);
  csa.log_sigma = Tensor(Shape{d}, 0.0);
  csa.init_queries = detail::gaussian({C, d}, 1.0, rng);
  for (auto* w : {&csa.gru.wz, &csa.gru.uz, &csa.gru.wr, &csa.gru.ur, &csa.gru.wh, &csa.gru.uh}) {
    *w = detail::gaussian({d, d}, slot_scale, rng);
  }
  for (auto* b : {&csa.gru.bz, &csa.gru.br, &csa.gru.bh}) *b = Tensor(Shape{d}, 0.0);
  csa.ln_inputs_gain = Tensor(Shape{D}, 1.0);
  csa.ln_inputs_bias = Tensor(Shape{D}, 0.0);
  csa.ln_slots_gain = Tensor(Shape{d}, 1.0);
  csa.ln_slots_bias = Tensor(Shape{d}, 0.0);
  csa.position = detail::gaussian({C, d}, 1.0, rng);
  p.ca.query = detail::gaussian({D, d}, in_scale, rng);
  p.ca.key = detail::gaussian({d, d}, slot_scale, rng);
  p.ca.value = detail::gaussian({d, d}, slot_scale, rng);
  p.ca.out = detail::gaussian({d, n}, slot_scale, rng);
  return p;
}

inline ModelParams<double> init_model(const HeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<double> m;
  if (uses_spatial(cfg.pathway)) m.spatial = init_pathway(cfg, rng);
  if (uses_global(cfg.pathway)) m.global = init_pathway(cfg, rng);
  return m;
}

/// Summary row fed to the global pathway: the mean of the input rows.
template <class T>
Var<T> summary_row(const Var<T>& features) {
  auto& tape = features.tape();
  const auto& f = features.value();
  BasicTensor<T> row(Shape{1, f.cols()});
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c) row[c] += f(r, c);
  for (auto& v : row.data()) v /= static_cast<T>(f.rows());
  return tape.constant(std::move(row));
}

template <class T>
HeadOutput<T> head_forward(const Var<T>& features, const ModelParams<T>& params,
                           const HeadConfig& cfg, std::mt19937_64& rng) {
  if (features.value().rank() != 2 || features.value().cols() != cfg.input_dim) {
    throw ShapeError("features must be L x " + std::to_string(cfg.input_dim) + ", got " +
                     shape_string(features.shape()));
  }
  switch (cfg.pathway) {
    case Pathway::Spatial: {
      HeadOutput<T> out;
      out.spatial = pathway_forward(features, *params.spatial, cfg, rng);
      out.logits = out.spatial->ca.logits;
      return out;
    }
    case Pathway::Global: {
      HeadOutput<T> out;
      out.global = pathway_forward(summary_row(features), *params.global, cfg, rng);
      out.logits = out.global->ca.logits;
      return out;
    }
    case Pathway::Dual:
      return dual_pathway_forward(features, summary_row(features), *params.spatial,
                                  *params.global, cfg, rng);
  }
  throw ConfigError("unknown pathway");
}

template <class T>
struct SampleLoss {
  Var<T> total, cls, expl, sparse;
  HeadOutput<T> head;
};

/// Classification, explanation and sparsity terms for one sample. Maps
/// without a target contribute nothing to the explanation term; sparsity is
/// averaged over the maps that exist.
template <class T>
SampleLoss<T> sample_loss(Tape<T>& tape, const ModelParams<T>& params, const HeadConfig& cfg,
                          const Sample& sample, const LossWeights& weights,
                          std::mt19937_64& rng) {
  Var<T> features = tape.constant(sample.features.template cast<T>());
  SampleLoss<T> out;
  out.head = head_forward(features, params, cfg, rng);
  out.cls = cross_entropy(out.head.logits, sample.label);

  std::vector<Var<T>> expl_terms, sparse_terms;
  auto add_map = [&](const std::optional<PathwayOutput<T>>& path, const std::optional<Tensor>& h) {
    if (!path) return;
    const Var<T>& attn = path->ca.attention;
    sparse_terms.push_back(sparsity_loss(attn));
    if (h) expl_terms.push_back(explanation_loss(attn, tape.constant(h->template cast<T>())));
  };
  add_map(out.head.spatial, sample.h_spatial);
  add_map(out.head.global, sample.h_global);

  out.expl = expl_terms.empty() ? tape.constant(BasicTensor<T>::scalar(T{0})) : expl_terms.front();
  for (std::size_t i = 1; i < expl_terms.size(); ++i) out.expl = add(out.expl, expl_terms[i]);
  out.sparse = sparse_terms.front();
  for (std::size_t i = 1; i < sparse_terms.size(); ++i) out.sparse = add(out.sparse, sparse_terms[i]);
  if (sparse_terms.size() > 1) out.sparse = scale(out.sparse, T{1} / static_cast<T>(sparse_terms.size()));
  out.total = total_loss(out.cls, out.expl, out.sparse, weights);
  return out;
}

}  // namespace cct
