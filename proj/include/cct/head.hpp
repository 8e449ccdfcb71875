#pragma once

// Concept-slot attention (binding + GRU refinement) followed by the
// cross-attention broadcast that turns slots into class logits.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cct/autodiff.hpp"

namespace cct {

enum class SlotVariant { SA, ISA, BOQSA };
enum class Pathway { Spatial, Global, Dual };

/// Raised for invalid learnable state (e.g. a non-positive slot scale).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(SlotVariant v) {
  switch (v) {
    case SlotVariant::SA: return "sa";
    case SlotVariant::ISA: return "isa";
    case SlotVariant::BOQSA: return "boqsa";
  }
  return "?";
}

inline std::string to_string(Pathway p) {
  switch (p) {
    case Pathway::Spatial: return "spatial";
    case Pathway::Global: return "global";
    case Pathway::Dual: return "dual";
  }
  return "?";
}

inline SlotVariant parse_variant(const std::string& s) {
  if (s == "sa") return SlotVariant::SA;
  if (s == "isa") return SlotVariant::ISA;
  if (s == "boqsa") return SlotVariant::BOQSA;
  throw ConfigError("unknown slot variant '" + s + "'");
}

inline Pathway parse_pathway(const std::string& s) {
  if (s == "spatial") return Pathway::Spatial;
  if (s == "global") return Pathway::Global;
  if (s == "dual") return Pathway::Dual;
  throw ConfigError("unknown pathway '" + s + "'");
}

/// Refinement iterations used when none are requested: one for SA, three for
/// I-SA and BO-QSA.
inline std::size_t default_iterations(SlotVariant v) { return v == SlotVariant::SA ? 1 : 3; }

inline bool uses_spatial(Pathway p) { return p != Pathway::Global; }
inline bool uses_global(Pathway p) { return p != Pathway::Spatial; }

struct HeadConfig {
  std::size_t concepts = 12;      // C
  std::size_t slot_dim = 32;      // d
  std::size_t input_dim = 32;     // D
  std::size_t num_features = 8;   // L of the spatial input
  std::size_t num_classes = 4;    // n_c
  std::size_t iterations = 1;     // T
  SlotVariant variant = SlotVariant::SA;
  std::size_t heads = 1;
  Pathway pathway = Pathway::Spatial;
  /// Skips every layer norm and replaces the q/k/v projections by the
  /// identity (requires input_dim == slot_dim). Used for hand-checked cases.
  bool bypass_norms_and_projections = false;
  double layer_norm_eps = 1e-5;

  void validate() const {
    if (concepts == 0 || slot_dim == 0 || input_dim == 0 || num_classes == 0) {
      throw ConfigError("head dimensions must be positive");
    }
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (heads == 0 || slot_dim % heads != 0) {
      throw ConfigError("slot_dim " + std::to_string(slot_dim) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (bypass_norms_and_projections && input_dim != slot_dim) {
      throw ConfigError("identity projections need input_dim == slot_dim");
    }
    if (!(layer_norm_eps >= 0.0)) throw ConfigError("layer_norm_eps must be non-negative");
  }
};

template <class T>
struct GRUParams {
  BasicTensor<T> wz, uz, bz;  // update gate
  BasicTensor<T> wr, ur, br;  // reset gate
  BasicTensor<T> wh, uh, bh;  // candidate

  template <class F>
  void visit(F&& f) {
    f("wz", wz); f("uz", uz); f("bz", bz);
    f("wr", wr); f("ur", ur); f("br", br);
    f("wh", wh); f("uh", uh); f("bh", bh);
  }
};

/// Learnable state of the concept-slot attention module.
template <class T>
struct CSAParams {
  BasicTensor<T> query;         // d x d, applied to slots
  BasicTensor<T> key;           // D x d, applied to inputs
  BasicTensor<T> value;         // D x d, applied to inputs
  BasicTensor<T> mu;            // d
  BasicTensor<T> log_sigma;     // d; sigma = exp(log_sigma)
  BasicTensor<T> init_queries;  // C x d, BO-QSA only
  GRUParams<T> gru;
  BasicTensor<T> ln_inputs_gain, ln_inputs_bias;  // D
  BasicTensor<T> ln_slots_gain, ln_slots_bias;    // d
  BasicTensor<T> position;                        // C x d

  template <class F>
  void visit(F&& f) {
    f("query", query);
    f("key", key);
    f("value", value);
    f("mu", mu);
    f("log_sigma", log_sigma);
    f("init_queries", init_queries);
    gru.visit([&](const char* name, BasicTensor<T>& t) { f(std::string("gru.") + name, t); });
    f("ln_inputs_gain", ln_inputs_gain);
    f("ln_inputs_bias", ln_inputs_bias);
    f("ln_slots_gain", ln_slots_gain);
    f("ln_slots_bias", ln_slots_bias);
    f("position", position);
  }
};

/// Learnable state of the cross-attention broadcast.
template <class T>
struct CAParams {
  BasicTensor<T> query;  // D x d, applied to inputs
  BasicTensor<T> key;    // d x d, applied to slots
  BasicTensor<T> value;  // d x d, applied to slots
  BasicTensor<T> out;    // d x n_c

  template <class F>
  void visit(F&& f) {
    f("query", query);
    f("key", key);
    f("value", value);
    f("out", out);
  }
};

template <class T>
struct PathwayParams {
  CSAParams<T> csa;
  CAParams<T> ca;

  template <class F>
  void visit(F&& f) {
    csa.visit([&](const std::string& name, BasicTensor<T>& t) { f("csa." + name, t); });
    ca.visit([&](const std::string& name, BasicTensor<T>& t) { f("ca." + name, t); });
  }
};

/// Converts every tensor of a parameter struct to another scalar type.
template <class U, template <class> class P, class T>
P<U> cast_params(P<T> src) {
  P<U> dst;
  std::vector<BasicTensor<U>> converted;
  src.visit([&](const std::string&, BasicTensor<T>& t) { converted.push_back(t.template cast<U>()); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, BasicTensor<U>& t) { t = std::move(converted[i++]); });
  return dst;
}

template <class T>
void check_csa_shapes(const CSAParams<T>& p, const HeadConfig& cfg) {
  const std::size_t C = cfg.concepts, d = cfg.slot_dim, D = cfg.input_dim;
  auto expect = [](const BasicTensor<T>& t, const Shape& s, const char* name) {
    if (t.shape() != s) {
      throw ShapeError(std::string("CSA parameter ") + name + " has shape " +
                       shape_string(t.shape()) + ", expected " + shape_string(s));
    }
  };
  expect(p.mu, {d}, "mu");
  expect(p.log_sigma, {d}, "log_sigma");
  expect(p.position, {C, d}, "position");
  if (cfg.variant == SlotVariant::BOQSA) expect(p.init_queries, {C, d}, "init_queries");
  if (!cfg.bypass_norms_and_projections) {
    expect(p.query, {d, d}, "query");
    expect(p.key, {D, d}, "key");
    expect(p.value, {D, d}, "value");
  }
}

// ---------------------------------------------------------------------------
// Concept-slot attention

/// Initial concept slots. SA and I-SA draw mu + sigma * eps with eps ~ N(0, 1)
/// from `rng`; BO-QSA returns the learned per-slot queries.
template <class T>
Var<T> init_slots(Tape<T>& tape, const CSAParams<T>& p, const HeadConfig& cfg,
                  std::mt19937_64& rng) {
  const std::size_t C = cfg.concepts, d = cfg.slot_dim;
  if (cfg.variant == SlotVariant::BOQSA) {
    if (p.init_queries.shape() != Shape{C, d}) {
      throw ShapeError("init_queries must be " + shape_string({C, d}));
    }
    return tape.param(p.init_queries);
  }
  if (p.mu.shape() != Shape{d} || p.log_sigma.shape() != Shape{d}) {
    throw ShapeError("mu and log_sigma must have shape " + shape_string({d}));
  }
  for (const T& ls : p.log_sigma.data()) {
    const T s = std::exp(ls);
    if (!(s > T{0}) || !std::isfinite(s)) {
      throw ParameterError("slot scale sigma must be finite and strictly positive");
    }
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  BasicTensor<T> noise(Shape{C, d});
  for (auto& v : noise.data()) v = static_cast<T>(normal(rng));
  Var<T> sigma = exp(tape.param(p.log_sigma));
  return add(mul(tape.constant(std::move(noise)), sigma), tape.param(p.mu));
}

template <class T>
struct CSAAttention {
  Var<T> attention;  // C x L, each row sums to 1 over L
  Var<T> updates;    // C x d
};

/// One binding step. `inputs` are the normalized features (L x D) and `slots`
/// the normalized slots (C x d).
template <class T>
CSAAttention<T> csa_attention(const Var<T>& inputs, const Var<T>& slots, const CSAParams<T>& p,
                              const HeadConfig& cfg) {
  auto& tape = inputs.tape();
  const bool id = cfg.bypass_norms_and_projections;
  Var<T> q = id ? slots : matmul(slots, tape.param(p.query));
  Var<T> k = id ? inputs : matmul(inputs, tape.param(p.key));
  Var<T> v = id ? inputs : matmul(inputs, tape.param(p.value));
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(cfg.slot_dim));
  Var<T> scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  // Slots compete for each input, then each slot takes a weighted mean.
  Var<T> attn = normalize_axis(softmax_axis(scores, 0), 1);
  return {attn, matmul(attn, v)};
}

/// GRU cell with the slot readout as input and the slots as hidden state.
template <class T>
Var<T> gru_update(const Var<T>& slots, const Var<T>& updates, const GRUParams<T>& g) {
  if (slots.shape() != updates.shape()) {
    throw ShapeError("gru_update: state " + shape_string(slots.shape()) + " and input " +
                     shape_string(updates.shape()) + " differ");
  }
  auto& tape = slots.tape();
  auto gate = [&](const BasicTensor<T>& w, const BasicTensor<T>& u, const BasicTensor<T>& b,
                  const Var<T>& state) {
    return add(add(matmul(updates, tape.param(w)), matmul(state, tape.param(u))), tape.param(b));
  };
  Var<T> z = sigmoid(gate(g.wz, g.uz, g.bz, slots));
  Var<T> r = sigmoid(gate(g.wr, g.ur, g.br, slots));
  Var<T> candidate = tanh(gate(g.wh, g.uh, g.bh, mul(r, slots)));
  Var<T> keep = shift(scale(z, T{-1}), T{1});
  return add(mul(keep, slots), mul(z, candidate));
}

template <class T>
struct CSAOutput {
  Var<T> slots;      // C x d, positional embedding added
  Var<T> attention;  // C x L from the last iteration
};

/// Full concept-slot attention over raw features (L x D).
template <class T>
CSAOutput<T> csa_forward(const Var<T>& features, const CSAParams<T>& p, const HeadConfig& cfg,
                         std::mt19937_64& rng) {
  cfg.validate();
  check_csa_shapes(p, cfg);
  auto& tape = features.tape();
  const bool bypass = cfg.bypass_norms_and_projections;
  const T eps = static_cast<T>(cfg.layer_norm_eps);
  Var<T> inputs = bypass ? features
                         : layer_norm(features, tape.param(p.ln_inputs_gain),
                                      tape.param(p.ln_inputs_bias), eps);
  Var<T> slots = init_slots(tape, p, cfg, rng);
  Var<T> attention;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    if (cfg.variant == SlotVariant::ISA && t + 1 == cfg.iterations) slots = detach(slots);
    if (!bypass) {
      slots = layer_norm(slots, tape.param(p.ln_slots_gain), tape.param(p.ln_slots_bias), eps);
    }
    auto step = csa_attention(inputs, slots, p, cfg);
    attention = step.attention;
    slots = gru_update(slots, step.updates, p.gru);
  }
  return {add(slots, tape.param(p.position)), attention};
}

// ---------------------------------------------------------------------------
// Cross-attention broadcast

template <class T>
struct CAOutput {
  std::vector<Var<T>> head_attention;  // per head, L x C
  Var<T> attention;                    // mean over heads, L x C
  Var<T> logits;                       // n_c
};

/// Cross-attention with `heads` heads. Each input row attends over the
/// concepts (softmax across C); logits average the projected readout over L.
template <class T>
CAOutput<T> multi_head_forward(const Var<T>& features, const Var<T>& slots, const CAParams<T>& p,
                               const HeadConfig& cfg, std::size_t heads) {
  const std::size_t d = cfg.slot_dim;
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("slot_dim " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (p.out.rank() != 2 || p.out.rows() != d || p.out.cols() != cfg.num_classes) {
    throw ShapeError("output matrix must be " + shape_string({d, cfg.num_classes}) + ", got " +
                     shape_string(p.out.shape()));
  }
  auto& tape = features.tape();
  const bool id = cfg.bypass_norms_and_projections;
  Var<T> q = id ? features : matmul(features, tape.param(p.query));
  Var<T> k = id ? slots : matmul(slots, tape.param(p.key));
  Var<T> v = id ? slots : matmul(slots, tape.param(p.value));
  const std::size_t width = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(width));

  CAOutput<T> out;
  std::vector<Var<T>> readouts;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? q : slice_cols(q, h * width, width);
    Var<T> kh = heads == 1 ? k : slice_cols(k, h * width, width);
    Var<T> vh = heads == 1 ? v : slice_cols(v, h * width, width);
    Var<T> attn = softmax_axis(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    out.head_attention.push_back(attn);
    readouts.push_back(matmul(attn, vh));
  }
  Var<T> readout = heads == 1 ? readouts.front()
                              : concat_cols(std::span<const Var<T>>(readouts));
  out.logits = reduce_mean_axis(matmul(readout, tape.param(p.out)), 0);
  if (heads == 1) {
    out.attention = out.head_attention.front();
  } else {
    Var<T> acc = out.head_attention.front();
    for (std::size_t h = 1; h < heads; ++h) acc = add(acc, out.head_attention[h]);
    out.attention = scale(acc, T{1} / static_cast<T>(heads));
  }
  return out;
}

template <class T>
CAOutput<T> ca_forward(const Var<T>& features, const Var<T>& slots, const CAParams<T>& p,
                       const HeadConfig& cfg) {
  return multi_head_forward(features, slots, p, cfg, 1);
}

/// Relevance of each concept: attention averaged over the input rows.
template <class T>
Var<T> relevance(const Var<T>& attention) {
  return reduce_mean_axis(attention, 0);
}

/// beta = v(S) O (C x n_c) restricted to the value/output block of one head.
template <class T>
Var<T> concept_logit_contributions(const Var<T>& slots, const CAParams<T>& p,
                                   const HeadConfig& cfg, std::size_t head, std::size_t heads) {
  auto& tape = slots.tape();
  Var<T> v = cfg.bypass_norms_and_projections ? slots : matmul(slots, tape.param(p.value));
  Var<T> o = tape.param(p.out);
  if (heads == 1) return matmul(v, o);
  const std::size_t width = cfg.slot_dim / heads;
  Var<T> o_block = transpose(slice_cols(transpose(o), head * width, width));
  return matmul(slice_cols(v, head * width, width), o_block);
}

/// logits_i = sum_c beta_ci gamma_c, summed over heads when there are several
/// (one relevance vector per head).
template <class T>
Var<T> decomposed_logits(const Var<T>& slots, const CAParams<T>& p, const HeadConfig& cfg,
                         std::span<const Var<T>> gammas) {
  const std::size_t heads = gammas.size();
  if (heads == 0 || cfg.slot_dim % heads != 0) throw ConfigError("decomposed_logits: bad head count");
  Var<T> total;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> part = matmul(gammas[h], concept_logit_contributions(slots, p, cfg, h, heads));
    total = h == 0 ? part : add(total, part);
  }
  return total;
}

template <class T>
Var<T> decomposed_logits(const Var<T>& slots, const CAParams<T>& p, const HeadConfig& cfg,
                         const Var<T>& gamma) {
  return decomposed_logits(slots, p, cfg, std::span<const Var<T>>(&gamma, 1));
}

// ---------------------------------------------------------------------------
// Pathways

template <class T>
struct PathwayOutput {
  CSAOutput<T> csa;
  CAOutput<T> ca;
};

template <class T>
PathwayOutput<T> pathway_forward(const Var<T>& features, const PathwayParams<T>& p,
                                 const HeadConfig& cfg, std::mt19937_64& rng) {
  auto csa = csa_forward(features, p.csa, cfg, rng);
  auto ca = multi_head_forward(features, csa.slots, p.ca, cfg, cfg.heads);
  return {csa, ca};
}

template <class T>
struct HeadOutput {
  Var<T> logits;
  std::optional<PathwayOutput<T>> spatial;  // attention L x C
  std::optional<PathwayOutput<T>> global;   // attention 1 x C
};

/// Spatial pathway over the patch rows and global pathway over the single
/// summary row; logits are the mean of both.
template <class T>
HeadOutput<T> dual_pathway_forward(const Var<T>& patches, const Var<T>& cls,
                                   const PathwayParams<T>& spatial,
                                   const PathwayParams<T>& global, const HeadConfig& cfg,
                                   std::mt19937_64& rng) {
  if (cls.value().rank() != 2 || cls.value().rows() != 1) {
    throw ShapeError("global pathway expects a single input row, got " + shape_string(cls.shape()));
  }
  HeadOutput<T> out;
  out.spatial = pathway_forward(patches, spatial, cfg, rng);
  out.global = pathway_forward(cls, global, cfg, rng);
  out.logits = scale(add(out.spatial->ca.logits, out.global->ca.logits), T{0.5});
  return out;
}

}  // namespace cct
