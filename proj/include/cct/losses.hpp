#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "cct/autodiff.hpp"

namespace cct {

struct LossWeights {
  double expl = 1.0;    // lambda_expl; 0 trains without concept explanations
  double sparse = 0.5;  // lambda_sparse

  void validate() const {
    if (!(expl >= 0.0) || !(sparse >= 0.0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

/// Floor applied inside the entropy logarithm only.
inline constexpr double kEntropyLogFloor = 1e-9;

/// -log softmax(logits)[label], through log-sum-exp.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t label) {
  if (label >= logits.value().size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside " +
                            std::to_string(logits.value().size()) + " classes");
  }
  return sub(logsumexp(logits), select(logits, label));
}

/// Squared Frobenius norm ||A - H||^2.
template <class T>
Var<T> explanation_loss(const Var<T>& attention, const Var<T>& target) {
  if (attention.shape() != target.shape()) {
    throw ShapeError("explanation_loss: attention " + shape_string(attention.shape()) +
                     " vs target " + shape_string(target.shape()));
  }
  return sum(square(sub(attention, target)));
}

/// Mean elementwise entropy -a ln a, with 0 ln 0 = 0.
template <class T>
Var<T> sparsity_loss(const Var<T>& attention) {
  constexpr T slack = T(1e-12);
  for (const T& a : attention.value().data()) {
    if (a < -slack || a > T{1} + slack) {
      throw std::domain_error("sparsity_loss: attention entries must lie in [0, 1]");
    }
  }
  Var<T> logs = log(clamp_min(attention, static_cast<T>(kEntropyLogFloor)));
  return scale(mean(mul(attention, logs)), T{-1});
}

template <class T>
Var<T> total_loss(const Var<T>& cls, const Var<T>& expl, const Var<T>& sparse,
                  const LossWeights& w) {
  return add(add(cls, scale(expl, static_cast<T>(w.expl))), scale(sparse, static_cast<T>(w.sparse)));
}

/// Value-only entropy of a plain attention map.
inline double attention_entropy(const Tensor& attention) {
  if (attention.empty()) throw ShapeError("attention_entropy: empty map");
  double total = 0.0;
  for (double a : attention.data()) {
    if (a > 0.0) total -= a * std::log(a);
  }
  return total / static_cast<double>(attention.size());
}

}  // namespace cct
