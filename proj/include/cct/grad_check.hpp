#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cct/autodiff.hpp"

namespace cct {

/// Builds a scalar loss on a fresh tape, reading parameters through tape.param().
template <class T>
using LossBuilder = std::function<Var<T>(Tape<T>&)>;

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  std::string failure;
};

/// Raised when the loss turns non-finite at a perturbed coordinate.
class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(std::size_t param, std::size_t index, const std::string& what)
      : std::runtime_error(what), param_(param), index_(index) {}
  std::size_t param() const { return param_; }
  std::size_t index() const { return index_; }

 private:
  std::size_t param_;
  std::size_t index_;
};

template <class T>
std::vector<BasicTensor<T>> analytic_gradient(const LossBuilder<T>& loss,
                                              std::span<BasicTensor<T>* const> params) {
  Tape<T> tape;
  Var<T> out = loss(tape);
  tape.backward(out);
  std::vector<BasicTensor<T>> grads;
  grads.reserve(params.size());
  for (auto* p : params) grads.push_back(tape.param_grad(*p));
  return grads;
}

template <class T>
T evaluate_loss(const LossBuilder<T>& loss) {
  Tape<T> tape;
  return loss(tape).value().item();
}

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
template <class T>
std::vector<BasicTensor<T>> numeric_gradient(const LossBuilder<T>& loss,
                                             std::span<BasicTensor<T>* const> params, T h) {
  std::vector<BasicTensor<T>> grads;
  grads.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    BasicTensor<T>& theta = *params[p];
    BasicTensor<T> g = BasicTensor<T>::zeros_like(theta);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T saved = theta[i];
      T plus{}, minus{};
      try {
        theta[i] = saved + h;
        plus = evaluate_loss(loss);
        theta[i] = saved - h;
        minus = evaluate_loss(loss);
      } catch (const std::domain_error& e) {
        theta[i] = saved;
        throw GradCheckError(p, i, std::string("loss not finite: ") + e.what());
      }
      theta[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw GradCheckError(p, i, "loss not finite");
      }
      g[i] = (plus - minus) / (T{2} * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// max |ga - gn| / (|ga| + |gn| + 1e-12) over every coordinate.
template <class A, class N>
GradCheckReport compare_gradients(const std::vector<BasicTensor<A>>& analytic,
                                  const std::vector<BasicTensor<N>>& numeric, double tol) {
  if (analytic.size() != numeric.size()) throw ShapeError("compare_gradients: parameter count differs");
  GradCheckReport report;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    if (analytic[p].shape() != numeric[p].shape()) {
      throw ShapeError("compare_gradients: gradient shapes differ for parameter " + std::to_string(p));
    }
    for (std::size_t i = 0; i < analytic[p].size(); ++i) {
      const double ga = static_cast<double>(analytic[p][i]);
      const double gn = static_cast<double>(numeric[p][i]);
      const double rel = std::abs(ga - gn) / (std::abs(ga) + std::abs(gn) + 1e-12);
      ++report.coordinates;
      if (std::isnan(report.max_rel_error)) continue;
      if (report.coordinates == 1 || !(rel <= report.max_rel_error)) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_index = i;
        report.worst_analytic = ga;
        report.worst_numeric = gn;
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  if (!report.passed) {
    std::ostringstream os;
    os.precision(17);
    os << "max relative error " << report.max_rel_error << " at parameter " << report.worst_param
       << " index " << report.worst_index << " (analytic " << report.worst_analytic
       << ", numeric " << report.worst_numeric << ")";
    report.failure = os.str();
  }
  return report;
}

/// Checks reverse-mode gradients of `loss` against central differences.
template <class T>
GradCheckReport grad_check(const LossBuilder<T>& loss, std::span<BasicTensor<T>* const> params,
                           T h, double tol) {
  const auto analytic = analytic_gradient(loss, params);
  try {
    const auto numeric = numeric_gradient(loss, params, h);
    return compare_gradients(analytic, numeric, tol);
  } catch (const GradCheckError& e) {
    GradCheckReport report;
    report.passed = false;
    report.worst_param = e.param();
    report.worst_index = e.index();
    report.failure = std::string(e.what()) + " at parameter " + std::to_string(e.param()) +
                     " index " + std::to_string(e.index());
    return report;
  }
}

/// Same check with the central differences taken in `Wide` precision. `wide`
/// must build the same loss over `wide_params`, which hold the values of
/// `params` converted to Wide. Double-precision differences at h = 1e-6 lose
/// about ten digits to cancellation, too many to resolve small gradients.
template <class Wide = long double>
GradCheckReport grad_check_mixed(const LossBuilder<double>& loss,
                                 std::span<BasicTensor<double>* const> params,
                                 const LossBuilder<Wide>& wide,
                                 std::span<BasicTensor<Wide>* const> wide_params, double h,
                                 double tol) {
  if (params.size() != wide_params.size()) {
    throw std::invalid_argument("grad_check_mixed: parameter lists differ in length");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!(params[p]->template cast<Wide>() == *wide_params[p])) {
      throw std::invalid_argument("grad_check_mixed: wide parameter " + std::to_string(p) +
                                  " does not hold the same values");
    }
  }
  const auto analytic = analytic_gradient(loss, params);
  try {
    const auto numeric = numeric_gradient(wide, wide_params, static_cast<Wide>(h));
    return compare_gradients(analytic, numeric, tol);
  } catch (const GradCheckError& e) {
    GradCheckReport report;
    report.worst_param = e.param();
    report.worst_index = e.index();
    report.failure = std::string(e.what()) + " at parameter " + std::to_string(e.param()) +
                     " index " + std::to_string(e.index());
    return report;
  }
}

}  // namespace cct
