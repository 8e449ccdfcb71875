#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cct/tensor.hpp"

namespace cct {

/// Raised when a metric has nothing to average over.
class UndefinedMetric : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Metrics {
  std::size_t epoch = 0;
  double loss_cls = 0.0;
  double loss_expl = 0.0;
  double loss_sparse = 0.0;
  double loss_total = 0.0;
  double class_acc = 0.0;
  double concept_top1_acc = 0.0;
  double mean_entropy = 0.0;
  double wall_seconds = 0.0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

enum class ConceptMode { Spatial, Global };

/// Index of the largest entry in row `row`; ties go to the lowest index.
inline std::size_t argmax_row(const Tensor& t, std::size_t row = 0) {
  const std::size_t cols = t.cols();
  if (cols == 0) throw ShapeError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t c = 1; c < cols; ++c) {
    if (t[row * cols + c] > t[row * cols + best]) best = c;
  }
  return best;
}

inline double class_accuracy(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  if (logits.size() != labels.size()) throw std::invalid_argument("class_accuracy: length mismatch");
  if (logits.empty()) throw UndefinedMetric("class_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) hits += argmax_row(logits[i]) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

/// Matching counts for one sample: (hits, compared). Spatial mode compares
/// every target row that has a concept; global mode compares the single row.
inline std::pair<std::size_t, std::size_t> concept_matches(const Tensor& attention,
                                                           const Tensor& target,
                                                           ConceptMode mode) {
  if (attention.rows() != target.rows() || attention.cols() != target.cols()) {
    throw ShapeError("concept accuracy: attention " + shape_string(attention.shape()) +
                     " vs target " + shape_string(target.shape()));
  }
  if (mode == ConceptMode::Global) {
    return {argmax_row(attention) == argmax_row(target) ? 1u : 0u, 1u};
  }
  std::size_t hits = 0, rows = 0;
  for (std::size_t r = 0; r < target.rows(); ++r) {
    bool carrier = false;
    for (std::size_t c = 0; c < target.cols(); ++c) carrier = carrier || target(r, c) > 0.0;
    if (!carrier) continue;
    ++rows;
    hits += argmax_row(attention, r) == argmax_row(target, r);
  }
  return {hits, rows};
}

/// Fraction of top-1 attended concepts that agree with the ground truth.
inline double concept_top1_accuracy(std::span<const Tensor> attention,
                                    std::span<const std::optional<Tensor>> targets,
                                    ConceptMode mode) {
  if (attention.size() != targets.size()) {
    throw std::invalid_argument("concept_top1_accuracy: length mismatch");
  }
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < attention.size(); ++i) {
    if (!targets[i]) continue;
    const auto [h, n] = concept_matches(attention[i], *targets[i], mode);
    hits += h;
    total += n;
  }
  if (total == 0) throw UndefinedMetric("concept_top1_accuracy: no sample carries a target");
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Concepts ordered by decreasing relevance; ties keep the lower index first.
inline std::vector<std::pair<std::size_t, double>> top_k_concepts(const Tensor& gamma,
                                                                  std::size_t k) {
  std::vector<std::pair<std::size_t, double>> ranked;
  for (std::size_t c = 0; c < gamma.size(); ++c) ranked.emplace_back(c, gamma[c]);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader =
    "epoch,loss_cls,loss_expl,loss_sparse,loss_total,class_acc,concept_top1_acc,mean_entropy,"
    "wall_seconds";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  return v;
}

inline std::string format_metrics_row(const Metrics& m) {
  std::string row = std::to_string(m.epoch);
  for (double v : {m.loss_cls, m.loss_expl, m.loss_sparse, m.loss_total, m.class_acc,
                   m.concept_top1_acc, m.mean_entropy, m.wall_seconds}) {
    row += ',';
    row += format_double(v);
  }
  return row;
}

inline Metrics parse_metrics_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (cells.size() != 9) throw std::invalid_argument("metrics row needs 9 columns: " + line);
  Metrics m;
  m.epoch = static_cast<std::size_t>(std::stoull(cells[0]));
  double* fields[] = {&m.loss_cls,  &m.loss_expl,        &m.loss_sparse,  &m.loss_total,
                      &m.class_acc, &m.concept_top1_acc, &m.mean_entropy, &m.wall_seconds};
  for (std::size_t i = 0; i < 8; ++i) *fields[i] = parse_double(cells[i + 1]);
  return m;
}

inline std::vector<Metrics> parse_metrics_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != kMetricsHeader) {
    throw std::invalid_argument("metrics CSV header mismatch");
  }
  std::vector<Metrics> rows;
  while (std::getline(ss, line)) {
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  }
  return rows;
}

inline std::vector<Metrics> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_metrics_csv(ss.str());
}

/// Appends one row, writing the header first when the file is new or empty.
inline void append_metrics_csv(const std::string& path, const Metrics& m) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for appending");
  if (fresh) out << kMetricsHeader << '\n';
  out << format_metrics_row(m) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Grayscale pixels round(255 * a / max(A)); an all-zero map stays black.
inline std::vector<unsigned char> heatmap_pixels(const Tensor& attention) {
  double hi = 0.0;
  for (double a : attention.data()) {
    if (!std::isfinite(a) || a < 0.0) {
      throw std::invalid_argument("heatmap values must be finite and non-negative");
    }
    hi = std::max(hi, a);
  }
  std::vector<unsigned char> px(attention.size(), 0);
  if (hi == 0.0) return px;
  for (std::size_t i = 0; i < attention.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::round(255.0 * attention[i] / hi));
  }
  return px;
}

/// Writes a binary PGM (P5) at `path` and the raw values to a sibling .csv.
inline void export_heatmap(const Tensor& attention, const std::string& path) {
  const auto px = heatmap_pixels(attention);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write heatmap '" + path + "'");
    out << "P5\n" << attention.cols() << ' ' << attention.rows() << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
  }
  const std::string csv = std::filesystem::path(path).replace_extension(".csv").string();
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + csv + "'");
  for (std::size_t r = 0; r < attention.rows(); ++r) {
    for (std::size_t c = 0; c < attention.cols(); ++c) {
      if (c) out << ',';
      out << format_double(attention(r, c));
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write to '" + csv + "' failed");
}

}  // namespace cct
