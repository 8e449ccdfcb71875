// Command-line front end: gen-data | train | eval | explain.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cct/cct.hpp"

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

/// Bad input detected after parsing (empty dataset, conflicting flags).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HeadFlags {
  std::size_t concepts = 0;  // 0: take C from the dataset, else 12
  std::size_t slot_dim = 32;
  std::size_t iterations = 0;  // 0: variant default
  std::string variant = "sa";
  std::size_t heads = 1;
  std::string pathway = "spatial";
  std::size_t classes = 0;  // 0: largest label + 1
};

struct Options {
  std::uint64_t seed = 0;
  std::string data, out, checkpoint;

  cct::SynthConfig synth;
  std::size_t holdout_per_class = 0;
  std::string holdout_out;

  cct::TrainConfig train;
  HeadFlags head;
  bool resume = false;
  bool wall_clock = false;

  std::size_t topk = 5;
  std::size_t max_samples = 0;  // 0: every sample
};

void add_head_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--concepts", o.head.concepts, "Concept slots C (default: from data, else 12)");
  cmd->add_option("--slot-dim", o.head.slot_dim, "Slot dimension d")->capture_default_str();
  cmd->add_option("--iters", o.head.iterations, "Refinement iterations T (0: 1 for sa, 3 otherwise)")
      ->capture_default_str();
  cmd->add_option("--variant", o.head.variant, "Slot initialization")
      ->check(CLI::IsMember({"sa", "isa", "boqsa"}))
      ->capture_default_str();
  cmd->add_option("--heads", o.head.heads, "Cross-attention heads")->capture_default_str();
  cmd->add_option("--pathway", o.head.pathway, "Concept pathway")
      ->check(CLI::IsMember({"spatial", "global", "dual"}))
      ->capture_default_str();
  cmd->add_option("--classes", o.head.classes, "Class count (default: largest label + 1)");
}

void add_train_flags(CLI::App* cmd, Options& o) {
  auto& t = o.train;
  cmd->add_option("--epochs", t.epochs)->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size)->capture_default_str();
  cmd->add_option("--lr", t.lr)->capture_default_str();
  cmd->add_option("--warmup", t.warmup_iters, "Linear warmup steps")->capture_default_str();
  cmd->add_option("--weight-decay", t.weight_decay)->capture_default_str();
  cmd->add_option("--lambda-expl", t.weights.expl)->capture_default_str();
  cmd->add_option("--lambda-sparse", t.weights.sparse)->capture_default_str();
}

cct::Dataset load_dataset(const std::string& path) {
  return cct::read_emb(path);
}

cct::HeadConfig head_config(const HeadFlags& f, const cct::Dataset& data) {
  cct::HeadConfig h;
  if (f.concepts != 0 && data.concepts != 0 && f.concepts != data.concepts) {
    throw UsageError("--concepts " + std::to_string(f.concepts) + " disagrees with the " +
                     std::to_string(data.concepts) + " concepts stored in the dataset");
  }
  h.concepts = f.concepts ? f.concepts : (data.concepts ? data.concepts : 12);
  h.slot_dim = f.slot_dim;
  h.input_dim = data.input_dim;
  h.num_features = data.num_features;
  h.variant = cct::parse_variant(f.variant);
  h.iterations = f.iterations ? f.iterations : cct::default_iterations(h.variant);
  h.heads = f.heads;
  h.pathway = cct::parse_pathway(f.pathway);
  std::size_t classes = f.classes;
  if (classes == 0) {
    for (const auto& s : data.samples) classes = std::max(classes, s.label + 1);
  }
  for (const auto& s : data.samples) {
    if (s.label >= classes) throw UsageError("label " + std::to_string(s.label) + " >= --classes");
  }
  h.num_classes = classes;
  try {
    h.validate();
  } catch (const cct::ConfigError& e) {
    throw UsageError(e.what());
  }
  return h;
}

void print_metrics(const cct::Metrics& m) {
  std::cout << cct::kMetricsHeader << '\n' << cct::format_metrics_row(m) << '\n';
}

int run_gen_data(const Options& o) {
  cct::SynthConfig cfg = o.synth;
  const std::size_t held = o.holdout_per_class * cfg.num_classes;
  if (held > 0 && o.holdout_out.empty()) throw UsageError("--holdout-per-class needs --holdout-out");
  cfg.samples_per_class += o.holdout_per_class;
  try {
    cfg.validate();
  } catch (const cct::ConfigError& e) {
    throw UsageError(e.what());
  }
  auto [train, test] = cct::split_tail(cct::gen_synthetic(cfg, o.seed), held);
  cct::write_emb(train, o.out);
  if (!o.holdout_out.empty()) cct::write_emb(test, o.holdout_out);
  std::cerr << "wrote " << train.size() << " samples to " << o.out;
  if (!o.holdout_out.empty()) std::cerr << " and " << test.size() << " to " << o.holdout_out;
  std::cerr << '\n';
  return 0;
}

int run_train(const Options& o) {
  const cct::Dataset data = load_dataset(o.data);
  if (data.empty()) throw UsageError("dataset '" + o.data + "' has no samples");
  auto log_epoch = [&](const cct::TrainState& state, const cct::Metrics& m) {
    cct::append_metrics_csv(o.out, m);
    cct::save_checkpoint(state, o.checkpoint);
    std::cerr << "epoch " << m.epoch << " loss " << m.loss_total << " class_acc " << m.class_acc
              << " concept_acc " << m.concept_top1_acc << '\n';
  };

  if (o.resume) {
    cct::TrainState state = cct::load_checkpoint(o.checkpoint);
    state.cfg.epochs = o.train.epochs;
    cct::resume(state, data, log_epoch);
    return 0;
  }
  cct::TrainConfig cfg = o.train;
  cfg.seed = o.seed;
  cfg.record_wall_time = o.wall_clock;
  cfg.head = head_config(o.head, data);
  try {
    cfg.validate();
  } catch (const cct::ConfigError& e) {
    throw UsageError(e.what());
  }
  std::filesystem::remove(o.out);
  cct::fit(data, cfg, log_epoch);
  return 0;
}

int run_eval(const Options& o) {
  const cct::TrainState state = cct::load_checkpoint(o.checkpoint);
  const cct::Dataset data = load_dataset(o.data);
  if (data.empty()) throw UsageError("dataset '" + o.data + "' has no samples");
  print_metrics(cct::evaluate(state.params, state.cfg, data));
  return 0;
}

int run_explain(const Options& o) {
  const cct::TrainState state = cct::load_checkpoint(o.checkpoint);
  const cct::Dataset data = load_dataset(o.data);
  if (data.empty()) throw UsageError("dataset '" + o.data + "' has no samples");
  std::filesystem::create_directories(o.out);
  const std::filesystem::path dir(o.out);
  std::ofstream table(dir / "topk.csv", std::ios::trunc);
  if (!table) throw std::runtime_error("cannot write " + (dir / "topk.csv").string());
  table << "sample_index,rank,concept_index,gamma_value\n";
  const std::size_t n = o.max_samples ? std::min(o.max_samples, data.size()) : data.size();
  for (std::size_t i = 0; i < n; ++i) {
    const cct::Prediction p = cct::predict(state.params, state.cfg, data.samples[i], i);
    const std::string stem = "sample_" + std::to_string(i);
    if (p.spatial_attention) {
      cct::export_heatmap(*p.spatial_attention, (dir / (stem + "_spatial.pgm")).string());
    }
    if (p.global_attention) {
      cct::export_heatmap(*p.global_attention, (dir / (stem + "_global.pgm")).string());
    }
    const auto ranked = cct::top_k_concepts(p.gamma, o.topk);
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      table << i << ',' << r + 1 << ',' << ranked[r].first << ','
            << cct::format_double(ranked[r].second) << '\n';
    }
  }
  if (!table) throw std::runtime_error("write to topk.csv failed");
  std::cerr << "explained " << n << " samples into " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Concept-centric transformer head: data generation, training, evaluation"};
  app.require_subcommand(1);
  app.add_option("--seed", o.seed, "Random seed")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic planted-concept EMB1 file");
  gen->add_option("--out", o.out, "EMB1 output path")->required();
  gen->add_option("--classes", o.synth.num_classes)->capture_default_str();
  gen->add_option("--concepts", o.synth.concepts)->capture_default_str();
  gen->add_option("--features", o.synth.num_features, "Rows L per sample")->capture_default_str();
  gen->add_option("--dim", o.synth.input_dim, "Feature dimension D")->capture_default_str();
  gen->add_option("--noise", o.synth.noise_std)->capture_default_str();
  gen->add_option("--per-class", o.synth.samples_per_class)->capture_default_str();
  gen->add_option("--carrier-fraction", o.synth.carrier_fraction)->capture_default_str();
  gen->add_option("--holdout-per-class", o.holdout_per_class,
                  "Extra samples per class written to --holdout-out");
  gen->add_option("--holdout-out", o.holdout_out, "EMB1 path for the held-out split");

  auto* train = app.add_subcommand("train", "Train a head and log per-epoch metrics");
  train->add_option("--data", o.data, "EMB1 training data")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "Metrics CSV path")->required();
  train->add_option("--checkpoint", o.checkpoint, "Checkpoint path, rewritten every epoch")
      ->required();
  train->add_flag("--resume", o.resume, "Continue from --checkpoint up to --epochs");
  train->add_flag("--wall-clock", o.wall_clock, "Record wall_seconds (otherwise 0)");
  add_train_flags(train, o);
  add_head_flags(train, o);

  auto* eval = app.add_subcommand("eval", "Print metrics of a checkpoint on a dataset");
  eval->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", o.data)->required()->check(CLI::ExistingFile);

  auto* explain = app.add_subcommand("explain", "Export heatmaps and top-k concept tables");
  explain->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  explain->add_option("--data", o.data)->required()->check(CLI::ExistingFile);
  explain->add_option("--out", o.out, "Output directory")->required();
  explain->add_option("--topk", o.topk)->capture_default_str();
  explain->add_option("--max-samples", o.max_samples, "Limit on explained samples (0: all)");

  for (auto* cmd : {gen, train, eval, explain}) {
    cmd->add_option("--seed", o.seed, "Random seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen) return run_gen_data(o);
    if (*train) return run_train(o);
    if (*eval) return run_eval(o);
    return run_explain(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const cct::UndefinedMetric& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
