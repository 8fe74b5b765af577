#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sosp/arch.hpp"
#include "sosp/dataset.hpp"

namespace sosp {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
};

struct ScheduleConfig {
  int epochs = 20;
  std::vector<int> decay_epochs;  // empty: 60% / 80% of the budget
  double decay_factor = 0.1;

  std::vector<int> resolved_decays() const {
    if (!decay_epochs.empty()) return decay_epochs;
    return {epochs * 6 / 10, epochs * 8 / 10};
  }
};

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | file
  SynthConfig synth;
  int test_n = 500;
  std::string train_path, test_path;
};

struct ModelConfig {
  std::string name = "convnet-toy";
  std::string path;  // JSON model file; overrides `name` when set
  bool batchnorm = true;
  bool bias = true;
  std::vector<int> channels;
};

struct PolicyConfig {
  std::string method = "sosp_h";  // sosp_h | sosp_i | sosp_i_diag | first_order | random
  bool kernel_scaling = false;
  std::optional<double> layer_cap;  // VGG-style models default to 0.95
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  std::string loss = "cross_entropy";  // cross_entropy | squared
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  PolicyConfig policy;
  std::vector<double> ratios = {0.5};
  int n_prime = 1000;
  std::vector<std::uint64_t> seeds = {1};
  bool hessian_weight_decay = false;   // fold weight-decay curvature into H
  bool first_order_full_set = false;   // first-order term on the full train set
  double bottleneck_threshold = 0.5;
  double expand_multiplier = 2.0;
  int memory_budget_mb = 512;
  std::string output_dir = "runs";

  LossKind loss_kind() const;
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig config_from_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);
// covers every result-affecting field (not output_dir)
std::uint64_t config_hash(const ExperimentConfig& cfg);

struct EpochMetric {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0, train_acc = 0.0;
  double test_loss = 0.0, test_acc = 0.0;
};

struct TrainResult {
  std::vector<double> params;
  std::vector<double> state;
  std::vector<EpochMetric> metrics;
};

// SGD with momentum and weight decay under the step schedule; `cycles`
// repeats the whole schedule (pruning at initialization trains for two
// cycles to match the train + fine-tune budget).  `warm` continues from an
// existing checkpoint instead of a fresh seeded init.
TrainResult train_model(const ExperimentConfig& cfg, const Network& net,
                        const Dataset& train, const Dataset& test, std::uint64_t seed,
                        int cycles = 1, const Checkpoint* warm = nullptr);

struct RunRecord {
  std::string kind;  // train | prune | init_prune | expand | widen
  std::uint64_t config = 0;  // config hash
  std::uint64_t seed = 0;
  std::string model;
  std::string method;
  double ratio = 0.0;
  int total_epochs = 0;
  std::vector<EpochMetric> train_metrics;
  std::vector<EpochMetric> finetune_metrics;
  double acc_unpruned = 0.0;
  double acc_before_ft = 0.0;
  double acc_after_ft = 0.0;
  double best_acc_ft = 0.0;
  CountReport counts;
  PruningMask mask;
  std::vector<double> layer_ratio;
  std::vector<double> group_ratio;
  double saliency_seconds = 0.0;
  double selection_seconds = 0.0;
  std::string note;
};

std::string record_to_json(const RunRecord& r);
RunRecord record_from_json(const std::string& text);

// deterministic loaded-or-trained base checkpoint under cfg.output_dir
struct BaseRun {
  std::vector<double> params;
  std::vector<double> state;
  std::vector<EpochMetric> metrics;
  double test_acc = 0.0;
};
BaseRun train_or_load(const ExperimentConfig& cfg, const Network& net,
                      const Dataset& train, const Dataset& test, std::uint64_t seed);

// mask computation with phase timings
struct MaskOutcome {
  PruningMask mask;
  SaliencyVector saliency;   // empty for sosp_i / random
  double saliency_seconds = 0.0;
  double selection_seconds = 0.0;
};
MaskOutcome compute_mask(const ExperimentConfig& cfg, const Network& net,
                         const std::vector<double>& params, const std::vector<double>& state,
                         const Segmentation& seg, const Dataset& train, std::uint64_t seed,
                         const std::string& method, double ratio);

// full pipelines; records (and artifacts) land under cfg.output_dir
RunRecord run_train(const ExperimentConfig& cfg, std::uint64_t seed);
std::vector<RunRecord> run_prune(const ExperimentConfig& cfg, std::uint64_t seed);
std::vector<RunRecord> run_init_prune(const ExperimentConfig& cfg, std::uint64_t seed);

struct ExpandOutcome {
  bool expanded = false;
  std::vector<int> targets;  // group indices
  double widen_factor = 1.0;
  RunRecord expand_record;
  RunRecord widen_record;
};
ExpandOutcome run_expand_prune(const ExperimentConfig& cfg, std::uint64_t seed,
                               const RunRecord& base);

// ---- timing -------------------------------------------------------------

struct TimingRow {
  std::string model;
  int width = 1;
  int structures = 0;
  std::string method;
  double saliency_seconds = 0.0;
  double selection_seconds = 0.0;
  double total_seconds = 0.0;
};

struct TimingConfig {
  std::string family = "wide-mlp";
  std::vector<int> widths = {1, 2, 3, 4, 6, 8};
  std::vector<std::string> methods = {"sosp_h", "sosp_i"};
  int in_features = 64;
  int classes = 4;
  int n_prime = 1000;
  std::uint64_t seed = 1;
};

std::vector<TimingRow> timing_sweep(const TimingConfig& cfg);
std::string timing_csv(const std::vector<TimingRow>& rows);
// least-squares slope of log(total) against log(structures)
double log_log_slope(const std::vector<double>& s, const std::vector<double>& t);

// ---- reporting ------------------------------------------------------------

// aggregates records into summary/plot CSVs under out_dir: accuracy
// mean +- sample std per (model, method, ratio), accuracy-vs-params and
// accuracy-vs-MACs points, and per-layer pruning-ratio histograms
void write_report(const std::vector<RunRecord>& records, const std::string& out_dir);

double mean_of(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);
double median_of(std::vector<double> v);

}  // namespace sosp
