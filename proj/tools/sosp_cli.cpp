#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sosp/driver.hpp"
#include "sosp/errors.hpp"

namespace {

struct Opts {
  std::string config_path;
  std::string output_dir;
  std::string model, model_file, loss, method, dataset_type;
  std::string train_data, test_data;
  std::vector<double> ratios;
  std::vector<std::uint64_t> seeds;
  std::vector<int> channels, decay_epochs;
  int n_prime = 0, epochs = 0, batch_size = 0, test_n = 0, synth_n = 0,
      synth_classes = 0, memory_budget_mb = 0;
  double lr = 0.0, momentum = 0.0, weight_decay = 0.0, decay_factor = 0.0,
         layer_cap = 0.0, bottleneck_threshold = 0.0, expand_multiplier = 0.0;
  bool kernel_scaling = false, no_batchnorm = false, hessian_weight_decay = false,
       first_order_full_set = false;
};

void add_common(CLI::App* sub, Opts& o) {
  sub->add_option("--config", o.config_path, "JSON config file");
  sub->add_option("--output-dir", o.output_dir, "artifact directory");
  sub->add_option("--model", o.model, "model zoo name");
  sub->add_option("--model-file", o.model_file, "model JSON file (overrides --model)");
  sub->add_option("--loss", o.loss, "cross_entropy | squared");
  sub->add_option("--method", o.method,
                  "sosp_h | sosp_i | sosp_i_diag | first_order | random");
  sub->add_option("--ratios", o.ratios, "pruning ratios");
  sub->add_option("--seeds", o.seeds, "run seeds");
  sub->add_option("--n-prime", o.n_prime, "saliency subsample size");
  sub->add_option("--epochs", o.epochs, "epochs per schedule");
  sub->add_option("--decay-epochs", o.decay_epochs, "epochs at which the lr decays");
  sub->add_option("--decay-factor", o.decay_factor, "lr decay factor");
  sub->add_option("--lr", o.lr, "learning rate");
  sub->add_option("--momentum", o.momentum, "SGD momentum");
  sub->add_option("--weight-decay", o.weight_decay, "L2 coefficient");
  sub->add_option("--batch-size", o.batch_size, "minibatch size");
  sub->add_flag("--kernel-scaling", o.kernel_scaling, "divide scores by kernel size");
  sub->add_option("--layer-cap", o.layer_cap, "max removable fraction per layer");
  sub->add_flag("--no-batchnorm", o.no_batchnorm, "build the model without batch norm");
  sub->add_option("--channels", o.channels, "model width override");
  sub->add_option("--dataset-type", o.dataset_type, "synthetic | file");
  sub->add_option("--train-data", o.train_data, "train dataset file");
  sub->add_option("--test-data", o.test_data, "test dataset file");
  sub->add_option("--synth-n", o.synth_n, "synthetic train sample count");
  sub->add_option("--synth-classes", o.synth_classes, "synthetic class count");
  sub->add_option("--test-n", o.test_n, "synthetic test sample count");
  sub->add_flag("--hessian-weight-decay", o.hessian_weight_decay,
                "fold weight-decay curvature into the Hessian");
  sub->add_flag("--first-order-full-set", o.first_order_full_set,
                "first-order saliency term on the full train set");
  sub->add_option("--bottleneck-threshold", o.bottleneck_threshold,
                  "fraction of the median ratio that flags a bottleneck");
  sub->add_option("--expand-multiplier", o.expand_multiplier, "bottleneck width factor");
  sub->add_option("--memory-budget-mb", o.memory_budget_mb,
                  "memory allowance for pairwise saliency");
}

sosp::ExperimentConfig build_config(CLI::App* sub, const Opts& o) {
  sosp::ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = sosp::config_from_file(o.config_path);
  if (sub->count("--output-dir")) cfg.output_dir = o.output_dir;
  if (sub->count("--model")) cfg.model.name = o.model;
  if (sub->count("--model-file")) cfg.model.path = o.model_file;
  if (sub->count("--loss")) cfg.loss = o.loss;
  if (sub->count("--method")) cfg.policy.method = o.method;
  if (sub->count("--ratios")) cfg.ratios = o.ratios;
  if (sub->count("--seeds")) cfg.seeds = o.seeds;
  if (sub->count("--n-prime")) cfg.n_prime = o.n_prime;
  if (sub->count("--epochs")) cfg.schedule.epochs = o.epochs;
  if (sub->count("--decay-epochs")) cfg.schedule.decay_epochs = o.decay_epochs;
  if (sub->count("--decay-factor")) cfg.schedule.decay_factor = o.decay_factor;
  if (sub->count("--lr")) cfg.optimizer.lr = o.lr;
  if (sub->count("--momentum")) cfg.optimizer.momentum = o.momentum;
  if (sub->count("--weight-decay")) cfg.optimizer.weight_decay = o.weight_decay;
  if (sub->count("--batch-size")) cfg.optimizer.batch_size = o.batch_size;
  if (sub->count("--kernel-scaling")) cfg.policy.kernel_scaling = true;
  if (sub->count("--layer-cap")) cfg.policy.layer_cap = o.layer_cap;
  if (sub->count("--no-batchnorm")) cfg.model.batchnorm = false;
  if (sub->count("--channels")) cfg.model.channels = o.channels;
  if (sub->count("--dataset-type")) cfg.dataset.type = o.dataset_type;
  if (sub->count("--train-data")) cfg.dataset.train_path = o.train_data;
  if (sub->count("--test-data")) cfg.dataset.test_path = o.test_data;
  if (sub->count("--synth-n")) cfg.dataset.synth.n = o.synth_n;
  if (sub->count("--synth-classes")) cfg.dataset.synth.classes = o.synth_classes;
  if (sub->count("--test-n")) cfg.dataset.test_n = o.test_n;
  if (sub->count("--hessian-weight-decay")) cfg.hessian_weight_decay = true;
  if (sub->count("--first-order-full-set")) cfg.first_order_full_set = true;
  if (sub->count("--bottleneck-threshold"))
    cfg.bottleneck_threshold = o.bottleneck_threshold;
  if (sub->count("--expand-multiplier")) cfg.expand_multiplier = o.expand_multiplier;
  if (sub->count("--memory-budget-mb")) cfg.memory_budget_mb = o.memory_budget_mb;
  // round-trip normalizes model-family defaults and validates
  return sosp::config_from_json(sosp::config_to_json(cfg));
}

void print_record(const sosp::RunRecord& r) {
  std::cout << r.kind << " model=" << r.model << " method=" << r.method
            << " ratio=" << r.ratio << " seed=" << r.seed
            << " acc_before_ft=" << r.acc_before_ft << " acc_after_ft=" << r.acc_after_ft
            << " params=" << r.counts.exact.params << " macs=" << r.counts.exact.macs
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"second-order structured pruning workbench"};
  app.require_subcommand(1);
  Opts o;

  CLI::App* train = app.add_subcommand("train", "train a base model per seed");
  CLI::App* prune = app.add_subcommand("prune", "train-prune-finetune pipeline");
  CLI::App* init_prune =
      app.add_subcommand("init-prune", "prune at initialization, then train");
  CLI::App* expand_prune = app.add_subcommand(
      "expand-prune", "detect bottlenecks, expand, and rerun against a widen baseline");
  CLI::App* timing = app.add_subcommand("timing", "mask-computation scaling sweep");
  CLI::App* report = app.add_subcommand("report", "aggregate run records into CSVs");
  for (CLI::App* sub : {train, prune, init_prune, expand_prune}) add_common(sub, o);

  std::string base_record_path;
  expand_prune->add_option("--base", base_record_path, "prune run record to analyze")
      ->required();

  sosp::TimingConfig tcfg;
  std::string timing_out = "timing.csv";
  timing->add_option("--family", tcfg.family, "model family");
  timing->add_option("--widths", tcfg.widths, "width multipliers");
  timing->add_option("--methods", tcfg.methods, "methods to time");
  timing->add_option("--in-features", tcfg.in_features, "input feature count");
  timing->add_option("--classes", tcfg.classes, "class count");
  timing->add_option("--n-prime", tcfg.n_prime, "subsample size");
  timing->add_option("--seed", tcfg.seed, "seed");
  timing->add_option("--out", timing_out, "CSV output path");

  std::vector<std::string> record_paths;
  std::string report_out = "report";
  report->add_option("records", record_paths, "run record JSON files")->required();
  report->add_option("--out", report_out, "report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      sosp::ExperimentConfig cfg = build_config(train, o);
      for (std::uint64_t seed : cfg.seeds) {
        sosp::RunRecord r = sosp::run_train(cfg, seed);
        std::cout << "train model=" << r.model << " seed=" << seed
                  << " test_acc=" << r.acc_unpruned << " params=" << r.counts.exact.params
                  << "\n";
      }
    } else if (*prune) {
      sosp::ExperimentConfig cfg = build_config(prune, o);
      for (std::uint64_t seed : cfg.seeds)
        for (const sosp::RunRecord& r : sosp::run_prune(cfg, seed)) print_record(r);
    } else if (*init_prune) {
      sosp::ExperimentConfig cfg = build_config(init_prune, o);
      for (std::uint64_t seed : cfg.seeds)
        for (const sosp::RunRecord& r : sosp::run_init_prune(cfg, seed)) print_record(r);
    } else if (*expand_prune) {
      sosp::ExperimentConfig cfg = build_config(expand_prune, o);
      sosp::RunRecord base = sosp::record_from_json(
          [&] {
            std::ifstream in(base_record_path);
            sosp::require(bool(in), sosp::ErrorCategory::io,
                          "cannot open: " + base_record_path);
            std::ostringstream ss;
            ss << in.rdbuf();
            return ss.str();
          }());
      for (std::uint64_t seed : cfg.seeds) {
        sosp::ExpandOutcome out = sosp::run_expand_prune(cfg, seed, base);
        std::cout << "expand-prune seed=" << seed << " bottlenecks=";
        if (out.targets.empty()) std::cout << "none";
        for (std::size_t i = 0; i < out.targets.size(); ++i)
          std::cout << (i ? "," : "") << out.targets[i];
        std::cout << " widen_factor=" << out.widen_factor << "\n";
        if (out.expanded) print_record(out.expand_record);
        print_record(out.widen_record);
      }
    } else if (*timing) {
      std::vector<sosp::TimingRow> rows = sosp::timing_sweep(tcfg);
      std::ofstream out(timing_out);
      sosp::require(bool(out), sosp::ErrorCategory::io,
                    "cannot open for write: " + timing_out);
      out << sosp::timing_csv(rows);
      std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per;
      for (const sosp::TimingRow& r : rows) {
        per[r.method].first.push_back(double(r.structures));
        per[r.method].second.push_back(r.total_seconds);
      }
      for (const auto& [method, st] : per)
        if (st.first.size() >= 2)
          std::cout << "timing method=" << method
                    << " loglog_slope=" << sosp::log_log_slope(st.first, st.second)
                    << "\n";
      std::cout << "timing csv=" << timing_out << "\n";
    } else if (*report) {
      std::vector<sosp::RunRecord> records;
      for (const std::string& p : record_paths) {
        std::ifstream in(p);
        sosp::require(bool(in), sosp::ErrorCategory::io, "cannot open: " + p);
        std::ostringstream ss;
        ss << in.rdbuf();
        records.push_back(sosp::record_from_json(ss.str()));
      }
      sosp::write_report(records, report_out);
      std::cout << "report dir=" << report_out << " records=" << records.size() << "\n";
    }
  } catch (const sosp::Error& e) {
    nlohmann::ordered_json j;
    j["error"] = {{"category", e.category_name()}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    nlohmann::ordered_json j;
    j["error"] = {{"category", "internal"}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return 8;
  }
  return 0;
}
