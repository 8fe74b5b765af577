#include "sosp/driver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "sosp/errors.hpp"
#include "sosp/kernels.hpp"
#include "sosp/rng.hpp"

namespace sosp {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// seed-stream tags so the phases stay independent
constexpr std::uint64_t kTagInit = 21;
constexpr std::uint64_t kTagSubsample = 31;
constexpr std::uint64_t kTagSelect = 41;
constexpr std::uint64_t kTagFinetune = 61;
constexpr std::uint64_t kTagInitTrain = 62;
constexpr std::uint64_t kTagExpandArm = 71;
constexpr std::uint64_t kTagWidenArm = 72;

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

std::string fmt_ratio(double r) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.2f", r);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  require(bool(out), ErrorCategory::io, "cannot open for write: " + path);
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
  require(bool(out), ErrorCategory::io, "write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), ErrorCategory::io, "cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// minibatch views; targets are one-hot and only built for the squared loss
struct BatchBuf {
  std::vector<double> x, t;
  std::vector<int> y;
};

Batch fill_batch(const Dataset& d, const std::vector<int>& idx, int a, int b,
                 LossKind kind, int classes, BatchBuf& buf) {
  const int sz = d.sample_size();
  const int n = b - a;
  buf.x.resize(std::size_t(n) * sz);
  buf.y.resize(n);
  for (int i = 0; i < n; ++i) {
    std::memcpy(buf.x.data() + std::size_t(i) * sz, d.sample(idx[a + i]),
                sizeof(double) * sz);
    buf.y[i] = d.y[idx[a + i]];
  }
  Batch batch{buf.x.data(), buf.y.data(), nullptr, n};
  if (kind == LossKind::squared) {
    buf.t.assign(std::size_t(n) * classes, 0.0);
    for (int i = 0; i < n; ++i) buf.t[std::size_t(i) * classes + buf.y[i]] = 1.0;
    batch.target = buf.t.data();
  }
  return batch;
}

Batch whole_batch(const Dataset& d, LossKind kind, int classes, BatchBuf& buf) {
  Batch batch{d.x.data(), d.y.data(), nullptr, d.size()};
  if (kind == LossKind::squared) {
    buf.t.assign(std::size_t(d.size()) * classes, 0.0);
    for (int i = 0; i < d.size(); ++i) buf.t[std::size_t(i) * classes + d.y[i]] = 1.0;
    batch.target = buf.t.data();
  }
  return batch;
}

void eval_split(const Network& net, const std::vector<double>& params,
                const std::vector<double>& state, const Dataset& d, LossKind kind,
                double* loss, double* acc) {
  BatchBuf buf;
  Batch b = whole_batch(d, kind, net.output_dim(), buf);
  net.evaluate(params, state, b, kind, loss, acc);
}

void validate_config(const ExperimentConfig& cfg) {
  for (double r : cfg.ratios)
    require(r >= 0.0 && r < 1.0, ErrorCategory::config,
            "pruning ratio must lie in [0, 1)");
  require(cfg.schedule.epochs >= 1, ErrorCategory::config, "epochs must be >= 1");
  require(cfg.n_prime >= 1, ErrorCategory::config, "subsample size must be >= 1");
  require(cfg.optimizer.batch_size >= 1, ErrorCategory::config, "batch size must be >= 1");
  require(cfg.optimizer.lr >= 0.0, ErrorCategory::config, "learning rate must be >= 0");
  require(cfg.schedule.decay_factor > 0.0, ErrorCategory::config,
          "decay factor must be positive");
  require(!cfg.seeds.empty(), ErrorCategory::config, "at least one seed is required");
  cfg.loss_kind();  // validates the loss string
  static const char* kMethods[] = {"sosp_h", "sosp_i", "sosp_i_diag", "first_order",
                                   "random"};
  bool ok = false;
  for (const char* m : kMethods) ok = ok || cfg.policy.method == m;
  require(ok, ErrorCategory::config, "unknown pruning method: " + cfg.policy.method);
  if (cfg.policy.layer_cap)
    require(*cfg.policy.layer_cap > 0.0 && *cfg.policy.layer_cap <= 1.0,
            ErrorCategory::config, "layer cap must lie in (0, 1]");
}

struct Setup {
  Dataset train, test;
  ModelSpec spec;
};

Setup make_setup(const ExperimentConfig& cfg) {
  validate_config(cfg);
  Setup s;
  if (cfg.dataset.type == "synthetic") {
    require(cfg.dataset.test_n >= 1, ErrorCategory::config, "test_n must be >= 1");
    // draw train and test from one stream so both share the class templates
    SynthConfig all = cfg.dataset.synth;
    all.n = cfg.dataset.synth.n + cfg.dataset.test_n;
    Dataset big = make_synthetic(all);
    std::vector<int> idx(big.size());
    for (int i = 0; i < big.size(); ++i) idx[i] = i;
    s.train = gather(big, {idx.begin(), idx.begin() + cfg.dataset.synth.n});
    s.test = gather(big, {idx.begin() + cfg.dataset.synth.n, idx.end()});
  } else if (cfg.dataset.type == "file") {
    require(!cfg.dataset.train_path.empty() && !cfg.dataset.test_path.empty(),
            ErrorCategory::config, "file dataset needs train_path and test_path");
    s.train = load_dataset(cfg.dataset.train_path);
    s.test = load_dataset(cfg.dataset.test_path);
    require(s.train.sample_size() == s.test.sample_size() &&
                s.train.classes == s.test.classes,
            ErrorCategory::config, "train and test sets disagree on shape");
  } else {
    fail(ErrorCategory::config, "unknown dataset type: " + cfg.dataset.type);
  }

  if (!cfg.model.path.empty()) {
    s.spec = load_model(cfg.model.path);
  } else {
    ZooOptions opts;
    opts.batchnorm = cfg.model.batchnorm;
    opts.bias = cfg.model.bias;
    opts.channels = cfg.model.channels;
    opts.in_channels = s.train.channels;
    opts.in_height = s.train.height;
    opts.in_width = s.train.width;
    s.spec = make_model(cfg.model.name, s.train.sample_size(), s.train.classes, opts);
  }
  require(s.spec.input_size() == s.train.sample_size(), ErrorCategory::config,
          "model input size does not match the dataset");
  require(s.spec.output_dim == s.train.classes, ErrorCategory::config,
          "model output dimension does not match the dataset classes");
  return s;
}

Json metrics_to_json(const std::vector<EpochMetric>& ms) {
  Json arr = Json::array();
  for (const EpochMetric& m : ms)
    arr.push_back(Json{{"epoch", m.epoch},
                       {"lr", m.lr},
                       {"train_loss", m.train_loss},
                       {"train_acc", m.train_acc},
                       {"test_loss", m.test_loss},
                       {"test_acc", m.test_acc}});
  return arr;
}

std::vector<EpochMetric> metrics_from_json(const Json& arr) {
  std::vector<EpochMetric> ms;
  for (const Json& jm : arr) {
    EpochMetric m;
    m.epoch = jm.at("epoch").get<int>();
    m.lr = jm.at("lr").get<double>();
    m.train_loss = jm.at("train_loss").get<double>();
    m.train_acc = jm.at("train_acc").get<double>();
    m.test_loss = jm.at("test_loss").get<double>();
    m.test_acc = jm.at("test_acc").get<double>();
    ms.push_back(m);
  }
  return ms;
}

double best_test_acc(const std::vector<EpochMetric>& ms, double fallback) {
  double best = fallback;
  for (const EpochMetric& m : ms) best = std::max(best, m.test_acc);
  return best;
}

}  // namespace

LossKind ExperimentConfig::loss_kind() const {
  if (loss == "cross_entropy") return LossKind::cross_entropy;
  if (loss == "squared") return LossKind::squared;
  fail(ErrorCategory::config, "unknown loss kind: " + loss);
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

std::string config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["dataset"] = Json{{"type", cfg.dataset.type},
                      {"synth",
                       Json{{"classes", cfg.dataset.synth.classes},
                            {"channels", cfg.dataset.synth.channels},
                            {"height", cfg.dataset.synth.height},
                            {"width", cfg.dataset.synth.width},
                            {"n", cfg.dataset.synth.n},
                            {"noise", cfg.dataset.synth.noise},
                            {"seed", cfg.dataset.synth.seed}}},
                      {"test_n", cfg.dataset.test_n},
                      {"train_path", cfg.dataset.train_path},
                      {"test_path", cfg.dataset.test_path}};
  j["model"] = Json{{"name", cfg.model.name},
                    {"path", cfg.model.path},
                    {"batchnorm", cfg.model.batchnorm},
                    {"bias", cfg.model.bias},
                    {"channels", cfg.model.channels}};
  j["loss"] = cfg.loss;
  j["optimizer"] = Json{{"lr", cfg.optimizer.lr},
                        {"momentum", cfg.optimizer.momentum},
                        {"weight_decay", cfg.optimizer.weight_decay},
                        {"batch_size", cfg.optimizer.batch_size}};
  j["schedule"] = Json{{"epochs", cfg.schedule.epochs},
                       {"decay_epochs", cfg.schedule.decay_epochs},
                       {"decay_factor", cfg.schedule.decay_factor}};
  j["policy"] = Json{{"method", cfg.policy.method},
                     {"kernel_scaling", cfg.policy.kernel_scaling}};
  j["policy"]["layer_cap"] =
      cfg.policy.layer_cap ? Json(*cfg.policy.layer_cap) : Json(nullptr);
  j["ratios"] = cfg.ratios;
  j["n_prime"] = cfg.n_prime;
  j["seeds"] = cfg.seeds;
  j["hessian_weight_decay"] = cfg.hessian_weight_decay;
  j["first_order_full_set"] = cfg.first_order_full_set;
  j["bottleneck_threshold"] = cfg.bottleneck_threshold;
  j["expand_multiplier"] = cfg.expand_multiplier;
  j["memory_budget_mb"] = cfg.memory_budget_mb;
  j["output_dir"] = cfg.output_dir;
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  ExperimentConfig cfg;
  try {
    Json j = Json::parse(text);
    if (j.contains("dataset")) {
      const Json& d = j["dataset"];
      cfg.dataset.type = d.value("type", cfg.dataset.type);
      if (d.contains("synth")) {
        const Json& s = d["synth"];
        cfg.dataset.synth.classes = s.value("classes", cfg.dataset.synth.classes);
        cfg.dataset.synth.channels = s.value("channels", cfg.dataset.synth.channels);
        cfg.dataset.synth.height = s.value("height", cfg.dataset.synth.height);
        cfg.dataset.synth.width = s.value("width", cfg.dataset.synth.width);
        cfg.dataset.synth.n = s.value("n", cfg.dataset.synth.n);
        cfg.dataset.synth.noise = s.value("noise", cfg.dataset.synth.noise);
        cfg.dataset.synth.seed = s.value("seed", cfg.dataset.synth.seed);
      }
      cfg.dataset.test_n = d.value("test_n", cfg.dataset.test_n);
      cfg.dataset.train_path = d.value("train_path", cfg.dataset.train_path);
      cfg.dataset.test_path = d.value("test_path", cfg.dataset.test_path);
    }
    if (j.contains("model")) {
      const Json& m = j["model"];
      cfg.model.name = m.value("name", cfg.model.name);
      cfg.model.path = m.value("path", cfg.model.path);
      cfg.model.batchnorm = m.value("batchnorm", cfg.model.batchnorm);
      cfg.model.bias = m.value("bias", cfg.model.bias);
      cfg.model.channels = m.value("channels", cfg.model.channels);
    }
    cfg.loss = j.value("loss", cfg.loss);
    if (j.contains("optimizer")) {
      const Json& o = j["optimizer"];
      cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
      cfg.optimizer.momentum = o.value("momentum", cfg.optimizer.momentum);
      cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
      cfg.optimizer.batch_size = o.value("batch_size", cfg.optimizer.batch_size);
    }
    if (j.contains("schedule")) {
      const Json& s = j["schedule"];
      cfg.schedule.epochs = s.value("epochs", cfg.schedule.epochs);
      cfg.schedule.decay_epochs = s.value("decay_epochs", cfg.schedule.decay_epochs);
      cfg.schedule.decay_factor = s.value("decay_factor", cfg.schedule.decay_factor);
    }
    if (j.contains("policy")) {
      const Json& p = j["policy"];
      cfg.policy.method = p.value("method", cfg.policy.method);
      cfg.policy.kernel_scaling = p.value("kernel_scaling", cfg.policy.kernel_scaling);
      if (p.contains("layer_cap") && !p["layer_cap"].is_null())
        cfg.policy.layer_cap = p["layer_cap"].get<double>();
    }
    cfg.ratios = j.value("ratios", cfg.ratios);
    cfg.n_prime = j.value("n_prime", cfg.n_prime);
    cfg.seeds = j.value("seeds", cfg.seeds);
    cfg.hessian_weight_decay = j.value("hessian_weight_decay", cfg.hessian_weight_decay);
    cfg.first_order_full_set = j.value("first_order_full_set", cfg.first_order_full_set);
    cfg.bottleneck_threshold = j.value("bottleneck_threshold", cfg.bottleneck_threshold);
    cfg.expand_multiplier = j.value("expand_multiplier", cfg.expand_multiplier);
    cfg.memory_budget_mb = j.value("memory_budget_mb", cfg.memory_budget_mb);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::config, std::string("malformed config json: ") + ex.what());
  }
  // wide conv stacks keep a sliver of every layer by default
  if (!cfg.policy.layer_cap && cfg.model.name.rfind("convnet", 0) == 0)
    cfg.policy.layer_cap = 0.95;
  validate_config(cfg);
  return cfg;
}

ExperimentConfig config_from_file(const std::string& path) {
  return config_from_json(read_text(path));
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.output_dir.clear();       // placement only
  c.memory_budget_mb = 0;     // feasibility gate, never changes numbers
  return fnv1a64(config_to_json(c));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

TrainResult train_model(const ExperimentConfig& cfg, const Network& net,
                        const Dataset& train, const Dataset& test, std::uint64_t seed,
                        int cycles, const Checkpoint* warm) {
  require(cycles >= 1, ErrorCategory::input, "cycle count must be >= 1");
  const LossKind kind = cfg.loss_kind();
  TrainResult res;
  if (warm) {
    require(warm->params.size() == net.param_count() &&
                warm->state.size() == net.state_size(),
            ErrorCategory::input, "warm-start checkpoint does not match the network");
    res.params = warm->params;
    res.state = warm->state;
  } else {
    init_params(net.compact_spec(), net.layout(), Rng::derive(seed, kTagInit),
                res.params, res.state);
  }

  const std::size_t P = res.params.size();
  std::vector<double> grad(P), vel(P, 0.0);
  const std::vector<int> decays = cfg.schedule.resolved_decays();
  Rng order(Rng::derive(seed, 11));
  std::vector<int> idx(train.size());
  BatchBuf buf;

  for (int e = 0; e < cfg.schedule.epochs * cycles; ++e) {
    const int pos = e % cfg.schedule.epochs;
    double lr = cfg.optimizer.lr;
    for (int d : decays)
      if (pos >= d) lr *= cfg.schedule.decay_factor;

    for (int i = 0; i < train.size(); ++i) idx[i] = i;
    for (int i = 0; i + 1 < train.size(); ++i) {
      const int j = i + int(order.below(std::uint64_t(train.size() - i)));
      std::swap(idx[i], idx[j]);
    }

    for (int at = 0; at < train.size(); at += cfg.optimizer.batch_size) {
      const int hi = std::min(at + cfg.optimizer.batch_size, train.size());
      Batch b = fill_batch(train, idx, at, hi, kind, net.output_dim(), buf);
      net.train_gradient(res.params, res.state, b, kind, true, grad);
      if (cfg.optimizer.weight_decay != 0.0)
        kernels::axpy(cfg.optimizer.weight_decay, res.params.data(), grad.data(), P);
      for (std::size_t k = 0; k < P; ++k) {
        vel[k] = cfg.optimizer.momentum * vel[k] + grad[k];
        res.params[k] -= lr * vel[k];
      }
    }

    EpochMetric m;
    m.epoch = e;
    m.lr = lr;
    eval_split(net, res.params, res.state, train, kind, &m.train_loss, &m.train_acc);
    eval_split(net, res.params, res.state, test, kind, &m.test_loss, &m.test_acc);
    res.metrics.push_back(m);
  }
  return res;
}

BaseRun train_or_load(const ExperimentConfig& cfg, const Network& net,
                      const Dataset& train, const Dataset& test, std::uint64_t seed) {
  // hash only what shapes the base checkpoint: data, model, loss, optimizer, schedule
  ExperimentConfig b = cfg;
  b.policy = {};
  b.ratios.clear();
  b.n_prime = 1;
  b.seeds.clear();
  b.hessian_weight_decay = false;
  b.first_order_full_set = false;
  b.bottleneck_threshold = 0.0;
  b.expand_multiplier = 0.0;
  b.memory_budget_mb = 0;
  b.output_dir.clear();
  const std::uint64_t h = fnv1a64(config_to_json(b) + model_to_json(net.spec()));

  fs::create_directories(cfg.output_dir);
  const std::string stem = cfg.output_dir + "/base-" + net.spec().name + "-" + hex16(h) +
                           "-s" + std::to_string(seed);
  const std::string ckpt = stem + ".ckpt";

  BaseRun run;
  if (fs::exists(ckpt)) {
    Checkpoint c = load_checkpoint(ckpt, net.layout());
    run.params = std::move(c.params);
    run.state = std::move(c.state);
    if (fs::exists(stem + ".metrics.json"))
      run.metrics = metrics_from_json(Json::parse(read_text(stem + ".metrics.json")));
  } else {
    TrainResult tr = train_model(cfg, net, train, test, seed);
    run.params = std::move(tr.params);
    run.state = std::move(tr.state);
    run.metrics = std::move(tr.metrics);
    save_checkpoint(ckpt, net.compact_spec(), net.layout(), run.params, run.state);
    write_text(stem + ".metrics.json", metrics_to_json(run.metrics).dump(2));
  }
  double loss = 0.0;
  eval_split(net, run.params, run.state, test, cfg.loss_kind(), &loss, &run.test_acc);
  return run;
}

// ---------------------------------------------------------------------------
// mask computation
// ---------------------------------------------------------------------------

MaskOutcome compute_mask(const ExperimentConfig& cfg, const Network& net,
                         const std::vector<double>& params, const std::vector<double>& state,
                         const Segmentation& seg, const Dataset& train, std::uint64_t seed,
                         const std::string& method, double ratio) {
  const LossKind kind = cfg.loss_kind();
  const int n_prime = std::min(cfg.n_prime, train.size());
  const std::vector<int> sub_idx =
      subsample_indices(train.size(), n_prime, Rng::derive(seed, kTagSubsample));
  BatchBuf sub_buf, full_buf;
  Batch sub = fill_batch(train, sub_idx, 0, n_prime, kind, net.output_dim(), sub_buf);

  SelectionPolicy pol;
  pol.ratio = ratio;
  pol.kernel_scaling = cfg.policy.kernel_scaling;
  pol.layer_cap = cfg.policy.layer_cap;
  pol.seed = Rng::derive(seed, kTagSelect);

  auto grad_batch = [&]() {
    if (!cfg.first_order_full_set) return sub;
    return whole_batch(train, kind, net.output_dim(), full_buf);
  };

  MaskOutcome out;
  const double t0 = now_seconds();
  if (method == "sosp_h" || method == "first_order") {
    std::vector<double> grad;
    net.gradient(params, state, grad_batch(), kind, grad);
    if (method == "sosp_h") {
      std::vector<double> dir = theta_struc(seg, params);
      std::vector<double> hv;
      net.hvp(params, state, sub, kind, dir, hv);
      if (cfg.hessian_weight_decay)
        kernels::axpy(cfg.optimizer.weight_decay, dir.data(), hv.data(), hv.size());
      out.saliency = sosp_h_from_parts(seg, params, grad, hv);
      const double t1 = now_seconds();
      out.mask = select_sosp_h(out.saliency, seg, pol);
      out.saliency_seconds = t1 - t0;
      out.selection_seconds = now_seconds() - t1;
    } else {
      out.saliency.method = "first_order";
      out.saliency.entries.resize(seg.size());
      for (int s = 0; s < seg.size(); ++s) {
        SaliencyEntry& e = out.saliency.entries[s];
        e.structure = s;
        e.first_order = std::abs(structure_dot(seg.structures[s], params, grad));
        e.total = e.first_order;
      }
      const double t1 = now_seconds();
      out.mask = select_first_order(out.saliency, seg, pol);
      out.saliency_seconds = t1 - t0;
      out.selection_seconds = now_seconds() - t1;
    }
  } else if (method == "sosp_i" || method == "sosp_i_diag") {
    const double S = seg.size();
    const double mb = (3.0 * S * S + 32.0 * S * net.output_dim()) * 8.0 / 1e6;
    require(mb <= double(cfg.memory_budget_mb), ErrorCategory::config,
            "pairwise sensitivity matrix for " + std::to_string(seg.size()) +
                " structures needs about " + std::to_string(int(mb + 1)) +
                " MB; raise memory_budget_mb or switch to sosp_h");
    QMatrix q = q_matrix(net, params, state, sub, seg, kind);
    if (cfg.first_order_full_set) {
      std::vector<double> gs, gf;
      net.gradient(params, state, sub, kind, gs);
      net.gradient(params, state, grad_batch(), kind, gf);
      const std::vector<double> fo_sub = first_order_terms(seg, params, gs);
      const std::vector<double> fo_full = first_order_terms(seg, params, gf);
      for (int s = 0; s < seg.size(); ++s) q.at(s, s) += fo_full[s] - fo_sub[s];
    }
    if (cfg.hessian_weight_decay)
      for (int s = 0; s < seg.size(); ++s)
        q.at(s, s) += 0.5 * cfg.optimizer.weight_decay *
                      structure_sqnorm(seg.structures[s], params);
    const double t1 = now_seconds();
    out.mask = method == "sosp_i" ? select_sosp_i(q, seg, pol)
                                  : select_sosp_i_diag(q, seg, pol);
    out.saliency_seconds = t1 - t0;
    out.selection_seconds = now_seconds() - t1;
  } else if (method == "random") {
    const double t1 = now_seconds();
    out.mask = select_random(seg, pol);
    out.saliency_seconds = t1 - t0;
    out.selection_seconds = now_seconds() - t1;
  } else {
    fail(ErrorCategory::config, "unknown pruning method: " + method);
  }
  return out;
}

// ---------------------------------------------------------------------------
// run records
// ---------------------------------------------------------------------------

std::string record_to_json(const RunRecord& r) {
  Json j;
  j["kind"] = r.kind;
  j["config"] = r.config;
  j["seed"] = r.seed;
  j["model"] = r.model;
  j["method"] = r.method;
  j["ratio"] = r.ratio;
  j["total_epochs"] = r.total_epochs;
  j["train_metrics"] = metrics_to_json(r.train_metrics);
  j["finetune_metrics"] = metrics_to_json(r.finetune_metrics);
  j["acc_unpruned"] = r.acc_unpruned;
  j["acc_before_ft"] = r.acc_before_ft;
  j["acc_after_ft"] = r.acc_after_ft;
  j["best_acc_ft"] = r.best_acc_ft;
  j["counts"] = Json::parse(count_report_to_json(r.counts));
  j["mask"] = Json::parse(mask_to_json(r.mask));
  j["layer_ratio"] = r.layer_ratio;
  j["group_ratio"] = r.group_ratio;
  j["saliency_seconds"] = r.saliency_seconds;
  j["selection_seconds"] = r.selection_seconds;
  j["note"] = r.note;
  return j.dump(2);
}

RunRecord record_from_json(const std::string& text) {
  RunRecord r;
  try {
    Json j = Json::parse(text);
    r.kind = j.at("kind").get<std::string>();
    r.config = j.at("config").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model = j.at("model").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.ratio = j.at("ratio").get<double>();
    r.total_epochs = j.at("total_epochs").get<int>();
    r.train_metrics = metrics_from_json(j.at("train_metrics"));
    r.finetune_metrics = metrics_from_json(j.at("finetune_metrics"));
    r.acc_unpruned = j.at("acc_unpruned").get<double>();
    r.acc_before_ft = j.at("acc_before_ft").get<double>();
    r.acc_after_ft = j.at("acc_after_ft").get<double>();
    r.best_acc_ft = j.at("best_acc_ft").get<double>();
    const Json& c = j.at("counts");
    r.counts.model = c.at("model").get<std::string>();
    r.counts.method = c.at("method").get<std::string>();
    r.counts.ratio = c.at("ratio").get<double>();
    r.counts.exact = {c.at("exact").at("params").get<long long>(),
                      c.at("exact").at("macs").get<long long>()};
    r.counts.approx = {c.at("approx").at("params").get<long long>(),
                       c.at("approx").at("macs").get<long long>()};
    r.mask = mask_from_json(j.at("mask").dump());
    r.layer_ratio = j.at("layer_ratio").get<std::vector<double>>();
    r.group_ratio = j.at("group_ratio").get<std::vector<double>>();
    r.saliency_seconds = j.at("saliency_seconds").get<double>();
    r.selection_seconds = j.at("selection_seconds").get<double>();
    r.note = j.value("note", std::string());
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::io, std::string("malformed run record json: ") + ex.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// pipelines
// ---------------------------------------------------------------------------

namespace {

std::string record_stem(const ExperimentConfig& cfg, const RunRecord& r) {
  return cfg.output_dir + "/" + r.kind + "-" + r.model + "-" + r.method + "-r" +
         fmt_ratio(r.ratio) + "-s" + std::to_string(r.seed) + "-" +
         hex16(r.config).substr(8);
}

void persist_record(const ExperimentConfig& cfg, const RunRecord& r) {
  fs::create_directories(cfg.output_dir);
  write_text(record_stem(cfg, r) + "-record.json", record_to_json(r));
}

// shared tail of every pruning pipeline: mask -> compact -> evaluate ->
// retrain (cycles) -> count
RunRecord prune_tail(const ExperimentConfig& cfg, const ModelSpec& spec,
                     const Network& net, const Segmentation& seg,
                     const std::vector<double>& params, const std::vector<double>& state,
                     const Dataset& train, const Dataset& test, std::uint64_t seed,
                     const std::string& method, double ratio, const std::string& kind,
                     int cycles, std::uint64_t ft_tag) {
  MaskOutcome mo = compute_mask(cfg, net, params, state, seg, train, seed, method, ratio);
  ApplyResult ar = apply_mask(spec, net.layout(), params, seg, mo.mask);
  Network cnet(spec, ar.arch.survivors);
  std::vector<double> cp, cs;
  compact_params(net, params, state, ar.arch, cnet, cp, cs);

  RunRecord r;
  r.kind = kind;
  r.config = config_hash(cfg);
  r.seed = seed;
  r.model = spec.name;
  r.method = method;
  r.ratio = ratio;
  r.mask = mo.mask;
  r.saliency_seconds = mo.saliency_seconds;
  r.selection_seconds = mo.selection_seconds;
  r.layer_ratio = layer_ratios(seg, mo.mask);
  r.group_ratio = group_ratios(spec, seg, mo.mask);
  r.counts = count_report(ar.arch, method, ratio);

  double loss = 0.0;
  eval_split(cnet, cp, cs, test, cfg.loss_kind(), &loss, &r.acc_before_ft);

  if (!mo.mask.entries.empty() || cycles > 1) {
    Checkpoint warm{cp, cs};
    TrainResult ft =
        train_model(cfg, cnet, train, test, Rng::derive(seed, ft_tag), cycles, &warm);
    r.finetune_metrics = std::move(ft.metrics);
    r.acc_after_ft = r.finetune_metrics.back().test_acc;
    r.best_acc_ft = best_test_acc(r.finetune_metrics, r.acc_before_ft);
    save_checkpoint(record_stem(cfg, r) + ".ckpt", cnet.compact_spec(), cnet.layout(),
                    ft.params, ft.state);
  } else {
    r.acc_after_ft = r.acc_before_ft;
    r.best_acc_ft = r.acc_before_ft;
  }
  write_text(record_stem(cfg, r) + "-mask.json", mask_to_json(mo.mask));
  write_text(record_stem(cfg, r) + "-arch.json", arch_to_json(ar.arch));
  if (!mo.saliency.entries.empty())
    write_text(record_stem(cfg, r) + "-saliency.json", saliency_to_json(mo.saliency));
  return r;
}

}  // namespace

RunRecord run_train(const ExperimentConfig& cfg, std::uint64_t seed) {
  Setup su = make_setup(cfg);
  Network net(su.spec);
  BaseRun base = train_or_load(cfg, net, su.train, su.test, seed);

  RunRecord r;
  r.kind = "train";
  r.config = config_hash(cfg);
  r.seed = seed;
  r.model = su.spec.name;
  r.method = "none";
  r.ratio = 0.0;
  r.train_metrics = base.metrics;
  r.total_epochs = int(base.metrics.size());
  r.acc_unpruned = base.test_acc;
  r.acc_before_ft = base.test_acc;
  r.acc_after_ft = base.test_acc;
  r.best_acc_ft = best_test_acc(base.metrics, base.test_acc);
  PrunedArch full{su.spec, std::vector<std::vector<int>>(su.spec.layers.size())};
  r.counts = count_report(full, "none", 0.0);
  persist_record(cfg, r);
  return r;
}

std::vector<RunRecord> run_prune(const ExperimentConfig& cfg, std::uint64_t seed) {
  Setup su = make_setup(cfg);
  Network net(su.spec);
  BaseRun base = train_or_load(cfg, net, su.train, su.test, seed);
  Segmentation seg = segment(su.spec, net.layout());

  std::vector<RunRecord> out;
  for (double ratio : cfg.ratios) {
    RunRecord r = prune_tail(cfg, su.spec, net, seg, base.params, base.state, su.train,
                             su.test, seed, cfg.policy.method, ratio, "prune", 1,
                             kTagFinetune);
    r.acc_unpruned = base.test_acc;
    r.train_metrics = base.metrics;
    r.total_epochs = int(r.train_metrics.size() + r.finetune_metrics.size());
    persist_record(cfg, r);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RunRecord> run_init_prune(const ExperimentConfig& cfg, std::uint64_t seed) {
  Setup su = make_setup(cfg);
  Network net(su.spec);
  std::vector<double> p0, s0;
  init_params(su.spec, net.layout(), Rng::derive(seed, kTagInit), p0, s0);
  Segmentation seg = segment(su.spec, net.layout());

  std::vector<RunRecord> out;
  for (double ratio : cfg.ratios) {
    RunRecord r = prune_tail(cfg, su.spec, net, seg, p0, s0, su.train, su.test, seed,
                             cfg.policy.method, ratio, "init_prune", 2, kTagInitTrain);
    r.total_epochs = int(r.train_metrics.size() + r.finetune_metrics.size());
    r.note = "mask computed at random initialization";
    persist_record(cfg, r);
    out.push_back(std::move(r));
  }
  return out;
}

ExpandOutcome run_expand_prune(const ExperimentConfig& cfg, std::uint64_t seed,
                               const RunRecord& base) {
  Setup su = make_setup(cfg);
  require(!base.group_ratio.empty(), ErrorCategory::input,
          "base record carries no per-group pruning ratios");
  const double ratio =
      base.ratio > 0.0 ? base.ratio : (cfg.ratios.empty() ? 0.5 : cfg.ratios[0]);

  ExpandOutcome out;
  out.targets = detect_bottlenecks(base.group_ratio, cfg.bottleneck_threshold);

  auto arm = [&](const ModelSpec& spec, std::uint64_t arm_seed, const std::string& kind) {
    Network net(spec);
    TrainResult tr = train_model(cfg, net, su.train, su.test, arm_seed);
    Segmentation seg = segment(spec, net.layout());
    RunRecord r = prune_tail(cfg, spec, net, seg, tr.params, tr.state, su.train, su.test,
                             arm_seed, cfg.policy.method, ratio, kind, 1, kTagFinetune);
    r.seed = seed;
    r.acc_unpruned = tr.metrics.back().test_acc;
    r.train_metrics = std::move(tr.metrics);
    r.total_epochs = int(r.train_metrics.size() + r.finetune_metrics.size());
    persist_record(cfg, r);
    return r;
  };

  if (out.targets.empty()) {
    out.expanded = false;
    out.widen_factor = 1.0;
    out.expand_record.kind = "expand";
    out.expand_record.config = config_hash(cfg);
    out.expand_record.seed = seed;
    out.expand_record.model = su.spec.name;
    out.expand_record.method = cfg.policy.method;
    out.expand_record.note = "no bottleneck detected; expansion skipped";
    persist_record(cfg, out.expand_record);
    out.widen_record = arm(su.spec, Rng::derive(seed, kTagWidenArm), "widen");
    return out;
  }

  std::vector<int> layers;
  for (int g : out.targets) {
    require(g >= 0 && g < int(su.spec.groups.size()), ErrorCategory::structure,
            "bottleneck index outside the model's groups");
    for (int l : su.spec.groups[g].layers) layers.push_back(l);
  }
  ModelSpec espec = expand(su.spec, layers, cfg.expand_multiplier);
  espec.name += "-expand";
  WidenResult wr = widen_uniform(su.spec, (long long)build_layout(espec).total);
  wr.spec.name += "-widen";

  out.expanded = true;
  out.widen_factor = wr.factor;
  out.expand_record = arm(espec, Rng::derive(seed, kTagExpandArm), "expand");
  out.widen_record = arm(wr.spec, Rng::derive(seed, kTagWidenArm), "widen");
  return out;
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

std::vector<TimingRow> timing_sweep(const TimingConfig& cfg) {
  require(cfg.family == "wide-mlp", ErrorCategory::config,
          "timing sweep supports the wide-mlp family");
  std::vector<TimingRow> rows;
  for (int width : cfg.widths) {
    require(width >= 1, ErrorCategory::config, "width multipliers must be >= 1");
    ZooOptions opts;
    opts.batchnorm = false;
    ModelSpec spec = make_wide_mlp(cfg.in_features, cfg.classes, width, opts);
    Network net(spec);
    Segmentation seg = segment(spec, net.layout());

    SynthConfig sc;
    sc.classes = cfg.classes;
    sc.channels = cfg.in_features;
    sc.height = sc.width = 1;
    sc.n = cfg.n_prime;
    sc.seed = Rng::derive(cfg.seed, std::uint64_t(width));
    Dataset data = make_synthetic(sc);
    BatchBuf buf;
    Batch batch = whole_batch(data, LossKind::cross_entropy, spec.output_dim, buf);

    std::vector<double> params, state;
    init_params(spec, net.layout(), Rng::derive(cfg.seed, 1000 + width), params, state);

    SelectionPolicy pol;
    pol.ratio = 0.5;
    pol.seed = Rng::derive(cfg.seed, 2000 + width);

    for (const std::string& method : cfg.methods) {
      TimingRow row;
      row.model = spec.name;
      row.width = width;
      row.structures = seg.size();
      row.method = method;
      const double t0 = now_seconds();
      double t1 = t0;
      if (method == "sosp_h") {
        std::vector<double> grad, hv;
        net.gradient(params, state, batch, LossKind::cross_entropy, grad);
        std::vector<double> dir = theta_struc(seg, params);
        net.hvp(params, state, batch, LossKind::cross_entropy, dir, hv);
        SaliencyVector sal = sosp_h_from_parts(seg, params, grad, hv);
        t1 = now_seconds();
        select_sosp_h(sal, seg, pol);
      } else if (method == "sosp_i") {
        QMatrix q = q_matrix(net, params, state, batch, seg, LossKind::cross_entropy);
        t1 = now_seconds();
        select_sosp_i(q, seg, pol);
      } else if (method == "sosp_i_diag") {
        QMatrix q = q_matrix(net, params, state, batch, seg, LossKind::cross_entropy);
        t1 = now_seconds();
        select_sosp_i_diag(q, seg, pol);
      } else if (method == "first_order") {
        std::vector<double> grad;
        net.gradient(params, state, batch, LossKind::cross_entropy, grad);
        SaliencyVector sal;
        sal.method = "first_order";
        sal.entries.resize(seg.size());
        for (int s = 0; s < seg.size(); ++s) {
          sal.entries[s].structure = s;
          sal.entries[s].first_order =
              std::abs(structure_dot(seg.structures[s], params, grad));
          sal.entries[s].total = sal.entries[s].first_order;
        }
        t1 = now_seconds();
        select_first_order(sal, seg, pol);
      } else if (method == "random") {
        t1 = now_seconds();
        select_random(seg, pol);
      } else {
        fail(ErrorCategory::config, "unknown timing method: " + method);
      }
      const double t2 = now_seconds();
      row.saliency_seconds = t1 - t0;
      row.selection_seconds = t2 - t1;
      row.total_seconds = t2 - t0;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string timing_csv(const std::vector<TimingRow>& rows) {
  std::ostringstream ss;
  ss << "model,width,structures,method,saliency_seconds,selection_seconds,total_seconds\n";
  for (const TimingRow& r : rows)
    ss << r.model << ',' << r.width << ',' << r.structures << ',' << r.method << ','
       << r.saliency_seconds << ',' << r.selection_seconds << ',' << r.total_seconds
       << '\n';
  return ss.str();
}

double log_log_slope(const std::vector<double>& s, const std::vector<double>& t) {
  require(s.size() == t.size() && s.size() >= 2, ErrorCategory::input,
          "slope needs two matched samples at least");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    require(s[i] > 0.0 && t[i] > 0.0, ErrorCategory::input,
            "log-log slope needs positive samples");
    mx += std::log(s[i]);
    my += std::log(t[i]);
  }
  mx /= double(s.size());
  my /= double(s.size());
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double dx = std::log(s[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(t[i]) - my);
  }
  require(sxx > 0.0, ErrorCategory::input, "slope needs at least two distinct sizes");
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

double median_of(std::vector<double> v) {
  require(!v.empty(), ErrorCategory::input, "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_report(const std::vector<RunRecord>& records, const std::string& out_dir) {
  require(!records.empty(), ErrorCategory::input, "no run records to report");
  fs::create_directories(out_dir);

  struct Group {
    std::vector<double> before, after, best, params, macs;
  };
  std::vector<std::string> order;
  std::map<std::string, Group> groups;
  for (const RunRecord& r : records) {
    const std::string key = r.model + "," + r.method + "," + fmt_ratio(r.ratio);
    if (!groups.count(key)) order.push_back(key);
    Group& g = groups[key];
    g.before.push_back(r.acc_before_ft);
    g.after.push_back(r.acc_after_ft);
    g.best.push_back(r.best_acc_ft);
    g.params.push_back(double(r.counts.exact.params));
    g.macs.push_back(double(r.counts.exact.macs));
  }

  std::ostringstream summary;
  summary << "model,method,ratio,runs,acc_before_ft_mean,acc_before_ft_std,"
             "acc_after_ft_mean,acc_after_ft_std,best_acc_ft_mean,best_acc_ft_std,"
             "params_exact_mean,macs_exact_mean\n";
  for (const std::string& key : order) {
    const Group& g = groups[key];
    summary << key << ',' << g.after.size() << ',' << mean_of(g.before) << ','
            << sample_std(g.before) << ',' << mean_of(g.after) << ','
            << sample_std(g.after) << ',' << mean_of(g.best) << ',' << sample_std(g.best)
            << ',' << mean_of(g.params) << ',' << mean_of(g.macs) << '\n';
  }
  write_text(out_dir + "/summary.csv", summary.str());

  std::ostringstream points;
  points << "model,method,ratio,seed,params_exact,macs_exact,acc_after_ft\n";
  for (const RunRecord& r : records)
    points << r.model << ',' << r.method << ',' << fmt_ratio(r.ratio) << ',' << r.seed
           << ',' << r.counts.exact.params << ',' << r.counts.exact.macs << ','
           << r.acc_after_ft << '\n';
  write_text(out_dir + "/points.csv", points.str());

  std::ostringstream hist;
  hist << "model,method,ratio,seed,layer_index,pruned_fraction\n";
  for (const RunRecord& r : records)
    for (std::size_t i = 0; i < r.layer_ratio.size(); ++i)
      hist << r.model << ',' << r.method << ',' << fmt_ratio(r.ratio) << ',' << r.seed
           << ',' << i << ',' << r.layer_ratio[i] << '\n';
  write_text(out_dir + "/layer_hist.csv", hist.str());
}

}  // namespace sosp
