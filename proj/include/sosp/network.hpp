#pragma once

#include <cstdint>
#include <vector>

#include "sosp/model.hpp"
#include "sosp/params.hpp"

namespace sosp {

enum class LossKind { squared, cross_entropy };

// One sample batch. `label` is used by cross-entropy (and by squared loss as
// a one-hot encoding when `target` is null); `target` points at B x D
// regression targets.
struct Batch {
  const double* x = nullptr;
  const int* label = nullptr;
  const double* target = nullptr;
  int count = 0;
};

// Residual add feeding a node's output. For full models the channel map is
// empty (branches share the channel space); compact models built from
// survivor sets carry an explicit embedding of the branch into the union.
struct AddIn {
  int src = -1;
  std::vector<int> map;  // source post channel -> merged post channel
};

struct Node {
  LayerSpec layer;
  int input = kInputNode;
  int in_c = 0, in_h = 0, in_w = 0;
  int raw_c = 0, out_h = 0, out_w = 0;
  int post_c = 0;  // channels visible to consumers (union at residual adds)
  int in_size = 0, raw_size = 0, post_size = 0;
  LayerParamInfo pinfo;
  std::vector<int> embed_map;  // raw channel -> merged post channel
  std::vector<AddIn> adds;
};

// Retained per-node values of one eval-mode forward. Carries everything the
// structure-level passes need: activations (hence ReLU gates), pre-merge raw
// outputs at residual targets, and the original input.
struct EvalCache {
  int count = 0;
  std::vector<double> input;
  std::vector<std::vector<double>> val;  // per node: B x post_size
  std::vector<std::vector<double>> raw;  // nodes with adds: B x raw_size
  std::vector<std::vector<double>> bn_mean, bn_var;  // train-mode batch stats
};

// Reusable buffers for structure_jvp. The pass only touches the suffix of
// the graph reachable from the seeded layer and tracks a live element range
// per node, so buffers are not cleared between calls.
struct JvpScratch {
  int count = 0;
  std::vector<std::vector<double>> tan, tan_raw;
  std::vector<char> active;
  std::vector<int> plo, phi;  // per-node live range (elements per sample)
  std::vector<double> col;
};

// Compiled layer graph with fixed shapes. All evaluation entry points are
// const and allocate their own scratch; batch-norm running statistics are
// explicit state passed alongside the parameters.
class Network {
 public:
  explicit Network(const ModelSpec& spec);
  // compact variant: survivors[layer] lists the surviving output channels of
  // that layer in original ids (empty list = all channels survive)
  Network(const ModelSpec& spec, const std::vector<std::vector<int>>& survivors);

  const ModelSpec& spec() const { return spec_; }
  // spec with compact widths substituted (used for checkpoints of pruned nets)
  const ModelSpec& compact_spec() const { return compact_; }
  const ParamLayout& layout() const { return layout_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t param_count() const { return layout_.total; }
  std::size_t state_size() const { return layout_.state_total; }
  int input_size() const { return spec_.input_size(); }
  int output_dim() const { return out_dim_; }
  bool has_batchnorm() const { return has_bn_; }
  // surviving channels in original ids
  const std::vector<int>& raw_channels(int node) const { return raw_ids_[node]; }
  const std::vector<int>& post_channels(int node) const { return post_ids_[node]; }

  // eval-mode forward; fills B x D outputs
  void forward(const std::vector<double>& params, const std::vector<double>& state,
               const double* x, int count, std::vector<double>& out) const;

  // mean loss and mean gradient over the batch (eval-mode statistics)
  double gradient(const std::vector<double>& params, const std::vector<double>& state,
                  const Batch& batch, LossKind kind, std::vector<double>& grad) const;

  // exact Hessian-vector product of the mean loss, computed by carrying a
  // directional derivative through the forward and backward passes
  void hvp(const std::vector<double>& params, const std::vector<double>& state,
           const Batch& batch, LossKind kind, const std::vector<double>& v,
           std::vector<double>& out) const;

  // D x P jacobian of the raw outputs at one input (row-major), one backward
  // pass per output row; oracle-scale only
  void jacobian(const std::vector<double>& params, const std::vector<double>& state,
                const double* x, std::vector<double>& jac) const;

  // forward with retained per-node values (eval mode)
  EvalCache eval_cache(const std::vector<double>& params, const std::vector<double>& state,
                       const Batch& batch) const;

  // Directional derivative of the outputs along one structure's own
  // parameters (weights+bias of `channel` in `layer`, plus the scale/shift of
  // `bn_layer` when >= 0). Fills out with B x D values.
  void structure_jvp(const EvalCache& cache, const std::vector<double>& params,
                     const std::vector<double>& state, int layer, int channel, int bn_layer,
                     JvpScratch& scratch, std::vector<double>& out) const;

  // Forward of the gate-frozen network with every channel of `layer` masked
  // except `channel`; rejects models with batch norm. Fills B x D values.
  void gated_forward_single(const EvalCache& cache, const std::vector<double>& params,
                            int layer, int channel, std::vector<double>& out) const;

  // training-mode forward/backward on one minibatch: returns mean loss,
  // fills the mean gradient, optionally folds the batch statistics into the
  // running statistics held in `state`
  double train_gradient(const std::vector<double>& params, std::vector<double>& state,
                        const Batch& batch, LossKind kind, bool update_running,
                        std::vector<double>& grad) const;

  // mean loss and accuracy over a dataset slice (eval mode)
  void evaluate(const std::vector<double>& params, const std::vector<double>& state,
                const Batch& batch, LossKind kind, double* loss, double* accuracy) const;

 private:
  struct Ws;  // per-call scratch

  void compile(const std::vector<std::vector<int>>& survivors);
  void alloc_value(Ws& ws, int count, bool train) const;
  void alloc_cot(Ws& ws, int count, bool dual) const;
  void alloc_tan(Ws& ws, int count) const;
  void embed_post(const Node& nd, const std::vector<std::vector<double>>& pool,
                  const double* raw, double* post, int count) const;
  void unembed_cot(const Node& nd, std::vector<std::vector<double>>& pool, const double* cpost,
                   double* craw, int count) const;
  void value_pass(Ws& ws, const double* p, const double* s, const double* x, int count,
                  bool train) const;
  void tangent_pass(Ws& ws, const double* p, const double* s, const double* v, int count) const;
  void backward_pass(Ws& ws, const double* p, const double* s, const double* x, int count,
                     bool train, const double* dout, double* gsum, const double* vtan,
                     const double* dout_tan, double* gtsum) const;
  void check_sizes(const std::vector<double>& params, const std::vector<double>& state) const;

  ModelSpec spec_;
  ModelSpec compact_;
  ParamLayout layout_;
  std::vector<Node> nodes_;
  std::vector<std::vector<int>> raw_ids_, post_ids_;
  int out_dim_ = 0;
  bool has_bn_ = false;
  std::size_t max_col_ = 0, max_raw_ = 0;
};

// ---- losses on raw outputs -------------------------------------------------

// per-sample loss; out points at the D outputs of one sample
double loss_value(const double* out, int dim, LossKind kind, int label, const double* target);
// per-sample loss and gradient seed dL/dout
double loss_grad(const double* out, int dim, LossKind kind, int label, const double* target,
                 double* dout);
// numerically stable softmax
void softmax(const double* z, int n, double* out);

}  // namespace sosp
