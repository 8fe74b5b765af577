#pragma once

#include <string>
#include <vector>

#include "sosp/selection.hpp"

namespace sosp {

// Pruned architecture: the base topology plus per-layer survivor sets
// (ascending original channel ids).  Non-prunable layers keep all channels.
struct PrunedArch {
  ModelSpec spec;
  std::vector<std::vector<int>> survivors;  // indexed by layer id
};

struct ApplyResult {
  PrunedArch arch;
  std::vector<double> zeroed_params;  // theta with masked structures zeroed
};

ApplyResult apply_mask(const ModelSpec& spec, const ParamLayout& layout,
                       const std::vector<double>& params, const Segmentation& seg,
                       const PruningMask& mask);

// Compact parameters (and batch-norm state) for Network(arch): surviving
// weight rows with input slices narrowed to the survivors actually feeding
// each layer.  The compact net reproduces the zeroed net's outputs.
void compact_params(const Network& base, const std::vector<double>& params,
                    const std::vector<double>& state, const PrunedArch& arch,
                    const Network& compact, std::vector<double>& cparams,
                    std::vector<double>& cstate);

struct CountRow {
  long long params = 0;
  long long macs = 0;
};

struct CountReport {
  std::string model;
  std::string method;
  double ratio = 0.0;
  CountRow exact;
  CountRow approx;
};

// Exact counting propagates survivor sets through the graph; the input set
// of a layer after an identity-skip add is the union of the branch survivor
// sets, and a downsample add restores the full original width (projection
// convs are never pruned).  The approximate variant chains
// F_in[l+1] = F_out[l] along the main path and takes downsample in/out
// widths from the neighboring pruned layers.  exact >= approx holds
// componentwise; they coincide on chain models.
CountRow count_exact(const PrunedArch& arch);
CountRow count_approx(const PrunedArch& arch);
CountReport count_report(const PrunedArch& arch, const std::string& method, double ratio);

std::string count_report_to_json(const CountReport& r);
std::string count_report_csv_header();
std::string count_report_csv_row(const CountReport& r);

// fraction of structures pruned per prunable layer (order of seg.prunable)
std::vector<double> layer_ratios(const Segmentation& seg, const PruningMask& mask);

// ratios aggregated over spec.groups (stages for residual models)
std::vector<double> group_ratios(const ModelSpec& spec, const Segmentation& seg,
                                 const PruningMask& mask);

// groups whose ratio falls below threshold * median ratio
std::vector<int> detect_bottlenecks(const std::vector<double>& ratios, double threshold);

// Widen the given layers by `multiplier` (new width = max(old+1,
// round(old*mult)); multiplier 1 is the identity).  Consumer input widths
// are re-derived from the graph.  Throws a structure error naming the group
// to widen when the result breaks a residual add.
ModelSpec expand(const ModelSpec& spec, const std::vector<int>& target_layers,
                 double multiplier);

struct WidenResult {
  ModelSpec spec;
  double factor = 1.0;
};

// single multiplier on every prunable layer so the unpruned parameter count
// lands closest to `target_params` (binary search over the rounded widths)
WidenResult widen_uniform(const ModelSpec& spec, long long target_params);

// serialization of PrunedArch: ModelSpec JSON plus survivor lists
std::string arch_to_json(const PrunedArch& arch);
PrunedArch arch_from_json(const std::string& text);

}  // namespace sosp
