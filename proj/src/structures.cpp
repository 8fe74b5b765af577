#include "sosp/structures.hpp"

#include <cmath>

#include "sosp/errors.hpp"
#include "sosp/kernels.hpp"

namespace sosp {

namespace {

int resolve_input(const ModelSpec& spec, int i) {
  int in = spec.layers[i].input;
  return in == kPrevLayer ? i - 1 : in;
}

}  // namespace

Segmentation segment(const ModelSpec& spec, const ParamLayout& layout) {
  validate_model(spec);
  const int n = int(spec.layers.size());

  // batchnorm layers directly consuming a weight layer belong to that layer's
  // structures
  std::vector<int> bn_of(n, -1);
  for (int j = 0; j < n; ++j) {
    if (spec.layers[j].type != LayerType::batchnorm) continue;
    int in = resolve_input(spec, j);
    if (in >= 0 && (spec.layers[in].type == LayerType::conv ||
                    spec.layers[in].type == LayerType::dense))
      bn_of[in] = j;
  }

  Segmentation seg;
  for (int i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    const bool prunable_conv = l.type == LayerType::conv && !l.downsample_path;
    const bool prunable_dense = l.type == LayerType::dense && i != n - 1;
    if (!prunable_conv && !prunable_dense) continue;

    LayerSpan span;
    span.layer = i;
    span.first = seg.size();
    span.count = l.out;
    seg.prunable.push_back(span);

    const LayerParamInfo& info = layout.layer[i];
    const std::size_t row = info.weight_count / l.out;
    for (int c = 0; c < l.out; ++c) {
      Structure s;
      s.id = seg.size();
      s.layer = i;
      s.channel = c;
      s.bn_layer = bn_of[i];
      s.kernel_linear = l.type == LayerType::conv ? l.kh : 1;
      s.runs.push_back({info.offset + row * c, row});
      if (l.bias) s.runs.push_back({info.offset + info.weight_count + c, 1});
      if (s.bn_layer >= 0) {
        const LayerParamInfo& bi = layout.layer[s.bn_layer];
        const std::size_t ch = bi.weight_count;  // channel count
        s.runs.push_back({bi.offset + std::size_t(c), 1});       // gamma
        s.runs.push_back({bi.offset + ch + std::size_t(c), 1});  // beta
      }
      for (const ParamRun& r : s.runs) seg.owned_params += r.len;
      seg.structures.push_back(std::move(s));
    }
  }
  require(!seg.structures.empty(), ErrorCategory::config, "model has no prunable structures");
  return seg;
}

SparseVector extract_structure(const Segmentation& seg, int structure,
                               const std::vector<double>& params) {
  require(structure >= 0 && structure < seg.size(), ErrorCategory::input,
          "structure id out of range");
  SparseVector v;
  for (const ParamRun& r : seg.structures[structure].runs)
    for (std::size_t k = 0; k < r.len; ++k) {
      v.index.push_back(r.offset + k);
      v.value.push_back(params[r.offset + k]);
    }
  return v;
}

std::vector<double> theta_struc(const Segmentation& seg, const std::vector<double>& params) {
  std::vector<double> v(params.size(), 0.0);
  for (const Structure& s : seg.structures)
    for (const ParamRun& r : s.runs)
      for (std::size_t k = 0; k < r.len; ++k) v[r.offset + k] = params[r.offset + k];
  return v;
}

double structure_dot(const Structure& s, const std::vector<double>& params,
                     const std::vector<double>& vec) {
  double acc = 0.0;
  for (const ParamRun& r : s.runs)
    acc += kernels::dot(params.data() + r.offset, vec.data() + r.offset, r.len);
  return acc;
}

double structure_sqnorm(const Structure& s, const std::vector<double>& params) {
  double acc = 0.0;
  for (const ParamRun& r : s.runs)
    acc += kernels::dot(params.data() + r.offset, params.data() + r.offset, r.len);
  return acc;
}

std::vector<double> masked_forward_single_structure(const Network& net,
                                                    const std::vector<double>& params,
                                                    const std::vector<double>& state,
                                                    const Segmentation& seg, int structure,
                                                    const double* x) {
  require(structure >= 0 && structure < seg.size(), ErrorCategory::input,
          "structure id out of range");
  const Structure& s = seg.structures[structure];
  Batch one{x, nullptr, nullptr, 1};
  EvalCache cache = net.eval_cache(params, state, one);
  std::vector<double> out;
  net.gated_forward_single(cache, params, s.layer, s.channel, out);
  return out;
}

}  // namespace sosp
