#include "sosp/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "json.hpp"
#include "sosp/errors.hpp"
#include "sosp/params.hpp"

namespace sosp {

namespace {

using Json = nlohmann::ordered_json;

int resolve_input(const LayerSpec& l, int self) {
  if (l.input == kPrevLayer) return self - 1;
  return l.input;  // kInputNode (-1) or explicit id
}

// positions of `subset` inside `super`; both ascending original channel ids
std::vector<int> positions(const std::vector<int>& subset, const std::vector<int>& super,
                           const std::string& what) {
  std::vector<int> pos(subset.size());
  std::size_t j = 0;
  for (std::size_t k = 0; k < subset.size(); ++k) {
    while (j < super.size() && super[j] < subset[k]) ++j;
    require(j < super.size() && super[j] == subset[k], ErrorCategory::structure,
            "surviving channel missing from the base network in " + what);
    pos[k] = int(j);
  }
  return pos;
}

std::vector<int> input_channels(const Network& net, int node, int in_channels) {
  const int p = net.nodes()[node].input;
  if (p < 0) {
    std::vector<int> ids(in_channels);
    for (int i = 0; i < in_channels; ++i) ids[i] = i;
    return ids;
  }
  return net.post_channels(p);
}

const LayerGroup* group_of_layer(const ModelSpec& spec, int layer) {
  for (const LayerGroup& g : spec.groups)
    for (int l : g.layers)
      if (l == layer) return &g;
  return nullptr;
}

}  // namespace

ApplyResult apply_mask(const ModelSpec& spec, const ParamLayout& layout,
                       const std::vector<double>& params, const Segmentation& seg,
                       const PruningMask& mask) {
  require(params.size() == layout.total, ErrorCategory::input,
          "parameter vector does not match the layout");

  std::vector<char> pruned(seg.size(), 0);
  for (const MaskEntry& e : mask.entries) {
    require(e.structure >= 0 && e.structure < seg.size(), ErrorCategory::structure,
            "mask names an unknown structure");
    require(!pruned[e.structure], ErrorCategory::input, "mask repeats a structure");
    require(seg.structures[e.structure].layer == e.layer, ErrorCategory::input,
            "mask was built against a different segmentation");
    pruned[e.structure] = 1;
  }

  ApplyResult res;
  res.arch.spec = spec;
  res.arch.survivors.assign(spec.layers.size(), {});
  res.zeroed_params = params;

  for (const LayerSpan& sp : seg.prunable) {
    std::vector<int>& sv = res.arch.survivors[sp.layer];
    for (int s = sp.first; s < sp.first + sp.count; ++s)
      if (!pruned[s]) sv.push_back(seg.structures[s].channel);
    require(!sv.empty(), ErrorCategory::structure,
            "mask removes every channel of layer " + std::to_string(sp.layer) +
                "; lower the ratio or set a layer cap");
  }

  for (int s = 0; s < seg.size(); ++s)
    if (pruned[s])
      for (const ParamRun& r : seg.structures[s].runs)
        std::fill(res.zeroed_params.begin() + r.offset,
                  res.zeroed_params.begin() + r.offset + r.len, 0.0);
  return res;
}

void compact_params(const Network& base, const std::vector<double>& params,
                    const std::vector<double>& state, const PrunedArch& arch,
                    const Network& compact, std::vector<double>& cparams,
                    std::vector<double>& cstate) {
  require(base.nodes().size() == compact.nodes().size(), ErrorCategory::input,
          "base and compact networks come from different specs");
  require(params.size() == base.param_count(), ErrorCategory::input,
          "parameter vector does not match the base network");
  require(state.size() == base.state_size(), ErrorCategory::input,
          "state vector does not match the base network");

  const int in_ch = arch.spec.in_channels;
  cparams.assign(compact.param_count(), 0.0);
  cstate.assign(compact.state_size(), 0.0);

  for (std::size_t i = 0; i < base.nodes().size(); ++i) {
    const Node& bn = base.nodes()[i];
    const LayerSpec& l = bn.layer;
    const LayerParamInfo& bi = base.layout().layer[i];
    const LayerParamInfo& ci = compact.layout().layer[i];
    const std::string where = "layer " + std::to_string(i);
    if (l.type == LayerType::relu || l.type == LayerType::avgpool) continue;

    if (l.type == LayerType::batchnorm) {
      const std::vector<int> rows =
          positions(compact.raw_channels(int(i)), base.raw_channels(int(i)), where);
      const int bc = bn.raw_c, cc = int(rows.size());
      const double* bg = params.data() + bi.offset;
      double* cg = cparams.data() + ci.offset;
      const double* bs = state.data() + bi.state_offset;
      double* cs = cstate.data() + ci.state_offset;
      for (int k = 0; k < cc; ++k) {
        cg[k] = bg[rows[k]];            // gamma
        cg[cc + k] = bg[bc + rows[k]];  // beta
        cs[k] = bs[rows[k]];            // running mean
        cs[cc + k] = bs[bc + rows[k]];  // running var
      }
      continue;
    }

    // conv or dense: slice output rows, then input columns
    const std::vector<int> rows =
        positions(compact.raw_channels(int(i)), base.raw_channels(int(i)), where);
    const std::vector<int> base_in = input_channels(base, int(i), in_ch);
    const std::vector<int> comp_in = input_channels(compact, int(i), in_ch);
    const std::vector<int> cols = positions(comp_in, base_in, where);

    const int block = (l.type == LayerType::conv) ? l.kh * l.kw : bn.in_h * bn.in_w;
    const std::size_t brow = std::size_t(base_in.size()) * block;
    const std::size_t crow = std::size_t(comp_in.size()) * block;
    const double* bw = params.data() + bi.offset;
    double* cw = cparams.data() + ci.offset;
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < cols.size(); ++c)
        std::memcpy(cw + r * crow + c * block, bw + rows[r] * brow + cols[c] * block,
                    sizeof(double) * block);
    if (l.bias) {
      const double* bb = params.data() + bi.offset + bi.weight_count;
      double* cb = cparams.data() + ci.offset + ci.weight_count;
      for (std::size_t r = 0; r < rows.size(); ++r) cb[r] = bb[rows[r]];
    }
  }
}

CountRow count_exact(const PrunedArch& arch) {
  Network net(arch.spec, arch.survivors);
  CountRow row;
  row.params = (long long)net.param_count();
  for (std::size_t i = 0; i < net.nodes().size(); ++i) {
    const Node& nd = net.nodes()[i];
    if (nd.layer.type != LayerType::conv && nd.layer.type != LayerType::dense) continue;
    row.macs += (long long)net.layout().layer[i].weight_count * nd.out_h * nd.out_w;
  }
  return row;
}

CountRow count_approx(const PrunedArch& arch) {
  const ModelSpec& spec = arch.spec;
  require(arch.survivors.size() == spec.layers.size(), ErrorCategory::input,
          "survivor list does not match the model");
  Network base(spec);  // spatial dims only; pruning never changes them
  const int L = int(spec.layers.size());

  auto surv = [&](int i) {
    return arch.survivors[i].empty() ? spec.layers[i].out : int(arch.survivors[i].size());
  };

  // downsample conv -> add-target layer whose width it copies
  std::vector<int> ds_target(L, -1);
  for (const ResidualSpec& r : spec.residuals)
    if (r.kind == ResidualKind::downsample) ds_target[r.path.front()] = r.target;

  // surviving width of the weight layer feeding `t` down the main chain; the
  // projection branch precedes its target, so the running array cannot be used
  auto chain_width = [&](int t) -> long long {
    while (t >= 0 && spec.layers[t].type != LayerType::conv &&
           spec.layers[t].type != LayerType::dense)
      t = resolve_input(spec.layers[t], t);
    return t < 0 ? spec.in_channels : surv(t);
  };

  CountRow row;
  std::vector<long long> width(L, 0);  // channel width flowing down the main chain
  for (int i = 0; i < L; ++i) {
    const LayerSpec& l = spec.layers[i];
    const Node& nd = base.nodes()[i];
    const int p = resolve_input(l, i);
    const long long w_in = p < 0 ? spec.in_channels : width[p];
    switch (l.type) {
      case LayerType::conv: {
        const long long f_out = ds_target[i] >= 0 ? chain_width(ds_target[i]) : surv(i);
        const long long wts = w_in * f_out * l.kh * l.kw;
        row.params += wts + (l.bias ? f_out : 0);
        row.macs += wts * nd.out_h * nd.out_w;
        width[i] = f_out;
        break;
      }
      case LayerType::dense: {
        const long long f_in = w_in * nd.in_h * nd.in_w;
        const long long f_out = surv(i);
        row.params += f_in * f_out + (l.bias ? f_out : 0);
        row.macs += f_in * f_out;
        width[i] = f_out;
        break;
      }
      case LayerType::batchnorm:
        row.params += 2 * w_in;
        width[i] = w_in;
        break;
      case LayerType::relu:
      case LayerType::avgpool:
        width[i] = w_in;
        break;
    }
  }
  return row;
}

CountReport count_report(const PrunedArch& arch, const std::string& method, double ratio) {
  CountReport r;
  r.model = arch.spec.name;
  r.method = method;
  r.ratio = ratio;
  r.exact = count_exact(arch);
  r.approx = count_approx(arch);
  return r;
}

std::string count_report_to_json(const CountReport& r) {
  Json j;
  j["model"] = r.model;
  j["method"] = r.method;
  j["ratio"] = r.ratio;
  j["exact"] = Json{{"params", r.exact.params}, {"macs", r.exact.macs}};
  j["approx"] = Json{{"params", r.approx.params}, {"macs", r.approx.macs}};
  return j.dump(2);
}

std::string count_report_csv_header() {
  return "model,method,ratio,params_exact,macs_exact,params_approx,macs_approx";
}

std::string count_report_csv_row(const CountReport& r) {
  std::ostringstream ss;
  ss << r.model << ',' << r.method << ',' << r.ratio << ',' << r.exact.params << ','
     << r.exact.macs << ',' << r.approx.params << ',' << r.approx.macs;
  return ss.str();
}

std::vector<double> layer_ratios(const Segmentation& seg, const PruningMask& mask) {
  std::vector<int> cnt(seg.prunable.size(), 0);
  for (const MaskEntry& e : mask.entries) {
    require(e.structure >= 0 && e.structure < seg.size(), ErrorCategory::structure,
            "mask names an unknown structure");
    for (std::size_t i = 0; i < seg.prunable.size(); ++i) {
      const LayerSpan& sp = seg.prunable[i];
      if (e.structure >= sp.first && e.structure < sp.first + sp.count) ++cnt[i];
    }
  }
  std::vector<double> out(seg.prunable.size());
  for (std::size_t i = 0; i < seg.prunable.size(); ++i)
    out[i] = double(cnt[i]) / seg.prunable[i].count;
  return out;
}

std::vector<double> group_ratios(const ModelSpec& spec, const Segmentation& seg,
                                 const PruningMask& mask) {
  std::vector<char> pruned(seg.size(), 0);
  for (const MaskEntry& e : mask.entries) {
    require(e.structure >= 0 && e.structure < seg.size(), ErrorCategory::structure,
            "mask names an unknown structure");
    pruned[e.structure] = 1;
  }
  std::vector<double> out;
  for (const LayerGroup& g : spec.groups) {
    long long total = 0, cut = 0;
    for (int layer : g.layers) {
      const LayerSpan* sp = seg.span_of_layer(layer);
      if (!sp) continue;  // projection convs carry no structures
      total += sp->count;
      for (int s = sp->first; s < sp->first + sp->count; ++s) cut += pruned[s];
    }
    out.push_back(total > 0 ? double(cut) / double(total) : 0.0);
  }
  return out;
}

std::vector<int> detect_bottlenecks(const std::vector<double>& ratios, double threshold) {
  if (ratios.empty()) return {};
  std::vector<double> sorted = ratios;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median =
      n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<int> out;
  for (std::size_t i = 0; i < ratios.size(); ++i)
    if (ratios[i] < threshold * median) out.push_back(int(i));
  return out;
}

ModelSpec expand(const ModelSpec& spec, const std::vector<int>& target_layers,
                 double multiplier) {
  require(multiplier >= 1.0, ErrorCategory::config, "width multiplier must be >= 1");
  const int L = int(spec.layers.size());
  ModelSpec out = spec;
  for (int t : target_layers) {
    require(t >= 0 && t < L, ErrorCategory::structure,
            "expansion target layer out of range");
    const LayerSpec& l = spec.layers[t];
    require(l.type == LayerType::conv || l.type == LayerType::dense,
            ErrorCategory::structure, "expansion target must be a conv or dense layer");
    require(t != L - 1, ErrorCategory::structure, "cannot widen the classifier layer");
    if (multiplier > 1.0)
      out.layers[t].out =
          std::max(l.out + 1, int(std::llround(l.out * multiplier)));
  }

  // re-derive every consumer width from the graph
  std::vector<int> c(L), h(L), w(L);
  for (int i = 0; i < L; ++i) {
    LayerSpec& l = out.layers[i];
    const int p = resolve_input(l, i);
    const int ci = p < 0 ? out.in_channels : c[p];
    const int hi = p < 0 ? out.in_height : h[p];
    const int wi = p < 0 ? out.in_width : w[p];
    switch (l.type) {
      case LayerType::conv:
        l.in = ci;
        c[i] = l.out;
        h[i] = (hi + 2 * l.pad - l.kh) / l.stride + 1;
        w[i] = (wi + 2 * l.pad - l.kw) / l.stride + 1;
        break;
      case LayerType::dense:
        l.in = ci * hi * wi;
        c[i] = l.out;
        h[i] = w[i] = 1;
        break;
      case LayerType::batchnorm:
        l.in = l.out = ci;
        c[i] = ci;
        h[i] = hi;
        w[i] = wi;
        break;
      case LayerType::relu:
        c[i] = ci;
        h[i] = hi;
        w[i] = wi;
        break;
      case LayerType::avgpool:
        c[i] = ci;
        h[i] = (hi - l.kh) / l.stride + 1;
        w[i] = (wi - l.kw) / l.stride + 1;
        break;
    }
  }

  for (const ResidualSpec& r : spec.residuals) {
    const int branch = r.kind == ResidualKind::downsample ? c[r.path.back()] : c[r.source];
    if (branch == c[r.target]) continue;
    int t = r.target;
    while (t >= 0 && out.layers[t].type != LayerType::conv &&
           out.layers[t].type != LayerType::dense)
      t = resolve_input(out.layers[t], t);
    const LayerGroup* g = t >= 0 ? group_of_layer(spec, t) : nullptr;
    fail(ErrorCategory::structure,
         "residual add at layer " + std::to_string(r.target) +
             " gets branch widths " + std::to_string(branch) + " and " +
             std::to_string(c[r.target]) +
             (g ? "; widen group '" + g->name + "' as a whole"
                : "; widen every layer feeding this add together"));
  }

  validate_model(out);
  return out;
}

WidenResult widen_uniform(const ModelSpec& spec, long long target_params) {
  require(target_params > 0, ErrorCategory::config, "target parameter count must be positive");
  Segmentation seg = segment(spec, build_layout(spec));
  std::vector<int> layers;
  for (const LayerSpan& sp : seg.prunable) layers.push_back(sp.layer);

  auto params_at = [&](double m) {
    return (long long)build_layout(expand(spec, layers, m)).total;
  };

  if (params_at(1.0) >= target_params) return {spec, 1.0};
  double lo = 1.0, hi = 2.0;
  while (params_at(hi) < target_params) {
    require(hi < 1e6, ErrorCategory::config, "target parameter count is unreachable");
    hi *= 2.0;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (params_at(mid) < target_params ? lo : hi) = mid;
  }
  const long long at_lo = params_at(lo), at_hi = params_at(hi);
  const double best =
      std::llabs(at_lo - target_params) <= std::llabs(at_hi - target_params) ? lo : hi;
  return {expand(spec, layers, best), best};
}

std::string arch_to_json(const PrunedArch& arch) {
  Json j;
  j["model"] = Json::parse(model_to_json(arch.spec));
  j["survivors"] = arch.survivors;
  return j.dump(2);
}

PrunedArch arch_from_json(const std::string& text) {
  PrunedArch arch;
  try {
    Json j = Json::parse(text);
    arch.spec = model_from_json(j.at("model").dump());
    arch.survivors = j.at("survivors").get<std::vector<std::vector<int>>>();
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::io, std::string("malformed architecture json: ") + ex.what());
  }
  require(arch.survivors.size() == arch.spec.layers.size(), ErrorCategory::io,
          "architecture json survivor list does not match the model");
  return arch;
}

}  // namespace sosp
