#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "sosp/arch.hpp"
#include "sosp/params.hpp"
#include "test_util.hpp"

using namespace sosp;
using namespace testutil;

namespace {

struct Traced {
  long long params = 0;
  long long macs = 0;
};

// Brute-force survivor tracing written directly against the model spec:
// walks the graph once, carrying explicit channel-id sets, and counts the
// remaining weights.  Kept deliberately independent of the library path.
Traced trace_counts(const ModelSpec& spec, const std::vector<std::vector<int>>& survivors) {
  const int L = int(spec.layers.size());
  std::vector<std::set<int>> post(L);
  std::vector<int> oh(L), ow(L);

  // add sources feeding each target
  std::vector<std::vector<int>> adds(L);
  for (const ResidualSpec& r : spec.residuals)
    adds[r.target].push_back(r.kind == ResidualKind::downsample ? r.path.back() : r.source);

  std::set<int> input_set;
  for (int c = 0; c < spec.in_channels; ++c) input_set.insert(c);

  Traced t;
  for (int i = 0; i < L; ++i) {
    const LayerSpec& l = spec.layers[i];
    int prod = l.input == kPrevLayer ? i - 1 : l.input;
    const std::set<int>& in = prod < 0 ? input_set : post[prod];
    int ih = prod < 0 ? spec.in_height : oh[prod];
    int iw = prod < 0 ? spec.in_width : ow[prod];

    std::set<int> raw;
    switch (l.type) {
      case LayerType::conv: {
        if (int(i) < int(survivors.size()) && !survivors[i].empty())
          raw.insert(survivors[i].begin(), survivors[i].end());
        else
          for (int c = 0; c < l.out; ++c) raw.insert(c);
        oh[i] = (ih + 2 * l.pad - l.kh) / l.stride + 1;
        ow[i] = (iw + 2 * l.pad - l.kw) / l.stride + 1;
        long long w = (long long)raw.size() * (long long)in.size() * l.kh * l.kw;
        if (l.bias) w += (long long)raw.size();
        t.params += w;
        t.macs += (long long)raw.size() * (long long)in.size() * l.kh * l.kw * oh[i] * ow[i];
        break;
      }
      case LayerType::dense: {
        if (int(i) < int(survivors.size()) && !survivors[i].empty())
          raw.insert(survivors[i].begin(), survivors[i].end());
        else
          for (int c = 0; c < l.out; ++c) raw.insert(c);
        oh[i] = ow[i] = 1;
        long long in_feat = (long long)in.size() * ih * iw;
        t.params += (long long)raw.size() * in_feat + (l.bias ? (long long)raw.size() : 0);
        t.macs += (long long)raw.size() * in_feat;
        break;
      }
      case LayerType::batchnorm:
        raw = in;
        oh[i] = ih;
        ow[i] = iw;
        t.params += 2 * (long long)in.size();
        break;
      case LayerType::relu:
        raw = in;
        oh[i] = ih;
        ow[i] = iw;
        break;
      case LayerType::avgpool:
        raw = in;
        oh[i] = (ih - l.kh) / l.stride + 1;
        ow[i] = (iw - l.kw) / l.stride + 1;
        break;
    }

    post[i] = raw;
    for (int src : adds[i]) post[i].insert(post[src].begin(), post[src].end());
  }
  return t;
}

struct Rig {
  ModelSpec spec;
  Network net;
  Segmentation seg;
  std::vector<double> params, state;

  explicit Rig(ModelSpec s, std::uint64_t seed = 1)
      : spec(std::move(s)), net(spec), seg(segment(spec, net.layout())) {
    init_params(spec, net.layout(), seed, params, state);
    jitter_state(net, state, seed + 1);
  }
};

ModelSpec zoo(const std::string& name, int classes = 4) {
  ZooOptions opts;
  opts.in_height = opts.in_width = 8;
  return make_model(name, 16, classes, opts);
}

PruningMask mask_of(const Segmentation& seg, const std::vector<int>& ids,
                    const char* method = "sosp_h") {
  PruningMask m;
  m.method = method;
  m.ratio = seg.size() ? double(ids.size()) / seg.size() : 0.0;
  for (int id : ids) {
    MaskEntry e;
    e.structure = id;
    e.layer = id >= 0 && id < seg.size() ? seg.structures[id].layer : -1;
    m.entries.push_back(e);
  }
  return m;
}

// uniform random mask keeping at least one structure per layer
std::vector<int> random_mask_ids(const Segmentation& seg, Rng& rng) {
  std::vector<int> ids;
  for (const LayerSpan& span : seg.prunable) {
    int take = int(rng.below(std::uint64_t(span.count)));  // 0 .. count-1
    std::vector<int> pool(span.count);
    for (int i = 0; i < span.count; ++i) pool[i] = span.first + i;
    for (int i = 0; i < take; ++i) {
      int j = i + int(rng.below(std::uint64_t(span.count - i)));
      std::swap(pool[i], pool[j]);
      ids.push_back(pool[i]);
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

TEST_CASE("an empty mask leaves architecture and parameters untouched") {
  Rig rig(zoo("convnet-toy"));
  PruningMask empty = mask_of(rig.seg, {});
  ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, empty);

  CHECK(res.zeroed_params == rig.params);
  Network compact(res.arch.spec, res.arch.survivors);
  CHECK(compact.param_count() == rig.net.param_count());

  std::vector<double> cparams, cstate;
  compact_params(rig.net, rig.params, rig.state, res.arch, compact, cparams, cstate);
  CHECK(cparams == rig.params);
  CHECK(cstate == rig.state);

  CountRow exact = count_exact(res.arch);
  CountRow approx = count_approx(res.arch);
  CHECK(exact.params == approx.params);
  CHECK(exact.macs == approx.macs);
}

TEST_CASE("unpruned zoo models match hand-derived closed-form counts") {
  struct Want {
    const char* name;
    long long params, macs;
  };
  // sums of F_out*F_in*K*K (+2F per norm layer, +bias on the classifier)
  // and of weight-count x output positions
  const Want wants[] = {
      {"convnet-toy", 4752, 43840},
      {"convnet-toy-bottleneck", 10412, 260368},
      {"restoy", 3513, 87520},
      {"mlp-toy", 5508, 5376},
  };
  for (const Want& w : wants) {
    CAPTURE(w.name);
    Rig rig(zoo(w.name));
    PruningMask empty = mask_of(rig.seg, {});
    ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, empty);
    CountRow exact = count_exact(res.arch);
    CHECK(exact.params == w.params);
    CHECK(exact.macs == w.macs);
    CHECK(exact.params == (long long)rig.net.param_count());
    Traced traced = trace_counts(rig.spec, res.arch.survivors);
    CHECK(traced.params == w.params);
    CHECK(traced.macs == w.macs);
  }
}

TEST_CASE("pruning one channel removes its filter, norm slice, and consumer slices") {
  Rig rig(zoo("convnet-toy"));
  // channel 0 of the first conv: 3*3*3 weights + gamma/beta, and each of the
  // four channels of the next conv loses a 3x3 input slice
  PruningMask m = mask_of(rig.seg, {0});
  ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
  CountRow exact = count_exact(res.arch);
  CHECK(exact.params == 4752 - 29 - 36);
  CHECK(exact.macs == 43840 - 27 * 64 - 36 * 64);

  Network compact(res.arch.spec, res.arch.survivors);
  CHECK((long long)compact.param_count() == exact.params);

  // chain model: the approximate rule coincides with the exact one
  CountRow approx = count_approx(res.arch);
  CHECK(approx.params == exact.params);
  CHECK(approx.macs == exact.macs);
}

TEST_CASE("zeroed and compacted networks compute the same function") {
  Rng rng(5);
  for (const char* name : {"mlp-toy", "convnet-toy", "restoy"}) {
    CAPTURE(name);
    Rig rig(zoo(name));
    for (int trial = 0; trial < 6; ++trial) {
      PruningMask m = mask_of(rig.seg, random_mask_ids(rig.seg, rng));
      ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
      Network compact(res.arch.spec, res.arch.survivors);
      std::vector<double> cparams, cstate;
      compact_params(rig.net, rig.params, rig.state, res.arch, compact, cparams, cstate);
      CHECK((long long)compact.param_count() == count_exact(res.arch).params);

      std::vector<double> x = random_vec(std::size_t(4) * rig.net.input_size(), rng);
      std::vector<double> out_zeroed, out_compact;
      rig.net.forward(res.zeroed_params, rig.state, x.data(), 4, out_zeroed);
      compact.forward(cparams, cstate, x.data(), 4, out_compact);
      CHECK(vec_rel_err(out_compact, out_zeroed) < 1e-10);
    }
  }
}

TEST_CASE("skip branches keep pruned channels alive for downstream consumers") {
  Rig rig(zoo("restoy"));
  // second conv of the stage-1 identity block: its add target unions the
  // block survivors with the untouched skip branch
  const LayerSpan* span = rig.seg.span_of_layer(14);
  REQUIRE(span != nullptr);
  REQUIRE(span->count == 5);
  PruningMask m = mask_of(rig.seg, {span->first + 3});
  ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);

  // channel 3 survives past the add: the conv output itself stays pruned,
  // but its norm layer is the join and layers after the block still see 5
  REQUIRE(res.arch.survivors[14] == std::vector<int>{0, 1, 2, 4});
  Network compact(res.arch.spec, res.arch.survivors);
  CHECK(compact.post_channels(14).size() == 4);
  CHECK(compact.post_channels(15).size() == 5);
  CHECK(std::count(compact.post_channels(15).begin(), compact.post_channels(15).end(), 3) == 1);

  // only the filter itself and its norm slice disappear
  CountRow exact = count_exact(res.arch);
  CHECK(exact.params == 3513 - 45 - 2);
  CHECK(exact.macs == 87520 - 45 * 64);
  Traced traced = trace_counts(rig.spec, res.arch.survivors);
  CHECK(traced.params == exact.params);
  CHECK(traced.macs == exact.macs);

  // the chained approximation narrows the next block's input instead: the
  // following conv and the projection each lose an input slice
  CountRow approx = count_approx(res.arch);
  CHECK(approx.params == exact.params - 6 * 9 - 6 * 1);
  CHECK(approx.macs == exact.macs - 6 * 9 * 16 - 6 * 1 * 16);
}

TEST_CASE("exact counting matches brute-force tracing on random masks") {
  Rig rig(zoo("restoy"));
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    PruningMask m = mask_of(rig.seg, random_mask_ids(rig.seg, rng));
    ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
    CountRow exact = count_exact(res.arch);
    Traced traced = trace_counts(rig.spec, res.arch.survivors);
    CHECK(exact.params == traced.params);
    CHECK(exact.macs == traced.macs);

    CountRow approx = count_approx(res.arch);
    CHECK(exact.params >= approx.params);
    CHECK(exact.macs >= approx.macs);
  }
}

TEST_CASE("approximation equals exact counting on chain models") {
  Rng rng(9);
  for (const char* name : {"mlp-toy", "convnet-toy"}) {
    CAPTURE(name);
    Rig rig(zoo(name));
    for (int trial = 0; trial < 50; ++trial) {
      PruningMask m = mask_of(rig.seg, random_mask_ids(rig.seg, rng));
      ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
      CountRow exact = count_exact(res.arch);
      CountRow approx = count_approx(res.arch);
      CHECK(exact.params == approx.params);
      CHECK(exact.macs == approx.macs);
    }
  }
}

TEST_CASE("count reports serialize to a stable csv row") {
  Rig rig(zoo("convnet-toy"));
  PruningMask m = mask_of(rig.seg, {0}, "random");
  m.ratio = 0.25;
  ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
  CountReport rep = count_report(res.arch, "random", 0.25);
  CHECK(rep.model == "convnet-toy");
  CHECK(count_report_csv_header() ==
        "model,method,ratio,params_exact,macs_exact,params_approx,macs_approx");
  CHECK(count_report_csv_row(rep) == "convnet-toy,random,0.25,4687,39808,4687,39808");
}

TEST_CASE("per-layer ratios reflect the mask") {
  Rig rig(zoo("convnet-toy"));
  PruningMask empty = mask_of(rig.seg, {});
  std::vector<double> zeros = layer_ratios(rig.seg, empty);
  REQUIRE(zeros.size() == 6);
  for (double r : zeros) CHECK(r == 0.0);

  // prune 2 of the 8 channels in the third conv layer
  const LayerSpan* span = rig.seg.span_of_layer(rig.seg.prunable[2].layer);
  PruningMask m = mask_of(rig.seg, {span->first, span->first + 5});
  std::vector<double> got = layer_ratios(rig.seg, m);
  CHECK(got[2] == 0.25);
  CHECK(got[0] == 0.0);

  std::vector<int> all(rig.seg.size());
  for (int i = 0; i < rig.seg.size(); ++i) all[i] = i;
  for (double r : layer_ratios(rig.seg, mask_of(rig.seg, all))) CHECK(r == 1.0);
}

TEST_CASE("group ratios aggregate whole stages") {
  Rig rig(zoo("restoy"));
  REQUIRE(rig.spec.groups.size() == 4);  // stem + three stages

  // stage1 owns four prunable convs of five channels each
  std::vector<int> ids;
  const LayerSpan* s5 = rig.seg.span_of_layer(5);
  const LayerSpan* s14 = rig.seg.span_of_layer(14);
  REQUIRE(s5 != nullptr);
  REQUIRE(s14 != nullptr);
  ids.push_back(s5->first);
  ids.push_back(s5->first + 1);
  ids.push_back(s14->first);
  ids.push_back(s14->first + 2);
  ids.push_back(s14->first + 4);
  std::vector<double> gr = group_ratios(rig.spec, rig.seg, mask_of(rig.seg, ids));
  REQUIRE(gr.size() == 4);
  CHECK(gr[0] == 0.0);
  CHECK(gr[1] == doctest::Approx(5.0 / 20).epsilon(1e-15));
  CHECK(gr[2] == 0.0);
  CHECK(gr[3] == 0.0);
}

TEST_CASE("bottleneck detection flags ratios far below the median") {
  CHECK(detect_bottlenecks({0.5, 0.5, 0.5}, 0.5).empty());
  CHECK(detect_bottlenecks({0.1, 0.8, 0.8, 0.9}, 0.5) == std::vector<int>{0});
  CHECK(detect_bottlenecks({0.0, 0.0, 0.0}, 0.5).empty());
  CHECK(detect_bottlenecks({0.39, 0.8, 0.8}, 0.5) == std::vector<int>{0});
  CHECK(detect_bottlenecks({0.41, 0.8, 0.8}, 0.5).empty());
}

TEST_CASE("expansion widens target layers and rederives consumer widths") {
  ModelSpec spec = zoo("convnet-toy");
  ModelSpec same = expand(spec, {0}, 1.0);
  CHECK(model_to_json(same) == model_to_json(spec));

  ModelSpec wide = expand(spec, {0}, 2.0);
  CHECK(wide.layers[0].out == 8);
  CHECK(wide.layers[1].in == 8);   // following norm layer
  CHECK(wide.layers[3].in == 8);   // next conv reads the widened output
  validate_model(wide);

  PrunedArch before{spec, std::vector<std::vector<int>>(spec.layers.size())};
  PrunedArch after{wide, std::vector<std::vector<int>>(wide.layers.size())};
  CHECK(count_exact(after).params > count_exact(before).params);

  // widening must at least add one unit even for tiny multipliers
  ModelSpec nudged = expand(spec, {0}, 1.01);
  CHECK(nudged.layers[0].out == 5);
}

TEST_CASE("expanding part of a residual stage is rejected by name") {
  ModelSpec spec = zoo("restoy");
  // widening only the residual conv of the first stage-1 block leaves the
  // skip branch narrower than the add target
  try {
    expand(spec, {8}, 2.0);
    FAIL("expected a structure error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::structure);
    CHECK(std::string(e.what()).find("stage1") != std::string::npos);
  }

  // widening the whole stage group keeps every add consistent
  const LayerGroup* stage1 = nullptr;
  for (const LayerGroup& g : spec.groups)
    if (g.name == "stage1") stage1 = &g;
  REQUIRE(stage1 != nullptr);
  ModelSpec wide = expand(spec, stage1->layers, 2.0);
  validate_model(wide);
  Network check(wide);  // add shapes still line up
  CHECK(wide.layers[3].out == 10);
}

TEST_CASE("uniform widening hits the closest reachable parameter count") {
  ModelSpec spec = zoo("convnet-toy");
  PrunedArch plain{spec, std::vector<std::vector<int>>(spec.layers.size())};
  long long base = count_exact(plain).params;

  WidenResult id = widen_uniform(spec, base);
  CHECK(id.factor == 1.0);
  CHECK(model_to_json(id.spec) == model_to_json(spec));

  // target: one layer doubled
  ModelSpec doubled = expand(spec, {7}, 2.0);
  PrunedArch darch{doubled, std::vector<std::vector<int>>(doubled.layers.size())};
  long long target = count_exact(darch).params;

  WidenResult wr = widen_uniform(spec, target);
  CHECK(wr.factor > 1.0);
  CHECK(wr.factor < 2.0);
  PrunedArch warch{wr.spec, std::vector<std::vector<int>>(wr.spec.layers.size())};
  long long achieved = count_exact(warch).params;

  // exhaustive scan over reachable width vectors: nothing lands closer
  std::vector<int> prunable;
  Network net(spec);
  for (const LayerSpan& s : segment(spec, net.layout()).prunable) prunable.push_back(s.layer);
  long long best_gap = std::llabs(achieved - target);
  for (double f = 1.0; f <= 3.0; f += 0.001) {
    ModelSpec cand = f == 1.0 ? spec : expand(spec, prunable, f);
    PrunedArch carch{cand, std::vector<std::vector<int>>(cand.layers.size())};
    long long gap = std::llabs(count_exact(carch).params - target);
    CHECK(gap >= best_gap);
  }

  // larger targets never shrink the factor
  double prev = 1.0;
  for (long long t : {base, base + 500, base * 2, base * 3, base * 5}) {
    WidenResult r = widen_uniform(spec, t);
    CHECK(r.factor >= prev);
    prev = r.factor;
  }
}

TEST_CASE("pruned architectures serialize losslessly") {
  Rig rig(zoo("restoy"));
  Rng rng(13);
  PruningMask m = mask_of(rig.seg, random_mask_ids(rig.seg, rng));
  ApplyResult res = apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, m);
  std::string j = arch_to_json(res.arch);
  PrunedArch back = arch_from_json(j);
  CHECK(arch_to_json(back) == j);
  CHECK(back.survivors == res.arch.survivors);
  CHECK(model_to_json(back.spec) == model_to_json(res.arch.spec));
}

TEST_CASE("masks that empty a layer or repeat entries are rejected") {
  Rig rig(zoo("mlp-toy"));
  const LayerSpan* span = rig.seg.span_of_layer(rig.seg.prunable[0].layer);

  std::vector<int> whole;
  for (int i = 0; i < span->count; ++i) whole.push_back(span->first + i);
  try {
    apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, mask_of(rig.seg, whole));
    FAIL("expected a structure error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::structure);
    CHECK(std::string(e.what()).find("every channel") != std::string::npos);
  }

  CHECK_THROWS_AS(
      apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg, mask_of(rig.seg, {1, 1})),
      Error);
  CHECK_THROWS_AS(apply_mask(rig.spec, rig.net.layout(), rig.params, rig.seg,
                             mask_of(rig.seg, {rig.seg.size()})),
                  Error);
}
