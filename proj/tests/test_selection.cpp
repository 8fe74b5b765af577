#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "sosp/params.hpp"
#include "sosp/selection.hpp"
#include "test_util.hpp"

using namespace sosp;
using namespace testutil;

namespace {

struct Rig {
  ModelSpec spec;
  Network net;
  Segmentation seg;
  explicit Rig(ModelSpec s) : spec(std::move(s)), net(spec), seg(segment(spec, net.layout())) {}
};

Rig mlp_rig(const std::vector<int>& hidden) {
  return Rig(mlp_spec(4, hidden, 2, true));
}

SaliencyVector hand_saliency(const std::vector<double>& totals) {
  SaliencyVector v;
  v.method = "sosp_h";
  for (std::size_t i = 0; i < totals.size(); ++i) {
    SaliencyEntry e;
    e.structure = int(i);
    e.first_order = totals[i];
    e.total = totals[i];
    v.entries.push_back(e);
  }
  return v;
}

QMatrix hand_q(int s, const std::vector<double>& row_major) {
  QMatrix q;
  q.size = s;
  q.q = row_major;
  return q;
}

std::vector<int> mask_ids(const PruningMask& m) {
  std::vector<int> ids;
  for (const MaskEntry& e : m.entries) ids.push_back(e.structure);
  return ids;
}

QMatrix random_q(int s, Rng& rng) {
  QMatrix q;
  q.size = s;
  q.q.assign(std::size_t(s) * s, 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j <= i; ++j) {
      double v = rng.uniform();
      q.at(i, j) = q.at(j, i) = v;
    }
  return q;
}

// literal greedy: each step rescores every remaining candidate by the full
// set objective sum_a Q_aa + 2 sum_{a<b} Q_ab, honoring per-layer caps
PruningMask literal_greedy(const QMatrix& q, const Segmentation& seg,
                           const SelectionPolicy& policy) {
  const int s = q.size;
  long long m = std::llround(policy.ratio * s);
  std::vector<int> layer_of(s), span_of(s);
  std::vector<int> limit(seg.prunable.size()), used(seg.prunable.size(), 0);
  for (std::size_t k = 0; k < seg.prunable.size(); ++k) {
    const LayerSpan& sp = seg.prunable[k];
    for (int i = sp.first; i < sp.first + sp.count; ++i) {
      layer_of[i] = sp.layer;
      span_of[i] = int(k);
    }
    limit[k] = policy.layer_cap ? int(std::floor(*policy.layer_cap * sp.count + 1e-12))
                                : sp.count;
  }

  auto set_cost = [&](const std::vector<int>& members) {
    double c = 0.0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      c += q.at(members[a], members[a]);
      for (std::size_t b = 0; b < a; ++b) c += 2.0 * q.at(members[a], members[b]);
    }
    return c;
  };

  PruningMask mask;
  mask.method = "sosp_i";
  mask.ratio = policy.ratio;
  std::vector<int> members;
  std::vector<char> in(s, 0);
  double current = 0.0;
  while (int(members.size()) < m) {
    int best = -1;
    double best_inc = 0.0;
    for (int c = 0; c < s; ++c) {
      if (in[c] || used[span_of[c]] >= limit[span_of[c]]) continue;
      std::vector<int> trial = members;
      trial.push_back(c);
      double inc = set_cost(trial) - current;
      if (best < 0 || inc < best_inc) {
        best = c;
        best_inc = inc;
      }
    }
    if (best < 0) break;  // every remaining layer is capped
    members.push_back(best);
    in[best] = 1;
    used[span_of[best]] += 1;
    current += best_inc;
    MaskEntry e;
    e.structure = best;
    e.layer = layer_of[best];
    e.score = best_inc;
    mask.entries.push_back(e);
  }
  mask.shortfall = int(m - members.size());
  return mask;
}

}  // namespace

TEST_CASE("smallest saliency wins the single slot") {
  Rig rig = mlp_rig({3});
  SelectionPolicy p;
  p.ratio = 1.0 / 3.0;  // m = 1
  PruningMask m = select_sosp_h(hand_saliency({3, 1, 2}), rig.seg, p);
  REQUIRE(m.entries.size() == 1);
  CHECK(m.entries[0].structure == 1);
  CHECK(m.entries[0].score == 1.0);
  CHECK(m.entries[0].layer == 0);
  CHECK(m.shortfall == 0);
}

TEST_CASE("equal saliencies break ties toward lower ids") {
  Rig rig = mlp_rig({3});
  SelectionPolicy p;
  p.ratio = 2.0 / 3.0;
  PruningMask m = select_sosp_h(hand_saliency({1, 1, 1}), rig.seg, p);
  CHECK(mask_ids(m) == std::vector<int>{0, 1});
}

TEST_CASE("greedy pairwise selection matches the hand-worked two-by-two case") {
  Rig rig = mlp_rig({2});
  SelectionPolicy p;
  p.ratio = 1.0;  // m = 2
  PruningMask m = select_sosp_i(hand_q(2, {1, 5, 5, 2}), rig.seg, p);
  REQUIRE(m.entries.size() == 2);
  CHECK(m.entries[0].structure == 0);
  CHECK(m.entries[0].score == 1.0);
  CHECK(m.entries[1].structure == 1);
  CHECK(m.entries[1].score == 12.0);  // 2 + 2*5 once s0 is in the set
}

TEST_CASE("a diagonal matrix reduces greedy to an ascending sort") {
  Rig rig = mlp_rig({4});
  SelectionPolicy p;
  p.ratio = 0.75;  // m = 3
  QMatrix q = hand_q(4, {0.7, 0, 0, 0,
                         0.1, 0, 0, 0,
                         0, 0, 0, 0,
                         0, 0, 0, 0});
  q.q.assign(16, 0.0);
  q.at(0, 0) = 0.7;
  q.at(1, 1) = 0.1;
  q.at(2, 2) = 0.4;
  q.at(3, 3) = 0.2;
  PruningMask m = select_sosp_i(q, rig.seg, p);
  CHECK(mask_ids(m) == std::vector<int>{1, 3, 2});
  CHECK(mask_ids(select_sosp_i_diag(q, rig.seg, p)) == mask_ids(m));
}

TEST_CASE("off-diagonal mass steers greedy away from the diagonal ranking") {
  Rig rig = mlp_rig({3});
  SelectionPolicy p;
  p.ratio = 2.0 / 3.0;  // m = 2
  QMatrix q = hand_q(3, {1.0, 5.0, 0.0,
                         5.0, 2.0, 0.0,
                         0.0, 0.0, 2.1});
  PruningMask greedy = select_sosp_i(q, rig.seg, p);
  PruningMask diag = select_sosp_i_diag(q, rig.seg, p);
  CHECK(mask_ids(greedy) == std::vector<int>{0, 2});  // s1 would cost 2 + 2*5
  CHECK(mask_ids(diag) == std::vector<int>{0, 1});
}

TEST_CASE("incremental greedy equals the literal set-cost recomputation") {
  Rng rng(77);
  for (int inst = 0; inst < 200; ++inst) {
    int s = 3 + int(rng.below(10));  // S in [3, 12]
    Rig rig = mlp_rig({s});
    QMatrix q = random_q(s, rng);
    SelectionPolicy p;
    p.ratio = double(1 + int(rng.below(std::uint64_t(s)))) / double(s);
    if (inst % 3 == 0) p.layer_cap = 0.5 + 0.4 * rng.uniform();

    PruningMask got = select_sosp_i(q, rig.seg, p);
    PruningMask want = literal_greedy(q, rig.seg, p);
    REQUIRE(got.entries.size() == want.entries.size());
    CHECK(got.shortfall == want.shortfall);
    for (std::size_t i = 0; i < got.entries.size(); ++i) {
      CHECK(got.entries[i].structure == want.entries[i].structure);
      CHECK(rel_err(got.entries[i].score, want.entries[i].score) < 1e-10);
    }
  }
}

TEST_CASE("with curvature zeroed every selector emits the same mask") {
  Rng rng(79);
  for (int inst = 0; inst < 50; ++inst) {
    int s = 4 + int(rng.below(8));
    Rig rig = mlp_rig({s});
    std::vector<double> fo(s);
    for (double& v : fo) v = rng.uniform();

    SaliencyVector sal = hand_saliency(fo);
    QMatrix q;
    q.size = s;
    q.q.assign(std::size_t(s) * s, 0.0);
    for (int i = 0; i < s; ++i) q.at(i, i) = fo[i];

    SelectionPolicy p;
    p.ratio = double(1 + int(rng.below(std::uint64_t(s)))) / double(s);

    std::vector<int> a = mask_ids(select_first_order(sal, rig.seg, p));
    std::vector<int> b = mask_ids(select_sosp_h(sal, rig.seg, p));
    std::vector<int> c = mask_ids(select_sosp_i(q, rig.seg, p));
    std::vector<int> d = mask_ids(select_sosp_i_diag(q, rig.seg, p));
    CHECK(a == b);
    CHECK(a == c);
    CHECK(a == d);
  }
}

TEST_CASE("zero saliency everywhere degenerates to the id order") {
  Rig rig = mlp_rig({5});
  SelectionPolicy p;
  p.ratio = 0.6;  // m = 3
  PruningMask m = select_first_order(hand_saliency({0, 0, 0, 0, 0}), rig.seg, p);
  CHECK(mask_ids(m) == std::vector<int>{0, 1, 2});
}

TEST_CASE("ratio one selects every structure") {
  Rig rig = mlp_rig({6});
  SelectionPolicy p;
  p.ratio = 1.0;
  p.seed = 5;
  PruningMask m = select_random(rig.seg, p);
  std::vector<int> ids = mask_ids(m);
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("random selection is seed deterministic and unbiased") {
  Rig rig = mlp_rig({8});
  SelectionPolicy p;
  p.ratio = 0.25;  // m = 2 of 8

  p.seed = 11;
  PruningMask a = select_random(rig.seg, p);
  PruningMask b = select_random(rig.seg, p);
  CHECK(mask_ids(a) == mask_ids(b));
  for (const MaskEntry& e : a.entries) CHECK(e.score == 0.0);

  const int trials = 10000;
  std::vector<int> hits(8, 0);
  for (int t = 0; t < trials; ++t) {
    p.seed = std::uint64_t(t);
    for (int id : mask_ids(select_random(rig.seg, p))) hits[id] += 1;
  }
  // inclusion frequency within 3 sigma of the target ratio
  const double want = 0.25;
  const double sigma = std::sqrt(want * (1 - want) / trials);
  for (int id = 0; id < 8; ++id) {
    double freq = double(hits[id]) / trials;
    CHECK(std::fabs(freq - want) <= 3 * sigma);
  }
}

TEST_CASE("layer caps bound per-layer removals and report the shortfall") {
  Rig rig = mlp_rig({4, 2});  // spans of 4 and 2 structures
  SelectionPolicy p;
  p.ratio = 1.0;
  p.layer_cap = 0.5;  // floor(2.0) and floor(1.0)
  PruningMask m = select_sosp_h(hand_saliency({5, 1, 3, 2, 9, 4}), rig.seg, p);

  std::map<int, int> per_layer;
  for (const MaskEntry& e : m.entries) per_layer[e.layer] += 1;
  CHECK(per_layer[rig.seg.prunable[0].layer] == 2);
  CHECK(per_layer[rig.seg.prunable[1].layer] == 1);
  CHECK(m.shortfall == 3);

  // the capped picks are still the smallest eligible saliencies
  std::vector<int> ids = mask_ids(m);
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<int>{1, 3, 5});
}

TEST_CASE("fractional caps round down to whole structures") {
  Rig rig = mlp_rig({4});
  SelectionPolicy p;
  p.ratio = 1.0;
  p.layer_cap = 0.74;  // floor(2.96) = 2
  PruningMask m = select_sosp_h(hand_saliency({4, 3, 2, 1}), rig.seg, p);
  CHECK(m.entries.size() == 2);
  CHECK(m.shortfall == 2);
}

TEST_CASE("kernel scaling normalizes scores by linear kernel size") {
  // conv channels carry 3x3 kernels, dense units count as size 1
  ModelSpec spec;
  spec.name = "mixed";
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 4;
  spec.output_dim = 2;
  LayerSpec c;
  c.type = LayerType::conv;
  c.in = 2;
  c.out = 2;
  c.kh = c.kw = 3;
  c.pad = 1;
  spec.layers.push_back(c);
  spec.layers.push_back(relu_layer());
  LayerSpec gp;
  gp.type = LayerType::avgpool;
  gp.kh = gp.kw = 4;
  gp.stride = 4;
  spec.layers.push_back(gp);
  spec.layers.push_back(dense_layer(2, 3, true));
  spec.layers.push_back(relu_layer());
  spec.layers.push_back(dense_layer(3, 2, true));
  validate_model(spec);
  Network net(spec);
  Segmentation seg = segment(spec, net.layout());
  REQUIRE(seg.size() == 5);
  CHECK(seg.structures[0].kernel_linear == 3);
  CHECK(seg.structures[2].kernel_linear == 1);

  SaliencyVector sal = hand_saliency({2.4, 30.0, 1.0, 50.0, 60.0});
  SelectionPolicy p;
  p.ratio = 0.4;  // m = 2

  PruningMask plain = select_sosp_h(sal, seg, p);
  CHECK(mask_ids(plain) == std::vector<int>{2, 0});  // raw scores 1.0 < 2.4

  p.kernel_scaling = true;
  PruningMask scaled = select_sosp_h(sal, seg, p);
  CHECK(mask_ids(scaled) == std::vector<int>{0, 2});  // 2.4/3 = 0.8 < 1.0
  CHECK(scaled.entries[0].score == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(scaled.entries[1].score == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("within-layer shuffling keeps per-layer counts") {
  Rig rig = mlp_rig({6, 4});
  Rng rng(91);
  for (int trial = 0; trial < 50; ++trial) {
    SelectionPolicy p;
    p.ratio = 0.5;
    p.seed = rng.next_u64();
    PruningMask m = select_random(rig.seg, p);
    PruningMask sh = shuffle_within_layers(m, rig.seg, rng.next_u64());

    CHECK(sh.method == "shuffle");
    CHECK(sh.ratio == m.ratio);
    std::map<int, int> before, after;
    for (const MaskEntry& e : m.entries) before[e.layer] += 1;
    for (const MaskEntry& e : sh.entries) after[e.layer] += 1;
    CHECK(before == after);

    std::set<int> ids;
    for (const MaskEntry& e : sh.entries) ids.insert(e.structure);
    CHECK(ids.size() == sh.entries.size());
  }
}

TEST_CASE("shuffling a fully pruned layer changes nothing") {
  Rig rig = mlp_rig({3});
  PruningMask m;
  m.method = "sosp_h";
  m.ratio = 1.0;
  for (int i = 0; i < 3; ++i) {
    MaskEntry e;
    e.structure = i;
    e.layer = 0;
    m.entries.push_back(e);
  }
  PruningMask sh = shuffle_within_layers(m, rig.seg, 123);
  std::vector<int> ids = mask_ids(sh);
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<int>{0, 1, 2});
}

TEST_CASE("shuffling draws two-of-four subsets uniformly") {
  Rig rig = mlp_rig({4});
  PruningMask m;
  m.method = "sosp_h";
  m.ratio = 0.5;
  for (int i : {0, 1}) {
    MaskEntry e;
    e.structure = i;
    e.layer = 0;
    m.entries.push_back(e);
  }

  std::map<std::vector<int>, int> counts;
  const int trials = 6000;
  for (int t = 0; t < trials; ++t) {
    std::vector<int> ids = mask_ids(shuffle_within_layers(m, rig.seg, std::uint64_t(t)));
    std::sort(ids.begin(), ids.end());
    counts[ids] += 1;
  }
  CHECK(counts.size() == 6);  // all 2-subsets of 4 appear
  const double want = trials / 6.0;
  const double sigma = std::sqrt(trials * (1.0 / 6) * (5.0 / 6));
  for (const auto& [ids, n] : counts) CHECK(std::fabs(n - want) <= 3 * sigma);
}

TEST_CASE("mask serialization is stable and lossless") {
  Rig rig = mlp_rig({5});
  SelectionPolicy p;
  p.ratio = 0.6;
  p.seed = 17;
  PruningMask m = select_random(rig.seg, p);
  m.method = "random";

  std::string j1 = mask_to_json(m);
  PruningMask back = mask_from_json(j1);
  CHECK(mask_to_json(back) == j1);
  CHECK(back.method == m.method);
  CHECK(back.ratio == m.ratio);
  CHECK(back.seed == m.seed);
  CHECK(back.shortfall == m.shortfall);
  CHECK(mask_ids(back) == mask_ids(m));

  save_mask(m, "mask-roundtrip.json");
  PruningMask loaded = load_mask("mask-roundtrip.json");
  CHECK(mask_to_json(loaded) == j1);
  std::remove("mask-roundtrip.json");
}

TEST_CASE("selection rejects malformed inputs") {
  Rig rig = mlp_rig({3});
  SelectionPolicy p;
  p.ratio = 1.2;
  CHECK_THROWS_AS(select_sosp_h(hand_saliency({1, 2, 3}), rig.seg, p), Error);
  p.ratio = -0.1;
  CHECK_THROWS_AS(select_random(rig.seg, p), Error);
  p.ratio = 0.5;
  CHECK_THROWS_AS(select_sosp_h(hand_saliency({1, 2}), rig.seg, p), Error);
  CHECK_THROWS_AS(select_sosp_i(hand_q(2, {1, 0, 0, 1}), rig.seg, p), Error);
}
