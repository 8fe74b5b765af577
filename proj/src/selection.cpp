#include "sosp/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "sosp/errors.hpp"
#include "sosp/rng.hpp"

namespace sosp {

namespace {

using Json = nlohmann::ordered_json;

int target_count(double ratio, int total) {
  require(ratio >= 0.0 && ratio <= 1.0, ErrorCategory::config,
          "pruning ratio must lie in [0, 1]");
  return int(std::llround(ratio * total));
}

// per-layer removal limits; no cap means the whole layer is removable
std::vector<int> cap_limits(const Segmentation& seg, const SelectionPolicy& policy) {
  std::vector<int> lim(seg.prunable.size());
  for (std::size_t i = 0; i < seg.prunable.size(); ++i) {
    const int c = seg.prunable[i].count;
    lim[i] = policy.layer_cap ? int(std::floor(*policy.layer_cap * c + 1e-12)) : c;
  }
  return lim;
}

// structure id -> index into seg.prunable (spans cover contiguous id ranges)
std::vector<int> span_index(const Segmentation& seg) {
  std::vector<int> idx(seg.size(), 0);
  for (std::size_t i = 0; i < seg.prunable.size(); ++i) {
    const LayerSpan& sp = seg.prunable[i];
    for (int s = sp.first; s < sp.first + sp.count; ++s) idx[s] = int(i);
  }
  return idx;
}

// ascending score, ties to the lower structure id, layer caps enforced in
// rank order; entries land in selection order
PruningMask rank_and_take(const char* method, std::vector<double> score,
                          const Segmentation& seg, const SelectionPolicy& policy) {
  const int S = seg.size();
  require(int(score.size()) == S, ErrorCategory::input,
          "score vector does not match the segmentation");
  if (policy.kernel_scaling)
    for (int s = 0; s < S; ++s) score[s] /= seg.structures[s].kernel_linear;

  std::vector<int> order(S);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (score[a] != score[b]) return score[a] < score[b];
    return a < b;
  });

  const int m = target_count(policy.ratio, S);
  const std::vector<int> lim = cap_limits(seg, policy);
  const std::vector<int> sidx = span_index(seg);
  std::vector<int> taken(seg.prunable.size(), 0);

  PruningMask mask;
  mask.method = method;
  mask.ratio = policy.ratio;
  mask.seed = policy.seed;
  for (int s : order) {
    if (int(mask.entries.size()) >= m) break;
    const int li = sidx[s];
    if (taken[li] >= lim[li]) continue;
    ++taken[li];
    mask.entries.push_back({s, seg.structures[s].layer, score[s]});
  }
  mask.shortfall = m - int(mask.entries.size());
  return mask;
}

std::vector<double> totals_by_structure(const SaliencyVector& sal, const Segmentation& seg,
                                        bool first_order_only) {
  require(int(sal.entries.size()) == seg.size(), ErrorCategory::input,
          "saliency vector does not match the segmentation");
  std::vector<double> score(seg.size(), 0.0);
  std::vector<char> seen(seg.size(), 0);
  for (const SaliencyEntry& e : sal.entries) {
    require(e.structure >= 0 && e.structure < seg.size(), ErrorCategory::structure,
            "saliency entry names an unknown structure");
    require(!seen[e.structure], ErrorCategory::input,
            "saliency entry repeats a structure");
    seen[e.structure] = 1;
    score[e.structure] = first_order_only ? e.first_order : e.total;
  }
  return score;
}

}  // namespace

PruningMask select_sosp_h(const SaliencyVector& sal, const Segmentation& seg,
                          const SelectionPolicy& policy) {
  return rank_and_take("sosp_h", totals_by_structure(sal, seg, false), seg, policy);
}

PruningMask select_first_order(const SaliencyVector& sal, const Segmentation& seg,
                               const SelectionPolicy& policy) {
  return rank_and_take("first_order", totals_by_structure(sal, seg, true), seg, policy);
}

PruningMask select_sosp_i(const QMatrix& q, const Segmentation& seg,
                          const SelectionPolicy& policy) {
  const int S = seg.size();
  require(q.size == S, ErrorCategory::input, "q matrix does not match the segmentation");
  const int m = target_count(policy.ratio, S);
  const std::vector<int> lim = cap_limits(seg, policy);
  const std::vector<int> sidx = span_index(seg);
  std::vector<int> taken(seg.prunable.size(), 0);
  std::vector<char> picked(S, 0);
  std::vector<double> col(S, 0.0);  // sum over the chosen set of Q_{s, chosen}
  std::vector<double> kscale(S, 1.0);
  if (policy.kernel_scaling)
    for (int s = 0; s < S; ++s) kscale[s] = 1.0 / seg.structures[s].kernel_linear;

  PruningMask mask;
  mask.method = "sosp_i";
  mask.ratio = policy.ratio;
  mask.seed = policy.seed;
  for (int step = 0; step < m; ++step) {
    int best = -1;
    double best_score = 0.0;
    for (int s = 0; s < S; ++s) {
      if (picked[s] || taken[sidx[s]] >= lim[sidx[s]]) continue;
      const double sc = (q.at(s, s) + 2.0 * col[s]) * kscale[s];
      if (best < 0 || sc < best_score) {
        best = s;
        best_score = sc;
      }
    }
    if (best < 0) break;  // every remaining layer is capped out
    picked[best] = 1;
    ++taken[sidx[best]];
    mask.entries.push_back({best, seg.structures[best].layer, best_score});
    for (int s = 0; s < S; ++s) col[s] += q.at(s, best);
  }
  mask.shortfall = m - int(mask.entries.size());
  return mask;
}

PruningMask select_sosp_i_diag(const QMatrix& q, const Segmentation& seg,
                               const SelectionPolicy& policy) {
  require(q.size == seg.size(), ErrorCategory::input,
          "q matrix does not match the segmentation");
  std::vector<double> score(seg.size());
  for (int s = 0; s < seg.size(); ++s) score[s] = q.at(s, s);
  return rank_and_take("sosp_i_diag", std::move(score), seg, policy);
}

PruningMask select_random(const Segmentation& seg, const SelectionPolicy& policy) {
  const int S = seg.size();
  const int m = target_count(policy.ratio, S);
  const std::vector<int> lim = cap_limits(seg, policy);
  const std::vector<int> sidx = span_index(seg);
  std::vector<int> taken(seg.prunable.size(), 0);

  std::vector<int> order(S);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(policy.seed);
  for (int i = 0; i + 1 < S; ++i) {
    const int j = i + int(rng.below(std::uint64_t(S - i)));
    std::swap(order[i], order[j]);
  }

  PruningMask mask;
  mask.method = "random";
  mask.ratio = policy.ratio;
  mask.seed = policy.seed;
  for (int s : order) {
    if (int(mask.entries.size()) >= m) break;
    const int li = sidx[s];
    if (taken[li] >= lim[li]) continue;
    ++taken[li];
    mask.entries.push_back({s, seg.structures[s].layer, 0.0});
  }
  mask.shortfall = m - int(mask.entries.size());
  return mask;
}

PruningMask shuffle_within_layers(const PruningMask& mask, const Segmentation& seg,
                                  std::uint64_t seed) {
  const std::vector<int> sidx = span_index(seg);
  std::vector<int> cnt(seg.prunable.size(), 0);
  std::vector<char> seen(seg.size(), 0);
  for (const MaskEntry& e : mask.entries) {
    require(e.structure >= 0 && e.structure < seg.size(), ErrorCategory::structure,
            "mask names an unknown structure");
    require(!seen[e.structure], ErrorCategory::input, "mask repeats a structure");
    seen[e.structure] = 1;
    ++cnt[sidx[e.structure]];
  }

  PruningMask out;
  out.method = "shuffle";
  out.ratio = mask.ratio;
  out.seed = seed;
  out.shortfall = mask.shortfall;
  Rng rng(seed);
  for (std::size_t i = 0; i < seg.prunable.size(); ++i) {
    const LayerSpan& sp = seg.prunable[i];
    std::vector<int> ids(sp.count);
    std::iota(ids.begin(), ids.end(), sp.first);
    for (int k = 0; k < cnt[i]; ++k) {
      const int j = k + int(rng.below(std::uint64_t(sp.count - k)));
      std::swap(ids[k], ids[j]);
      out.entries.push_back({ids[k], sp.layer, 0.0});
    }
  }
  return out;
}

std::string mask_to_json(const PruningMask& mask) {
  Json j;
  j["method"] = mask.method;
  j["ratio"] = mask.ratio;
  j["seed"] = mask.seed;
  j["shortfall"] = mask.shortfall;
  Json arr = Json::array();
  for (const MaskEntry& e : mask.entries) {
    Json je;
    je["structure"] = e.structure;
    je["layer"] = e.layer;
    je["score"] = e.score;
    arr.push_back(std::move(je));
  }
  j["entries"] = std::move(arr);
  return j.dump(2);
}

PruningMask mask_from_json(const std::string& text) {
  PruningMask mask;
  try {
    Json j = Json::parse(text);
    mask.method = j.at("method").get<std::string>();
    mask.ratio = j.at("ratio").get<double>();
    mask.seed = j.at("seed").get<std::uint64_t>();
    mask.shortfall = j.at("shortfall").get<int>();
    for (const Json& je : j.at("entries")) {
      MaskEntry e;
      e.structure = je.at("structure").get<int>();
      e.layer = je.at("layer").get<int>();
      e.score = je.at("score").get<double>();
      mask.entries.push_back(e);
    }
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::io, std::string("malformed mask json: ") + ex.what());
  }
  return mask;
}

void save_mask(const PruningMask& mask, const std::string& path) {
  std::ofstream out(path);
  require(bool(out), ErrorCategory::io, "cannot open for write: " + path);
  out << mask_to_json(mask) << '\n';
  require(bool(out), ErrorCategory::io, "write failed: " + path);
}

PruningMask load_mask(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), ErrorCategory::io, "cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return mask_from_json(ss.str());
}

}  // namespace sosp
