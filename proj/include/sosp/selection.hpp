#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sosp/saliency.hpp"

namespace sosp {

struct MaskEntry {
  int structure = 0;
  int layer = 0;
  double score = 0.0;  // selection score at the step the structure was added
};

struct PruningMask {
  std::string method;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  int shortfall = 0;  // structures left unpruned because of layer caps
  std::vector<MaskEntry> entries;
};

struct SelectionPolicy {
  double ratio = 0.0;
  bool kernel_scaling = false;          // divide scores by linear kernel size
  std::optional<double> layer_cap;      // max fraction removable per layer
  std::uint64_t seed = 0;               // random selector only
};

// m = round(ratio * S) structures with the smallest saliency totals
PruningMask select_sosp_h(const SaliencyVector& sal, const Segmentation& seg,
                          const SelectionPolicy& policy);

// same ranking restricted to the first-order terms
PruningMask select_first_order(const SaliencyVector& sal, const Segmentation& seg,
                               const SelectionPolicy& policy);

// greedy set growth: each step adds argmin_s Q_{s,s} + 2 sum_{s' in M} Q_{s,s'},
// maintained with running column sums (O(S) per step)
PruningMask select_sosp_i(const QMatrix& q, const Segmentation& seg,
                          const SelectionPolicy& policy);

// diagonal-only ablation: ranks by Q_{s,s}
PruningMask select_sosp_i_diag(const QMatrix& q, const Segmentation& seg,
                               const SelectionPolicy& policy);

// uniform without replacement
PruningMask select_random(const Segmentation& seg, const SelectionPolicy& policy);

// control baseline: per layer, keep the pruned count but resample which
// structures are pruned uniformly at random
PruningMask shuffle_within_layers(const PruningMask& mask, const Segmentation& seg,
                                  std::uint64_t seed);

std::string mask_to_json(const PruningMask& mask);
PruningMask mask_from_json(const std::string& text);
void save_mask(const PruningMask& mask, const std::string& path);
PruningMask load_mask(const std::string& path);

}  // namespace sosp
