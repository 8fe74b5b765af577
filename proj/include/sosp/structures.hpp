#pragma once

#include <cstddef>
#include <vector>

#include "sosp/network.hpp"

namespace sosp {

struct ParamRun {
  std::size_t offset = 0;
  std::size_t len = 0;
};

// One prunable unit: a conv output channel or a dense hidden unit, owning
// its incoming weight row, its bias, and the scale/shift of the batch-norm
// layer that follows it.
struct Structure {
  int id = 0;
  int layer = 0;
  int channel = 0;
  int bn_layer = -1;
  int kernel_linear = 1;  // linear kernel size (kh); 1 for dense units
  std::vector<ParamRun> runs;
};

struct LayerSpan {
  int layer = 0;
  int first = 0;  // structure id range [first, first + count)
  int count = 0;
};

struct Segmentation {
  std::vector<Structure> structures;
  std::vector<LayerSpan> prunable;  // one per prunable layer, in layer order
  std::size_t owned_params = 0;     // sum of run lengths (disjoint)

  int size() const { return static_cast<int>(structures.size()); }
  const LayerSpan* span_of_layer(int layer) const {
    for (const auto& s : prunable)
      if (s.layer == layer) return &s;
    return nullptr;
  }
};

// Channel structures for every prunable layer: all conv layers and hidden
// dense layers, excluding the final classifier and downsample projection
// paths.  Throws a config error if nothing is prunable.
Segmentation segment(const ModelSpec& spec, const ParamLayout& layout);

// theta_s as (index, value) pairs in flat-parameter space
struct SparseVector {
  std::vector<std::size_t> index;
  std::vector<double> value;
};
SparseVector extract_structure(const Segmentation& seg, int structure,
                               const std::vector<double>& params);

// sum of all theta_s: params with non-owned entries zeroed
std::vector<double> theta_struc(const Segmentation& seg, const std::vector<double>& params);

// dot(theta_s, vec) over the structure's runs
double structure_dot(const Structure& s, const std::vector<double>& params,
                     const std::vector<double>& vec);

// squared norm of theta_s
double structure_sqnorm(const Structure& s, const std::vector<double>& params);

// f_{theta^s}(x): forward with every structure of s's layer zeroed except s,
// under the ReLU gate pattern of the unmodified forward pass.  Defined for
// bias-free ReLU nets without batch norm; equals the Jacobian-vector
// product  d f/d theta * theta_s.  Returns the D outputs.
std::vector<double> masked_forward_single_structure(const Network& net,
                                                    const std::vector<double>& params,
                                                    const std::vector<double>& state,
                                                    const Segmentation& seg, int structure,
                                                    const double* x);

}  // namespace sosp
