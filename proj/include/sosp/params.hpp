#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sosp/model.hpp"

namespace sosp {

// Flat parameter vector layout.  Per layer, weights precede the optional
// bias; batch-norm layers store gamma then beta.  Batch-norm running
// statistics are not parameters; they live in a separate state vector
// (running mean then running variance per layer).
struct LayerParamInfo {
  std::size_t offset = 0;
  std::size_t count = 0;        // total params of this layer
  std::size_t weight_count = 0; // bias (if any) sits at offset + weight_count
  std::size_t state_offset = 0;
  std::size_t state_count = 0;
};

struct ParamLayout {
  std::vector<LayerParamInfo> layer;  // indexed by layer id
  std::size_t total = 0;              // P
  std::size_t state_total = 0;
};

ParamLayout build_layout(const ModelSpec& spec);

// He-normal weights for layers feeding ReLUs, zero biases, unit gamma /
// zero beta, running stats (0, 1).  Deterministic in (spec, seed).
void init_params(const ModelSpec& spec, const ParamLayout& layout,
                 std::uint64_t seed, std::vector<double>& params,
                 std::vector<double>& state);

struct Checkpoint {
  std::vector<double> params;
  std::vector<double> state;
};

// Binary container: magic, version, P, per-layer records, then the flat
// parameter vector and the state vector as little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const ModelSpec& spec,
                     const ParamLayout& layout, const std::vector<double>& params,
                     const std::vector<double>& state);
Checkpoint load_checkpoint(const std::string& path, const ParamLayout& layout);

}  // namespace sosp
