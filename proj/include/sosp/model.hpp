#pragma once

#include <string>
#include <vector>

#include "sosp/errors.hpp"

namespace sosp {

enum class LayerType { dense, conv, relu, avgpool, batchnorm };

// producer sentinel values for LayerSpec::input
constexpr int kInputNode = -1;  // the model input
constexpr int kPrevLayer = -2;  // the preceding layer (default)

struct LayerSpec {
  LayerType type = LayerType::dense;
  int in = 0;    // dense: input features, conv/batchnorm: input channels
  int out = 0;   // dense: output features, conv: output channels
  int kh = 0;    // conv kernel height; avgpool window
  int kw = 0;    // conv kernel width
  int stride = 1;
  int pad = 0;
  bool bias = false;
  int input = kPrevLayer;
  bool trainable = true;
  bool downsample_path = false;  // lives on a residual projection path
};

enum class ResidualKind { identity_skip, downsample };

struct ResidualSpec {
  int source = 0;  // layer whose output feeds the skip branch
  int target = 0;  // layer whose output receives the add
  ResidualKind kind = ResidualKind::identity_skip;
  std::vector<int> path;  // downsample branch layer ids (projection conv [+ batchnorm])
};

// Aggregation unit for bottleneck detection / expansion.  Chain models get
// one group per prunable layer; residual models group whole stages so that
// expansion keeps skip connections shape-compatible.
struct LayerGroup {
  std::string name;
  std::vector<int> layers;
};

struct ModelSpec {
  std::string name;
  int in_channels = 0;
  int in_height = 1;
  int in_width = 1;
  int output_dim = 0;
  std::vector<LayerSpec> layers;
  std::vector<ResidualSpec> residuals;
  std::vector<LayerGroup> groups;

  int input_size() const { return in_channels * in_height * in_width; }
};

const char* type_name(LayerType t);

// Structural validation: topology, one final dense classifier, residual
// references in range.  Throws Error on violation.
void validate_model(const ModelSpec& spec);

std::string model_to_json(const ModelSpec& spec);
ModelSpec model_from_json(const std::string& text);
ModelSpec load_model(const std::string& path);
void save_model(const ModelSpec& spec, const std::string& path);

// ---------------------------------------------------------------- model zoo

struct ZooOptions {
  bool batchnorm = true;        // conv models only
  bool bias = true;             // dense-layer biases (conv layers have none)
  std::vector<int> channels;    // width override, meaning depends on family
  int in_channels = 3;
  int in_height = 8;
  int in_width = 8;
};

// d -> 64 -> 64 -> D dense net with ReLU
ModelSpec make_mlp_toy(int in_features, int classes, const ZooOptions& opts = {});
// VGG-style 6-conv net, default widths {4,4,8,8,16,16}
ModelSpec make_convnet_toy(int classes, const ZooOptions& opts = {});
// 3 residual stages (one downsample block each, stages 1-2 add an
// identity-skip block), widths {4,5,6,8}: stem then per-stage
ModelSpec make_restoy(int classes, const ZooOptions& opts = {});
// timing family: d -> 64*width_mult -> D, one prunable hidden layer
ModelSpec make_wide_mlp(int in_features, int classes, int width_mult,
                        const ZooOptions& opts = {});
// name-based lookup: mlp-toy, convnet-toy, convnet-toy-bottleneck, restoy,
// wide-mlp
ModelSpec make_model(const std::string& name, int in_features, int classes,
                     const ZooOptions& opts = {});

}  // namespace sosp
