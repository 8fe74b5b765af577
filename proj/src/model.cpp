#include "sosp/model.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace sosp {

const char* type_name(LayerType t) {
  switch (t) {
    case LayerType::dense: return "dense";
    case LayerType::conv: return "conv";
    case LayerType::relu: return "relu";
    case LayerType::avgpool: return "avgpool";
    case LayerType::batchnorm: return "batchnorm";
  }
  return "?";
}

namespace {

using Json = nlohmann::ordered_json;

LayerType type_from_name(const std::string& s) {
  if (s == "dense") return LayerType::dense;
  if (s == "conv") return LayerType::conv;
  if (s == "relu") return LayerType::relu;
  if (s == "avgpool") return LayerType::avgpool;
  if (s == "batchnorm") return LayerType::batchnorm;
  fail(ErrorCategory::config, "unknown layer type: " + s);
}

}  // namespace

void validate_model(const ModelSpec& spec) {
  require(!spec.layers.empty(), ErrorCategory::config, "model has no layers");
  require(spec.in_channels > 0 && spec.in_height > 0 && spec.in_width > 0,
          ErrorCategory::config, "model input dims must be positive");
  require(spec.output_dim > 0, ErrorCategory::config, "model output_dim must be positive");

  const int n = static_cast<int>(spec.layers.size());
  for (int i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    bool ok_input = l.input == kInputNode || l.input == kPrevLayer ||
                    (l.input >= 0 && l.input < i);
    require(ok_input, ErrorCategory::config,
            "layer " + std::to_string(i) + " references a non-earlier producer");
    switch (l.type) {
      case LayerType::dense:
        require(l.in > 0 && l.out > 0, ErrorCategory::config,
                "dense layer " + std::to_string(i) + " needs in/out");
        break;
      case LayerType::conv:
        require(l.in > 0 && l.out > 0 && l.kh > 0 && l.kw > 0 && l.stride > 0 && l.pad >= 0,
                ErrorCategory::config, "conv layer " + std::to_string(i) + " malformed");
        break;
      case LayerType::avgpool:
        require(l.kh > 0 && l.stride > 0, ErrorCategory::config,
                "avgpool layer " + std::to_string(i) + " needs window/stride");
        break;
      case LayerType::batchnorm:
        require(l.in > 0, ErrorCategory::config,
                "batchnorm layer " + std::to_string(i) + " needs channel count");
        break;
      case LayerType::relu:
        break;
    }
  }

  const LayerSpec& last = spec.layers.back();
  require(last.type == LayerType::dense && last.out == spec.output_dim,
          ErrorCategory::config, "model must end in one dense classifier of output_dim units");
  for (int i = 0; i + 1 < n; ++i) {
    require(!(spec.layers[i].type == LayerType::dense && spec.layers[i].out == spec.output_dim &&
              spec.layers[i].downsample_path),
            ErrorCategory::config, "classifier layers cannot sit on a downsample path");
  }

  std::set<int> path_layers;
  for (const ResidualSpec& r : spec.residuals) {
    require(r.source >= 0 && r.source < n && r.target >= 0 && r.target < n &&
                r.source < r.target,
            ErrorCategory::config, "residual must point from an earlier source to a later target");
    if (r.kind == ResidualKind::downsample) {
      require(!r.path.empty(), ErrorCategory::config,
              "downsample residual needs projection-path layer ids");
      for (int id : r.path) {
        require(id >= 0 && id < n, ErrorCategory::config, "residual path id out of range");
        require(id < r.target, ErrorCategory::config,
                "residual path layer " + std::to_string(id) +
                    " must precede its add target so the branch is computed first");
        require(spec.layers[id].downsample_path, ErrorCategory::config,
                "residual path layer " + std::to_string(id) + " must be flagged downsample_path");
        path_layers.insert(id);
      }
    } else {
      require(r.path.empty(), ErrorCategory::config, "identity skip cannot carry a path");
    }
  }
  for (int i = 0; i < n; ++i) {
    if (spec.layers[i].downsample_path)
      require(path_layers.count(i) > 0, ErrorCategory::config,
              "downsample_path layer " + std::to_string(i) + " not referenced by any residual");
  }
  for (const LayerGroup& g : spec.groups) {
    for (int id : g.layers)
      require(id >= 0 && id < n, ErrorCategory::config, "group layer id out of range");
  }
}

std::string model_to_json(const ModelSpec& spec) {
  Json j;
  j["name"] = spec.name;
  j["input"] = {{"channels", spec.in_channels},
                {"height", spec.in_height},
                {"width", spec.in_width}};
  j["output_dim"] = spec.output_dim;
  j["layers"] = Json::array();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    Json jl;
    jl["id"] = i;
    jl["type"] = type_name(l.type);
    switch (l.type) {
      case LayerType::dense:
        jl["in"] = l.in;
        jl["out"] = l.out;
        jl["bias"] = l.bias;
        break;
      case LayerType::conv:
        jl["in"] = l.in;
        jl["out"] = l.out;
        jl["kh"] = l.kh;
        jl["kw"] = l.kw;
        jl["stride"] = l.stride;
        jl["pad"] = l.pad;
        jl["bias"] = l.bias;
        break;
      case LayerType::avgpool:
        jl["kernel"] = l.kh;
        jl["stride"] = l.stride;
        break;
      case LayerType::batchnorm:
        jl["channels"] = l.in;
        break;
      case LayerType::relu:
        break;
    }
    if (l.input != kPrevLayer) jl["from"] = l.input;
    if (!l.trainable) jl["trainable"] = false;
    if (l.downsample_path) jl["downsample_path"] = true;
    j["layers"].push_back(jl);
  }
  j["residuals"] = Json::array();
  for (const ResidualSpec& r : spec.residuals) {
    Json jr;
    jr["source"] = r.source;
    jr["target"] = r.target;
    jr["kind"] = r.kind == ResidualKind::identity_skip ? "identity_skip" : "downsample";
    if (!r.path.empty()) jr["path"] = r.path;
    j["residuals"].push_back(jr);
  }
  j["groups"] = Json::array();
  for (const LayerGroup& g : spec.groups) {
    j["groups"].push_back(Json{{"name", g.name}, {"layers", g.layers}});
  }
  return j.dump(2);
}

ModelSpec model_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorCategory::io, std::string("model JSON parse failure: ") + e.what());
  }
  ModelSpec spec;
  try {
    spec.name = j.value("name", "");
    spec.in_channels = j.at("input").at("channels").get<int>();
    spec.in_height = j.at("input").value("height", 1);
    spec.in_width = j.at("input").value("width", 1);
    spec.output_dim = j.at("output_dim").get<int>();
    for (const Json& jl : j.at("layers")) {
      LayerSpec l;
      l.type = type_from_name(jl.at("type").get<std::string>());
      switch (l.type) {
        case LayerType::dense:
          l.in = jl.at("in").get<int>();
          l.out = jl.at("out").get<int>();
          l.bias = jl.value("bias", false);
          break;
        case LayerType::conv:
          l.in = jl.at("in").get<int>();
          l.out = jl.at("out").get<int>();
          l.kh = jl.at("kh").get<int>();
          l.kw = jl.at("kw").get<int>();
          l.stride = jl.value("stride", 1);
          l.pad = jl.value("pad", 0);
          l.bias = jl.value("bias", false);
          break;
        case LayerType::avgpool:
          l.kh = jl.at("kernel").get<int>();
          l.kw = l.kh;
          l.stride = jl.value("stride", l.kh);
          break;
        case LayerType::batchnorm:
          l.in = jl.at("channels").get<int>();
          l.out = l.in;
          break;
        case LayerType::relu:
          break;
      }
      l.input = jl.value("from", kPrevLayer);
      l.trainable = jl.value("trainable", true);
      l.downsample_path = jl.value("downsample_path", false);
      spec.layers.push_back(l);
    }
    for (const Json& jr : j.value("residuals", Json::array())) {
      ResidualSpec r;
      r.source = jr.at("source").get<int>();
      r.target = jr.at("target").get<int>();
      std::string k = jr.at("kind").get<std::string>();
      require(k == "identity_skip" || k == "downsample", ErrorCategory::config,
              "unknown residual kind: " + k);
      r.kind = k == "downsample" ? ResidualKind::downsample : ResidualKind::identity_skip;
      if (jr.contains("path")) r.path = jr.at("path").get<std::vector<int>>();
      spec.residuals.push_back(r);
    }
    for (const Json& jg : j.value("groups", Json::array())) {
      spec.groups.push_back({jg.at("name").get<std::string>(),
                             jg.at("layers").get<std::vector<int>>()});
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCategory::io, std::string("model JSON missing field: ") + e.what());
  }
  validate_model(spec);
  return spec;
}

ModelSpec load_model(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

void save_model(const ModelSpec& spec, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot write model file: " + path);
  out << model_to_json(spec) << "\n";
}

// ---------------------------------------------------------------- model zoo

ModelSpec make_mlp_toy(int in_features, int classes, const ZooOptions& opts) {
  require(in_features > 0 && classes > 0, ErrorCategory::config, "mlp-toy needs dims");
  std::vector<int> widths = opts.channels.empty() ? std::vector<int>{64, 64} : opts.channels;
  ModelSpec spec;
  spec.name = "mlp-toy";
  spec.in_channels = in_features;
  spec.in_height = spec.in_width = 1;
  spec.output_dim = classes;
  int prev = in_features;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    LayerSpec d;
    d.type = LayerType::dense;
    d.in = prev;
    d.out = widths[i];
    d.bias = opts.bias;
    spec.layers.push_back(d);
    spec.groups.push_back({"dense" + std::to_string(i + 1),
                           {static_cast<int>(spec.layers.size()) - 1}});
    spec.layers.push_back({LayerType::relu});
    prev = widths[i];
  }
  LayerSpec head;
  head.type = LayerType::dense;
  head.in = prev;
  head.out = classes;
  head.bias = opts.bias;
  spec.layers.push_back(head);
  validate_model(spec);
  return spec;
}

namespace {

// conv -> [bn] -> relu; returns id of the conv layer
int push_conv_block(ModelSpec& spec, int in_c, int out_c, int k, int stride, int pad,
                    bool bn, int from = kPrevLayer) {
  LayerSpec c;
  c.type = LayerType::conv;
  c.in = in_c;
  c.out = out_c;
  c.kh = c.kw = k;
  c.stride = stride;
  c.pad = pad;
  c.bias = false;
  c.input = from;
  spec.layers.push_back(c);
  int conv_id = static_cast<int>(spec.layers.size()) - 1;
  if (bn) {
    LayerSpec b;
    b.type = LayerType::batchnorm;
    b.in = b.out = out_c;
    spec.layers.push_back(b);
  }
  spec.layers.push_back({LayerType::relu});
  return conv_id;
}

}  // namespace

ModelSpec make_convnet_toy(int classes, const ZooOptions& opts) {
  std::vector<int> c = opts.channels.empty() ? std::vector<int>{4, 4, 8, 8, 16, 16}
                                             : opts.channels;
  require(c.size() == 6, ErrorCategory::config, "convnet-toy takes 6 channel counts");
  require(opts.in_height == opts.in_width && opts.in_height % 4 == 0,
          ErrorCategory::config, "convnet-toy input must be square and divisible by 4");
  ModelSpec spec;
  spec.name = "convnet-toy";
  spec.in_channels = opts.in_channels;
  spec.in_height = opts.in_height;
  spec.in_width = opts.in_width;
  spec.output_dim = classes;

  int prev = opts.in_channels;
  for (int i = 0; i < 6; ++i) {
    int conv_id = push_conv_block(spec, prev, c[i], 3, 1, 1, opts.batchnorm);
    spec.groups.push_back({"conv" + std::to_string(i + 1), {conv_id}});
    prev = c[i];
    if (i == 1 || i == 3) {
      LayerSpec p;
      p.type = LayerType::avgpool;
      p.kh = p.kw = 2;
      p.stride = 2;
      spec.layers.push_back(p);
    }
  }
  LayerSpec gp;
  gp.type = LayerType::avgpool;
  gp.kh = gp.kw = opts.in_height / 4;
  gp.stride = gp.kh;
  spec.layers.push_back(gp);

  LayerSpec head;
  head.type = LayerType::dense;
  head.in = prev;
  head.out = classes;
  head.bias = opts.bias;
  spec.layers.push_back(head);
  validate_model(spec);
  return spec;
}

namespace {

struct BlockIds {
  int conv1 = -1, conv2 = -1, ds = -1, out_relu = -1;
};

// basic residual block: conv-bn-relu-conv-bn (+skip) -relu.  When in_c !=
// out_c or stride > 1 a 1x1 projection (downsample) branch is added.  The
// projection is emitted before the main path so that every layer feeding the
// join carries a smaller id; evaluation in layer order is then always valid.
BlockIds push_basic_block(ModelSpec& spec, int from, int in_c, int out_c, int stride,
                          bool bn) {
  BlockIds ids;
  ResidualSpec r;
  r.source = from;
  if (in_c != out_c || stride != 1) {
    LayerSpec p;
    p.type = LayerType::conv;
    p.in = in_c;
    p.out = out_c;
    p.kh = p.kw = 1;
    p.stride = stride;
    p.pad = 0;
    p.input = from;
    p.downsample_path = true;
    spec.layers.push_back(p);
    ids.ds = static_cast<int>(spec.layers.size()) - 1;
    r.kind = ResidualKind::downsample;
    r.path.push_back(ids.ds);
    if (bn) {
      LayerSpec b{LayerType::batchnorm, out_c, out_c};
      b.downsample_path = true;
      spec.layers.push_back(b);
      r.path.push_back(static_cast<int>(spec.layers.size()) - 1);
    }
  } else {
    r.kind = ResidualKind::identity_skip;
  }

  LayerSpec c1;
  c1.type = LayerType::conv;
  c1.in = in_c;
  c1.out = out_c;
  c1.kh = c1.kw = 3;
  c1.stride = stride;
  c1.pad = 1;
  c1.input = from;
  spec.layers.push_back(c1);
  ids.conv1 = static_cast<int>(spec.layers.size()) - 1;
  if (bn) spec.layers.push_back({LayerType::batchnorm, out_c, out_c});
  spec.layers.push_back({LayerType::relu});

  LayerSpec c2;
  c2.type = LayerType::conv;
  c2.in = out_c;
  c2.out = out_c;
  c2.kh = c2.kw = 3;
  c2.stride = 1;
  c2.pad = 1;
  spec.layers.push_back(c2);
  ids.conv2 = static_cast<int>(spec.layers.size()) - 1;
  if (bn) spec.layers.push_back({LayerType::batchnorm, out_c, out_c});
  int target = static_cast<int>(spec.layers.size()) - 1;
  r.target = target;
  spec.residuals.push_back(r);

  LayerSpec relu_out{LayerType::relu};
  relu_out.input = target;
  spec.layers.push_back(relu_out);
  ids.out_relu = static_cast<int>(spec.layers.size()) - 1;
  return ids;
}

}  // namespace

ModelSpec make_restoy(int classes, const ZooOptions& opts) {
  std::vector<int> w = opts.channels.empty() ? std::vector<int>{4, 5, 6, 8} : opts.channels;
  require(w.size() == 4, ErrorCategory::config, "restoy takes stem + 3 stage widths");
  require(opts.in_height == opts.in_width && opts.in_height % 4 == 0,
          ErrorCategory::config, "restoy input must be square and divisible by 4");
  ModelSpec spec;
  spec.name = "restoy";
  spec.in_channels = opts.in_channels;
  spec.in_height = opts.in_height;
  spec.in_width = opts.in_width;
  spec.output_dim = classes;

  int stem = push_conv_block(spec, opts.in_channels, w[0], 3, 1, 1, opts.batchnorm);
  spec.groups.push_back({"stem", {stem}});
  int from = static_cast<int>(spec.layers.size()) - 1;

  // stage 1: one downsample block (channel projection, stride 1) + identity block
  BlockIds s1a = push_basic_block(spec, from, w[0], w[1], 1, opts.batchnorm);
  BlockIds s1b = push_basic_block(spec, s1a.out_relu, w[1], w[1], 1, opts.batchnorm);
  {
    LayerGroup g{"stage1", {s1a.conv1, s1a.conv2, s1b.conv1, s1b.conv2}};
    if (s1a.ds >= 0) g.layers.push_back(s1a.ds);
    spec.groups.push_back(g);
  }
  // stage 2: downsample block (stride 2) + identity block
  BlockIds s2a = push_basic_block(spec, s1b.out_relu, w[1], w[2], 2, opts.batchnorm);
  BlockIds s2b = push_basic_block(spec, s2a.out_relu, w[2], w[2], 1, opts.batchnorm);
  {
    LayerGroup g{"stage2", {s2a.conv1, s2a.conv2, s2b.conv1, s2b.conv2}};
    if (s2a.ds >= 0) g.layers.push_back(s2a.ds);
    spec.groups.push_back(g);
  }
  // stage 3: downsample block (stride 2)
  BlockIds s3a = push_basic_block(spec, s2b.out_relu, w[2], w[3], 2, opts.batchnorm);
  {
    LayerGroup g{"stage3", {s3a.conv1, s3a.conv2}};
    if (s3a.ds >= 0) g.layers.push_back(s3a.ds);
    spec.groups.push_back(g);
  }

  LayerSpec gp;
  gp.type = LayerType::avgpool;
  gp.kh = gp.kw = opts.in_height / 4;
  gp.stride = gp.kh;
  spec.layers.push_back(gp);

  LayerSpec head;
  head.type = LayerType::dense;
  head.in = w[3];
  head.out = classes;
  head.bias = opts.bias;
  spec.layers.push_back(head);
  validate_model(spec);
  return spec;
}

ModelSpec make_wide_mlp(int in_features, int classes, int width_mult, const ZooOptions& opts) {
  require(width_mult >= 1, ErrorCategory::config, "width multiplier must be >= 1");
  ZooOptions o = opts;
  o.channels = {64 * width_mult};
  ModelSpec spec = make_mlp_toy(in_features, classes, o);
  spec.name = "wide-mlp-x" + std::to_string(width_mult);
  return spec;
}

ModelSpec make_model(const std::string& name, int in_features, int classes,
                     const ZooOptions& opts) {
  if (name == "mlp-toy") return make_mlp_toy(in_features, classes, opts);
  if (name == "convnet-toy") return make_convnet_toy(classes, opts);
  if (name == "convnet-toy-bottleneck") {
    ZooOptions o = opts;
    if (o.channels.empty()) o.channels = {16, 16, 16, 16, 16, 4};
    ModelSpec spec = make_convnet_toy(classes, o);
    spec.name = "convnet-toy-bottleneck";
    return spec;
  }
  if (name == "restoy") return make_restoy(classes, opts);
  if (name.rfind("wide-mlp", 0) == 0) {
    int mult = 1;
    auto x = name.find('x');
    if (x != std::string::npos) mult = std::stoi(name.substr(x + 1));
    return make_wide_mlp(in_features, classes, mult, opts);
  }
  fail(ErrorCategory::config, "unknown model name: " + name);
}

}  // namespace sosp
