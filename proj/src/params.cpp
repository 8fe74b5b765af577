#include "sosp/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "sosp/rng.hpp"

namespace sosp {

ParamLayout build_layout(const ModelSpec& spec) {
  ParamLayout layout;
  layout.layer.resize(spec.layers.size());
  std::size_t off = 0, soff = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParamInfo& info = layout.layer[i];
    info.offset = off;
    info.state_offset = soff;
    switch (l.type) {
      case LayerType::dense:
        info.weight_count = std::size_t(l.out) * l.in;
        info.count = info.weight_count + (l.bias ? l.out : 0);
        break;
      case LayerType::conv:
        info.weight_count = std::size_t(l.out) * l.in * l.kh * l.kw;
        info.count = info.weight_count + (l.bias ? l.out : 0);
        break;
      case LayerType::batchnorm:
        info.weight_count = std::size_t(l.in);  // gamma; beta follows
        info.count = 2 * std::size_t(l.in);
        info.state_count = 2 * std::size_t(l.in);  // running mean, running var
        break;
      case LayerType::relu:
      case LayerType::avgpool:
        break;
    }
    off += info.count;
    soff += info.state_count;
  }
  layout.total = off;
  layout.state_total = soff;
  return layout;
}

void init_params(const ModelSpec& spec, const ParamLayout& layout, std::uint64_t seed,
                 std::vector<double>& params, std::vector<double>& state) {
  params.assign(layout.total, 0.0);
  state.assign(layout.state_total, 0.0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerParamInfo& info = layout.layer[i];
    if (l.type == LayerType::dense || l.type == LayerType::conv) {
      Rng rng(Rng::derive(seed, i));
      std::size_t fan_in = l.type == LayerType::dense ? l.in : std::size_t(l.in) * l.kh * l.kw;
      double sigma = std::sqrt(2.0 / double(fan_in));
      for (std::size_t k = 0; k < info.weight_count; ++k)
        params[info.offset + k] = sigma * rng.normal();
      // biases stay zero
    } else if (l.type == LayerType::batchnorm) {
      for (int c = 0; c < l.in; ++c) params[info.offset + c] = 1.0;  // gamma
      for (int c = 0; c < l.in; ++c) state[info.state_offset + l.in + c] = 1.0;  // var
    }
  }
}

namespace {

constexpr char kMagic[8] = {'S', 'O', 'S', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(buf, bits);
}

struct Reader {
  const unsigned char* p;
  std::size_t n, at = 0;
  const std::string& path;
  std::uint32_t u32() {
    if (at + 4 > n) fail(ErrorCategory::io, "truncated checkpoint: " + path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64() {
    if (at + 8 > n) fail(ErrorCategory::io, "truncated checkpoint: " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelSpec& spec,
                     const ParamLayout& layout, const std::vector<double>& params,
                     const std::vector<double>& state) {
  require(params.size() == layout.total && state.size() == layout.state_total,
          ErrorCategory::input, "checkpoint vectors do not match the layout");
  std::string buf;
  buf.reserve(64 + 40 * spec.layers.size() + 8 * (params.size() + state.size()));
  buf.append(kMagic, 8);
  put_u32(buf, kVersion);
  put_u32(buf, std::uint32_t(spec.layers.size()));
  put_u64(buf, params.size());
  put_u64(buf, state.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerParamInfo& info = layout.layer[i];
    put_u32(buf, std::uint32_t(i));
    put_u32(buf, std::uint32_t(spec.layers[i].type));
    put_u64(buf, info.offset);
    put_u64(buf, info.count);
    put_u64(buf, info.weight_count);
    put_u64(buf, info.state_offset);
    put_u64(buf, info.state_count);
  }
  for (double d : params) put_f64(buf, d);
  for (double d : state) put_f64(buf, d);

  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot write checkpoint: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  require(out.good(), ErrorCategory::io, "short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path, const ParamLayout& layout) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCategory::io, "cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{reinterpret_cast<const unsigned char*>(buf.data()), buf.size(), 0, path};
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0)
    fail(ErrorCategory::io, "not a checkpoint file: " + path);
  r.at = 8;
  std::uint32_t version = r.u32();
  require(version == kVersion, ErrorCategory::io, "unsupported checkpoint version in " + path);
  std::uint32_t layers = r.u32();
  std::uint64_t p_total = r.u64();
  std::uint64_t s_total = r.u64();
  require(layers == layout.layer.size(), ErrorCategory::input,
          "checkpoint layer count does not match the model: " + path);
  require(p_total == layout.total && s_total == layout.state_total, ErrorCategory::input,
          "checkpoint parameter count does not match the model: " + path);
  for (std::uint32_t i = 0; i < layers; ++i) {
    r.u32();  // id
    r.u32();  // type tag
    std::uint64_t off = r.u64(), count = r.u64(), wcount = r.u64();
    std::uint64_t soff = r.u64(), scount = r.u64();
    const LayerParamInfo& info = layout.layer[i];
    require(off == info.offset && count == info.count && wcount == info.weight_count &&
                soff == info.state_offset && scount == info.state_count,
            ErrorCategory::input, "checkpoint layer record mismatch: " + path);
  }
  Checkpoint ck;
  ck.params.resize(p_total);
  ck.state.resize(s_total);
  for (auto& d : ck.params) d = r.f64();
  for (auto& d : ck.state) d = r.f64();
  return ck;
}

}  // namespace sosp
