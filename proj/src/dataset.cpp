#include "sosp/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "sosp/errors.hpp"
#include "sosp/rng.hpp"

namespace sosp {

namespace {

constexpr char kMagic[9] = "SOSPDSET";
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (unsigned char)(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ofstream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.gcount() == 4, ErrorCategory::io, "truncated dataset file: " + path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::ifstream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  require(in.gcount() == 8, ErrorCategory::io, "truncated dataset file: " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

double get_f64(std::ifstream& in, const std::string& path) {
  std::uint64_t bits = get_u64(in, path);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

Dataset make_synthetic(const SynthConfig& cfg) {
  require(cfg.classes >= 2, ErrorCategory::config, "synthetic set needs at least 2 classes");
  require(cfg.channels > 0 && cfg.height > 0 && cfg.width > 0 && cfg.n > 0,
          ErrorCategory::config, "synthetic dimensions must be positive");
  Dataset d;
  d.channels = cfg.channels;
  d.height = cfg.height;
  d.width = cfg.width;
  d.classes = cfg.classes;
  const int sz = d.sample_size();

  Rng rng(cfg.seed);
  std::vector<double> tpl(std::size_t(cfg.classes) * sz);
  for (double& v : tpl) v = rng.normal();

  d.x.resize(std::size_t(cfg.n) * sz);
  d.y.resize(cfg.n);
  for (int i = 0; i < cfg.n; ++i) {
    const int c = i % cfg.classes;
    d.y[i] = c;
    const double amp = rng.uniform(0.7, 1.3);
    const double* t = tpl.data() + std::size_t(c) * sz;
    double* x = d.x.data() + std::size_t(i) * sz;
    for (int k = 0; k < sz; ++k) x[k] = amp * t[k] + cfg.noise * rng.normal();
  }
  return d;
}

Dataset make_two_blobs(int n, int dim, double margin, std::uint64_t seed) {
  require(n > 0 && dim > 0, ErrorCategory::config, "blob dimensions must be positive");
  require(margin > 0.0, ErrorCategory::config, "blob margin must be positive");
  Dataset d;
  d.channels = dim;
  d.height = d.width = 1;
  d.classes = 2;
  d.x.resize(std::size_t(n) * dim);
  d.y.resize(n);

  Rng rng(seed);
  std::vector<double> u(dim);
  double norm = 0.0;
  for (double& v : u) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : u) v /= norm;

  std::vector<double> g(dim);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    d.y[i] = label;
    double proj = 0.0;
    for (int k = 0; k < dim; ++k) {
      g[k] = rng.normal();
      proj += g[k] * u[k];
    }
    // strip the along-u component, then push the sample past the margin
    const double shift = (label ? 1.0 : -1.0) * (0.5 * margin + std::abs(proj));
    double* x = d.x.data() + std::size_t(i) * dim;
    for (int k = 0; k < dim; ++k) x[k] = g[k] - proj * u[k] + shift * u[k];
  }
  return d;
}

Dataset gather(const Dataset& d, const std::vector<int>& idx) {
  Dataset out;
  out.channels = d.channels;
  out.height = d.height;
  out.width = d.width;
  out.classes = d.classes;
  const int sz = d.sample_size();
  out.x.resize(idx.size() * sz);
  out.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < d.size(), ErrorCategory::input,
            "gather index out of range");
    std::memcpy(out.x.data() + i * sz, d.sample(idx[i]), sizeof(double) * sz);
    out.y[i] = d.y[idx[i]];
  }
  return out;
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), ErrorCategory::io, "cannot open for write: " + path);
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, std::uint32_t(d.channels));
  put_u32(out, std::uint32_t(d.height));
  put_u32(out, std::uint32_t(d.width));
  put_u32(out, std::uint32_t(d.classes));
  put_u64(out, std::uint64_t(d.size()));
  for (int y : d.y) put_u32(out, std::uint32_t(y));
  for (double v : d.x) put_f64(out, v);
  require(bool(out), ErrorCategory::io, "write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorCategory::io, "cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0, ErrorCategory::io,
          "not a dataset file: " + path);
  require(get_u32(in, path) == kVersion, ErrorCategory::io,
          "unsupported dataset version: " + path);
  Dataset d;
  d.channels = int(get_u32(in, path));
  d.height = int(get_u32(in, path));
  d.width = int(get_u32(in, path));
  d.classes = int(get_u32(in, path));
  require(d.channels > 0 && d.height > 0 && d.width > 0 && d.classes >= 2,
          ErrorCategory::io, "dataset header out of range: " + path);
  const std::uint64_t n = get_u64(in, path);
  require(n > 0 && n < (1ull << 32), ErrorCategory::io,
          "dataset sample count out of range: " + path);
  d.y.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    d.y[i] = int(get_u32(in, path));
    require(d.y[i] >= 0 && d.y[i] < d.classes, ErrorCategory::io,
            "dataset label out of range: " + path);
  }
  d.x.resize(n * d.sample_size());
  for (double& v : d.x) v = get_f64(in, path);
  return d;
}

}  // namespace sosp
