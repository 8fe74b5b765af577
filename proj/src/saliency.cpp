#include "sosp/saliency.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "sosp/errors.hpp"
#include "sosp/kernels.hpp"
#include "sosp/rng.hpp"

namespace sosp {

namespace {

using Json = nlohmann::ordered_json;

constexpr int kProjBlock = 32;  // samples projected per activation cache

// Neumaier-compensated scalar accumulators, one per Q entry
struct CompArray {
  std::vector<double> sum, comp;
  explicit CompArray(std::size_t n) : sum(n, 0.0), comp(n, 0.0) {}
  void add(std::size_t i, double x) {
    double t = sum[i] + x;
    if (std::abs(sum[i]) >= std::abs(x))
      comp[i] += (sum[i] - t) + x;
    else
      comp[i] += (x - t) + sum[i];
    sum[i] = t;
  }
  double value(std::size_t i) const { return sum[i] + comp[i]; }
};

}  // namespace

RMatrix r_matrix(const double* output, int dim, LossKind kind) {
  RMatrix r;
  r.kind = kind;
  r.dim = dim;
  if (kind == LossKind::cross_entropy) {
    r.sigma.resize(dim);
    softmax(output, dim, r.sigma.data());
  }
  return r;
}

double contract_r(const double* u, const double* v, const RMatrix& r) {
  if (r.kind == LossKind::squared) return kernels::dot(u, v, r.dim);
  const double* s = r.sigma.data();
  const double duv = kernels::dot3(u, s, v, r.dim);
  const double du = kernels::dot(u, s, r.dim);
  const double dv = kernels::dot(v, s, r.dim);
  return duv - du * dv;
}

std::vector<double> r_matrix_dense(const RMatrix& r) {
  std::vector<double> m(std::size_t(r.dim) * r.dim, 0.0);
  if (r.kind == LossKind::squared) {
    for (int i = 0; i < r.dim; ++i) m[std::size_t(i) * r.dim + i] = 1.0;
  } else {
    for (int i = 0; i < r.dim; ++i)
      for (int j = 0; j < r.dim; ++j)
        m[std::size_t(i) * r.dim + j] =
            (i == j ? r.sigma[i] : 0.0) - r.sigma[i] * r.sigma[j];
  }
  return m;
}

std::vector<double> first_order_terms(const Segmentation& seg,
                                      const std::vector<double>& params,
                                      const std::vector<double>& grad) {
  std::vector<double> out(seg.size());
  for (int s = 0; s < seg.size(); ++s)
    out[s] = std::abs(structure_dot(seg.structures[s], params, grad));
  return out;
}

QMatrix q_matrix(const Network& net, const std::vector<double>& params,
                 const std::vector<double>& state, const Batch& batch, const Segmentation& seg,
                 LossKind kind) {
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  const int S = seg.size();
  const int D = net.output_dim();
  const int in_sz = net.input_size();

  CompArray acc(std::size_t(S) * S);  // lower triangle used
  std::vector<std::vector<double>> phi(S);
  JvpScratch scratch;

  for (int at = 0; at < batch.count; at += kProjBlock) {
    const int b = std::min(kProjBlock, batch.count - at);
    Batch block{batch.x + std::size_t(at) * in_sz,
                batch.label ? batch.label + at : nullptr,
                batch.target ? batch.target + std::size_t(at) * D : nullptr, b};
    EvalCache cache = net.eval_cache(params, state, block);
    for (int s = 0; s < S; ++s) {
      const Structure& st = seg.structures[s];
      net.structure_jvp(cache, params, state, st.layer, st.channel, st.bn_layer, scratch,
                        phi[s]);
    }
    for (int n = 0; n < b; ++n) {
      const RMatrix r = r_matrix(cache.val.back().data() + std::size_t(n) * D, D, kind);
      for (int s = 0; s < S; ++s) {
        const double* us = phi[s].data() + std::size_t(n) * D;
        for (int t = 0; t <= s; ++t)
          acc.add(std::size_t(s) * S + t,
                  contract_r(us, phi[t].data() + std::size_t(n) * D, r));
      }
    }
  }

  std::vector<double> grad;
  net.gradient(params, state, batch, kind, grad);
  const std::vector<double> fo = first_order_terms(seg, params, grad);

  QMatrix q;
  q.size = S;
  q.q.assign(std::size_t(S) * S, 0.0);
  const double inv = 1.0 / batch.count;
  for (int s = 0; s < S; ++s)
    for (int t = 0; t <= s; ++t) {
      double v = 0.5 * std::abs(acc.value(std::size_t(s) * S + t) * inv);
      if (t == s) v += fo[s];
      q.at(s, t) = v;
      q.at(t, s) = v;
    }
  return q;
}

SaliencyVector sosp_h_from_parts(const Segmentation& seg, const std::vector<double>& params,
                                 const std::vector<double>& grad,
                                 const std::vector<double>& hv) {
  SaliencyVector v;
  v.method = "sosp_h";
  v.entries.resize(seg.size());
  for (int s = 0; s < seg.size(); ++s) {
    SaliencyEntry& e = v.entries[s];
    e.structure = s;
    e.first_order = std::abs(structure_dot(seg.structures[s], params, grad));
    e.second_order = 0.5 * std::abs(structure_dot(seg.structures[s], params, hv));
    e.total = e.first_order + e.second_order;
  }
  return v;
}

SaliencyVector sosp_h_saliency(const Network& net, const std::vector<double>& params,
                               const std::vector<double>& state, const Batch& batch,
                               const Segmentation& seg, LossKind kind) {
  std::vector<double> grad;
  net.gradient(params, state, batch, kind, grad);
  std::vector<double> direction = theta_struc(seg, params);
  std::vector<double> hv;
  net.hvp(params, state, batch, kind, direction, hv);
  return sosp_h_from_parts(seg, params, grad, hv);
}

std::vector<int> subsample_indices(int n, int n_prime, std::uint64_t seed) {
  require(n_prime >= 1 && n_prime <= n, ErrorCategory::input,
          "subsample size must lie in [1, dataset size]");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (int i = 0; i < n_prime; ++i) {
    int j = i + int(rng.below(std::uint64_t(n - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n_prime);
  return idx;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

std::string saliency_to_json(const SaliencyVector& v) {
  Json j;
  j["method"] = v.method;
  Json arr = Json::array();
  for (const SaliencyEntry& e : v.entries) {
    Json je;
    je["structure"] = e.structure;
    je["first_order"] = e.first_order;
    je["second_order"] = e.second_order;
    je["total"] = e.total;
    arr.push_back(std::move(je));
  }
  j["entries"] = std::move(arr);
  return j.dump(2);
}

SaliencyVector saliency_from_json(const std::string& text) {
  SaliencyVector v;
  try {
    Json j = Json::parse(text);
    v.method = j.at("method").get<std::string>();
    for (const Json& je : j.at("entries")) {
      SaliencyEntry e;
      e.structure = je.at("structure").get<int>();
      e.first_order = je.at("first_order").get<double>();
      e.second_order = je.at("second_order").get<double>();
      e.total = je.at("total").get<double>();
      v.entries.push_back(e);
    }
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::io, std::string("malformed saliency json: ") + ex.what());
  }
  return v;
}

std::string q_matrix_to_json(const QMatrix& q) {
  Json j;
  j["size"] = q.size;
  Json rows = Json::array();
  for (int s = 0; s < q.size; ++s) {
    Json row = Json::array();
    for (int t = 0; t < q.size; ++t) row.push_back(q.at(s, t));
    rows.push_back(std::move(row));
  }
  j["q"] = std::move(rows);
  return j.dump(2);
}

QMatrix q_matrix_from_json(const std::string& text) {
  QMatrix q;
  try {
    Json j = Json::parse(text);
    q.size = j.at("size").get<int>();
    q.q.reserve(std::size_t(q.size) * q.size);
    for (const Json& row : j.at("q"))
      for (const Json& v : row) q.q.push_back(v.get<double>());
  } catch (const Json::exception& ex) {
    fail(ErrorCategory::io, std::string("malformed q-matrix json: ") + ex.what());
  }
  require(q.q.size() == std::size_t(q.size) * q.size, ErrorCategory::io,
          "q-matrix json has wrong element count");
  return q;
}

namespace {
constexpr char kQMagic[9] = "SOSPQMAT";
}

void save_q_matrix(const QMatrix& q, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), ErrorCategory::io, "cannot open for write: " + path);
  out.write(kQMagic, 8);
  std::uint64_t s = std::uint64_t(q.size);
  unsigned char hdr[8];
  for (int i = 0; i < 8; ++i) hdr[i] = (unsigned char)(s >> (8 * i));
  out.write(reinterpret_cast<const char*>(hdr), 8);
  for (double v : q.q) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
  require(bool(out), ErrorCategory::io, "write failed: " + path);
}

QMatrix load_q_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorCategory::io, "cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, kQMagic, 8) == 0, ErrorCategory::io,
          "not a q-matrix file: " + path);
  unsigned char hdr[8];
  in.read(reinterpret_cast<char*>(hdr), 8);
  require(in.gcount() == 8, ErrorCategory::io, "truncated q-matrix file: " + path);
  std::uint64_t s = 0;
  for (int i = 0; i < 8; ++i) s |= std::uint64_t(hdr[i]) << (8 * i);
  require(s > 0 && s < (1u << 20), ErrorCategory::io, "q-matrix size out of range: " + path);
  QMatrix q;
  q.size = int(s);
  q.q.resize(std::size_t(s) * s);
  for (double& v : q.q) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    require(in.gcount() == 8, ErrorCategory::io, "truncated q-matrix file: " + path);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
  }
  return q;
}

}  // namespace sosp
