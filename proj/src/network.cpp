#include "sosp/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "net_internal.hpp"
#include "sosp/errors.hpp"

namespace sosp {

using namespace netk;

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

void softmax(const double* z, int n, double* out) {
  double m = z[0];
  for (int i = 1; i < n; ++i) m = std::max(m, z[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(z[i] - m);
    s += out[i];
  }
  double inv = 1.0 / s;
  for (int i = 0; i < n; ++i) out[i] *= inv;
}

double loss_value(const double* out, int dim, LossKind kind, int label, const double* target) {
  if (kind == LossKind::squared) {
    double acc = 0.0;
    for (int i = 0; i < dim; ++i) {
      double y = target ? target[i] : (i == label ? 1.0 : 0.0);
      double d = out[i] - y;
      acc += d * d;
    }
    return 0.5 * acc;
  }
  require(label >= 0 && label < dim, ErrorCategory::input, "class label out of range");
  double m = out[0];
  for (int i = 1; i < dim; ++i) m = std::max(m, out[i]);
  double s = 0.0;
  for (int i = 0; i < dim; ++i) s += std::exp(out[i] - m);
  return m + std::log(s) - out[label];
}

double loss_grad(const double* out, int dim, LossKind kind, int label, const double* target,
                 double* dout) {
  if (kind == LossKind::squared) {
    double acc = 0.0;
    for (int i = 0; i < dim; ++i) {
      double y = target ? target[i] : (i == label ? 1.0 : 0.0);
      dout[i] = out[i] - y;
      acc += dout[i] * dout[i];
    }
    return 0.5 * acc;
  }
  double l = loss_value(out, dim, kind, label, target);
  softmax(out, dim, dout);
  dout[label] -= 1.0;
  return l;
}

namespace {

// directional derivative of the per-sample loss gradient at (v, t)
void dual_loss_seed(const double* v, const double* t, int dim, LossKind kind, int label,
                    const double* target, double* dv, double* dt) {
  if (kind == LossKind::squared) {
    for (int i = 0; i < dim; ++i) {
      double y = target ? target[i] : (i == label ? 1.0 : 0.0);
      dv[i] = v[i] - y;
      dt[i] = t[i];
    }
    return;
  }
  require(label >= 0 && label < dim, ErrorCategory::input, "class label out of range");
  softmax(v, dim, dv);
  double st = 0.0;
  for (int i = 0; i < dim; ++i) st += dv[i] * t[i];
  for (int i = 0; i < dim; ++i) dt[i] = dv[i] * (t[i] - st);
  dv[label] -= 1.0;
}

std::vector<int> all_ids(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<int> positions_in(const std::vector<int>& ids, const std::vector<int>& universe) {
  std::vector<int> pos(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    auto it = std::lower_bound(universe.begin(), universe.end(), ids[k]);
    require(it != universe.end() && *it == ids[k], ErrorCategory::internal,
            "channel id missing from merged set");
    pos[k] = int(it - universe.begin());
  }
  return pos;
}

bool is_identity(const std::vector<int>& pos, std::size_t universe_size) {
  if (pos.size() != universe_size) return false;
  for (std::size_t k = 0; k < pos.size(); ++k)
    if (pos[k] != int(k)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// graph compilation
// ---------------------------------------------------------------------------

Network::Network(const ModelSpec& spec) : spec_(spec) {
  compile(std::vector<std::vector<int>>(spec.layers.size()));
}

Network::Network(const ModelSpec& spec, const std::vector<std::vector<int>>& survivors)
    : spec_(spec) {
  require(survivors.size() == spec.layers.size(), ErrorCategory::input,
          "survivor list count does not match layer count");
  compile(survivors);
}

void Network::compile(const std::vector<std::vector<int>>& survivors) {
  validate_model(spec_);
  const int L = int(spec_.layers.size());
  nodes_.assign(L, Node{});
  raw_ids_.assign(L, {});
  post_ids_.assign(L, {});
  has_bn_ = false;
  max_col_ = 0;
  max_raw_ = 0;

  // base widths and spatial sizes; pruning never changes spatial dims
  std::vector<int> base_c(L), base_h(L), base_w(L);

  for (int i = 0; i < L; ++i) {
    const LayerSpec& l = spec_.layers[i];
    Node& nd = nodes_[i];
    nd.layer = l;
    nd.input = (l.input == kPrevLayer) ? i - 1 : l.input;

    int bc, bh, bw;
    if (nd.input < 0) {
      bc = spec_.in_channels;
      bh = spec_.in_height;
      bw = spec_.in_width;
    } else {
      bc = base_c[nd.input];
      bh = base_h[nd.input];
      bw = base_w[nd.input];
    }
    nd.in_h = bh;
    nd.in_w = bw;

    auto dim_fail = [&](const std::string& what) {
      fail(ErrorCategory::dimension, "layer " + std::to_string(i) + " (" +
                                         type_name(l.type) + "): " + what);
    };

    switch (l.type) {
      case LayerType::dense: {
        if (l.in != bc * bh * bw)
          dim_fail("expects " + std::to_string(l.in) + " inputs, producer supplies " +
                   std::to_string(bc * bh * bw));
        nd.out_h = nd.out_w = 1;
        base_c[i] = l.out;
        base_h[i] = base_w[i] = 1;
        break;
      }
      case LayerType::conv: {
        if (l.in != bc) dim_fail("channel mismatch against producer");
        if (bh + 2 * l.pad < l.kh || bw + 2 * l.pad < l.kw) dim_fail("kernel exceeds padded input");
        nd.out_h = (bh + 2 * l.pad - l.kh) / l.stride + 1;
        nd.out_w = (bw + 2 * l.pad - l.kw) / l.stride + 1;
        base_c[i] = l.out;
        base_h[i] = nd.out_h;
        base_w[i] = nd.out_w;
        break;
      }
      case LayerType::relu: {
        nd.out_h = bh;
        nd.out_w = bw;
        base_c[i] = bc;
        base_h[i] = bh;
        base_w[i] = bw;
        break;
      }
      case LayerType::avgpool: {
        if (l.pad != 0) dim_fail("padded pooling is not supported");
        if (bh < l.kh || bw < l.kw || (bh - l.kh) % l.stride != 0 || (bw - l.kw) % l.stride != 0)
          dim_fail("pooling window does not tile the input");
        nd.out_h = (bh - l.kh) / l.stride + 1;
        nd.out_w = (bw - l.kw) / l.stride + 1;
        base_c[i] = bc;
        base_h[i] = nd.out_h;
        base_w[i] = nd.out_w;
        break;
      }
      case LayerType::batchnorm: {
        if (l.in != bc) dim_fail("channel count mismatch against producer");
        has_bn_ = true;
        nd.out_h = bh;
        nd.out_w = bw;
        base_c[i] = bc;
        base_h[i] = bh;
        base_w[i] = bw;
        break;
      }
    }
  }

  // attach residual adds to their targets (shape compatibility in base widths)
  for (const ResidualSpec& r : spec_.residuals) {
    int src = (r.kind == ResidualKind::downsample) ? r.path.back() : r.source;
    if (base_c[src] != base_c[r.target] || base_h[src] != base_h[r.target] ||
        base_w[src] != base_w[r.target])
      fail(ErrorCategory::structure,
           "residual add at layer " + std::to_string(r.target) + " joins " +
               std::to_string(base_c[src]) + "x" + std::to_string(base_h[src]) + "x" +
               std::to_string(base_w[src]) + " with " + std::to_string(base_c[r.target]) + "x" +
               std::to_string(base_h[r.target]) + "x" + std::to_string(base_w[r.target]) +
               "; widen or expand every layer feeding this add together");
    AddIn a;
    a.src = src;
    nodes_[r.target].adds.push_back(std::move(a));
  }

  // single ordered sweep: survivor sets merge at adds as they are reached, so
  // downstream consumers always see the final union of their producer
  ModelSpec comp = spec_;
  for (int i = 0; i < L; ++i) {
    Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    const std::vector<int> in_ids =
        nd.input < 0 ? all_ids(spec_.in_channels) : post_ids_[nd.input];

    if (l.type == LayerType::conv || l.type == LayerType::dense) {
      if (survivors[i].empty()) {
        raw_ids_[i] = all_ids(l.out);
      } else {
        std::vector<int> sv = survivors[i];
        std::sort(sv.begin(), sv.end());
        sv.erase(std::unique(sv.begin(), sv.end()), sv.end());
        require(sv.front() >= 0 && sv.back() < l.out, ErrorCategory::input,
                "survivor channel out of range in layer " + std::to_string(i));
        raw_ids_[i] = std::move(sv);
      }
    } else {
      require(survivors[i].empty(), ErrorCategory::input,
              "survivors listed for a layer without own channels in layer " + std::to_string(i));
      raw_ids_[i] = in_ids;
    }

    post_ids_[i] = raw_ids_[i];
    for (const AddIn& a : nd.adds) {
      std::vector<int> merged;
      std::set_union(post_ids_[i].begin(), post_ids_[i].end(), post_ids_[a.src].begin(),
                     post_ids_[a.src].end(), std::back_inserter(merged));
      post_ids_[i] = std::move(merged);
    }

    nd.in_c = int(in_ids.size());
    nd.raw_c = int(raw_ids_[i].size());
    nd.post_c = int(post_ids_[i].size());
    nd.in_size = nd.in_c * nd.in_h * nd.in_w;
    const int plane = nd.out_h * nd.out_w;
    nd.raw_size = nd.raw_c * plane;
    nd.post_size = nd.post_c * plane;
    require(nd.raw_c > 0, ErrorCategory::structure,
            "layer " + std::to_string(i) + " has no surviving channels");

    if (!nd.adds.empty()) {
      std::vector<int> pos = positions_in(raw_ids_[i], post_ids_[i]);
      if (!is_identity(pos, post_ids_[i].size())) nd.embed_map = std::move(pos);
      for (AddIn& a : nd.adds) {
        std::vector<int> sp = positions_in(post_ids_[a.src], post_ids_[i]);
        if (!is_identity(sp, post_ids_[i].size())) a.map = std::move(sp);
      }
    }

    comp.layers[i].in = (l.type == LayerType::dense) ? nd.in_size : nd.in_c;
    if (l.type == LayerType::conv || l.type == LayerType::dense)
      comp.layers[i].out = nd.raw_c;
    else
      comp.layers[i].out = nd.raw_c;
    if (l.type == LayerType::conv)
      max_col_ = std::max(max_col_, std::size_t(nd.in_c) * l.kh * l.kw * plane);
    max_raw_ = std::max(max_raw_, std::size_t(std::max(nd.raw_size, nd.post_size)));
  }

  compact_ = std::move(comp);
  layout_ = build_layout(compact_);
  for (int i = 0; i < L; ++i) nodes_[i].pinfo = layout_.layer[i];
  out_dim_ = nodes_[L - 1].raw_c;
}

// ---------------------------------------------------------------------------
// buffer management
// ---------------------------------------------------------------------------

void Network::alloc_value(Ws& ws, int count, bool train) const {
  const std::size_t L = nodes_.size();
  ws.c.count = count;
  ws.c.val.resize(L);
  ws.c.raw.resize(L);
  for (std::size_t i = 0; i < L; ++i) {
    ws.c.val[i].assign(std::size_t(count) * nodes_[i].post_size, 0.0);
    if (!nodes_[i].adds.empty())
      ws.c.raw[i].assign(std::size_t(count) * nodes_[i].raw_size, 0.0);
  }
  if (train && has_bn_) {
    ws.c.bn_mean.resize(L);
    ws.c.bn_var.resize(L);
    for (std::size_t i = 0; i < L; ++i)
      if (nodes_[i].layer.type == LayerType::batchnorm) {
        ws.c.bn_mean[i].assign(nodes_[i].raw_c, 0.0);
        ws.c.bn_var[i].assign(nodes_[i].raw_c, 0.0);
      }
  }
  if (max_col_ > 0) ws.col.assign(max_col_, 0.0);
}

void Network::alloc_cot(Ws& ws, int count, bool dual) const {
  const std::size_t L = nodes_.size();
  ws.cot.resize(L);
  for (std::size_t i = 0; i < L; ++i)
    ws.cot[i].assign(std::size_t(count) * nodes_[i].post_size, 0.0);
  ws.cot_raw.resize(L);
  for (std::size_t i = 0; i < L; ++i)
    if (!nodes_[i].adds.empty())
      ws.cot_raw[i].assign(std::size_t(count) * nodes_[i].raw_size, 0.0);
  if (max_col_ > 0) ws.dcol.assign(max_col_, 0.0);
  ws.gate_scratch.assign(std::size_t(count) * std::max<std::size_t>(max_raw_, 1), 0.0);
  if (dual) {
    ws.cot_tan.resize(L);
    for (std::size_t i = 0; i < L; ++i)
      ws.cot_tan[i].assign(std::size_t(count) * nodes_[i].post_size, 0.0);
    ws.cot_tan_raw.resize(L);
    for (std::size_t i = 0; i < L; ++i)
      if (!nodes_[i].adds.empty())
        ws.cot_tan_raw[i].assign(std::size_t(count) * nodes_[i].raw_size, 0.0);
    if (max_col_ > 0) ws.dtcol.assign(max_col_, 0.0);
  }
}

void Network::alloc_tan(Ws& ws, int count) const {
  const std::size_t L = nodes_.size();
  ws.tan.resize(L);
  ws.tan_raw.resize(L);
  for (std::size_t i = 0; i < L; ++i) {
    ws.tan[i].assign(std::size_t(count) * nodes_[i].post_size, 0.0);
    if (!nodes_[i].adds.empty())
      ws.tan_raw[i].assign(std::size_t(count) * nodes_[i].raw_size, 0.0);
  }
  if (max_col_ > 0) ws.tcol.assign(max_col_, 0.0);
}

// scatter a node's raw output and its residual inputs into the merged layout
void Network::embed_post(const Node& nd, const std::vector<std::vector<double>>& pool,
                         const double* raw, double* post, int count) const {
  const int plane = nd.out_h * nd.out_w;
  if (nd.embed_map.empty() && nd.raw_c == nd.post_c) {
    std::memcpy(post, raw, sizeof(double) * std::size_t(count) * nd.post_size);
  } else {
    std::memset(post, 0, sizeof(double) * std::size_t(count) * nd.post_size);
    for (int b = 0; b < count; ++b)
      for (int k = 0; k < nd.raw_c; ++k)
        std::memcpy(post + (std::size_t(b) * nd.post_c + nd.embed_map[k]) * plane,
                    raw + (std::size_t(b) * nd.raw_c + k) * plane, sizeof(double) * plane);
  }
  for (const AddIn& a : nd.adds) {
    const double* s = pool[a.src].data();
    const int sc = nodes_[a.src].post_c;
    if (a.map.empty() && sc == nd.post_c) {
      kernels::vadd(post, s, post, std::size_t(count) * nd.post_size);
    } else {
      for (int b = 0; b < count; ++b)
        for (int k = 0; k < sc; ++k) {
          double* d = post + (std::size_t(b) * nd.post_c + a.map[k]) * plane;
          const double* sp = s + (std::size_t(b) * sc + k) * plane;
          kernels::vadd(d, sp, d, plane);
        }
    }
  }
}

// transpose of embed_post: split a merged cotangent back into raw and sources
void Network::unembed_cot(const Node& nd, std::vector<std::vector<double>>& pool,
                          const double* cpost, double* craw, int count) const {
  const int plane = nd.out_h * nd.out_w;
  if (nd.embed_map.empty() && nd.raw_c == nd.post_c) {
    std::memcpy(craw, cpost, sizeof(double) * std::size_t(count) * nd.raw_size);
  } else {
    for (int b = 0; b < count; ++b)
      for (int k = 0; k < nd.raw_c; ++k)
        std::memcpy(craw + (std::size_t(b) * nd.raw_c + k) * plane,
                    cpost + (std::size_t(b) * nd.post_c + nd.embed_map[k]) * plane,
                    sizeof(double) * plane);
  }
  for (const AddIn& a : nd.adds) {
    double* cs = pool[a.src].data();
    const int sc = nodes_[a.src].post_c;
    if (a.map.empty() && sc == nd.post_c) {
      kernels::vadd(cs, cpost, cs, std::size_t(count) * nd.post_size);
    } else {
      for (int b = 0; b < count; ++b)
        for (int k = 0; k < sc; ++k) {
          double* d = cs + (std::size_t(b) * sc + k) * plane;
          const double* sp = cpost + (std::size_t(b) * nd.post_c + a.map[k]) * plane;
          kernels::vadd(d, sp, d, plane);
        }
    }
  }
}

// ---------------------------------------------------------------------------
// value pass
// ---------------------------------------------------------------------------

void Network::value_pass(Ws& ws, const double* p, const double* s, const double* x, int count,
                         bool train) const {
  const int L = int(nodes_.size());
  for (int i = 0; i < L; ++i) {
    const Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    const double* in = nd.input < 0 ? x : ws.c.val[nd.input].data();
    double* raw = nd.adds.empty() ? ws.c.val[i].data() : ws.c.raw[i].data();
    const int plane = nd.out_h * nd.out_w;

    switch (l.type) {
      case LayerType::dense: {
        const double* w = p + nd.pinfo.offset;
        const double* bias = l.bias ? w + nd.pinfo.weight_count : nullptr;
        for (int b = 0; b < count; ++b) {
          double* y = raw + std::size_t(b) * nd.raw_c;
          if (bias)
            std::memcpy(y, bias, sizeof(double) * nd.raw_c);
          else
            std::memset(y, 0, sizeof(double) * nd.raw_c);
        }
        gemm_nt(in, w, raw, count, nd.in_size, nd.raw_c);
        break;
      }
      case LayerType::conv: {
        const double* w = p + nd.pinfo.offset;
        const double* bias = l.bias ? w + nd.pinfo.weight_count : nullptr;
        const int kk = nd.in_c * l.kh * l.kw;
        for (int b = 0; b < count; ++b) {
          im2col(in + std::size_t(b) * nd.in_size, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw,
                 l.stride, l.pad, nd.out_h, nd.out_w, 0, nd.in_c, ws.col.data());
          double* y = raw + std::size_t(b) * nd.raw_size;
          for (int m = 0; m < nd.raw_c; ++m) {
            double v = bias ? bias[m] : 0.0;
            std::fill(y + std::size_t(m) * plane, y + std::size_t(m + 1) * plane, v);
          }
          gemm_nn(w, ws.col.data(), y, nd.raw_c, kk, plane);
        }
        break;
      }
      case LayerType::relu:
        kernels::relu(in, raw, std::size_t(count) * nd.raw_size);
        break;
      case LayerType::avgpool: {
        const double inv = 1.0 / (l.kh * l.kw);
        for (int b = 0; b < count; ++b)
          for (int c = 0; c < nd.raw_c; ++c) {
            const double* xp = in + (std::size_t(b) * nd.in_c + c) * nd.in_h * nd.in_w;
            double* yp = raw + (std::size_t(b) * nd.raw_c + c) * plane;
            for (int oy = 0; oy < nd.out_h; ++oy)
              for (int ox = 0; ox < nd.out_w; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < l.kh; ++ky) {
                  const double* row = xp + std::size_t(oy * l.stride + ky) * nd.in_w +
                                      ox * l.stride;
                  for (int kx = 0; kx < l.kw; ++kx) acc += row[kx];
                }
                yp[oy * nd.out_w + ox] = acc * inv;
              }
          }
        break;
      }
      case LayerType::batchnorm: {
        const double* gamma = p + nd.pinfo.offset;
        const double* beta = gamma + nd.raw_c;
        const std::size_t m = std::size_t(count) * plane;
        for (int c = 0; c < nd.raw_c; ++c) {
          double mean, var;
          if (train) {
            double acc = 0.0;
            for (int b = 0; b < count; ++b) {
              const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
              for (int q = 0; q < plane; ++q) acc += xp[q];
            }
            mean = acc / double(m);
            acc = 0.0;
            for (int b = 0; b < count; ++b) {
              const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
              for (int q = 0; q < plane; ++q) {
                double d = xp[q] - mean;
                acc += d * d;
              }
            }
            var = acc / double(m);
            ws.c.bn_mean[i][c] = mean;
            ws.c.bn_var[i][c] = var;
          } else {
            mean = s[nd.pinfo.state_offset + c];
            var = s[nd.pinfo.state_offset + nd.raw_c + c];
          }
          const double k = 1.0 / std::sqrt(var + kBnEps);
          const double a = gamma[c] * k;
          const double sh = beta[c] - a * mean;
          for (int b = 0; b < count; ++b) {
            const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
            double* yp = raw + (std::size_t(b) * nd.raw_c + c) * plane;
            for (int q = 0; q < plane; ++q) yp[q] = a * xp[q] + sh;
          }
        }
        break;
      }
    }

    if (!nd.adds.empty()) embed_post(nd, ws.c.val, raw, ws.c.val[i].data(), count);
  }
}

// ---------------------------------------------------------------------------
// forward tangent pass (directional derivative along a parameter vector)
// ---------------------------------------------------------------------------

void Network::tangent_pass(Ws& ws, const double* p, const double* s, const double* v,
                           int count) const {
  const int L = int(nodes_.size());
  for (int i = 0; i < L; ++i) {
    const Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    const double* in = nd.input < 0 ? nullptr : ws.c.val[nd.input].data();
    const double* tin = nd.input < 0 ? nullptr : ws.tan[nd.input].data();
    const double* xin = nd.input < 0 ? ws.c.input.data() : in;
    double* traw = nd.adds.empty() ? ws.tan[i].data() : ws.tan_raw[i].data();
    const int plane = nd.out_h * nd.out_w;

    switch (l.type) {
      case LayerType::dense: {
        const double* w = p + nd.pinfo.offset;
        const double* vw = v + nd.pinfo.offset;
        const double* vb = l.bias ? vw + nd.pinfo.weight_count : nullptr;
        for (int b = 0; b < count; ++b) {
          double* y = traw + std::size_t(b) * nd.raw_c;
          if (vb)
            std::memcpy(y, vb, sizeof(double) * nd.raw_c);
          else
            std::memset(y, 0, sizeof(double) * nd.raw_c);
        }
        gemm_nt(xin, vw, traw, count, nd.in_size, nd.raw_c);
        if (tin) gemm_nt(tin, w, traw, count, nd.in_size, nd.raw_c);
        break;
      }
      case LayerType::conv: {
        const double* w = p + nd.pinfo.offset;
        const double* vw = v + nd.pinfo.offset;
        const double* vb = l.bias ? vw + nd.pinfo.weight_count : nullptr;
        const int kk = nd.in_c * l.kh * l.kw;
        for (int b = 0; b < count; ++b) {
          double* y = traw + std::size_t(b) * nd.raw_size;
          for (int m = 0; m < nd.raw_c; ++m) {
            double val = vb ? vb[m] : 0.0;
            std::fill(y + std::size_t(m) * plane, y + std::size_t(m + 1) * plane, val);
          }
          im2col(xin + std::size_t(b) * nd.in_size, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw,
                 l.stride, l.pad, nd.out_h, nd.out_w, 0, nd.in_c, ws.col.data());
          gemm_nn(vw, ws.col.data(), y, nd.raw_c, kk, plane);
          if (tin) {
            im2col(tin + std::size_t(b) * nd.in_size, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw,
                   l.stride, l.pad, nd.out_h, nd.out_w, 0, nd.in_c, ws.tcol.data());
            gemm_nn(w, ws.tcol.data(), y, nd.raw_c, kk, plane);
          }
        }
        break;
      }
      case LayerType::relu:
        if (tin)
          kernels::relu_gate(xin, tin, traw, std::size_t(count) * nd.raw_size);
        else
          std::memset(traw, 0, sizeof(double) * std::size_t(count) * nd.raw_size);
        break;
      case LayerType::avgpool: {
        const double inv = 1.0 / (l.kh * l.kw);
        for (int b = 0; b < count; ++b)
          for (int c = 0; c < nd.raw_c; ++c) {
            double* yp = traw + (std::size_t(b) * nd.raw_c + c) * plane;
            if (!tin) {
              std::memset(yp, 0, sizeof(double) * plane);
              continue;
            }
            const double* xp = tin + (std::size_t(b) * nd.in_c + c) * nd.in_h * nd.in_w;
            for (int oy = 0; oy < nd.out_h; ++oy)
              for (int ox = 0; ox < nd.out_w; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < l.kh; ++ky) {
                  const double* row = xp + std::size_t(oy * l.stride + ky) * nd.in_w +
                                      ox * l.stride;
                  for (int kx = 0; kx < l.kw; ++kx) acc += row[kx];
                }
                yp[oy * nd.out_w + ox] = acc * inv;
              }
          }
        break;
      }
      case LayerType::batchnorm: {
        const double* gamma = p + nd.pinfo.offset;
        const double* vg = v + nd.pinfo.offset;
        const double* vb = vg + nd.raw_c;
        for (int c = 0; c < nd.raw_c; ++c) {
          const double mean = s[nd.pinfo.state_offset + c];
          const double var = s[nd.pinfo.state_offset + nd.raw_c + c];
          const double k = 1.0 / std::sqrt(var + kBnEps);
          const double a = gamma[c] * k;
          const double vgk = vg[c] * k;
          const double sh = vb[c] - vgk * mean;
          for (int b = 0; b < count; ++b) {
            const double* xp = xin + (std::size_t(b) * nd.in_c + c) * plane;
            const double* tp = tin ? tin + (std::size_t(b) * nd.in_c + c) * plane : nullptr;
            double* yp = traw + (std::size_t(b) * nd.raw_c + c) * plane;
            for (int q = 0; q < plane; ++q)
              yp[q] = (tp ? a * tp[q] : 0.0) + vgk * xp[q] + sh;
          }
        }
        break;
      }
    }

    if (!nd.adds.empty()) embed_post(nd, ws.tan, traw, ws.tan[i].data(), count);
  }
}

// ---------------------------------------------------------------------------
// reverse pass; when vtan is set the directional derivative of every
// cotangent is carried along and param-gradient tangents land in gtsum
// ---------------------------------------------------------------------------

void Network::backward_pass(Ws& ws, const double* p, const double* s, const double* x, int count,
                            bool train, const double* dout, double* gsum, const double* vtan,
                            const double* dout_tan, double* gtsum) const {
  const int L = int(nodes_.size());
  const bool dual = vtan != nullptr;
  for (int i = 0; i < L; ++i) {
    std::fill(ws.cot[i].begin(), ws.cot[i].end(), 0.0);
    if (dual) std::fill(ws.cot_tan[i].begin(), ws.cot_tan[i].end(), 0.0);
  }
  std::memcpy(ws.cot[L - 1].data(), dout, sizeof(double) * std::size_t(count) * out_dim_);
  if (dual)
    std::memcpy(ws.cot_tan[L - 1].data(), dout_tan,
                sizeof(double) * std::size_t(count) * out_dim_);

  for (int i = L - 1; i >= 0; --i) {
    const Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    const int plane = nd.out_h * nd.out_w;
    const double* in = nd.input < 0 ? x : ws.c.val[nd.input].data();
    double* cin = nd.input < 0 ? nullptr : ws.cot[nd.input].data();
    const double* tin = (dual && nd.input >= 0) ? ws.tan[nd.input].data() : nullptr;
    double* cint = (dual && nd.input >= 0) ? ws.cot_tan[nd.input].data() : nullptr;

    const double* craw;
    const double* crat = nullptr;
    if (nd.adds.empty()) {
      craw = ws.cot[i].data();
      if (dual) crat = ws.cot_tan[i].data();
    } else {
      unembed_cot(nd, ws.cot, ws.cot[i].data(), ws.cot_raw[i].data(), count);
      craw = ws.cot_raw[i].data();
      if (dual) {
        unembed_cot(nd, ws.cot_tan, ws.cot_tan[i].data(), ws.cot_tan_raw[i].data(), count);
        crat = ws.cot_tan_raw[i].data();
      }
    }

    const bool learn = l.trainable;
    switch (l.type) {
      case LayerType::dense: {
        const double* w = p + nd.pinfo.offset;
        double* gw = gsum + nd.pinfo.offset;
        if (learn) {
          gemm_tn(craw, in, gw, nd.raw_c, count, nd.in_size);
          if (l.bias) {
            double* gb = gw + nd.pinfo.weight_count;
            for (int b = 0; b < count; ++b)
              for (int m = 0; m < nd.raw_c; ++m) gb[m] += craw[std::size_t(b) * nd.raw_c + m];
          }
        }
        if (cin) gemm_nn(craw, w, cin, count, nd.raw_c, nd.in_size);
        if (dual) {
          const double* vw = vtan + nd.pinfo.offset;
          double* gwt = gtsum + nd.pinfo.offset;
          if (learn) {
            gemm_tn(crat, in, gwt, nd.raw_c, count, nd.in_size);
            if (tin) gemm_tn(craw, tin, gwt, nd.raw_c, count, nd.in_size);
            if (l.bias) {
              double* gbt = gwt + nd.pinfo.weight_count;
              for (int b = 0; b < count; ++b)
                for (int m = 0; m < nd.raw_c; ++m) gbt[m] += crat[std::size_t(b) * nd.raw_c + m];
            }
          }
          if (cint) {
            gemm_nn(crat, w, cint, count, nd.raw_c, nd.in_size);
            gemm_nn(craw, vw, cint, count, nd.raw_c, nd.in_size);
          }
        }
        break;
      }
      case LayerType::conv: {
        const double* w = p + nd.pinfo.offset;
        double* gw = gsum + nd.pinfo.offset;
        const int kk = nd.in_c * l.kh * l.kw;
        for (int b = 0; b < count; ++b) {
          const double* xb = in + std::size_t(b) * nd.in_size;
          const double* cy = craw + std::size_t(b) * nd.raw_size;
          im2col(xb, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw, l.stride, l.pad, nd.out_h, nd.out_w,
                 0, nd.in_c, ws.col.data());
          if (learn) {
            gemm_nt(cy, ws.col.data(), gw, nd.raw_c, plane, kk);
            if (l.bias) {
              double* gb = gw + nd.pinfo.weight_count;
              for (int m = 0; m < nd.raw_c; ++m)
                gb[m] += kernels::sum(cy + std::size_t(m) * plane, plane);
            }
          }
          if (cin) {
            std::memset(ws.dcol.data(), 0, sizeof(double) * std::size_t(kk) * plane);
            gemm_tn(w, cy, ws.dcol.data(), kk, nd.raw_c, plane);
            col2im_add(ws.dcol.data(), nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw, l.stride, l.pad,
                       nd.out_h, nd.out_w, cin + std::size_t(b) * nd.in_size);
          }
          if (dual) {
            const double* vw = vtan + nd.pinfo.offset;
            double* gwt = gtsum + nd.pinfo.offset;
            const double* ct = crat + std::size_t(b) * nd.raw_size;
            const double* tb = tin ? tin + std::size_t(b) * nd.in_size : nullptr;
            if (tb)
              im2col(tb, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw, l.stride, l.pad, nd.out_h,
                     nd.out_w, 0, nd.in_c, ws.tcol.data());
            if (learn) {
              gemm_nt(ct, ws.col.data(), gwt, nd.raw_c, plane, kk);
              if (tb) gemm_nt(cy, ws.tcol.data(), gwt, nd.raw_c, plane, kk);
              if (l.bias) {
                double* gbt = gwt + nd.pinfo.weight_count;
                for (int m = 0; m < nd.raw_c; ++m)
                  gbt[m] += kernels::sum(ct + std::size_t(m) * plane, plane);
              }
            }
            if (cint) {
              std::memset(ws.dtcol.data(), 0, sizeof(double) * std::size_t(kk) * plane);
              gemm_tn(w, ct, ws.dtcol.data(), kk, nd.raw_c, plane);
              gemm_tn(vw, cy, ws.dtcol.data(), kk, nd.raw_c, plane);
              col2im_add(ws.dtcol.data(), nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw, l.stride, l.pad,
                         nd.out_h, nd.out_w, cint + std::size_t(b) * nd.in_size);
            }
          }
        }
        break;
      }
      case LayerType::relu: {
        const std::size_t n = std::size_t(count) * nd.raw_size;
        if (cin) {
          kernels::relu_gate(in, craw, ws.gate_scratch.data(), n);
          kernels::vadd(cin, ws.gate_scratch.data(), cin, n);
        }
        if (cint) {
          kernels::relu_gate(in, crat, ws.gate_scratch.data(), n);
          kernels::vadd(cint, ws.gate_scratch.data(), cint, n);
        }
        break;
      }
      case LayerType::avgpool: {
        const double inv = 1.0 / (l.kh * l.kw);
        auto spread = [&](const double* cy, double* dx) {
          if (!dx) return;
          for (int b = 0; b < count; ++b)
            for (int c = 0; c < nd.raw_c; ++c) {
              const double* yp = cy + (std::size_t(b) * nd.raw_c + c) * plane;
              double* xp = dx + (std::size_t(b) * nd.in_c + c) * nd.in_h * nd.in_w;
              for (int oy = 0; oy < nd.out_h; ++oy)
                for (int ox = 0; ox < nd.out_w; ++ox) {
                  const double g = yp[oy * nd.out_w + ox] * inv;
                  for (int ky = 0; ky < l.kh; ++ky) {
                    double* row = xp + std::size_t(oy * l.stride + ky) * nd.in_w + ox * l.stride;
                    for (int kx = 0; kx < l.kw; ++kx) row[kx] += g;
                  }
                }
            }
        };
        spread(craw, cin);
        if (dual) spread(crat, cint);
        break;
      }
      case LayerType::batchnorm: {
        const double* gamma = p + nd.pinfo.offset;
        double* gg = gsum + nd.pinfo.offset;
        double* gb = gg + nd.raw_c;
        const std::size_t m = std::size_t(count) * plane;
        for (int c = 0; c < nd.raw_c; ++c) {
          const double mean = train ? ws.c.bn_mean[i][c] : s[nd.pinfo.state_offset + c];
          const double var = train ? ws.c.bn_var[i][c] : s[nd.pinfo.state_offset + nd.raw_c + c];
          const double k = 1.0 / std::sqrt(var + kBnEps);
          double s0 = 0.0, s1 = 0.0;
          for (int b = 0; b < count; ++b) {
            const double* cy = craw + (std::size_t(b) * nd.raw_c + c) * plane;
            const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
            s0 += kernels::sum(cy, plane);
            s1 += kernels::dot(cy, xp, plane);
          }
          s1 = k * (s1 - mean * s0);  // sum of cot * xhat
          if (learn) {
            gb[c] += s0;
            gg[c] += s1;
          }
          const double a = gamma[c] * k;
          if (cin) {
            if (train) {
              const double c0 = s0 / double(m), c1 = s1 / double(m);
              for (int b = 0; b < count; ++b) {
                const double* cy = craw + (std::size_t(b) * nd.raw_c + c) * plane;
                const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
                double* ci = cin + (std::size_t(b) * nd.in_c + c) * plane;
                for (int q = 0; q < plane; ++q)
                  ci[q] += a * (cy[q] - c0 - (xp[q] - mean) * k * c1);
              }
            } else {
              for (int b = 0; b < count; ++b)
                kernels::axpy(a, craw + (std::size_t(b) * nd.raw_c + c) * plane,
                              cin + (std::size_t(b) * nd.in_c + c) * plane, plane);
            }
          }
          if (dual) {
            require(!train, ErrorCategory::unsupported,
                    "second-order pass through batch statistics is not supported");
            const double* vg = vtan + nd.pinfo.offset;
            double* ggt = gtsum + nd.pinfo.offset;
            double* gbt = ggt + nd.raw_c;
            double t0 = 0.0, t1 = 0.0, t2 = 0.0;
            for (int b = 0; b < count; ++b) {
              const double* ct = crat + (std::size_t(b) * nd.raw_c + c) * plane;
              const double* cy = craw + (std::size_t(b) * nd.raw_c + c) * plane;
              const double* xp = in + (std::size_t(b) * nd.in_c + c) * plane;
              t0 += kernels::sum(ct, plane);
              t1 += kernels::dot(ct, xp, plane);
              if (tin) t2 += kernels::dot(cy, tin + (std::size_t(b) * nd.in_c + c) * plane, plane);
            }
            if (learn) {
              gbt[c] += t0;
              ggt[c] += k * (t1 - mean * t0) + k * t2;
            }
            if (cint) {
              const double vgk = vg[c] * k;
              for (int b = 0; b < count; ++b) {
                const double* ct = crat + (std::size_t(b) * nd.raw_c + c) * plane;
                const double* cy = craw + (std::size_t(b) * nd.raw_c + c) * plane;
                double* ci = cint + (std::size_t(b) * nd.in_c + c) * plane;
                for (int q = 0; q < plane; ++q) ci[q] += a * ct[q] + vgk * cy[q];
              }
            }
          }
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

void Network::forward(const std::vector<double>& params, const std::vector<double>& state,
                      const double* x, int count, std::vector<double>& out) const {
  check_sizes(params, state);
  out.resize(std::size_t(count) * out_dim_);
  const int in_sz = spec_.input_size();
  Ws ws;
  for (int at = 0; at < count; at += kChunk) {
    const int b = std::min(kChunk, count - at);
    alloc_value(ws, b, false);
    value_pass(ws, params.data(), state.data(), x + std::size_t(at) * in_sz, b, false);
    std::memcpy(out.data() + std::size_t(at) * out_dim_, ws.c.val.back().data(),
                sizeof(double) * std::size_t(b) * out_dim_);
  }
}

double Network::gradient(const std::vector<double>& params, const std::vector<double>& state,
                         const Batch& batch, LossKind kind, std::vector<double>& grad) const {
  check_sizes(params, state);
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  const int in_sz = spec_.input_size();
  CompensatedVec gacc;
  gacc.init(layout_.total);
  CompensatedScalar lacc;
  std::vector<double> gsum(layout_.total), dout;
  Ws ws;
  for (int at = 0; at < batch.count; at += kChunk) {
    const int b = std::min(kChunk, batch.count - at);
    alloc_value(ws, b, false);
    alloc_cot(ws, b, false);
    const double* x = batch.x + std::size_t(at) * in_sz;
    value_pass(ws, params.data(), state.data(), x, b, false);
    dout.assign(std::size_t(b) * out_dim_, 0.0);
    CompensatedScalar lchunk;
    for (int j = 0; j < b; ++j) {
      const double* o = ws.c.val.back().data() + std::size_t(j) * out_dim_;
      const int label = batch.label ? batch.label[at + j] : -1;
      const double* tgt = batch.target ? batch.target + std::size_t(at + j) * out_dim_ : nullptr;
      lchunk.add(loss_grad(o, out_dim_, kind, label, tgt, dout.data() + std::size_t(j) * out_dim_));
    }
    lacc.add(lchunk.value());
    std::fill(gsum.begin(), gsum.end(), 0.0);
    backward_pass(ws, params.data(), state.data(), x, b, false, dout.data(), gsum.data(), nullptr,
                  nullptr, nullptr);
    gacc.add(gsum.data(), gsum.size());
  }
  gacc.finish(grad, 1.0 / batch.count);
  return lacc.value() / batch.count;
}

void Network::hvp(const std::vector<double>& params, const std::vector<double>& state,
                  const Batch& batch, LossKind kind, const std::vector<double>& v,
                  std::vector<double>& out) const {
  check_sizes(params, state);
  require(v.size() == layout_.total, ErrorCategory::input, "direction length mismatch");
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  const int in_sz = spec_.input_size();
  CompensatedVec hacc;
  hacc.init(layout_.total);
  std::vector<double> gsum(layout_.total), gtsum(layout_.total), dout, dout_tan;
  Ws ws;
  for (int at = 0; at < batch.count; at += kChunk) {
    const int b = std::min(kChunk, batch.count - at);
    alloc_value(ws, b, false);
    alloc_tan(ws, b);
    alloc_cot(ws, b, true);
    const double* x = batch.x + std::size_t(at) * in_sz;
    ws.c.input.assign(x, x + std::size_t(b) * in_sz);
    value_pass(ws, params.data(), state.data(), x, b, false);
    tangent_pass(ws, params.data(), state.data(), v.data(), b);
    dout.assign(std::size_t(b) * out_dim_, 0.0);
    dout_tan.assign(std::size_t(b) * out_dim_, 0.0);
    for (int j = 0; j < b; ++j) {
      const std::size_t off = std::size_t(j) * out_dim_;
      const int label = batch.label ? batch.label[at + j] : -1;
      const double* tgt = batch.target ? batch.target + std::size_t(at + j) * out_dim_ : nullptr;
      dual_loss_seed(ws.c.val.back().data() + off, ws.tan.back().data() + off, out_dim_, kind,
                     label, tgt, dout.data() + off, dout_tan.data() + off);
    }
    std::fill(gsum.begin(), gsum.end(), 0.0);
    std::fill(gtsum.begin(), gtsum.end(), 0.0);
    backward_pass(ws, params.data(), state.data(), x, b, false, dout.data(), gsum.data(),
                  v.data(), dout_tan.data(), gtsum.data());
    hacc.add(gtsum.data(), gtsum.size());
  }
  hacc.finish(out, 1.0 / batch.count);
}

void Network::jacobian(const std::vector<double>& params, const std::vector<double>& state,
                       const double* x, std::vector<double>& jac) const {
  check_sizes(params, state);
  jac.assign(std::size_t(out_dim_) * layout_.total, 0.0);
  Ws ws;
  alloc_value(ws, 1, false);
  alloc_cot(ws, 1, false);
  value_pass(ws, params.data(), state.data(), x, 1, false);
  std::vector<double> seed(out_dim_, 0.0);
  for (int j = 0; j < out_dim_; ++j) {
    seed.assign(out_dim_, 0.0);
    seed[j] = 1.0;
    backward_pass(ws, params.data(), state.data(), x, 1, false, seed.data(),
                  jac.data() + std::size_t(j) * layout_.total, nullptr, nullptr, nullptr);
  }
}

EvalCache Network::eval_cache(const std::vector<double>& params, const std::vector<double>& state,
                              const Batch& batch) const {
  check_sizes(params, state);
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  Ws ws;
  alloc_value(ws, batch.count, false);
  ws.c.input.assign(batch.x, batch.x + std::size_t(batch.count) * spec_.input_size());
  value_pass(ws, params.data(), state.data(), batch.x, batch.count, false);
  return std::move(ws.c);
}

double Network::train_gradient(const std::vector<double>& params, std::vector<double>& state,
                               const Batch& batch, LossKind kind, bool update_running,
                               std::vector<double>& grad) const {
  check_sizes(params, state);
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  Ws ws;
  alloc_value(ws, batch.count, true);
  alloc_cot(ws, batch.count, false);
  value_pass(ws, params.data(), state.data(), batch.x, batch.count, true);
  std::vector<double> dout(std::size_t(batch.count) * out_dim_, 0.0);
  CompensatedScalar lacc;
  for (int j = 0; j < batch.count; ++j) {
    const double* o = ws.c.val.back().data() + std::size_t(j) * out_dim_;
    const int label = batch.label ? batch.label[j] : -1;
    const double* tgt = batch.target ? batch.target + std::size_t(j) * out_dim_ : nullptr;
    lacc.add(loss_grad(o, out_dim_, kind, label, tgt, dout.data() + std::size_t(j) * out_dim_));
  }
  grad.assign(layout_.total, 0.0);
  backward_pass(ws, params.data(), state.data(), batch.x, batch.count, true, dout.data(),
                grad.data(), nullptr, nullptr, nullptr);
  const double inv = 1.0 / batch.count;
  for (double& g : grad) g *= inv;
  if (update_running && has_bn_) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& nd = nodes_[i];
      if (nd.layer.type != LayerType::batchnorm) continue;
      double* rm = state.data() + nd.pinfo.state_offset;
      double* rv = rm + nd.raw_c;
      for (int c = 0; c < nd.raw_c; ++c) {
        rm[c] = (1.0 - kBnMomentum) * rm[c] + kBnMomentum * ws.c.bn_mean[i][c];
        rv[c] = (1.0 - kBnMomentum) * rv[c] + kBnMomentum * ws.c.bn_var[i][c];
      }
    }
  }
  return lacc.value() / batch.count;
}

void Network::evaluate(const std::vector<double>& params, const std::vector<double>& state,
                       const Batch& batch, LossKind kind, double* loss, double* accuracy) const {
  check_sizes(params, state);
  require(batch.count > 0, ErrorCategory::input, "empty batch");
  const int in_sz = spec_.input_size();
  CompensatedScalar lacc;
  long correct = 0;
  Ws ws;
  for (int at = 0; at < batch.count; at += kChunk) {
    const int b = std::min(kChunk, batch.count - at);
    alloc_value(ws, b, false);
    value_pass(ws, params.data(), state.data(), batch.x + std::size_t(at) * in_sz, b, false);
    for (int j = 0; j < b; ++j) {
      const double* o = ws.c.val.back().data() + std::size_t(j) * out_dim_;
      const int label = batch.label ? batch.label[at + j] : -1;
      const double* tgt = batch.target ? batch.target + std::size_t(at + j) * out_dim_ : nullptr;
      lacc.add(loss_value(o, out_dim_, kind, label, tgt));
      if (label >= 0) {
        int best = 0;
        for (int d = 1; d < out_dim_; ++d)
          if (o[d] > o[best]) best = d;
        if (best == label) ++correct;
      }
    }
  }
  if (loss) *loss = lacc.value() / batch.count;
  if (accuracy) *accuracy = double(correct) / batch.count;
}

void Network::check_sizes(const std::vector<double>& params,
                          const std::vector<double>& state) const {
  require(params.size() == layout_.total, ErrorCategory::input,
          "parameter vector length " + std::to_string(params.size()) + " does not match model (" +
              std::to_string(layout_.total) + ")");
  require(state.size() == layout_.state_total, ErrorCategory::input,
          "state vector length does not match model");
}

}  // namespace sosp
