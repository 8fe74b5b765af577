#include <algorithm>
#include <cmath>
#include <cstring>

#include "net_internal.hpp"
#include "sosp/errors.hpp"
#include "sosp/network.hpp"

// Structure-seeded passes. Both exploit that a channel's parameter direction
// enters the graph as a copy of that channel's raw activation plane, so the
// directional derivative needs no extra convolution at the owning layer.

namespace sosp {

using namespace netk;

void Network::structure_jvp(const EvalCache& cache, const std::vector<double>& p,
                            const std::vector<double>& s, int layer, int channel, int bn_layer,
                            JvpScratch& sc, std::vector<double>& out) const {
  const int L = int(nodes_.size());
  const int B = cache.count;
  require(layer >= 0 && layer < L, ErrorCategory::input, "structure layer out of range");
  const Node& own = nodes_[layer];
  require(own.layer.type == LayerType::conv || own.layer.type == LayerType::dense,
          ErrorCategory::input, "structure owner must be a weight layer");
  require(channel >= 0 && channel < own.raw_c, ErrorCategory::input,
          "structure channel out of range");
  if (bn_layer >= 0) {
    require(bn_layer < L && nodes_[bn_layer].layer.type == LayerType::batchnorm &&
                nodes_[bn_layer].input == layer,
            ErrorCategory::input, "structure batchnorm must directly follow its weight layer");
  }

  if (sc.count != B || int(sc.tan.size()) != L) {
    sc.count = B;
    sc.tan.assign(L, {});
    sc.tan_raw.assign(L, {});
  }
  sc.active.assign(L, 0);
  sc.plo.assign(L, 0);
  sc.phi.assign(L, 0);
  if (sc.col.size() < max_col_) sc.col.assign(max_col_, 0.0);

  for (int i = layer; i < L; ++i) {
    const Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    bool act = (i == layer) || (i == bn_layer) ||
               (nd.input >= layer && sc.active[nd.input]);
    for (const AddIn& a : nd.adds) act = act || (a.src >= layer && sc.active[a.src]);
    if (!act) continue;
    sc.active[i] = 1;

    if (sc.tan[i].size() != std::size_t(B) * nd.post_size)
      sc.tan[i].assign(std::size_t(B) * nd.post_size, 0.0);
    if (!nd.adds.empty() && sc.tan_raw[i].size() != std::size_t(B) * nd.raw_size)
      sc.tan_raw[i].assign(std::size_t(B) * nd.raw_size, 0.0);
    double* traw = nd.adds.empty() ? sc.tan[i].data() : sc.tan_raw[i].data();

    const bool in_act = nd.input >= layer && sc.active[nd.input];
    const double* tin = in_act ? sc.tan[nd.input].data() : nullptr;
    const int ilo = in_act ? sc.plo[nd.input] : 0;
    const int ihi = in_act ? sc.phi[nd.input] : 0;
    const int plane = nd.out_h * nd.out_w;
    const int in_plane = nd.in_h * nd.in_w;
    int rlo = 0, rhi = 0;

    if (i == layer) {
      // the tangent of this node's raw output along its own channel's
      // parameters equals that channel's activation plane
      const double* oval =
          nd.adds.empty() ? cache.val[i].data() : cache.raw[i].data();
      rlo = channel * plane;
      rhi = rlo + plane;
      for (int b = 0; b < B; ++b)
        std::memcpy(traw + std::size_t(b) * nd.raw_size + rlo,
                    oval + std::size_t(b) * nd.raw_size + rlo, sizeof(double) * plane);
    } else {
      switch (l.type) {
        case LayerType::dense: {
          std::memset(traw, 0, sizeof(double) * std::size_t(B) * nd.raw_size);
          if (ihi > ilo) {
            const double* w = p.data() + nd.pinfo.offset;
            const int len = ihi - ilo;
            for (int b = 0; b < B; ++b) {
              const double* tb = tin + std::size_t(b) * nd.in_size + ilo;
              double* y = traw + std::size_t(b) * nd.raw_c;
              for (int m = 0; m < nd.raw_c; ++m)
                y[m] = kernels::dot(w + std::size_t(m) * nd.in_size + ilo, tb, len);
            }
          }
          rlo = 0;
          rhi = nd.raw_size;
          break;
        }
        case LayerType::conv: {
          std::memset(traw, 0, sizeof(double) * std::size_t(B) * nd.raw_size);
          if (ihi > ilo) {
            const double* w = p.data() + nd.pinfo.offset;
            const int kk = nd.in_c * l.kh * l.kw;
            const int c0 = ilo / in_plane;
            const int c1 = (ihi + in_plane - 1) / in_plane;
            const int sub = (c1 - c0) * l.kh * l.kw;
            for (int b = 0; b < B; ++b) {
              im2col(tin + std::size_t(b) * nd.in_size, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw,
                     l.stride, l.pad, nd.out_h, nd.out_w, c0, c1, sc.col.data());
              double* y = traw + std::size_t(b) * nd.raw_size;
              for (int m = 0; m < nd.raw_c; ++m) {
                const double* wrow = w + std::size_t(m) * kk + std::size_t(c0) * l.kh * l.kw;
                double* ym = y + std::size_t(m) * plane;
                for (int k = 0; k < sub; ++k)
                  if (wrow[k] != 0.0)
                    kernels::axpy(wrow[k], sc.col.data() + std::size_t(k) * plane, ym, plane);
              }
            }
          }
          rlo = 0;
          rhi = nd.raw_size;
          break;
        }
        case LayerType::relu: {
          const double* gate = cache.val[nd.input].data();
          const int len = ihi - ilo;
          if (len > 0)
            for (int b = 0; b < B; ++b)
              kernels::relu_gate(gate + std::size_t(b) * nd.in_size + ilo,
                                 tin + std::size_t(b) * nd.in_size + ilo,
                                 traw + std::size_t(b) * nd.raw_size + ilo, len);
          rlo = ilo;
          rhi = ihi;
          break;
        }
        case LayerType::avgpool: {
          const int c0 = ilo / in_plane;
          const int c1 = (ihi + in_plane - 1) / in_plane;
          const double inv = 1.0 / (l.kh * l.kw);
          for (int b = 0; b < B; ++b)
            for (int c = c0; c < c1; ++c) {
              const double* xp = tin + (std::size_t(b) * nd.in_c + c) * in_plane;
              double* yp = traw + (std::size_t(b) * nd.raw_c + c) * plane;
              for (int oy = 0; oy < nd.out_h; ++oy)
                for (int ox = 0; ox < nd.out_w; ++ox) {
                  double acc = 0.0;
                  for (int ky = 0; ky < l.kh; ++ky) {
                    const double* row =
                        xp + std::size_t(oy * l.stride + ky) * nd.in_w + ox * l.stride;
                    for (int kx = 0; kx < l.kw; ++kx) acc += row[kx];
                  }
                  yp[oy * nd.out_w + ox] = acc * inv;
                }
            }
          rlo = c0 * plane;
          rhi = c1 * plane;
          break;
        }
        case LayerType::batchnorm: {
          const double* gamma = p.data() + nd.pinfo.offset;
          const double* beta = gamma + nd.raw_c;
          const int c0 = ilo / in_plane;
          const int c1 = (ihi + in_plane - 1) / in_plane;
          for (int c = c0; c < c1; ++c) {
            const double var = s[nd.pinfo.state_offset + nd.raw_c + c];
            const double a = gamma[c] / std::sqrt(var + kBnEps);
            for (int b = 0; b < B; ++b) {
              const double* sp = tin + (std::size_t(b) * nd.in_c + c) * plane;
              double* dp = traw + (std::size_t(b) * nd.raw_c + c) * plane;
              for (int q = 0; q < plane; ++q) dp[q] = a * sp[q];
            }
          }
          rlo = c0 * plane;
          rhi = c1 * plane;
          if (i == bn_layer) {
            // this affine's own channel parameters ride along with the
            // structure: inject gamma_c * xhat + beta_c on the owner channel
            require(channel >= c0 && channel < c1, ErrorCategory::internal,
                    "batchnorm tangent support does not cover the owner channel");
            const double mean = s[nd.pinfo.state_offset + channel];
            const double var = s[nd.pinfo.state_offset + nd.raw_c + channel];
            const double k = 1.0 / std::sqrt(var + kBnEps);
            const double vgk = gamma[channel] * k;
            const double sh = beta[channel] - vgk * mean;
            const double* xin = cache.val[nd.input].data();
            for (int b = 0; b < B; ++b) {
              const double* xp = xin + (std::size_t(b) * nd.in_c + channel) * plane;
              double* yp = traw + (std::size_t(b) * nd.raw_c + channel) * plane;
              for (int q = 0; q < plane; ++q) yp[q] += vgk * xp[q] + sh;
            }
          }
          break;
        }
      }
    }

    if (nd.adds.empty()) {
      sc.plo[i] = rlo;
      sc.phi[i] = rhi;
    } else {
      // merge into the post layout: zero-fill a covering channel range, then
      // scatter the raw planes and every active residual input
      auto map_of = [&](const std::vector<int>& m, int k) { return m.empty() ? k : m[k]; };
      int clo = nd.post_c, chi = 0;
      const int rc0 = rlo / plane, rc1 = (rhi + plane - 1) / plane;
      if (rc1 > rc0) {
        clo = std::min(clo, map_of(nd.embed_map, rc0));
        chi = std::max(chi, map_of(nd.embed_map, rc1 - 1) + 1);
      }
      struct SrcRange {
        const AddIn* a;
        int c0, c1;
      };
      std::vector<SrcRange> srcs;
      for (const AddIn& a : nd.adds) {
        if (a.src < layer || !sc.active[a.src]) continue;
        const int sc0 = sc.plo[a.src] / plane;
        const int sc1 = (sc.phi[a.src] + plane - 1) / plane;
        if (sc1 <= sc0) continue;
        srcs.push_back({&a, sc0, sc1});
        clo = std::min(clo, map_of(a.map, sc0));
        chi = std::max(chi, map_of(a.map, sc1 - 1) + 1);
      }
      if (chi <= clo) {
        sc.plo[i] = sc.phi[i] = 0;
        sc.active[i] = 0;
        continue;
      }
      double* post = sc.tan[i].data();
      for (int b = 0; b < B; ++b)
        std::memset(post + (std::size_t(b) * nd.post_c + clo) * plane, 0,
                    sizeof(double) * std::size_t(chi - clo) * plane);
      if (rc1 > rc0)
        for (int b = 0; b < B; ++b)
          for (int k = rc0; k < rc1; ++k)
            std::memcpy(post + (std::size_t(b) * nd.post_c + map_of(nd.embed_map, k)) * plane,
                        traw + (std::size_t(b) * nd.raw_c + k) * plane, sizeof(double) * plane);
      for (const SrcRange& sr : srcs) {
        const double* sp = sc.tan[sr.a->src].data();
        const int spc = nodes_[sr.a->src].post_c;
        for (int b = 0; b < B; ++b)
          for (int k = sr.c0; k < sr.c1; ++k) {
            double* d = post + (std::size_t(b) * nd.post_c + map_of(sr.a->map, k)) * plane;
            kernels::vadd(d, sp + (std::size_t(b) * spc + k) * plane, d, plane);
          }
      }
      sc.plo[i] = clo * plane;
      sc.phi[i] = chi * plane;
    }
  }

  out.assign(std::size_t(B) * out_dim_, 0.0);
  if (sc.active[L - 1]) {
    const double* t = sc.tan[L - 1].data();
    const int lo = sc.plo[L - 1], hi = sc.phi[L - 1];
    for (int b = 0; b < B; ++b)
      std::memcpy(out.data() + std::size_t(b) * out_dim_ + lo,
                  t + std::size_t(b) * out_dim_ + lo, sizeof(double) * (hi - lo));
  }
}

// Gate-frozen forward of one output channel's signal: the owner layer emits
// only the masked channel (weights plus its own bias), and everything
// upstream of the owner or on a residual branch that bypasses it is a
// constant of that perturbation, so it contributes nothing. Downstream
// layers apply their weights without biases under the cached relu gates.
// This reproduces the inner product of the output jacobian with the
// structure's parameters; batchnorm breaks the identity and is rejected.
void Network::gated_forward_single(const EvalCache& cache, const std::vector<double>& p,
                                   int layer, int channel, std::vector<double>& out) const {
  require(!has_bn_, ErrorCategory::unsupported,
          "masked gated forward requires a batchnorm-free model");
  const int L = int(nodes_.size());
  const int B = cache.count;
  require(!cache.input.empty(), ErrorCategory::input, "activation cache is missing the input");
  require(layer >= 0 && layer < L, ErrorCategory::input, "structure layer out of range");
  const Node& own = nodes_[layer];
  require(own.layer.type == LayerType::conv || own.layer.type == LayerType::dense,
          ErrorCategory::input, "structure owner must be a weight layer");
  require(channel >= 0 && channel < own.raw_c, ErrorCategory::input,
          "structure channel out of range");

  std::vector<std::vector<double>> g(L), graw(L);
  std::vector<double> col(max_col_, 0.0);
  for (int i = 0; i < L; ++i) {
    const Node& nd = nodes_[i];
    g[i].assign(std::size_t(B) * nd.post_size, 0.0);
    if (!nd.adds.empty()) graw[i].assign(std::size_t(B) * nd.raw_size, 0.0);
  }
  for (int i = layer; i < L; ++i) {
    const Node& nd = nodes_[i];
    const LayerSpec& l = nd.layer;
    double* raw = nd.adds.empty() ? g[i].data() : graw[i].data();
    // the owner consumes the cached full activation; later layers consume the
    // propagated signal (zero when their producer precedes the owner)
    const double* in =
        i == layer ? (nd.input < 0 ? cache.input.data() : cache.val[nd.input].data())
                   : (nd.input < 0 ? nullptr : g[nd.input].data());
    const int plane = nd.out_h * nd.out_w;
    if (in == nullptr) {
      if (!nd.adds.empty()) embed_post(nd, g, raw, g[i].data(), B);
      continue;  // reads the model input directly: constant under the mask
    }

    switch (l.type) {
      case LayerType::dense: {
        const double* w = p.data() + nd.pinfo.offset;
        if (i == layer) {
          const double* bias = l.bias ? w + nd.pinfo.weight_count : nullptr;
          for (int b = 0; b < B; ++b)
            raw[std::size_t(b) * nd.raw_c + channel] =
                (bias ? bias[channel] : 0.0) +
                kernels::dot(w + std::size_t(channel) * nd.in_size,
                             in + std::size_t(b) * nd.in_size, nd.in_size);
        } else {
          gemm_nt(in, w, raw, B, nd.in_size, nd.raw_c);
        }
        break;
      }
      case LayerType::conv: {
        const double* w = p.data() + nd.pinfo.offset;
        const int kk = nd.in_c * l.kh * l.kw;
        for (int b = 0; b < B; ++b) {
          im2col(in + std::size_t(b) * nd.in_size, nd.in_c, nd.in_h, nd.in_w, l.kh, l.kw,
                 l.stride, l.pad, nd.out_h, nd.out_w, 0, nd.in_c, col.data());
          double* y = raw + std::size_t(b) * nd.raw_size;
          if (i == layer) {
            double* yc = y + std::size_t(channel) * plane;
            const double* bias = l.bias ? w + nd.pinfo.weight_count : nullptr;
            if (bias) std::fill(yc, yc + plane, bias[channel]);
            const double* wrow = w + std::size_t(channel) * kk;
            for (int k = 0; k < kk; ++k)
              if (wrow[k] != 0.0)
                kernels::axpy(wrow[k], col.data() + std::size_t(k) * plane, yc, plane);
          } else {
            gemm_nn(w, col.data(), y, nd.raw_c, kk, plane);
          }
        }
        break;
      }
      case LayerType::relu: {
        const double* gate =
            nd.input < 0 ? cache.input.data() : cache.val[nd.input].data();
        kernels::relu_gate(gate, in, raw, std::size_t(B) * nd.raw_size);
        break;
      }
      case LayerType::avgpool: {
        const double inv = 1.0 / (l.kh * l.kw);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < nd.raw_c; ++c) {
            const double* xp = in + (std::size_t(b) * nd.in_c + c) * nd.in_h * nd.in_w;
            double* yp = raw + (std::size_t(b) * nd.raw_c + c) * plane;
            for (int oy = 0; oy < nd.out_h; ++oy)
              for (int ox = 0; ox < nd.out_w; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < l.kh; ++ky) {
                  const double* row =
                      xp + std::size_t(oy * l.stride + ky) * nd.in_w + ox * l.stride;
                  for (int kx = 0; kx < l.kw; ++kx) acc += row[kx];
                }
                yp[oy * nd.out_w + ox] = acc * inv;
              }
          }
        break;
      }
      case LayerType::batchnorm:
        fail(ErrorCategory::unsupported, "masked gated forward hit a batchnorm layer");
    }

    if (!nd.adds.empty()) embed_post(nd, g, raw, g[i].data(), B);
  }
  out = std::move(g[L - 1]);
}

}  // namespace sosp
