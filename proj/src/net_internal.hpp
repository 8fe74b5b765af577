#pragma once

// Shared internals of the layer engine: scratch buffers, im2col, and the
// small GEMM wrappers built on the dispatched kernels.

#include <cstring>
#include <vector>

#include "sosp/kernels.hpp"
#include "sosp/network.hpp"

namespace sosp {

struct Network::Ws {
  EvalCache c;
  // cotangents of post values / their directional derivatives
  std::vector<std::vector<double>> cot, cot_tan;
  // forward tangents
  std::vector<std::vector<double>> tan, tan_raw;
  std::vector<std::vector<double>> cot_raw, cot_tan_raw;  // nodes with adds
  std::vector<double> col, tcol, dcol, dtcol;             // im2col scratch
  std::vector<double> gate_scratch;
};

namespace netk {

constexpr int kChunk = 64;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

// C[M x N] += A[M x K] * B[K x N]
inline void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + std::size_t(m) * K;
    double* c = C + std::size_t(m) * N;
    for (int k = 0; k < K; ++k) {
      if (a[k] != 0.0) kernels::axpy(a[k], B + std::size_t(k) * N, c, N);
    }
  }
}

// C[M x N] += A[M x K] * B^T where B is stored [N x K]
inline void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + std::size_t(m) * K;
    double* c = C + std::size_t(m) * N;
    for (int n = 0; n < N; ++n) c[n] += kernels::dot(a, B + std::size_t(n) * K, K);
  }
}

// C[M x N] += A^T * B where A is stored [K x M]
inline void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int k = 0; k < K; ++k) {
    const double* a = A + std::size_t(k) * M;
    const double* b = B + std::size_t(k) * N;
    for (int m = 0; m < M; ++m) {
      if (a[m] != 0.0) kernels::axpy(a[m], b, C + std::size_t(m) * N, N);
    }
  }
}

// col[(c*kh*kw + ky*kw + kx) * (oh*ow) + oy*ow + ox] = padded x[c][...]
// only channels [c0, c1) are materialized, in-place at the start of col
inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int oh, int ow, int c0, int c1, double* col) {
  const int np = oh * ow;
  double* out = col;
  for (int c = c0; c < c1; ++c) {
    const double* plane = x + std::size_t(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          double* row = out + std::size_t(oy) * ow;
          if (iy < 0 || iy >= H) {
            std::memset(row, 0, sizeof(double) * ow);
            continue;
          }
          const double* src = plane + std::size_t(iy) * W;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            row[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
        out += np;
      }
    }
  }
}

inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* dx) {
  const int np = oh * ow;
  const double* in = col;
  for (int c = 0; c < C; ++c) {
    double* plane = dx + std::size_t(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const double* row = in + std::size_t(oy) * ow;
          double* dst = plane + std::size_t(iy) * W;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += row[ox];
          }
        }
        in += np;
      }
    }
  }
}

// running compensated (Neumaier) accumulator over equally shaped vectors
struct CompensatedVec {
  std::vector<double> sum, comp;
  void init(std::size_t n) {
    sum.assign(n, 0.0);
    comp.assign(n, 0.0);
  }
  void add(const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      double t = sum[i] + x[i];
      if (std::abs(sum[i]) >= std::abs(x[i]))
        comp[i] += (sum[i] - t) + x[i];
      else
        comp[i] += (x[i] - t) + sum[i];
      sum[i] = t;
    }
  }
  void finish(std::vector<double>& out, double scale) const {
    out.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) out[i] = (sum[i] + comp[i]) * scale;
  }
};

struct CompensatedScalar {
  double sum = 0.0, comp = 0.0;
  void add(double x) {
    double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

}  // namespace netk
}  // namespace sosp
