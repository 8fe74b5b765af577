#pragma once

#include <cstddef>
#include <string>

// Low-level numeric kernels behind the layer engine.  Every kernel has a
// scalar reference implementation and (on x86-64) an AVX2+FMA variant; the
// active table is chosen once at startup from CPU capabilities and can be
// pinned with the SOSP_KERNELS environment variable ("scalar" or "avx2").
// Variants are equivalence-tested against the scalar reference; results may
// differ by reassociation rounding only.  Dispatch is fixed for the lifetime
// of the process, so repeated runs of one binary on one machine are bitwise
// reproducible.

namespace sosp::kernels {

struct KernelTable {
  const char* name;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // sum_i a[i] * w[i] * b[i]
  double (*dot3)(const double* a, const double* w, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x[i] *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  // z[i] = x[i] + y[i]
  void (*vadd)(const double* x, const double* y, double* z, std::size_t n);
  // y[i] = max(x[i], 0)
  void (*relu)(const double* x, double* y, std::size_t n);
  // out[i] = pre[i] >= 0 ? g[i] : 0
  void (*relu_gate)(const double* pre, const double* g, double* out, std::size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the build or the CPU lacks AVX2+FMA support
const KernelTable* avx2_table();

// active table (env override > CPU detection > scalar)
const KernelTable& active();
const char* active_name();

// test hook: force a table ("scalar"/"avx2"); returns false if unavailable
bool force(const std::string& name);

// convenience forwarders through the active table
inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline double dot3(const double* a, const double* w, const double* b, std::size_t n) {
  return active().dot3(a, w, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline void scale(double alpha, double* x, std::size_t n) {
  active().scale(alpha, x, n);
}
inline void vadd(const double* x, const double* y, double* z, std::size_t n) {
  active().vadd(x, y, z, n);
}
inline void relu(const double* x, double* y, std::size_t n) {
  active().relu(x, y, n);
}
inline void relu_gate(const double* pre, const double* g, double* out, std::size_t n) {
  active().relu_gate(pre, g, out, n);
}
inline double sum(const double* x, std::size_t n) { return active().sum(x, n); }

}  // namespace sosp::kernels
