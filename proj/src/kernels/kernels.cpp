#include "sosp/kernels.hpp"

#include <cstdlib>

namespace sosp::kernels {

namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot3_scalar(const double* a, const double* w, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * w[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void vadd_scalar(const double* x, const double* y, double* z, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

void relu_scalar(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : 0.0;
}

void relu_gate_scalar(const double* pre, const double* g, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = pre[i] >= 0.0 ? g[i] : 0.0;
}

double sum_scalar(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

const KernelTable kScalar = {
    "scalar",     dot_scalar,  dot3_scalar,      axpy_scalar,
    scale_scalar, vadd_scalar, relu_scalar,      relu_gate_scalar,
    sum_scalar,
};

const KernelTable* pick_initial() {
  if (const char* env = std::getenv("SOSP_KERNELS")) {
    std::string want(env);
    if (want == "scalar") return &kScalar;
    if (want == "avx2" && avx2_table()) return avx2_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &kScalar;
}

const KernelTable* g_active = nullptr;

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

const KernelTable& active() {
  if (!g_active) g_active = pick_initial();
  return *g_active;
}

const char* active_name() { return active().name; }

bool force(const std::string& name) {
  if (name == "scalar") {
    g_active = &kScalar;
    return true;
  }
  if (name == "avx2") {
    if (const KernelTable* t = avx2_table()) {
      g_active = t;
      return true;
    }
    return false;
  }
  return false;
}

}  // namespace sosp::kernels
