#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sosp/structures.hpp"

namespace sosp {

// Loss-curvature factor of the Gauss-Newton form.  Squared loss: identity.
// Cross-entropy: diag(sigma) - sigma sigma^T for the sample's softmax
// probabilities (PSD, rows sum to zero, independent of the label).
struct RMatrix {
  LossKind kind = LossKind::squared;
  int dim = 0;
  std::vector<double> sigma;  // cross-entropy only
};

RMatrix r_matrix(const double* output, int dim, LossKind kind);

// u^T R v in O(dim): identity -> plain dot; cross-entropy ->
// sum_j u_j sigma_j v_j - (sum_j u_j sigma_j)(sum_j v_j sigma_j)
double contract_r(const double* u, const double* v, const RMatrix& r);

// dense dim x dim matrix, test/oracle support
std::vector<double> r_matrix_dense(const RMatrix& r);

// |theta_s . g| for every structure; g is the mean loss gradient
std::vector<double> first_order_terms(const Segmentation& seg,
                                      const std::vector<double>& params,
                                      const std::vector<double>& grad);

struct QMatrix {
  int size = 0;
  std::vector<double> q;  // row-major size x size
  double at(int s, int t) const { return q[std::size_t(s) * size + t]; }
  double& at(int s, int t) { return q[std::size_t(s) * size + t]; }
};

// Pairwise sensitivity matrix: Q_{s,s'} = 1/2 |avg_n contract_r(phi_n
// theta_s, phi_n theta_s', R_n)| plus the first-order term on the diagonal.
// The projected vectors phi_n theta_s are directional derivatives computed
// structure by structure; the D x P Jacobian is never materialized here.
QMatrix q_matrix(const Network& net, const std::vector<double>& params,
                 const std::vector<double>& state, const Batch& batch,
                 const Segmentation& seg, LossKind kind);

struct SaliencyEntry {
  int structure = 0;
  double first_order = 0.0;
  double second_order = 0.0;
  double total = 0.0;
};

struct SaliencyVector {
  std::string method;
  std::vector<SaliencyEntry> entries;
};

// per-structure saliency |theta_s . g| + 1/2 |theta_s . H theta_struc|,
// with the Hessian applied exactly via one Hessian-vector product
SaliencyVector sosp_h_saliency(const Network& net, const std::vector<double>& params,
                               const std::vector<double>& state, const Batch& batch,
                               const Segmentation& seg, LossKind kind);

// assemble a saliency vector from precomputed g and h = H v vectors
// (drivers use this to source the first-order term from a different batch
// or to fold weight-decay curvature in)
SaliencyVector sosp_h_from_parts(const Segmentation& seg, const std::vector<double>& params,
                                 const std::vector<double>& grad, const std::vector<double>& hv);

// uniform subsample without replacement; n_prime == n yields a permutation
std::vector<int> subsample_indices(int n, int n_prime, std::uint64_t seed);

// serialization
std::string saliency_to_json(const SaliencyVector& v);
SaliencyVector saliency_from_json(const std::string& text);
std::string q_matrix_to_json(const QMatrix& q);
QMatrix q_matrix_from_json(const std::string& text);
void save_q_matrix(const QMatrix& q, const std::string& path);  // binary: header + row-major f64
QMatrix load_q_matrix(const std::string& path);

}  // namespace sosp
