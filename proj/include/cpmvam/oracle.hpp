#pragma once

// Near-exact marginal likelihood for small effect dimensions, used to audit
// the first-order approximation: tensor-product Gauss-Hermite quadrature
// centered and scaled at the mode, plus a randomized quasi-Monte Carlo
// estimate with a jackknife error bar.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cpmvam/likelihood.hpp"
#include "cpmvam/rng.hpp"

namespace cpmvam {

/// Gauss-Hermite nodes and weights for weight function exp(-x^2), by
/// eigendecomposition of the Jacobi matrix (symmetric tridiagonal, zero
/// diagonal, off-diagonal sqrt(k/2)).
inline void hermite_rule(int m, Vec& nodes, Vec& weights) {
  if (m < 1) throw Error("hermite_rule: need at least one node");
  Mat J = Mat::Zero(m, m);
  for (int k = 1; k < m; ++k) {
    const double b = std::sqrt(k / 2.0);
    J(k - 1, k) = b;
    J(k, k - 1) = b;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  if (es.info() != Eigen::Success) throw Error("hermite_rule: eigensolve failed");
  constexpr double kSqrtPi = 1.7724538509055160273;
  nodes = es.eigenvalues();
  weights =
      kSqrtPi * es.eigenvectors().row(0).transpose().array().square().matrix();
}

namespace detail {

/// Mode, a Cholesky factor C with C C' = (-H)^-1, and log|det C|.
struct ModeFrame {
  LaplaceState state;
  Mat C;
  double logdet_C = 0.0;
};

inline ModeFrame mode_frame(const ParameterSet& p, const JointProblem& prob) {
  ModeFrame fr;
  fr.state = laplace_loglik(p, prob);
  const Mat dense = Mat(*fr.state.neg_hess);
  Eigen::LLT<Mat> llt(dense.inverse());
  if (llt.info() != Eigen::Success)
    throw Error("quadrature: mode covariance is not positive definite");
  fr.C = llt.matrixL();
  for (int k = 0; k < fr.C.rows(); ++k) fr.logdet_C += std::log(fr.C(k, k));
  return fr;
}

/// Odometer over the tensor grid; calls visit(x, log_weight) per point.
template <typename F>
void tensor_grid(int q, const Vec& nodes, const Vec& log_w, F&& visit) {
  std::vector<int> idx(q, 0);
  const int m = static_cast<int>(nodes.size());
  Vec x(q);
  while (true) {
    double lw = 0.0;
    for (int d = 0; d < q; ++d) {
      x[d] = nodes[idx[d]];
      lw += log_w[idx[d]];
    }
    visit(x, lw);
    int d = 0;
    while (d < q && ++idx[d] == m) idx[d++] = 0;
    if (d == q) break;
  }
}

}  // namespace detail

inline constexpr long kMaxQuadraturePoints = 100000000;  // 1e8

/// -2 log marginal likelihood by adaptive tensor Gauss-Hermite quadrature.
inline double quad_loglik(const ParameterSet& p, const JointProblem& prob,
                          int nodes_per_dim = 20) {
  const int q = prob.layout.q;
  double total = 1.0;
  for (int d = 0; d < q; ++d) {
    total *= nodes_per_dim;
    if (total > static_cast<double>(kMaxQuadraturePoints))
      throw Error("quad_loglik: grid exceeds " +
                  std::to_string(kMaxQuadraturePoints) + " points");
  }
  const detail::ModeFrame fr = detail::mode_frame(p, prob);
  const ObjectiveEvaluator ev(p, prob);
  Vec nodes, weights;
  hermite_rule(nodes_per_dim, nodes, weights);
  const Vec log_w = weights.array().log();

  // With eta = mode + sqrt(2) C x:
  //   log integral = (q/2) log 2 + log|det C|
  //                  + logsumexp_k(log W_k + |x_k|^2 + h(eta_k)).
  double max_term = -std::numeric_limits<double>::infinity();
  detail::tensor_grid(q, nodes, log_w, [&](const Vec& x, double lw) {
    const Vec eta = fr.state.eta_hat + kSqrt2 * (fr.C * x);
    const double term = lw + x.squaredNorm() + ev.value(eta);
    if (term > max_term) max_term = term;
  });
  double sum = 0.0;
  detail::tensor_grid(q, nodes, log_w, [&](const Vec& x, double lw) {
    const Vec eta = fr.state.eta_hat + kSqrt2 * (fr.C * x);
    sum += std::exp(lw + x.squaredNorm() + ev.value(eta) - max_term);
  });
  const double loglik =
      0.5 * q * std::log(2.0) + fr.logdet_C + max_term + std::log(sum);
  return -2.0 * loglik;
}

/// Posterior mean of the effects under the same grid.
inline Vec quad_posterior_means(const ParameterSet& p, const JointProblem& prob,
                                int nodes_per_dim = 20) {
  const int q = prob.layout.q;
  double total = 1.0;
  for (int d = 0; d < q; ++d) {
    total *= nodes_per_dim;
    if (total > static_cast<double>(kMaxQuadraturePoints))
      throw Error("quad_posterior_means: grid exceeds " +
                  std::to_string(kMaxQuadraturePoints) + " points");
  }
  const detail::ModeFrame fr = detail::mode_frame(p, prob);
  const ObjectiveEvaluator ev(p, prob);
  Vec nodes, weights;
  hermite_rule(nodes_per_dim, nodes, weights);
  const Vec log_w = weights.array().log();

  double max_term = -std::numeric_limits<double>::infinity();
  detail::tensor_grid(q, nodes, log_w, [&](const Vec& x, double lw) {
    const Vec eta = fr.state.eta_hat + kSqrt2 * (fr.C * x);
    max_term = std::max(max_term, lw + x.squaredNorm() + ev.value(eta));
  });
  double denom = 0.0;
  Vec num = Vec::Zero(q);
  detail::tensor_grid(q, nodes, log_w, [&](const Vec& x, double lw) {
    const Vec eta = fr.state.eta_hat + kSqrt2 * (fr.C * x);
    const double w = std::exp(lw + x.squaredNorm() + ev.value(eta) - max_term);
    denom += w;
    num += w * eta;
  });
  return num / denom;
}

struct QmcResult {
  double neg2ll = 0.0;
  double error_bar = 0.0;  // jackknife-style spread across shifted blocks
  int blocks = 0;
  long points = 0;
};

namespace detail {

inline double radical_inverse(long index, int base) {
  double inv = 1.0 / base, f = inv, x = 0.0;
  while (index > 0) {
    x += (index % base) * f;
    index /= base;
    f *= inv;
  }
  return x;
}

inline constexpr int kHaltonPrimes[] = {2,  3,  5,  7,  11, 13,
                                        17, 19, 23, 29, 31, 37};

}  // namespace detail

/// Importance-sampled marginal likelihood with a Halton sequence under
/// independent Cranley-Patterson shifts; the spread across shifted blocks
/// gives the error bar on the -2 loglik scale.
inline QmcResult qmc_loglik(const ParameterSet& p, const JointProblem& prob,
                            long n_points, std::uint64_t seed,
                            int n_blocks = 10) {
  const int q = prob.layout.q;
  if (q > 12)
    throw Error("qmc_loglik: dimension " + std::to_string(q) +
                " exceeds the supported limit of 12");
  if (n_blocks < 2) throw Error("qmc_loglik: need at least two blocks");
  const long per_block = std::max(1L, n_points / n_blocks);

  const detail::ModeFrame fr = detail::mode_frame(p, prob);
  const ObjectiveEvaluator ev(p, prob);
  const double log_prop_const = -0.5 * q * kLog2Pi - fr.logdet_C;

  Philox4x32 rng(seed);
  std::vector<double> block_log(n_blocks);
  for (int b = 0; b < n_blocks; ++b) {
    Vec shift(q);
    for (int d = 0; d < q; ++d) shift[d] = rng.uniform01();
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(per_block);
    for (long k = 0; k < per_block; ++k) {
      Vec z(q);
      for (int d = 0; d < q; ++d) {
        double u = detail::radical_inverse(k + 1, detail::kHaltonPrimes[d]) +
                   shift[d];
        u -= std::floor(u);
        u = std::min(std::max(u, 1e-15), 1.0 - 1e-15);
        z[d] = inv_norm_cdf(u);
      }
      const Vec eta = fr.state.eta_hat + fr.C * z;
      // log[f(eta)/proposal(eta)] with proposal N(mode, (-H)^-1).
      const double lt =
          ev.value(eta) - (log_prop_const - 0.5 * z.squaredNorm());
      terms[k] = lt;
      max_term = std::max(max_term, lt);
    }
    double sum = 0.0;
    for (double lt : terms) sum += std::exp(lt - max_term);
    block_log[b] = max_term + std::log(sum / per_block);
  }
  double lse_max = *std::max_element(block_log.begin(), block_log.end());
  double s = 0.0;
  for (double lb : block_log) s += std::exp(lb - lse_max);
  const double loglik = lse_max + std::log(s / n_blocks);

  double mean = 0.0;
  for (double lb : block_log) mean += lb;
  mean /= n_blocks;
  double var = 0.0;
  for (double lb : block_log) var += (lb - mean) * (lb - mean);
  var /= (n_blocks - 1);

  QmcResult res;
  res.neg2ll = -2.0 * loglik;
  res.error_bar = 2.0 * std::sqrt(var / n_blocks);
  res.blocks = n_blocks;
  res.points = per_block * n_blocks;
  return res;
}

}  // namespace cpmvam
