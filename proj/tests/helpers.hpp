#pragma once

// Shared test scaffolding: dense reference implementations (mixed-model
// closed forms, a from-scratch joint density), finite-difference utilities,
// and random problem generators. Everything here is written with plain dense
// algebra so it exercises none of the sparse code paths under test.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cpmvam/likelihood.hpp"
#include "cpmvam/rng.hpp"
#include "cpmvam/simulate.hpp"
#include "cpmvam/types.hpp"

namespace testutil {

using cpmvam::Mat;
using cpmvam::Vec;

/// Dense block-diagonal random-effect covariance in layout order.
inline Mat dense_G(const cpmvam::ParameterSet& p, const cpmvam::EtaLayout& L) {
  Mat G = Mat::Zero(L.q, L.q);
  for (const auto& b : L.blocks) {
    const Mat& block =
        b.is_student ? p.gamma.gamma_stu : p.gamma.gamma_year[b.g - 1];
    G.block(b.offset, b.offset, b.dim, b.dim) = block;
  }
  return G;
}

struct LmmReference {
  double neg2ll = 0.0;
  Vec blup;
};

/// Closed-form Gaussian mixed model: y ~ N(X beta, S G S' + R). Valid only
/// when the problem has no attendance rows, where the marginal is exact.
inline LmmReference dense_lmm_reference(const cpmvam::ParameterSet& p,
                                        const cpmvam::JointProblem& prob) {
  const int N = prob.dm.n_score_rows();
  const Mat S = Mat(prob.dm.S);
  const Mat G = dense_G(p, prob.layout);
  Mat Sigma = S * G * S.transpose();
  for (int k = 0; k < N; ++k)
    Sigma(k, k) += p.sigma2[prob.dm.score_row_year[k] - 1];
  const Vec r = prob.dm.y - prob.dm.X * p.beta_score;
  Eigen::LLT<Mat> llt(Sigma);
  double logdet = 0.0;
  for (int k = 0; k < N; ++k) logdet += 2.0 * std::log(llt.matrixLLT()(k, k));
  const Vec sol = llt.solve(r);
  LmmReference out;
  out.neg2ll = N * cpmvam::kLog2Pi + logdet + r.dot(sol);
  out.blup = G * S.transpose() * sol;
  return out;
}

/// Joint log density written directly from its definition with dense algebra.
inline double dense_joint_h(const Vec& eta, const cpmvam::ParameterSet& p,
                            const cpmvam::JointProblem& prob) {
  const auto& dm = prob.dm;
  double h = 0.0;
  const Vec mean = dm.X * p.beta_score + Mat(dm.S) * eta;
  for (int k = 0; k < dm.n_score_rows(); ++k) {
    const double s2 = p.sigma2[dm.score_row_year[k] - 1];
    const double r = dm.y[k] - mean[k];
    h += -0.5 * std::log(2.0 * 3.14159265358979323846 * s2) -
         0.5 * r * r / s2;
  }
  if (dm.n_att_rows() > 0) {
    const Vec v = dm.W * p.beta_attnd + Mat(dm.Z) * eta;
    for (int k = 0; k < dm.n_att_rows(); ++k)
      h += cpmvam::log_norm_cdf(dm.att[k].r ? v[k] : -v[k]);
  }
  const Mat G = dense_G(p, prob.layout);
  Eigen::LLT<Mat> llt(G);
  double logdet = 0.0;
  for (int k = 0; k < G.rows(); ++k)
    logdet += 2.0 * std::log(llt.matrixLLT()(k, k));
  h += -0.5 * prob.layout.q * cpmvam::kLog2Pi - 0.5 * logdet -
       0.5 * eta.dot(llt.solve(eta));
  return h;
}

template <typename F>
Vec fd_gradient(F&& f, const Vec& x, double step = 1e-5) {
  Vec g(x.size());
  for (int k = 0; k < x.size(); ++k) {
    Vec xp = x, xm = x;
    const double h = step * (1.0 + std::fabs(x[k]));
    xp[k] += h;
    xm[k] -= h;
    g[k] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

template <typename F>
Mat fd_hessian(F&& f, const Vec& x, double step = 1e-4) {
  const int d = static_cast<int>(x.size());
  Mat H(d, d);
  const double f0 = f(x);
  for (int j = 0; j < d; ++j) {
    const double hj = step * (1.0 + std::fabs(x[j]));
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    H(j, j) = (f(xp) - 2.0 * f0 + f(xm)) / (hj * hj);
    for (int k = j + 1; k < d; ++k) {
      const double hk = step * (1.0 + std::fabs(x[k]));
      Vec v = x;
      v[j] += hj;
      v[k] += hk;
      const double fpp = f(v);
      v[k] = x[k] - hk;
      const double fpm = f(v);
      v[j] = x[j] - hj;
      const double fmm = f(v);
      v[k] = x[k] + hk;
      const double fmp = f(v);
      H(j, k) = H(k, j) = (fpp - fpm - fmp + fmm) / (4.0 * hj * hk);
    }
  }
  return H;
}

/// Well-conditioned random covariance block.
inline Mat random_pd(int d, cpmvam::Philox4x32& rng, double scale = 0.3) {
  Mat A(d, d);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) A(a, b) = scale * rng.normal();
  return Mat(0.05 * Mat::Identity(d, d) + A * A.transpose() / d);
}

/// Random parameter set with the shapes the problem expects.
inline cpmvam::ParameterSet random_params(const cpmvam::JointProblem& prob,
                                          cpmvam::Philox4x32& rng,
                                          double attnd_mean = 0.8) {
  cpmvam::ParameterSet p;
  p.beta_score.resize(prob.dm.X.cols());
  for (int k = 0; k < p.beta_score.size(); ++k)
    p.beta_score[k] = 0.5 * rng.normal();
  p.beta_attnd.resize(prob.dm.W.cols());
  for (int k = 0; k < p.beta_attnd.size(); ++k)
    p.beta_attnd[k] = attnd_mean + 0.2 * rng.normal();
  p.sigma2.resize(prob.layout.T);
  for (int g = 0; g < prob.layout.T; ++g)
    p.sigma2[g] = 0.2 + rng.uniform01();
  p.gamma.gamma_stu = random_pd(prob.layout.student_dim, rng);
  for (int g = 1; g <= prob.layout.T; ++g)
    p.gamma.gamma_year.push_back(random_pd(prob.layout.teacher_dim(g), rng));
  return p;
}

/// Simulated cohort with the canonical truth, as a one-liner for tests.
inline cpmvam::SimResult quick_sim(int n, int T, std::vector<int> m,
                                   cpmvam::Mechanism mech, std::uint64_t seed,
                                   double completion = 0.85,
                                   bool covariates = false) {
  cpmvam::SimDesign d;
  d.n = n;
  d.T = T;
  d.m = std::move(m);
  d.mechanism = mech;
  d.covariates = covariates;
  d.seed = seed;
  d.truth = cpmvam::default_truth(T, mech, completion, covariates);
  return cpmvam::generate(d);
}

inline cpmvam::ModelSpec make_spec(cpmvam::Mechanism mech) {
  cpmvam::ModelSpec spec;
  spec.mechanism = mech;
  return spec;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (static_cast<double>(v.size()) - 1.0));
}

}  // namespace testutil
