#pragma once

// Joint log density h(eta) = log f_score + log f_attend + log prior, its
// derivatives, and the first-order approximation of the marginal likelihood:
//
//   loglik ~= h(eta_hat) + (q/2) log 2*pi - 0.5 * logdet(-H(eta_hat))
//
// where eta_hat maximizes h. -H = S'R^-1 S + Z' Omega Z + G^-1 is positive
// definite everywhere because the probit weights are strictly positive, so a
// damped Newton search with a sparse LDLT factorization finds the mode.

#include <Eigen/SparseCholesky>

#include <cmath>
#include <memory>
#include <vector>

#include "cpmvam/design.hpp"
#include "cpmvam/normal.hpp"
#include "cpmvam/types.hpp"

namespace cpmvam {

using SparseFactor = Eigen::SimplicialLDLT<SpMat>;

/// Everything fixed across likelihood evaluations for one (cohort, spec) pair.
struct JointProblem {
  const CohortData* cohort = nullptr;
  ModelSpec spec;
  EtaLayout layout;
  DesignMatrices dm;
};

inline JointProblem make_problem(const CohortData& c, const ModelSpec& spec) {
  JointProblem p;
  p.cohort = &c;
  p.spec = spec;
  p.layout = build_eta_layout(c, spec.mechanism);
  p.dm = build_designs(c, spec, p.layout);
  return p;
}

inline void check_params(const ParameterSet& p, const JointProblem& prob) {
  if (p.beta_score.size() != prob.dm.X.cols())
    throw Error("beta_score has " + std::to_string(p.beta_score.size()) +
                " entries, design has " + std::to_string(prob.dm.X.cols()) +
                " columns");
  if (has_attendance(prob.spec.mechanism) &&
      p.beta_attnd.size() != prob.dm.W.cols())
    throw Error("beta_attnd has " + std::to_string(p.beta_attnd.size()) +
                " entries, design has " + std::to_string(prob.dm.W.cols()) +
                " columns");
  if (p.sigma2.size() != prob.layout.T)
    throw Error("sigma2 needs one entry per year");
  for (int g = 0; g < p.sigma2.size(); ++g)
    if (!(p.sigma2[g] > 0.0))
      throw Error("sigma2[" + std::to_string(g + 1) + "] must be positive");
}

struct ObjectiveParts {
  double value = 0.0;
  Vec grad;
  SpMat neg_hess;
};

/// Caches fixed-effect predictors, row supports, and the Hessian sparsity
/// pattern for repeated evaluations at one parameter value. The assembled
/// pattern is identical at every eta, so a single symbolic factorization
/// serves the whole mode search.
class ObjectiveEvaluator {
 public:
  ObjectiveEvaluator(const ParameterSet& p, const JointProblem& prob)
      : prob_(&prob), params_(&p), G_(assemble_G(p, prob.layout)) {
    check_params(p, prob);
    xbeta_ = prob.dm.X * p.beta_score;
    if (prob.dm.n_att_rows() > 0) wbeta_ = prob.dm.W * p.beta_attnd;
    inv_sigma2_.resize(prob.dm.n_score_rows());
    for (int k = 0; k < prob.dm.n_score_rows(); ++k)
      inv_sigma2_[k] = 1.0 / p.sigma2[prob.dm.score_row_year[k] - 1];
    s_rows_ = row_supports(prob.dm.S);
    z_rows_ = row_supports(prob.dm.Z);
  }

  const GOperator& G() const { return G_; }
  const JointProblem& problem() const { return *prob_; }

  double log_f_score_at(const Vec& eta) const {
    const Vec resid = prob_->dm.y - xbeta_ - prob_->dm.S * eta;
    double s = 0.0;
    for (int k = 0; k < resid.size(); ++k)
      s += -0.5 * (kLog2Pi - std::log(inv_sigma2_[k])) -
           0.5 * resid[k] * resid[k] * inv_sigma2_[k];
    return s;
  }

  double log_f_attend_at(const Vec& eta) const {
    if (prob_->dm.n_att_rows() == 0) return 0.0;
    const Vec v = wbeta_ + prob_->dm.Z * eta;
    double s = 0.0;
    for (int k = 0; k < v.size(); ++k)
      s += log_norm_cdf(prob_->dm.att[k].r ? v[k] : -v[k]);
    return s;
  }

  double log_prior_at(const Vec& eta) const {
    return -0.5 * prob_->layout.q * kLog2Pi - 0.5 * G_.log_det() -
           0.5 * G_.quad_form(eta);
  }

  double value(const Vec& eta) const {
    return log_f_score_at(eta) + log_f_attend_at(eta) + log_prior_at(eta);
  }

  ObjectiveParts eval(const Vec& eta) const {
    const auto& dm = prob_->dm;
    ObjectiveParts out;
    out.grad = Vec::Zero(prob_->layout.q);
    std::vector<Triplet> trip;

    const Vec resid = dm.y - xbeta_ - dm.S * eta;
    double h = 0.0;
    for (int k = 0; k < resid.size(); ++k) {
      const double w = inv_sigma2_[k];
      h += -0.5 * (kLog2Pi - std::log(w)) - 0.5 * resid[k] * resid[k] * w;
      for (const auto& [c1, v1] : s_rows_[k]) {
        out.grad[c1] += v1 * resid[k] * w;
        for (const auto& [c2, v2] : s_rows_[k])
          trip.emplace_back(c1, c2, v1 * v2 * w);
      }
    }
    if (dm.n_att_rows() > 0) {
      const Vec v = wbeta_ + dm.Z * eta;
      for (int k = 0; k < v.size(); ++k) {
        const double sign = dm.att[k].r ? 1.0 : -1.0;
        const double u = sign * v[k];
        h += log_norm_cdf(u);
        const double lam = inv_mills(u);
        const double omega = lam * (u + lam);
        for (const auto& [c1, v1] : z_rows_[k]) {
          out.grad[c1] += v1 * sign * lam;
          for (const auto& [c2, v2] : z_rows_[k])
            trip.emplace_back(c1, c2, v1 * v2 * omega);
        }
      }
    }
    h += log_prior_at(eta);
    out.grad -= G_.solve(eta);
    G_.add_inverse_triplets(trip);

    out.value = h;
    out.neg_hess.resize(prob_->layout.q, prob_->layout.q);
    out.neg_hess.setFromTriplets(trip.begin(), trip.end());
    return out;
  }

 private:
  static std::vector<std::vector<std::pair<int, double>>> row_supports(
      const SpMat& A) {
    std::vector<std::vector<std::pair<int, double>>> rows(A.rows());
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it)
        rows[it.row()].emplace_back(static_cast<int>(it.col()), it.value());
    return rows;
  }

  const JointProblem* prob_;
  const ParameterSet* params_;
  GOperator G_;
  Vec xbeta_, wbeta_;
  Vec inv_sigma2_;
  std::vector<std::vector<std::pair<int, double>>> s_rows_, z_rows_;
};

inline double log_f_score(const Vec& eta, const ParameterSet& p,
                          const JointProblem& prob) {
  return ObjectiveEvaluator(p, prob).log_f_score_at(eta);
}

inline double log_f_attend(const Vec& eta, const ParameterSet& p,
                           const JointProblem& prob) {
  return ObjectiveEvaluator(p, prob).log_f_attend_at(eta);
}

inline double log_prior(const Vec& eta, const ParameterSet& p,
                        const JointProblem& prob) {
  return ObjectiveEvaluator(p, prob).log_prior_at(eta);
}

inline ObjectiveParts objective_h(const Vec& eta, const ParameterSet& p,
                                  const JointProblem& prob) {
  return ObjectiveEvaluator(p, prob).eval(eta);
}

struct ModeOptions {
  double tol = 1e-9;      // on the max-norm of the gradient, relative to 1+|h|
  int max_iter = 200;
  int max_halvings = 50;
};

struct LaplaceState {
  Vec eta_hat;
  double h = 0.0;            // joint log density at the mode
  double logdet_neg_hess = 0.0;
  double neg2ll = 0.0;
  int iters = 0;
  double grad_inf = 0.0;
  std::shared_ptr<SparseFactor> factor;  // of -H at the mode
  std::shared_ptr<SpMat> neg_hess;
};

/// Damped Newton ascent of h from eta = 0 (or a warm start), then the
/// first-order approximation of -2 log marginal likelihood.
inline LaplaceState laplace_loglik(const ParameterSet& p,
                                   const JointProblem& prob,
                                   const ModeOptions& opts = {},
                                   const Vec* warm = nullptr) {
  ObjectiveEvaluator ev(p, prob);
  const int q = prob.layout.q;
  Vec eta = warm && warm->size() == q ? *warm : Vec::Zero(q);

  auto factor = std::make_shared<SparseFactor>();
  bool analyzed = false;
  auto factorize = [&](const SpMat& A) {
    if (!analyzed) {
      factor->analyzePattern(A);
      analyzed = true;
    }
    factor->factorize(A);
    if (factor->info() != Eigen::Success ||
        factor->vectorD().minCoeff() <= 0.0)
      throw Error("mode search: the joint log density lost concavity");
  };

  ObjectiveParts parts = ev.eval(eta);
  if (!std::isfinite(parts.value))
    throw Error("mode search: joint log density is not finite at the start");
  int iter = 0;
  while (true) {
    if (parts.grad.lpNorm<Eigen::Infinity>() <=
        opts.tol * (1.0 + std::fabs(parts.value)))
      break;
    if (iter >= opts.max_iter)
      throw Error("mode search: no convergence in " +
                  std::to_string(opts.max_iter) + " iterations");
    factorize(parts.neg_hess);
    const Vec d = factor->solve(parts.grad);
    const double gd = parts.grad.dot(d);
    double alpha = 1.0;
    int halvings = 0;
    while (true) {
      const Vec trial = eta + alpha * d;
      const double ht = ev.value(trial);
      if (std::isfinite(ht) &&
          ht >= parts.value + 1e-4 * alpha * gd -
                    1e-12 * (1.0 + std::fabs(parts.value))) {
        eta = trial;
        break;
      }
      if (++halvings > opts.max_halvings)
        throw Error("mode search: step halving failed after " +
                    std::to_string(opts.max_halvings) + " halvings");
      alpha *= 0.5;
    }
    parts = ev.eval(eta);
    ++iter;
  }
  factorize(parts.neg_hess);

  LaplaceState st;
  st.eta_hat = eta;
  st.h = parts.value;
  st.iters = iter;
  st.grad_inf = parts.grad.lpNorm<Eigen::Infinity>();
  st.logdet_neg_hess = factor->vectorD().array().log().sum();
  st.neg2ll = -2.0 * st.h - q * kLog2Pi + st.logdet_neg_hess;
  st.factor = factor;
  st.neg_hess = std::make_shared<SpMat>(std::move(parts.neg_hess));
  return st;
}

}  // namespace cpmvam
