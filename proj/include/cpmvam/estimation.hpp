#pragma once

// Maximum likelihood by EM with a first-order E-step: the E-step runs the mode
// search and reads posterior moments off the sparse factorization; the M-step
// has closed forms for the Gaussian parameters and takes one damped Newton
// step on the approximate marginal for the attendance coefficients.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cpmvam/likelihood.hpp"

namespace cpmvam {

// ---------------------------------------------------------------------------
// Parameter packing: natural scale (reported) and unconstrained scale (used
// for finite differencing). Covariance blocks map through the log-Cholesky
// transform, so every unconstrained vector is a valid parameter set.

struct ParamPacking {
  std::vector<std::string> names;  // natural-scale entries, in order
  int p_score = 0;
  int p_attnd = 0;
  int T = 0;
  int stu_dim = 1;
  std::vector<int> year_dims;

  int size() const { return static_cast<int>(names.size()); }
};

inline ParamPacking make_packing(const JointProblem& prob) {
  ParamPacking pk;
  pk.p_score = static_cast<int>(prob.dm.X.cols());
  pk.p_attnd = static_cast<int>(prob.dm.W.cols());
  pk.T = prob.layout.T;
  pk.stu_dim = prob.layout.student_dim;
  for (int g = 1; g <= pk.T; ++g)
    pk.year_dims.push_back(prob.layout.teacher_dim(g));
  pk.names = prob.dm.score_colnames;
  for (const auto& nm : prob.dm.attnd_colnames) pk.names.push_back(nm);
  for (int g = 1; g <= pk.T; ++g)
    pk.names.push_back("sigma2[" + std::to_string(g) + "]");
  auto block_names = [&](const std::string& base, int d) {
    for (int a = 0; a < d; ++a)
      for (int b = 0; b <= a; ++b)
        pk.names.push_back(base + "[" + std::to_string(a + 1) + "," +
                           std::to_string(b + 1) + "]");
  };
  block_names("gamma_stu", pk.stu_dim);
  for (int g = 1; g <= pk.T; ++g)
    block_names("gamma_year[" + std::to_string(g) + "]", pk.year_dims[g - 1]);
  return pk;
}

inline Vec pack_natural(const ParameterSet& p, const ParamPacking& pk) {
  Vec v(pk.size());
  int k = 0;
  for (int j = 0; j < pk.p_score; ++j) v[k++] = p.beta_score[j];
  for (int j = 0; j < pk.p_attnd; ++j) v[k++] = p.beta_attnd[j];
  for (int g = 0; g < pk.T; ++g) v[k++] = p.sigma2[g];
  auto pack_block = [&](const Mat& B) {
    for (int a = 0; a < B.rows(); ++a)
      for (int b = 0; b <= a; ++b) v[k++] = B(a, b);
  };
  pack_block(p.gamma.gamma_stu);
  for (int g = 0; g < pk.T; ++g) pack_block(p.gamma.gamma_year[g]);
  return v;
}

inline Vec to_unconstrained(const ParameterSet& p, const ParamPacking& pk) {
  Vec v(pk.size());
  int k = 0;
  for (int j = 0; j < pk.p_score; ++j) v[k++] = p.beta_score[j];
  for (int j = 0; j < pk.p_attnd; ++j) v[k++] = p.beta_attnd[j];
  for (int g = 0; g < pk.T; ++g) v[k++] = std::log(p.sigma2[g]);
  auto pack_block = [&](const Mat& B, const std::string& name) {
    Eigen::LLT<Mat> llt(B);
    if (llt.info() != Eigen::Success)
      throw Error(name + " is not positive definite");
    const Mat L = llt.matrixL();
    for (int a = 0; a < B.rows(); ++a)
      for (int b = 0; b <= a; ++b)
        v[k++] = (a == b) ? std::log(L(a, a)) : L(a, b);
  };
  pack_block(p.gamma.gamma_stu, "gamma_stu");
  for (int g = 0; g < pk.T; ++g)
    pack_block(p.gamma.gamma_year[g],
               "gamma_year[" + std::to_string(g + 1) + "]");
  return v;
}

inline ParameterSet from_unconstrained(const Vec& v, const ParamPacking& pk) {
  if (v.size() != pk.size())
    throw Error("from_unconstrained: wrong parameter count");
  ParameterSet p;
  int k = 0;
  p.beta_score.resize(pk.p_score);
  for (int j = 0; j < pk.p_score; ++j) p.beta_score[j] = v[k++];
  p.beta_attnd.resize(pk.p_attnd);
  for (int j = 0; j < pk.p_attnd; ++j) p.beta_attnd[j] = v[k++];
  p.sigma2.resize(pk.T);
  for (int g = 0; g < pk.T; ++g) p.sigma2[g] = std::exp(v[k++]);
  auto unpack_block = [&](int d) {
    Mat L = Mat::Zero(d, d);
    for (int a = 0; a < d; ++a)
      for (int b = 0; b <= a; ++b)
        L(a, b) = (a == b) ? std::exp(v[k++]) : v[k++];
    return Mat(L * L.transpose());
  };
  p.gamma.gamma_stu = unpack_block(pk.stu_dim);
  for (int g = 0; g < pk.T; ++g)
    p.gamma.gamma_year.push_back(unpack_block(pk.year_dims[g]));
  return p;
}

// ---------------------------------------------------------------------------
// E-step

struct EStepMoments {
  LaplaceState state;
  std::vector<Mat> block_cov;  // posterior covariance per layout block
  Vec score_row_qform;         // s' V s per score row
};

/// Mode search plus the selected entries of (-H)^-1 needed by the M-step:
/// per-block covariance matrices and the per-row quadratic forms. Each column
/// j of the inverse is reached through one sparse triangular solve.
inline EStepMoments e_step(const ParameterSet& p, const JointProblem& prob,
                           const ModeOptions& opts = {},
                           const Vec* warm = nullptr) {
  EStepMoments mom;
  mom.state = laplace_loglik(p, prob, opts, warm);
  const auto& factor = *mom.state.factor;
  const int q = prob.layout.q;
  const Vec dinv = factor.vectorD().cwiseInverse();

  Vec e = Vec::Zero(q);
  auto half_solve = [&](const Vec& rhs) {
    Vec y = factor.permutationP() * rhs;
    factor.matrixL().solveInPlace(y);
    return y;
  };

  for (const auto& b : prob.layout.blocks) {
    Mat Y(q, b.dim);
    for (int a = 0; a < b.dim; ++a) {
      e[b.offset + a] = 1.0;
      Y.col(a) = half_solve(e);
      e[b.offset + a] = 0.0;
    }
    mom.block_cov.push_back(Y.transpose() * dinv.asDiagonal() * Y);
  }

  mom.score_row_qform.resize(prob.dm.n_score_rows());
  {
    std::vector<std::vector<std::pair<int, double>>> rows(prob.dm.S.rows());
    for (int k = 0; k < prob.dm.S.outerSize(); ++k)
      for (SpMat::InnerIterator it(prob.dm.S, k); it; ++it)
        rows[it.row()].emplace_back(static_cast<int>(it.col()), it.value());
    Vec s = Vec::Zero(q);
    for (int r = 0; r < prob.dm.n_score_rows(); ++r) {
      for (const auto& [c, val] : rows[r]) s[c] = val;
      const Vec y = half_solve(s);
      mom.score_row_qform[r] = y.dot(dinv.asDiagonal() * y);
      for (const auto& [c, val] : rows[r]) s[c] = 0.0;
    }
  }
  return mom;
}

// ---------------------------------------------------------------------------
// M-step

struct EmOptions {
  ModeOptions mode;
  double em_rel_tol = 1e-8;   // on the change in -2 loglik
  double param_tol = 1e-6;    // on the max natural-scale parameter change
  int max_em_iter = 500;
  int attnd_max_halvings = 30;
  double attnd_fd_step = 1e-4;
};

namespace detail {

inline void repair_pd(Mat& B, const std::string& name) {
  B = 0.5 * (B + B.transpose());
  Eigen::LLT<Mat> llt(B);
  if (llt.info() == Eigen::Success) return;
  const double ridge = 1e-10 * (1.0 + B.trace() / B.rows());
  B += ridge * Mat::Identity(B.rows(), B.cols());
  llt.compute(B);
  if (llt.info() != Eigen::Success)
    throw Error("m_step: " + name + " update is not positive definite");
}

inline Vec solve_spd_checked(const Mat& A, const Vec& b,
                             const std::string& what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(A);
  if (es.info() != Eigen::Success ||
      es.eigenvalues().minCoeff() <=
          1e-12 * std::max(1.0, es.eigenvalues().maxCoeff()))
    throw Error(what + ": normal equations are singular (collinear columns)");
  return es.eigenvectors() *
         (es.eigenvalues().cwiseInverse().asDiagonal() *
          (es.eigenvectors().transpose() * b));
}

}  // namespace detail

/// Closed-form updates for the Gaussian parameters given the posterior
/// moments, then one damped Newton step on the approximate marginal for the
/// attendance coefficients (finite-difference gradient, conditional probit
/// Hessian as the metric).
inline ParameterSet m_step(const EStepMoments& mom, const JointProblem& prob,
                           const ParameterSet& old, const EmOptions& opts = {}) {
  const auto& dm = prob.dm;
  const auto& L = prob.layout;
  const Vec& eta = mom.state.eta_hat;
  ParameterSet p = old;

  // Fixed score effects: GLS against the current residual variances.
  {
    Vec w(dm.n_score_rows());
    for (int r = 0; r < dm.n_score_rows(); ++r)
      w[r] = 1.0 / old.sigma2[dm.score_row_year[r] - 1];
    const Vec target = dm.y - dm.S * eta;
    const Mat A = dm.X.transpose() * w.asDiagonal() * dm.X;
    const Vec b = dm.X.transpose() * (w.asDiagonal() * target);
    p.beta_score = detail::solve_spd_checked(A, b, "m_step: score design");
  }

  // Residual variances: mean squared residual plus the posterior spread.
  {
    const Vec resid = dm.y - dm.X * p.beta_score - dm.S * eta;
    Vec ss = Vec::Zero(L.T);
    Eigen::VectorXi cnt = Eigen::VectorXi::Zero(L.T);
    for (int r = 0; r < dm.n_score_rows(); ++r) {
      const int g = dm.score_row_year[r] - 1;
      ss[g] += resid[r] * resid[r] + mom.score_row_qform[r];
      cnt[g] += 1;
    }
    for (int g = 0; g < L.T; ++g)
      if (cnt[g] > 0) p.sigma2[g] = ss[g] / cnt[g];
  }

  // Covariance blocks: average the posterior second moments over the units
  // sharing each block.
  {
    Mat stu = Mat::Zero(L.student_dim, L.student_dim);
    std::vector<Mat> year;
    for (int g = 1; g <= L.T; ++g)
      year.push_back(Mat::Zero(L.teacher_dim(g), L.teacher_dim(g)));
    Eigen::VectorXi m_cnt = Eigen::VectorXi::Zero(L.T);
    for (size_t bi = 0; bi < L.blocks.size(); ++bi) {
      const auto& b = L.blocks[bi];
      const Vec mu = eta.segment(b.offset, b.dim);
      const Mat second = mu * mu.transpose() + mom.block_cov[bi];
      if (b.is_student) stu += second;
      else {
        year[b.g - 1] += second;
        m_cnt[b.g - 1] += 1;
      }
    }
    stu /= L.n;
    detail::repair_pd(stu, "gamma_stu");
    p.gamma.gamma_stu = stu;
    for (int g = 1; g <= L.T; ++g) {
      if (m_cnt[g - 1] > 0) {
        year[g - 1] /= m_cnt[g - 1];
        detail::repair_pd(year[g - 1], "gamma_year[" + std::to_string(g) + "]");
        p.gamma.gamma_year[g - 1] = year[g - 1];
      }
    }
  }

  // Attendance coefficients: one damped Newton step on the approximate
  // marginal likelihood, holding the parameters above fixed.
  if (has_attendance(prob.spec.mechanism) && dm.W.cols() > 0) {
    Vec warm = eta;
    auto marginal = [&](const Vec& ba, Vec* mode_out) {
      ParameterSet ps = p;
      ps.beta_attnd = ba;
      const LaplaceState st = laplace_loglik(ps, prob, opts.mode, &warm);
      if (mode_out) *mode_out = st.eta_hat;
      return -0.5 * st.neg2ll;
    };
    Vec mode0;
    const double l0 = marginal(old.beta_attnd, &mode0);
    warm = mode0;
    const int pa = static_cast<int>(old.beta_attnd.size());
    Vec grad(pa);
    for (int k = 0; k < pa; ++k) {
      const double hstep = opts.attnd_fd_step * (1.0 + std::fabs(old.beta_attnd[k]));
      Vec bp = old.beta_attnd, bm = old.beta_attnd;
      bp[k] += hstep;
      bm[k] -= hstep;
      grad[k] = (marginal(bp, nullptr) - marginal(bm, nullptr)) / (2.0 * hstep);
    }
    // Conditional probit Hessian at the current mode: positive definite, so
    // the step is always an ascent direction of the FD gradient.
    Mat H = 1e-12 * Mat::Identity(pa, pa);
    {
      const Vec v = dm.W * old.beta_attnd + dm.Z * mode0;
      for (int k = 0; k < dm.n_att_rows(); ++k) {
        const double u = dm.att[k].r ? v[k] : -v[k];
        H += probit_weight(u) * dm.W.row(k).transpose() * dm.W.row(k);
      }
    }
    const Vec dir = H.ldlt().solve(grad);
    double alpha = 1.0;
    p.beta_attnd = old.beta_attnd;
    for (int halvings = 0; halvings <= opts.attnd_max_halvings; ++halvings) {
      const Vec trial = old.beta_attnd + alpha * dir;
      if (marginal(trial, nullptr) >= l0 - 1e-12 * (1.0 + std::fabs(l0))) {
        p.beta_attnd = trial;
        break;
      }
      alpha *= 0.5;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Starting values

/// OLS for the score side, per-year residual variances, modest diagonal
/// covariance blocks, and a fixed-effects-only probit for the attendance side.
inline ParameterSet starting_values(const JointProblem& prob,
                                    double gamma_diag = 0.1) {
  const auto& dm = prob.dm;
  ParameterSet p;
  {
    const Mat A = dm.X.transpose() * dm.X;
    const Vec b = dm.X.transpose() * dm.y;
    p.beta_score = detail::solve_spd_checked(A, b, "starting values: score design");
  }
  {
    const Vec resid = dm.y - dm.X * p.beta_score;
    p.sigma2 = Vec::Constant(prob.layout.T, 1.0);
    Vec ss = Vec::Zero(prob.layout.T);
    Eigen::VectorXi cnt = Eigen::VectorXi::Zero(prob.layout.T);
    for (int r = 0; r < dm.n_score_rows(); ++r) {
      const int g = dm.score_row_year[r] - 1;
      ss[g] += resid[r] * resid[r];
      cnt[g] += 1;
    }
    for (int g = 0; g < prob.layout.T; ++g)
      if (cnt[g] > 0) p.sigma2[g] = std::max(ss[g] / cnt[g], 1e-6);
  }
  p.gamma.gamma_stu =
      gamma_diag * Mat::Identity(prob.layout.student_dim, prob.layout.student_dim);
  for (int g = 1; g <= prob.layout.T; ++g) {
    const int d = prob.layout.teacher_dim(g);
    p.gamma.gamma_year.push_back(gamma_diag * Mat::Identity(d, d));
  }
  if (has_attendance(prob.spec.mechanism)) {
    const int pa = static_cast<int>(dm.W.cols());
    Vec beta = Vec::Zero(pa);
    auto loglik = [&](const Vec& b) {
      const Vec v = dm.W * b;
      double s = 0.0;
      for (int k = 0; k < v.size(); ++k)
        s += log_norm_cdf(dm.att[k].r ? v[k] : -v[k]);
      return s;
    };
    double cur = loglik(beta);
    for (int iter = 0; iter < 100; ++iter) {
      const Vec v = dm.W * beta;
      Vec grad = Vec::Zero(pa);
      Mat H = 1e-12 * Mat::Identity(pa, pa);
      for (int k = 0; k < dm.n_att_rows(); ++k) {
        const double sign = dm.att[k].r ? 1.0 : -1.0;
        const double u = sign * v[k];
        grad += sign * inv_mills(u) * dm.W.row(k).transpose();
        H += probit_weight(u) * dm.W.row(k).transpose() * dm.W.row(k);
      }
      if (grad.lpNorm<Eigen::Infinity>() < 1e-8 * (1.0 + std::fabs(cur))) break;
      const Vec dir = H.ldlt().solve(grad);
      double alpha = 1.0;
      for (int halvings = 0; halvings <= 50; ++halvings) {
        const double trial = loglik(beta + alpha * dir);
        if (std::isfinite(trial) && trial >= cur - 1e-12 * (1.0 + std::fabs(cur))) {
          beta += alpha * dir;
          cur = trial;
          break;
        }
        alpha *= 0.5;
      }
    }
    p.beta_attnd = beta;
  } else {
    p.beta_attnd.resize(0);
  }
  return p;
}

// ---------------------------------------------------------------------------
// EBLUP table

enum class EffectType { StudentScore, StudentAttnd, TeacherScore, TeacherAttnd };

inline std::string effect_type_name(EffectType t) {
  switch (t) {
    case EffectType::StudentScore: return "student_score";
    case EffectType::StudentAttnd: return "student_attnd";
    case EffectType::TeacherScore: return "teacher_score";
    case EffectType::TeacherAttnd: return "teacher_attnd";
  }
  throw Error("effect_type_name: unknown type");
}

/// 90% interval and sign classification: '+' when the interval sits above
/// zero, '-' below, '0' when it straddles.
inline char classify_interval(double lo, double hi) {
  if (lo > 0.0) return '+';
  if (hi < 0.0) return '-';
  return '0';
}

inline constexpr double kIntervalZ = 1.645;

struct EblupRecord {
  EffectType type = EffectType::StudentScore;
  std::string id;
  int g = 0;  // teacher year (0 for students)
  int t = 0;  // outcome year (teacher_score), modeled year (teacher_attnd)
  double value = 0.0;
  double sd = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  char cls = '0';
};

inline std::vector<EblupRecord> make_eblup_table(const EStepMoments& mom,
                                                 const JointProblem& prob) {
  const auto& L = prob.layout;
  const auto& c = *prob.cohort;
  std::vector<EblupRecord> out;
  auto push = [&](EffectType type, const std::string& id, int g, int t,
                  double value, double var) {
    EblupRecord rec;
    rec.type = type;
    rec.id = id;
    rec.g = g;
    rec.t = t;
    rec.value = value;
    rec.sd = std::sqrt(std::max(var, 0.0));
    rec.lo = value - kIntervalZ * rec.sd;
    rec.hi = value + kIntervalZ * rec.sd;
    rec.cls = classify_interval(rec.lo, rec.hi);
    out.push_back(rec);
  };
  for (size_t bi = 0; bi < L.blocks.size(); ++bi) {
    const auto& b = L.blocks[bi];
    const Vec mu = mom.state.eta_hat.segment(b.offset, b.dim);
    const Mat& C = mom.block_cov[bi];
    if (b.is_student) {
      push(EffectType::StudentScore, c.student_ids[b.index], 0, 0, mu[0], C(0, 0));
      if (b.has_attnd)
        push(EffectType::StudentAttnd, c.student_ids[b.index], 0, 0, mu[1],
             C(1, 1));
    } else {
      const std::string& id = c.rosters[b.g - 1][b.index];
      for (int t = b.g; t <= L.T; ++t)
        push(EffectType::TeacherScore, id, b.g, t, mu[t - b.g],
             C(t - b.g, t - b.g));
      if (b.has_attnd) {
        const int t_att = is_current_year(L.mechanism) ? b.g : b.g + 1;
        push(EffectType::TeacherAttnd, id, b.g, t_att, mu[b.n_theta],
             C(b.n_theta, b.n_theta));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standard errors

struct SeResult {
  std::vector<std::optional<double>> se;  // aligned with the packing names
  Mat cov_natural;
  bool ok = false;
  std::string note;
};

/// Delta-method SEs from a central finite-difference Hessian of -2 loglik on
/// the unconstrained scale. A non-positive-definite information matrix, or a
/// variance pinned at the boundary, marks the affected entries unavailable.
inline SeResult standard_errors(const ParameterSet& params,
                                const JointProblem& prob,
                                const EmOptions& opts = {},
                                double fd_step = 1e-4) {
  const ParamPacking pk = make_packing(prob);
  const int np = pk.size();
  SeResult res;
  res.se.assign(np, std::nullopt);

  Vec warm;
  auto f = [&](const Vec& psi) {
    const ParameterSet ps = from_unconstrained(psi, pk);
    const LaplaceState st =
        laplace_loglik(ps, prob, opts.mode, warm.size() ? &warm : nullptr);
    return st.neg2ll;
  };
  const Vec psi0 = to_unconstrained(params, pk);
  {
    const LaplaceState st0 = laplace_loglik(params, prob, opts.mode);
    warm = st0.eta_hat;
  }
  const double f0 = f(psi0);
  Vec hs(np);
  for (int k = 0; k < np; ++k) hs[k] = fd_step * (1.0 + std::fabs(psi0[k]));

  Vec fp(np), fm(np);
  for (int k = 0; k < np; ++k) {
    Vec psi = psi0;
    psi[k] = psi0[k] + hs[k];
    fp[k] = f(psi);
    psi[k] = psi0[k] - hs[k];
    fm[k] = f(psi);
  }
  Mat H(np, np);
  for (int k = 0; k < np; ++k)
    H(k, k) = (fp[k] - 2.0 * f0 + fm[k]) / (hs[k] * hs[k]);
  for (int j = 0; j < np; ++j)
    for (int k = j + 1; k < np; ++k) {
      Vec psi = psi0;
      psi[j] += hs[j];
      psi[k] += hs[k];
      const double fpp = f(psi);
      psi[k] = psi0[k] - hs[k];
      const double fpm = f(psi);
      psi[j] = psi0[j] - hs[j];
      const double fmm = f(psi);
      psi[k] = psi0[k] + hs[k];
      const double fmp = f(psi);
      H(j, k) = H(k, j) = (fpp - fpm - fmp + fmm) / (4.0 * hs[j] * hs[k]);
    }

  Eigen::SelfAdjointEigenSolver<Mat> es(H);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0) {
    res.note = "observed information is not positive definite";
    return res;
  }
  // Cov(psi) = 2 H^-1 because H differentiates -2 loglik.
  const Mat cov_psi = 2.0 * es.eigenvectors() *
                      es.eigenvalues().cwiseInverse().asDiagonal() *
                      es.eigenvectors().transpose();

  // Jacobian of the natural parameters in the unconstrained ones.
  Mat J(np, np);
  for (int k = 0; k < np; ++k) {
    Vec psi = psi0;
    psi[k] = psi0[k] + hs[k];
    const Vec natp = pack_natural(from_unconstrained(psi, pk), pk);
    psi[k] = psi0[k] - hs[k];
    const Vec natm = pack_natural(from_unconstrained(psi, pk), pk);
    J.col(k) = (natp - natm) / (2.0 * hs[k]);
  }
  res.cov_natural = J * cov_psi * J.transpose();
  for (int k = 0; k < np; ++k)
    res.se[k] = std::sqrt(std::max(res.cov_natural(k, k), 0.0));
  res.ok = true;

  // Variances at the boundary make the curvature unreliable: drop the SEs of
  // every entry in the affected block.
  const Vec nat = pack_natural(params, pk);
  int idx = pk.p_score + pk.p_attnd;
  for (int g = 0; g < pk.T; ++g, ++idx)
    if (nat[idx] < 1e-7) {
      res.se[idx] = std::nullopt;
      res.note = "variance at boundary";
    }
  auto flag_block = [&](int d) {
    bool boundary = false;
    const int begin = idx;
    for (int a = 0; a < d; ++a)
      for (int b = 0; b <= a; ++b, ++idx)
        if (a == b && nat[idx] < 1e-7) boundary = true;
    if (boundary) {
      for (int k = begin; k < idx; ++k) res.se[k] = std::nullopt;
      res.note = "variance at boundary";
    }
  };
  flag_block(pk.stu_dim);
  for (int g = 0; g < pk.T; ++g) flag_block(pk.year_dims[g]);
  return res;
}

// ---------------------------------------------------------------------------
// Fit driver

struct FitOptions {
  EmOptions em;
  bool compute_se = true;
  bool pin_attendance_corr = false;  // zero all score/attendance covariances
  double start_gamma_diag = 0.1;
  std::optional<ParameterSet> start;
};

struct FitResult {
  ParameterSet params;
  std::vector<std::string> param_names;
  Vec natural;
  std::vector<std::optional<double>> se;
  std::string se_note;
  double neg2loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  int monotonicity_violations = 0;
  std::vector<double> trace;  // -2 loglik per EM iteration
  std::vector<EblupRecord> eblups;
  std::vector<std::string> notes;
  ScaleInfo scale;
  Mechanism mechanism = Mechanism::MAR;
  std::vector<int> att_years;
};

namespace detail {

inline void pin_cross_covariances(CovarianceBlocks& gamma, const EtaLayout& L) {
  if (L.student_dim == 2) {
    gamma.gamma_stu(0, 1) = 0.0;
    gamma.gamma_stu(1, 0) = 0.0;
  }
  for (int g = 1; g <= L.T; ++g) {
    if (!L.teacher_has_lambda(g)) continue;
    Mat& B = gamma.gamma_year[g - 1];
    const int last = static_cast<int>(B.rows()) - 1;
    for (int a = 0; a < last; ++a) {
      B(a, last) = 0.0;
      B(last, a) = 0.0;
    }
  }
}

}  // namespace detail

/// Full maximum-likelihood fit. Deterministic given (cohort, spec, options).
inline FitResult fit(const CohortData& cohort, const ModelSpec& spec,
                     const FitOptions& opts = {}) {
  const JointProblem prob = make_problem(cohort, spec);
  const ParamPacking pk = make_packing(prob);

  if (has_attendance(spec.mechanism)) {
    const SeparationReport rep =
        count_separation(cohort, prob.dm.att, prob.dm.attnd_enc);
    if (rep.any_flagged())
      throw Error("attendance probit is quasi-completely separated: " +
                  rep.flagged_summary());
  }
  for (int i = 0; i < cohort.n; ++i) {
    bool informs = !cohort.obs_years[i].empty();
    if (!informs)
      for (const auto& row : prob.dm.att)
        if (row.student == i) informs = true;
    if (!informs)
      throw Error("student " + cohort.student_ids[i] +
                  " has no observed scores and no modeled indicators");
  }

  ParameterSet params = opts.start
                            ? *opts.start
                            : starting_values(prob, opts.start_gamma_diag);
  if (opts.pin_attendance_corr)
    detail::pin_cross_covariances(params.gamma, prob.layout);
  check_params(params, prob);

  FitResult res;
  res.param_names = pk.names;
  res.scale = cohort.scale;
  res.mechanism = spec.mechanism;
  res.att_years = prob.dm.att_years;
  res.notes = prob.dm.notes;

  EStepMoments mom;
  Vec warm;
  double prev = 0.0;
  double param_delta = std::numeric_limits<double>::infinity();
  bool have_prev = false;
  for (int iter = 1; iter <= opts.em.max_em_iter; ++iter) {
    mom = e_step(params, prob, opts.em.mode, warm.size() ? &warm : nullptr);
    res.trace.push_back(mom.state.neg2ll);
    res.iterations = iter;
    if (have_prev) {
      if (mom.state.neg2ll > prev + 1e-6 * (1.0 + std::fabs(prev)))
        ++res.monotonicity_violations;
      const bool ll_ok = std::fabs(mom.state.neg2ll - prev) <
                         opts.em.em_rel_tol * (1.0 + std::fabs(mom.state.neg2ll));
      if (ll_ok && param_delta < opts.em.param_tol) {
        res.converged = true;
        break;
      }
    }
    prev = mom.state.neg2ll;
    have_prev = true;
    ParameterSet next = m_step(mom, prob, params, opts.em);
    if (opts.pin_attendance_corr)
      detail::pin_cross_covariances(next.gamma, prob.layout);
    param_delta =
        (pack_natural(next, pk) - pack_natural(params, pk)).lpNorm<Eigen::Infinity>();
    params = next;
    warm = mom.state.eta_hat;
  }

  res.params = params;
  res.natural = pack_natural(params, pk);
  res.neg2loglik = mom.state.neg2ll;
  res.eblups = make_eblup_table(mom, prob);
  res.se.assign(pk.size(), std::nullopt);
  if (opts.compute_se) {
    const SeResult ses = standard_errors(params, prob, opts.em);
    res.se = ses.se;
    res.se_note = ses.note;
  }
  return res;
}

}  // namespace cpmvam
