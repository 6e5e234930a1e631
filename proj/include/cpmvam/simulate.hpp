#pragma once

// Cohort simulation under the joint model, including the observation
// mechanism, plus a targeted stress scenario where one teacher's weak
// students go missing at a chosen severity.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cpmvam/design.hpp"
#include "cpmvam/rng.hpp"
#include "cpmvam/types.hpp"

namespace cpmvam {

struct SimDesign {
  int n = 100;
  int T = 2;
  std::vector<int> m;  // teachers per year
  Mechanism mechanism = Mechanism::MAR;
  std::vector<int> attendance_years;  // empty: mechanism defaults
  ParameterSet truth;
  bool covariates = false;  // add a binary group and a continuous covariate
  std::uint64_t seed = 1;
};

/// A canonical truth for the given shape: yearly score means rising by 0.1,
/// attendance intercepts at the probit of the completion rate, moderate
/// correlations inside every covariance block.
inline ParameterSet default_truth(int T, Mechanism mech,
                                  double completion = 0.85,
                                  bool covariates = false,
                                  std::vector<int> years = {}) {
  // MAR cohorts still drop scores; the draw mirrors the student-only years.
  if (years.empty())
    years = default_attendance_years(
        mech == Mechanism::MAR ? Mechanism::StudentOnly : mech, T);
  ParameterSet p;
  p.beta_score.resize(T + (covariates ? 2 : 0));
  for (int g = 0; g < T; ++g) p.beta_score[g] = 0.1 * g;
  if (covariates) {
    p.beta_score[T] = -0.2;     // group B
    p.beta_score[T + 1] = 0.15; // continuous covariate
  }
  p.sigma2 = Vec::Constant(T, 0.30);
  p.sigma2[0] = 0.35;

  const int n_years = static_cast<int>(years.size());
  p.beta_attnd.resize(n_years > 0 ? n_years + (covariates ? 2 : 0) : 0);
  if (n_years > 0) {
    const double mu_r = inv_norm_cdf(completion);
    for (int k = 0; k < n_years; ++k) p.beta_attnd[k] = mu_r;
    if (covariates) {
      p.beta_attnd[n_years] = -0.3;
      p.beta_attnd[n_years + 1] = 0.2;
    }
  }

  auto corr_block = [](const Vec& sd) {
    const int d = static_cast<int>(sd.size());
    Mat B(d, d);
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        B(a, b) = sd[a] * sd[b] * std::pow(0.5, std::abs(a - b));
    return B;
  };
  if (has_student_attendance(mech)) {
    Vec sd(2);
    sd << std::sqrt(0.55), std::sqrt(0.35);
    p.gamma.gamma_stu = corr_block(sd);
  } else {
    p.gamma.gamma_stu = Mat::Constant(1, 1, 0.55);
  }
  const EtaLayout probe = build_eta_layout_dims(1, T, std::vector<int>(T, 1), mech);
  for (int g = 1; g <= T; ++g) {
    const int n_theta = T - g + 1;
    const bool lam = probe.teacher_has_lambda(g);
    Vec sd(n_theta + (lam ? 1 : 0));
    for (int t = 0; t < n_theta; ++t)
      sd[t] = std::sqrt(0.06 - 0.01 * std::min(t, 2));
    if (lam) sd[n_theta] = std::sqrt(0.05);
    p.gamma.gamma_year.push_back(corr_block(sd));
  }
  return p;
}

struct SimResult {
  CohortData cohort;
  EtaLayout layout;
  Vec eta;  // realized effects, in layout order
  ParameterSet truth;
  SimDesign design;
  std::string designated_teacher;  // stress target (year 1, first teacher)
};

namespace detail {

/// Factor F with F F' = B for positive semidefinite B (zero variances are
/// legitimate in simulation truths).
inline Mat psd_factor(const Mat& B, const std::string& name) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (B + B.transpose()));
  if (es.info() != Eigen::Success) throw Error(name + ": eigensolve failed");
  const double max_ev = std::max(es.eigenvalues().maxCoeff(), 0.0);
  if (es.eigenvalues().minCoeff() < -1e-10 * (1.0 + max_ev))
    throw Error(name + " is not positive semidefinite");
  return es.eigenvectors() *
         es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

inline std::string padded_index(int k, int width) {
  std::string s = std::to_string(k);
  while (static_cast<int>(s.size()) < width) s = "0" + s;
  return s;
}

}  // namespace detail

/// Draws one cohort. The stream order is fixed: class assignments, then
/// covariates, then effects block by block, then score noise, then attendance
/// draws in modeled-row order; severity perturbs only the predictor values,
/// never the stream, so severity 0 reproduces generate() exactly.
inline SimResult simulate_cohort(const SimDesign& design, double severity) {
  if (static_cast<int>(design.m.size()) != design.T)
    throw Error("simulate: need one roster size per year");
  for (int g = 0; g < design.T; ++g)
    if (design.m[g] < 1) throw Error("simulate: every year needs a teacher");
  SimResult out;
  out.design = design;
  out.truth = design.truth;
  out.layout = build_eta_layout_dims(design.n, design.T, design.m,
                                     design.mechanism);
  const EtaLayout& L = out.layout;
  const ParameterSet& p = design.truth;
  if (p.beta_score.size() != design.T + (design.covariates ? 2 : 0))
    throw Error("simulate: truth beta_score does not match the design");
  Philox4x32 rng(design.seed);

  // Class assignments.
  std::vector<std::vector<int>> teacher(design.n, std::vector<int>(design.T));
  for (int i = 0; i < design.n; ++i)
    for (int g = 0; g < design.T; ++g)
      teacher[i][g] = static_cast<int>(rng.uniform_int(design.m[g]));

  // Student covariates.
  std::vector<std::string> group(design.n);
  std::vector<double> xcont(design.n);
  if (design.covariates)
    for (int i = 0; i < design.n; ++i) {
      group[i] = rng.uniform01() < 0.5 ? "A" : "B";
      xcont[i] = rng.normal();
    }

  // Effects.
  out.eta.resize(L.q);
  const Mat f_stu = detail::psd_factor(p.gamma.gamma_stu, "gamma_stu");
  std::vector<Mat> f_year;
  for (int g = 1; g <= design.T; ++g)
    f_year.push_back(detail::psd_factor(p.gamma.gamma_year[g - 1],
                                        "gamma_year[" + std::to_string(g) + "]"));
  for (const auto& b : L.blocks) {
    Vec z(b.dim);
    for (int k = 0; k < b.dim; ++k) z[k] = rng.normal();
    out.eta.segment(b.offset, b.dim) =
        (b.is_student ? f_stu : f_year[b.g - 1]) * z;
  }

  // Scores for every (student, year); the mechanism deletes some below.
  std::vector<std::vector<double>> score(design.n,
                                         std::vector<double>(design.T));
  for (int i = 0; i < design.n; ++i)
    for (int g = 1; g <= design.T; ++g) {
      double v = p.beta_score[g - 1] + out.eta[L.delta(i)];
      if (design.covariates) {
        if (group[i] == "B") v += p.beta_score[design.T];
        v += p.beta_score[design.T + 1] * xcont[i];
      }
      for (int gp = 1; gp <= g; ++gp)
        v += out.eta[L.theta(gp, teacher[i][gp - 1], g)];
      score[i][g - 1] = v + rng.normal() * std::sqrt(p.sigma2[g - 1]);
    }

  // Observation mechanism. MAR uses the same fixed-effect predictor but no
  // random effects, so the missingness is ignorable by construction.
  std::vector<std::vector<bool>> keep(design.n,
                                      std::vector<bool>(design.T, true));
  std::vector<int> years = design.attendance_years.empty()
                               ? default_attendance_years(
                                     design.mechanism == Mechanism::MAR
                                         ? Mechanism::StudentOnly
                                         : design.mechanism,
                                     design.T)
                               : design.attendance_years;
  const int n_years = static_cast<int>(years.size());
  const int need_attnd = n_years + (design.covariates ? 2 : 0);
  if (n_years > 0 && p.beta_attnd.size() < need_attnd)
    throw Error("simulate: truth beta_attnd does not cover the modeled years");
  const int designated = 0;
  out.designated_teacher =
      "y1t" + detail::padded_index(
                  1, static_cast<int>(std::to_string(design.m[0]).size()));
  for (int ti = 0; ti < n_years; ++ti) {
    const int t = years[ti];
    for (int i = 0; i < design.n; ++i) {
      double v = p.beta_attnd[ti];
      if (design.covariates) {
        if (group[i] == "B") v += p.beta_attnd[n_years];
        v += p.beta_attnd[n_years + 1] * xcont[i];
      }
      if (design.mechanism != Mechanism::MAR) {
        if (has_student_attendance(design.mechanism))
          v += out.eta[L.delta_attnd(i)];
        if (has_teacher_attendance(design.mechanism)) {
          const int gl = is_current_year(design.mechanism) ? t : t - 1;
          v += out.eta[L.lambda(gl, teacher[i][gl - 1])];
          if (gl == 1 && teacher[i][0] == designated)
            v += severity * out.eta[L.delta(i)];
        }
      }
      if (!(rng.normal() <= v)) keep[i][t - 1] = false;
    }
  }

  // Emit rows student-major, year-minor.
  const int id_width = static_cast<int>(std::to_string(design.n).size());
  std::vector<int> t_width(design.T);
  for (int g = 0; g < design.T; ++g)
    t_width[g] = static_cast<int>(std::to_string(design.m[g]).size());
  std::vector<ObservationRow> rows;
  char buf[32];
  for (int i = 0; i < design.n; ++i)
    for (int g = 1; g <= design.T; ++g) {
      ObservationRow row;
      row.student_id = "s" + detail::padded_index(i + 1, id_width);
      row.year = g;
      row.teacher_id = "y" + std::to_string(g) + "t" +
                       detail::padded_index(teacher[i][g - 1] + 1, t_width[g - 1]);
      if (keep[i][g - 1]) row.score = score[i][g - 1];
      if (design.covariates) {
        row.covariates["group"] = group[i];
        std::snprintf(buf, sizeof buf, "%.17g", xcont[i]);
        row.covariates["xcont"] = buf;
      }
      rows.push_back(std::move(row));
    }
  out.cohort = finalize_cohort(std::move(rows), design.T);
  return out;
}

inline SimResult generate(const SimDesign& design) {
  return simulate_cohort(design, 0.0);
}

/// Deletion bias stress: the first year-1 teacher's students lose their
/// scores preferentially by ability. Requires a teacher-side mechanism.
inline SimResult mnar_stress(const SimDesign& design, double severity) {
  if (!has_teacher_attendance(design.mechanism))
    throw Error("mnar_stress: mechanism has no teacher attendance effect");
  return simulate_cohort(design, severity);
}

}  // namespace cpmvam
