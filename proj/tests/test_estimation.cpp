#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "cpmvam/estimation.hpp"
#include "cpmvam/rng.hpp"
#include "helpers.hpp"

using namespace cpmvam;

TEST_CASE("parameter packing round trips", "[estimation]") {
  const auto sim = testutil::quick_sim(8, 2, {2, 2},
                                       Mechanism::TeacherAndStudentNextYear,
                                       41, 0.7);
  const JointProblem prob = make_problem(
      sim.cohort, testutil::make_spec(Mechanism::TeacherAndStudentNextYear));
  const ParamPacking pk = make_packing(prob);

  // 2 score means + 1 attendance mean + 2 variances + lower triangles of
  // blocks sized 2, 3, 1.
  CHECK(pk.size() == 2 + 1 + 2 + 3 + 6 + 1);
  CHECK(pk.names[0] == "mu_y[1]");
  CHECK(pk.names[2] == "mu_r[2]");
  CHECK(pk.names[3] == "sigma2[1]");
  CHECK(pk.names[5] == "gamma_stu[1,1]");
  CHECK(pk.names[6] == "gamma_stu[2,1]");
  CHECK(pk.names.back() == "gamma_year[2][1,1]");

  Philox4x32 rng(4141);
  const ParameterSet p = testutil::random_params(prob, rng);
  const ParameterSet back = from_unconstrained(to_unconstrained(p, pk), pk);
  CHECK((pack_natural(back, pk) - pack_natural(p, pk)).lpNorm<Eigen::Infinity>() <
        1e-10);

  // The unconstrained scale accepts any values and still yields a valid set.
  Vec psi = to_unconstrained(p, pk);
  for (int k = 0; k < psi.size(); ++k) psi[k] += 0.3 * rng.normal();
  const ParameterSet wild = from_unconstrained(psi, pk);
  CHECK_NOTHROW(check_params(wild, prob));
  CHECK_NOTHROW(GOperator(wild, prob.layout));
}

TEST_CASE("posterior moments match the dense inverse", "[estimation]") {
  const auto sim = testutil::quick_sim(7, 2, {2, 2},
                                       Mechanism::TeacherAndStudentNextYear,
                                       43, 0.7);
  const JointProblem prob = make_problem(
      sim.cohort, testutil::make_spec(Mechanism::TeacherAndStudentNextYear));
  Philox4x32 rng(4343);
  const ParameterSet p = testutil::random_params(prob, rng);

  const EStepMoments mom = e_step(p, prob);
  const Mat V = Mat(*mom.state.neg_hess).inverse();

  REQUIRE(mom.block_cov.size() == prob.layout.blocks.size());
  for (size_t bi = 0; bi < prob.layout.blocks.size(); ++bi) {
    const auto& b = prob.layout.blocks[bi];
    const Mat ref = V.block(b.offset, b.offset, b.dim, b.dim);
    CHECK((mom.block_cov[bi] - ref).lpNorm<Eigen::Infinity>() < 1e-9);
  }

  const Mat S = Mat(prob.dm.S);
  for (int r = 0; r < prob.dm.n_score_rows(); ++r) {
    const double ref = S.row(r) * V * S.row(r).transpose();
    CHECK(mom.score_row_qform[r] == Catch::Approx(ref).epsilon(1e-9));
  }
}

TEST_CASE("m-step solves its stationarity conditions", "[estimation]") {
  const auto sim = testutil::quick_sim(12, 2, {2, 2},
                                       Mechanism::TeacherNextYear, 47, 0.75);
  const JointProblem prob =
      make_problem(sim.cohort, testutil::make_spec(Mechanism::TeacherNextYear));
  const ParameterSet start = starting_values(prob);
  const EStepMoments mom = e_step(start, prob);
  const ParameterSet next = m_step(mom, prob, start);

  const auto& dm = prob.dm;
  const Vec& eta = mom.state.eta_hat;

  // Weighted normal equations for the score coefficients.
  Vec w(dm.n_score_rows());
  for (int r = 0; r < dm.n_score_rows(); ++r)
    w[r] = 1.0 / start.sigma2[dm.score_row_year[r] - 1];
  const Vec resid = dm.y - dm.S * eta - dm.X * next.beta_score;
  CHECK((dm.X.transpose() * (w.asDiagonal() * resid)).lpNorm<Eigen::Infinity>() <
        1e-8);

  // Residual variances: squared residual plus posterior spread, averaged.
  for (int g = 1; g <= 2; ++g) {
    double ss = 0.0;
    int cnt = 0;
    for (int r = 0; r < dm.n_score_rows(); ++r) {
      if (dm.score_row_year[r] != g) continue;
      ss += resid[r] * resid[r] + mom.score_row_qform[r];
      ++cnt;
    }
    REQUIRE(cnt > 0);
    CHECK(next.sigma2[g - 1] == Catch::Approx(ss / cnt).epsilon(1e-10));
  }

  // Covariance blocks: mean posterior second moment over the sharing units.
  Mat stu = Mat::Zero(1, 1);
  for (size_t bi = 0; bi < prob.layout.blocks.size(); ++bi) {
    const auto& b = prob.layout.blocks[bi];
    if (!b.is_student) continue;
    const Vec mu = eta.segment(b.offset, b.dim);
    stu += mu * mu.transpose() + mom.block_cov[bi];
  }
  stu /= sim.cohort.n;
  CHECK(next.gamma.gamma_stu(0, 0) == Catch::Approx(stu(0, 0)).epsilon(1e-9));

  // The attendance step never loses marginal likelihood.
  ParameterSet probe = next;
  const double with_new = laplace_loglik(probe, prob).neg2ll;
  probe.beta_attnd = start.beta_attnd;
  const double with_old = laplace_loglik(probe, prob).neg2ll;
  CHECK(with_new <= with_old + 1e-6 * (1.0 + std::fabs(with_old)));
}

TEST_CASE("starting values are sane", "[estimation]") {
  const auto sim = testutil::quick_sim(30, 2, {3, 3},
                                       Mechanism::TeacherNextYear, 53, 0.7);
  const JointProblem prob =
      make_problem(sim.cohort, testutil::make_spec(Mechanism::TeacherNextYear));
  const ParameterSet p = starting_values(prob, 0.2);

  // OLS normal equations.
  CHECK((prob.dm.X.transpose() * (prob.dm.y - prob.dm.X * p.beta_score))
            .lpNorm<Eigen::Infinity>() < 1e-8);
  for (int g = 0; g < 2; ++g) CHECK(p.sigma2[g] >= 1e-6);
  CHECK(p.gamma.gamma_stu(0, 0) == Catch::Approx(0.2));
  REQUIRE(p.gamma.gamma_year.size() == 2);
  CHECK(p.gamma.gamma_year[0](0, 0) == Catch::Approx(0.2));

  // Intercept-only probit start matches the closed form at the observed rate.
  int n1 = 0;
  for (const auto& row : prob.dm.att) n1 += row.r ? 1 : 0;
  const double rate = double(n1) / prob.dm.n_att_rows();
  REQUIRE(p.beta_attnd.size() == 1);
  CHECK(p.beta_attnd[0] == Catch::Approx(inv_norm_cdf(rate)).margin(1e-6));
}

TEST_CASE("pinned cross covariances reduce the score side to the plain fit",
          "[estimation][slow]") {
  // T=3 so the student attendance variance sees two indicators per student;
  // with one it sits near a boundary and EM crawls.
  const auto sim = testutil::quick_sim(60, 3, {5, 5, 5},
                                       Mechanism::TeacherAndStudentNextYear,
                                       61, 0.7);
  FitOptions opts;
  opts.compute_se = false;
  opts.em.max_em_iter = 4000;

  const FitResult mar =
      fit(sim.cohort, testutil::make_spec(Mechanism::MAR), opts);

  FitOptions pinned = opts;
  pinned.pin_attendance_corr = true;
  const FitResult joint =
      fit(sim.cohort,
          testutil::make_spec(Mechanism::TeacherAndStudentNextYear), pinned);

  REQUIRE(mar.converged);
  REQUIRE(joint.converged);

  // With every score/attendance covariance pinned to zero the joint density
  // separates, so the score-side estimates must agree across the two fits.
  for (int k = 0; k < 3; ++k)
    CHECK(joint.params.beta_score[k] ==
          Catch::Approx(mar.params.beta_score[k]).margin(5e-5));
  for (int g = 0; g < 3; ++g)
    CHECK(joint.params.sigma2[g] ==
          Catch::Approx(mar.params.sigma2[g]).margin(5e-5));
  CHECK(joint.params.gamma.gamma_stu(0, 0) ==
        Catch::Approx(mar.params.gamma.gamma_stu(0, 0)).margin(5e-5));
  CHECK(joint.params.gamma.gamma_stu(0, 1) == 0.0);
  // Persistence submatrix of the year-1 teacher block.
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b <= a; ++b)
      CHECK(joint.params.gamma.gamma_year[0](a, b) ==
            Catch::Approx(mar.params.gamma.gamma_year[0](a, b)).margin(5e-5));
  const int last = static_cast<int>(joint.params.gamma.gamma_year[0].rows()) - 1;
  CHECK(joint.params.gamma.gamma_year[0](0, last) == 0.0);
}

TEST_CASE("fit converges on a plain score model and is monotone",
          "[estimation]") {
  const auto sim = testutil::quick_sim(40, 2, {3, 3}, Mechanism::MAR, 61);
  FitOptions opts;
  opts.compute_se = false;
  // A teacher variance heads to zero here, which slows EM to a crawl.
  opts.em.max_em_iter = 2500;
  const FitResult res = fit(sim.cohort, testutil::make_spec(Mechanism::MAR), opts);

  CHECK(res.converged);
  CHECK(res.monotonicity_violations == 0);
  CHECK(res.iterations >= 2);
  REQUIRE(res.trace.size() == static_cast<size_t>(res.iterations));
  for (size_t k = 1; k < res.trace.size(); ++k)
    CHECK(res.trace[k] <= res.trace[k - 1] + 1e-6 * (1.0 + std::fabs(res.trace[k])));

  // The fitted likelihood cannot be worse than the generating truth's.
  const JointProblem prob =
      make_problem(sim.cohort, testutil::make_spec(Mechanism::MAR));
  ParameterSet truth = sim.truth;
  truth.beta_attnd.resize(0);
  const double at_truth = testutil::dense_lmm_reference(truth, prob).neg2ll;
  CHECK(res.neg2loglik <= at_truth + 1e-6);

  CHECK(res.natural.size() == static_cast<int>(res.param_names.size()));
  CHECK(res.mechanism == Mechanism::MAR);
  CHECK(res.att_years.empty());
}

TEST_CASE("eblup table covers every effect with consistent intervals",
          "[estimation]") {
  const auto sim = testutil::quick_sim(10, 2, {2, 2},
                                       Mechanism::TeacherAndStudentNextYear,
                                       67, 0.7);
  const JointProblem prob = make_problem(
      sim.cohort, testutil::make_spec(Mechanism::TeacherAndStudentNextYear));
  const ParameterSet p = starting_values(prob);
  const EStepMoments mom = e_step(p, prob);
  const auto table = make_eblup_table(mom, prob);

  int n_stu_score = 0, n_stu_att = 0, n_tea_score = 0, n_tea_att = 0;
  for (const auto& rec : table) {
    switch (rec.type) {
      case EffectType::StudentScore: ++n_stu_score; break;
      case EffectType::StudentAttnd: ++n_stu_att; break;
      case EffectType::TeacherScore: ++n_tea_score; break;
      case EffectType::TeacherAttnd: ++n_tea_att; break;
    }
    CHECK(rec.sd >= 0.0);
    CHECK(rec.lo == Catch::Approx(rec.value - kIntervalZ * rec.sd));
    CHECK(rec.hi == Catch::Approx(rec.value + kIntervalZ * rec.sd));
    CHECK(rec.cls == classify_interval(rec.lo, rec.hi));
  }
  CHECK(n_stu_score == 10);
  CHECK(n_stu_att == 10);
  // Year-1 teachers carry two outcome years, year-2 teachers one.
  CHECK(n_tea_score == 2 * 2 + 2 * 1);
  // Only year-1 teachers model an indicator, for the following year.
  CHECK(n_tea_att == 2);
  for (const auto& rec : table)
    if (rec.type == EffectType::TeacherAttnd) {
      CHECK(rec.g == 1);
      CHECK(rec.t == 2);
    }

  CHECK(classify_interval(0.0355, 0.3645) == '+');
  CHECK(classify_interval(-0.5, -0.01) == '-');
  CHECK(classify_interval(-0.1, 0.1) == '0');
  CHECK(effect_type_name(EffectType::TeacherAttnd) == "teacher_attnd");
  CHECK(kIntervalZ == 1.645);
}

TEST_CASE("standard errors exist and flag boundary variances", "[estimation]") {
  const auto sim = testutil::quick_sim(25, 2, {2, 2}, Mechanism::MAR, 71);
  const JointProblem prob =
      make_problem(sim.cohort, testutil::make_spec(Mechanism::MAR));

  FitOptions fopts;
  fopts.compute_se = true;
  fopts.em.max_em_iter = 2500;
  const FitResult res = fit(sim.cohort, testutil::make_spec(Mechanism::MAR), fopts);
  REQUIRE(res.converged);
  bool all_beta_present = true;
  for (int k = 0; k < 2; ++k) {
    if (!res.se[k]) all_beta_present = false;
    else CHECK(*res.se[k] > 0.0);
  }
  CHECK(all_beta_present);

  // A variance at its boundary must not report a standard error.
  Philox4x32 rng(7171);
  ParameterSet p = testutil::random_params(prob, rng);
  p.gamma.gamma_stu(0, 0) = 1e-9;
  const SeResult ses = standard_errors(p, prob);
  const ParamPacking pk = make_packing(prob);
  int stu_idx = -1;
  for (int k = 0; k < pk.size(); ++k)
    if (pk.names[k] == "gamma_stu[1,1]") stu_idx = k;
  REQUIRE(stu_idx >= 0);
  CHECK_FALSE(ses.se[stu_idx].has_value());
  CHECK_FALSE(ses.note.empty());
}

TEST_CASE("fit refuses degenerate inputs", "[estimation]") {
  // A complete modeled year separates the attendance probit.
  std::vector<ObservationRow> rows;
  for (int k = 1; k <= 6; ++k) {
    ObservationRow r1;
    r1.student_id = "s" + std::to_string(k);
    r1.year = 1;
    r1.teacher_id = "t1";
    r1.score = 0.1 * k;
    rows.push_back(r1);
    ObservationRow r2 = r1;
    r2.year = 2;
    r2.teacher_id = "u1";
    r2.score = 0.2 * k;
    rows.push_back(r2);
  }
  const CohortData complete = finalize_cohort(rows, 2);
  ModelSpec spec = testutil::make_spec(Mechanism::TeacherNextYear);
  spec.attendance_years = {2};
  CHECK_THROWS_WITH(fit(complete, spec),
                    Catch::Matchers::ContainsSubstring("separated"));

  // A student contributing neither scores nor indicators has no information.
  std::vector<ObservationRow> rows2 = rows;
  ObservationRow ghost;
  ghost.student_id = "ghost";
  ghost.year = 1;
  ghost.teacher_id = "t1";
  rows2.push_back(ghost);
  const CohortData with_ghost = finalize_cohort(rows2, 2);
  CHECK_THROWS_WITH(fit(with_ghost, testutil::make_spec(Mechanism::MAR)),
                    Catch::Matchers::ContainsSubstring("ghost"));

  // A year with no observed scores cannot identify its mean.
  std::vector<ObservationRow> rows3;
  for (int k = 1; k <= 4; ++k) {
    ObservationRow r1;
    r1.student_id = "s" + std::to_string(k);
    r1.year = 1;
    r1.teacher_id = "t1";
    r1.score = 0.1 * k;
    rows3.push_back(r1);
    ObservationRow r2 = r1;
    r2.year = 2;
    r2.teacher_id = "u1";
    r2.score.reset();
    rows3.push_back(r2);
  }
  const CohortData empty_year = finalize_cohort(rows3, 2);
  CHECK_THROWS_WITH(fit(empty_year, testutil::make_spec(Mechanism::MAR)),
                    Catch::Matchers::ContainsSubstring("singular"));
}

TEST_CASE("reported standard errors track the sampling spread",
          "[estimation][slow]") {
  // Calibration study: the mean reported SE of the year-1 mean must match the
  // across-replicate spread of its estimate.
  const int kReps = 100;
  std::vector<double> est, se;
  FitOptions opts;
  opts.compute_se = true;
  opts.em.max_em_iter = 2500;
  for (int rep = 0; rep < kReps; ++rep) {
    const auto sim =
        testutil::quick_sim(60, 2, {6, 6}, Mechanism::MAR, 1000 + rep);
    const FitResult res =
        fit(sim.cohort, testutil::make_spec(Mechanism::MAR), opts);
    if (!res.converged || !res.se[0]) continue;
    est.push_back(res.natural[0]);
    se.push_back(*res.se[0]);
  }
  REQUIRE(est.size() >= 90);
  const double spread = testutil::sd_of(est);
  const double mean_se = testutil::mean_of(se);
  CHECK(mean_se / spread > 0.75);
  CHECK(mean_se / spread < 1.35);

  // The estimate itself is unbiased for the truth (mu_y[1] = 0).
  const double mc_err = spread / std::sqrt(double(est.size()));
  CHECK(std::fabs(testutil::mean_of(est)) < 3.5 * mc_err);
}
