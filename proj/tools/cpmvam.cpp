// Command-line driver: fit, simulate, sensitivity, oracle, report.
// Exit codes: 0 success, 1 input or usage error, 2 fit did not converge.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cpmvam/cpmvam.hpp"

namespace {

using namespace cpmvam;

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  return parse_config(in);
}

CohortData load_cohort(const std::string& path, const RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open data file '" + path + "'");
  CohortData c = parse_long_csv(in, cfg.schema, cfg.ingest);
  if (cfg.standardize) c = standardize_scores(c);
  return c;
}

std::vector<int> parse_m_list(const std::string& text, int T) {
  std::vector<int> m;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) m.push_back(std::stoi(item));
  if (static_cast<int>(m.size()) == 1) m.assign(T, m[0]);
  if (static_cast<int>(m.size()) != T)
    throw Error("--m needs one roster size, or one per year");
  return m;
}

int cmd_fit(const std::string& data_path, const std::string& config_path,
            const std::string& mechanism, const std::string& out_dir,
            bool no_se, const std::string& start_path) {
  RunConfig cfg = load_config(config_path);
  if (!mechanism.empty()) cfg.spec.mechanism = parse_mechanism(mechanism);
  if (no_se) cfg.fit.compute_se = false;
  if (!start_path.empty()) {
    std::ifstream in(start_path);
    if (!in) throw Error("cannot open start file '" + start_path + "'");
    nlohmann::json j;
    in >> j;
    cfg.fit.start = params_from_json(j.count("params") ? j["params"] : j);
  }
  const CohortData cohort = load_cohort(data_path, cfg);
  const FitResult res = fit(cohort, cfg.spec, cfg.fit);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream pj(out_dir + "/params.json");
    write_params_json(res, pj);
    std::ofstream eb(out_dir + "/eblups.csv");
    write_eblups_csv(res, eb);
  }
  std::cout << "mechanism: " << mechanism_name(res.mechanism) << "\n"
            << "-2 loglik: " << res.neg2loglik << "\n"
            << "iterations: " << res.iterations << "\n"
            << "converged: " << (res.converged ? "yes" : "no") << "\n";
  for (size_t k = 0; k < res.param_names.size(); ++k) {
    std::cout << "  " << res.param_names[k] << " = " << res.natural[k];
    if (res.se[k]) std::cout << " (se " << *res.se[k] << ")";
    std::cout << "\n";
  }
  for (const auto& note : res.notes) std::cout << "note: " << note << "\n";
  return res.converged ? 0 : 2;
}

int cmd_simulate(const std::string& out_path, int n, int T,
                 const std::string& m_text, const std::string& mechanism,
                 std::uint64_t seed, double completion, bool covariates,
                 double severity, const std::string& truth_out) {
  SimDesign design;
  design.n = n;
  design.T = T;
  design.m = parse_m_list(m_text, T);
  design.mechanism = parse_mechanism(mechanism);
  design.seed = seed;
  design.covariates = covariates;
  design.truth = default_truth(T, design.mechanism, completion, covariates);
  const SimResult sim = severity == 0.0 ? generate(design)
                                        : mnar_stress(design, severity);
  std::ofstream out(out_path);
  if (!out) throw Error("cannot open output file '" + out_path + "'");
  write_cohort_csv(sim.cohort, out);
  if (!truth_out.empty()) {
    std::ofstream tj(truth_out);
    nlohmann::json j;
    j["params"] = params_to_json(design.truth);
    j["mechanism"] = mechanism_name(design.mechanism);
    j["seed"] = design.seed;
    j["severity"] = severity;
    if (severity != 0.0) j["designated_teacher"] = sim.designated_teacher;
    tj << j.dump(2) << "\n";
  }
  std::cout << "wrote " << sim.cohort.rows.size() << " rows for "
            << sim.cohort.n << " students to " << out_path << "\n";
  return 0;
}

int cmd_sensitivity(const std::string& data_path, const std::string& config_path,
                    const std::string& out_dir, const std::string& models) {
  RunConfig cfg = load_config(config_path);
  if (!models.empty()) {
    cfg.sens.models.clear();
    std::stringstream ss(models);
    std::string item;
    while (std::getline(ss, item, ',')) cfg.sens.models.push_back(item);
  }
  cfg.sens.fit = cfg.fit;
  const CohortData cohort = load_cohort(data_path, cfg);
  const SensitivityReport rep = run_sensitivity(cohort, cfg.spec, cfg.sens);
  if (!out_dir.empty()) write_report_dir(rep, out_dir);
  write_summary_text(rep, std::cout);
  for (const auto& run : rep.runs)
    if (!run.ok || !run.fit.converged) return 2;
  return 0;
}

int cmd_oracle(const std::string& data_path, const std::string& config_path,
               int nodes, long qmc_points, std::uint64_t seed) {
  RunConfig cfg = load_config(config_path);
  const CohortData cohort = load_cohort(data_path, cfg);
  const JointProblem prob = make_problem(cohort, cfg.spec);
  const ParameterSet params = starting_values(prob, cfg.fit.start_gamma_diag);
  const LaplaceState st = laplace_loglik(params, prob);
  std::cout << "effect dimension: " << prob.layout.q << "\n";
  std::cout << "first-order -2 loglik: " << st.neg2ll << "\n";
  const double quad = quad_loglik(params, prob, nodes);
  std::cout << "quadrature -2 loglik (" << nodes << " nodes/dim): " << quad
            << "\n";
  std::cout << "relative gap: " << std::abs(st.neg2ll - quad) / std::abs(quad)
            << "\n";
  if (qmc_points > 0) {
    const QmcResult qmc = qmc_loglik(params, prob, qmc_points, seed);
    std::cout << "qmc -2 loglik (" << qmc.points << " points): " << qmc.neg2ll
              << " +- " << qmc.error_bar << "\n";
  }
  return 0;
}

int cmd_report(const std::string& a_path, const std::string& b_path, int g,
               int t, const std::string& out_dir) {
  auto load = [](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open eblups file '" + path + "'");
    return read_eblups_csv(in);
  };
  const auto all_a = load(a_path);
  const auto all_b = load(b_path);
  FitResult fa, fb;
  fa.eblups = all_a;
  fb.eblups = all_b;
  const auto ea = future_year_effects(fa, g, t);
  const auto eb = future_year_effects(fb, g, t);
  const auto rho = effect_correlation(ea, eb);
  const auto rank_rho = effect_rank_correlation(ea, eb);
  std::cout << "matched effects: year-" << g << " teachers on year-" << t
            << " outcomes\n";
  std::cout << "pearson rho: " << (rho ? std::to_string(*rho) : "undefined")
            << "\n";
  std::cout << "rank rho: "
            << (rank_rho ? std::to_string(*rank_rho) : "undefined") << "\n";
  const auto qt = quartile_crosstab(ea, eb);
  const auto ct = ci_crosstab(ea, eb);
  write_crosstab_csv(qt, {"q1", "q2", "q3", "q4"}, "a", "b", std::cout);
  write_crosstab_csv(ct, {"-", "0", "+"}, "a", "b", std::cout);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream q(out_dir + "/crosstab_quartile.csv");
    write_crosstab_csv(qt, {"q1", "q2", "q3", "q4"}, "a", "b", q);
    std::ofstream c(out_dir + "/crosstab_ci.csv");
    write_crosstab_csv(ct, {"-", "0", "+"}, "a", "b", c);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint score/attendance value-added modeling"};
  app.require_subcommand(1);

  std::string data_path, config_path, mechanism, out_dir, start_path;
  bool no_se = false;
  auto* fit_cmd = app.add_subcommand("fit", "fit one mechanism to a cohort");
  fit_cmd->add_option("--data", data_path, "long-format csv")->required();
  fit_cmd->add_option("--config", config_path, "key=value run configuration");
  fit_cmd->add_option("--mechanism", mechanism, "override the mechanism");
  fit_cmd->add_option("--out", out_dir, "directory for params.json and eblups.csv");
  fit_cmd->add_flag("--no-se", no_se, "skip standard errors");
  fit_cmd->add_option("--start", start_path, "params.json with starting values");

  std::string sim_out = "cohort.csv", m_text = "5", sim_mech = "mar",
              truth_out;
  int sim_n = 100, sim_T = 2;
  std::uint64_t seed = 1;
  double completion = 0.85, severity = 0.0;
  bool covariates = false;
  auto* sim_cmd = app.add_subcommand("simulate", "draw one synthetic cohort");
  sim_cmd->add_option("--out", sim_out, "output csv path")->required();
  sim_cmd->add_option("--n", sim_n, "students");
  sim_cmd->add_option("--T", sim_T, "years");
  sim_cmd->add_option("--m", m_text, "teachers per year (one value or per-year list)");
  sim_cmd->add_option("--mechanism", sim_mech, "observation mechanism");
  sim_cmd->add_option("--seed", seed, "rng seed");
  sim_cmd->add_option("--completion", completion, "target completion rate");
  sim_cmd->add_flag("--covariates", covariates, "add group and continuous covariates");
  sim_cmd->add_option("--severity", severity,
                      "ability-targeted deletion for the first year-1 teacher");
  sim_cmd->add_option("--truth-out", truth_out, "write the generating truth as json");

  std::string sens_models;
  auto* sens_cmd =
      app.add_subcommand("sensitivity", "fit the mechanism ladder and compare");
  sens_cmd->add_option("--data", data_path, "long-format csv")->required();
  sens_cmd->add_option("--config", config_path, "key=value run configuration");
  sens_cmd->add_option("--out", out_dir, "report directory");
  sens_cmd->add_option("--models", sens_models, "comma list: mar,mnar-t,mnar-s,mnar-b");

  int nodes = 20;
  long qmc_points = 0;
  auto* oracle_cmd = app.add_subcommand(
      "oracle", "audit the first-order likelihood on a small cohort");
  oracle_cmd->add_option("--data", data_path, "long-format csv")->required();
  oracle_cmd->add_option("--config", config_path, "key=value run configuration");
  oracle_cmd->add_option("--nodes", nodes, "quadrature nodes per dimension");
  oracle_cmd->add_option("--qmc", qmc_points, "also run qmc with this many points");
  oracle_cmd->add_option("--seed", seed, "rng seed for the qmc shifts");

  std::string a_path, b_path;
  int cmp_g = 1, cmp_t = 2;
  auto* rep_cmd =
      app.add_subcommand("report", "compare two saved eblup tables");
  rep_cmd->add_option("--a", a_path, "first eblups.csv")->required();
  rep_cmd->add_option("--b", b_path, "second eblups.csv")->required();
  rep_cmd->add_option("--g", cmp_g, "teacher year");
  rep_cmd->add_option("--t", cmp_t, "outcome year");
  rep_cmd->add_option("--out", out_dir, "directory for the crosstab csvs");

  CLI11_PARSE(app, argc, argv);
  try {
    if (fit_cmd->parsed())
      return cmd_fit(data_path, config_path, mechanism, out_dir, no_se,
                     start_path);
    if (sim_cmd->parsed())
      return cmd_simulate(sim_out, sim_n, sim_T, m_text, sim_mech, seed,
                          completion, covariates, severity, truth_out);
    if (sens_cmd->parsed())
      return cmd_sensitivity(data_path, config_path, out_dir, sens_models);
    if (oracle_cmd->parsed())
      return cmd_oracle(data_path, config_path, nodes, qmc_points, seed);
    if (rep_cmd->parsed())
      return cmd_report(a_path, b_path, cmp_g, cmp_t, out_dir);
  } catch (const cpmvam::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
