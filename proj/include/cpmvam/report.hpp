#pragma once

// Cross-model comparison of estimated teacher effects: correlations, quartile
// and interval-classification cross-tabs, the sensitivity runner that fits a
// ladder of observation mechanisms, and the run-directory writers.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpmvam/csv.hpp"
#include "cpmvam/estimation.hpp"

namespace cpmvam {

/// The estimated effects of year-g teachers on year-t outcomes, roster order.
inline std::vector<EblupRecord> future_year_effects(const FitResult& fit,
                                                    int g = 1, int t = 2) {
  std::vector<EblupRecord> out;
  for (const auto& rec : fit.eblups)
    if (rec.type == EffectType::TeacherScore && rec.g == g && rec.t == t)
      out.push_back(rec);
  if (out.empty())
    throw Error("future_year_effects: no year-" + std::to_string(g) +
                " teacher effects on year " + std::to_string(t));
  return out;
}

namespace detail {

inline std::vector<std::pair<EblupRecord, EblupRecord>> match_records(
    const std::vector<EblupRecord>& a, const std::vector<EblupRecord>& b) {
  std::map<std::string, const EblupRecord*> bm;
  for (const auto& rec : b) bm[rec.id] = &rec;
  std::vector<std::pair<EblupRecord, EblupRecord>> out;
  for (const auto& rec : a) {
    auto it = bm.find(rec.id);
    if (it != bm.end()) out.emplace_back(rec, *it->second);
  }
  return out;
}

}  // namespace detail

/// Pearson correlation of matched effects; absent when either side has zero
/// variance or fewer than three pairs match.
inline std::optional<double> effect_correlation(
    const std::vector<EblupRecord>& a, const std::vector<EblupRecord>& b) {
  const auto pairs = detail::match_records(a, b);
  const int n = static_cast<int>(pairs.size());
  if (n < 3) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (const auto& [ra, rb] : pairs) {
    ma += ra.value;
    mb += rb.value;
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (const auto& [ra, rb] : pairs) {
    sab += (ra.value - ma) * (rb.value - mb);
    saa += (ra.value - ma) * (ra.value - ma);
    sbb += (rb.value - mb) * (rb.value - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

/// Ranks with ties broken by input order (the same rule the quartile table
/// uses), ascending, 1-based.
inline std::vector<int> stable_ranks(const std::vector<double>& v) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return v[a] < v[b]; });
  std::vector<int> rank(v.size());
  for (int k = 0; k < static_cast<int>(order.size()); ++k)
    rank[order[k]] = k + 1;
  return rank;
}

/// Spearman-type correlation on the stable ranks of matched effects.
inline std::optional<double> effect_rank_correlation(
    const std::vector<EblupRecord>& a, const std::vector<EblupRecord>& b) {
  const auto pairs = detail::match_records(a, b);
  if (pairs.size() < 3) return std::nullopt;
  std::vector<double> va, vb;
  for (const auto& [ra, rb] : pairs) {
    va.push_back(ra.value);
    vb.push_back(rb.value);
  }
  const auto ra = stable_ranks(va), rb = stable_ranks(vb);
  std::vector<EblupRecord> xa(pairs.size()), xb(pairs.size());
  for (size_t k = 0; k < pairs.size(); ++k) {
    xa[k].id = pairs[k].first.id;
    xa[k].value = ra[k];
    xb[k].id = pairs[k].first.id;
    xb[k].value = rb[k];
  }
  return effect_correlation(xa, xb);
}

/// Quartile labels 1..4 from stable ranks; the top of quartile j is rank
/// ceil(j*N/4), so sizes differ by at most one.
inline std::vector<int> quartile_of(const std::vector<double>& v) {
  const int n = static_cast<int>(v.size());
  if (n < 4) throw Error("quartile_of: need at least four values");
  const auto rank = stable_ranks(v);
  auto top = [&](int j) { return (j * n + 3) / 4; };  // ceil(j*n/4)
  std::vector<int> out(n);
  for (int k = 0; k < n; ++k) {
    int qtl = 4;
    for (int j = 1; j <= 3; ++j)
      if (rank[k] <= top(j)) {
        qtl = j;
        break;
      }
    out[k] = qtl;
  }
  return out;
}

/// 4x4 counts: rows are the first model's quartiles, columns the second's.
inline Eigen::Matrix<int, 4, 4> quartile_crosstab(
    const std::vector<EblupRecord>& a, const std::vector<EblupRecord>& b) {
  const auto pairs = detail::match_records(a, b);
  if (pairs.size() < 4)
    throw Error("quartile_crosstab: need at least four matched effects");
  std::vector<double> va, vb;
  for (const auto& [ra, rb] : pairs) {
    va.push_back(ra.value);
    vb.push_back(rb.value);
  }
  const auto qa = quartile_of(va), qb = quartile_of(vb);
  Eigen::Matrix<int, 4, 4> tab = Eigen::Matrix<int, 4, 4>::Zero();
  for (size_t k = 0; k < pairs.size(); ++k) tab(qa[k] - 1, qb[k] - 1) += 1;
  return tab;
}

/// 3x3 counts of interval classifications ('-','0','+'), first model on rows.
inline Eigen::Matrix<int, 3, 3> ci_crosstab(const std::vector<EblupRecord>& a,
                                            const std::vector<EblupRecord>& b) {
  auto idx = [](char cls) {
    if (cls == '-') return 0;
    if (cls == '0') return 1;
    if (cls == '+') return 2;
    throw Error("ci_crosstab: unknown classification");
  };
  Eigen::Matrix<int, 3, 3> tab = Eigen::Matrix<int, 3, 3>::Zero();
  for (const auto& [ra, rb] : detail::match_records(a, b))
    tab(idx(ra.cls), idx(rb.cls)) += 1;
  return tab;
}

/// Covariance block to correlation; zero variances are an error.
inline Mat gamma_correlation(const Mat& block) {
  const int d = static_cast<int>(block.rows());
  Mat out(d, d);
  for (int a = 0; a < d; ++a)
    if (!(block(a, a) > 0.0))
      throw Error("gamma_correlation: zero variance on the diagonal");
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b)
      out(a, b) = block(a, b) / std::sqrt(block(a, a) * block(b, b));
  return out;
}

// ---------------------------------------------------------------------------
// Sensitivity ladder

struct ModelRun {
  std::string label;
  Mechanism mechanism = Mechanism::MAR;
  bool ok = false;
  std::string error;
  FitResult fit;
};

struct SensitivityOptions {
  std::vector<std::string> models = {"mar", "mnar-t", "mnar-s", "mnar-b"};
  int compare_g = 1;
  int compare_t = 2;
  FitOptions fit;
};

struct Crosstabs {
  Eigen::Matrix<int, 4, 4> quartile;
  Eigen::Matrix<int, 3, 3> ci;
};

struct SensitivityReport {
  std::vector<ModelRun> runs;
  std::map<std::string, std::optional<double>> rho;       // vs the MAR run
  std::map<std::string, std::optional<double>> rank_rho;  // vs the MAR run
  std::map<std::string, Crosstabs> tabs;
  int compare_g = 1;
  int compare_t = 2;
};

inline Mechanism sensitivity_mechanism(const std::string& label,
                                       bool current_year_flavor) {
  if (label == "mar") return Mechanism::MAR;
  if (label == "mnar-t")
    return current_year_flavor ? Mechanism::TeacherCurrentYear
                               : Mechanism::TeacherNextYear;
  if (label == "mnar-s") return Mechanism::StudentOnly;
  if (label == "mnar-b")
    return current_year_flavor ? Mechanism::TeacherAndStudentCurrentYear
                               : Mechanism::TeacherAndStudentNextYear;
  throw Error("unknown sensitivity model '" + label +
              "' (expected mar, mnar-t, mnar-s, or mnar-b)");
}

/// Fits the requested mechanism ladder on one cohort and compares every
/// non-ignorable variant against the ignorable baseline. A variant that fails
/// (separation, non-convergence guard) is reported, not fatal.
inline SensitivityReport run_sensitivity(const CohortData& cohort,
                                         const ModelSpec& base,
                                         const SensitivityOptions& opts = {}) {
  SensitivityReport rep;
  rep.compare_g = opts.compare_g;
  rep.compare_t = opts.compare_t;
  const bool current_flavor = is_current_year(base.mechanism);
  for (const auto& label : opts.models) {
    ModelRun run;
    run.label = label;
    run.mechanism = sensitivity_mechanism(label, current_flavor);
    ModelSpec spec = base;
    spec.mechanism = run.mechanism;
    if (!has_attendance(run.mechanism)) {
      spec.attnd_terms.clear();
      spec.attendance_years.clear();
    } else if (!base.attendance_years.empty()) {
      // Keep only the years this mechanism can model.
      const int t_min = is_current_year(run.mechanism) ? 1 : 2;
      spec.attendance_years.clear();
      for (int t : base.attendance_years)
        if (t >= t_min) spec.attendance_years.push_back(t);
    }
    try {
      run.fit = fit(cohort, spec, opts.fit);
      run.ok = true;
    } catch (const Error& e) {
      run.error = e.what();
    }
    rep.runs.push_back(std::move(run));
  }

  const ModelRun* mar = nullptr;
  for (const auto& run : rep.runs)
    if (run.label == "mar" && run.ok) mar = &run;
  if (mar) {
    const auto base_effects =
        future_year_effects(mar->fit, opts.compare_g, opts.compare_t);
    for (const auto& run : rep.runs) {
      if (!run.ok || run.label == "mar") continue;
      const auto effects =
          future_year_effects(run.fit, opts.compare_g, opts.compare_t);
      rep.rho[run.label] = effect_correlation(effects, base_effects);
      rep.rank_rho[run.label] = effect_rank_correlation(effects, base_effects);
      Crosstabs tabs;
      tabs.quartile = quartile_crosstab(effects, base_effects);
      tabs.ci = ci_crosstab(effects, base_effects);
      rep.tabs[run.label] = tabs;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Writers

inline nlohmann::json params_to_json(const ParameterSet& p) {
  nlohmann::json j;
  j["beta_score"] = std::vector<double>(p.beta_score.begin(), p.beta_score.end());
  j["beta_attnd"] = std::vector<double>(p.beta_attnd.begin(), p.beta_attnd.end());
  j["sigma2"] = std::vector<double>(p.sigma2.begin(), p.sigma2.end());
  auto mat_to_json = [](const Mat& B) {
    std::vector<std::vector<double>> rows;
    for (int a = 0; a < B.rows(); ++a)
      rows.emplace_back(B.row(a).begin(), B.row(a).end());
    return rows;
  };
  j["gamma_stu"] = mat_to_json(p.gamma.gamma_stu);
  std::vector<std::vector<std::vector<double>>> years;
  for (const auto& B : p.gamma.gamma_year) years.push_back(mat_to_json(B));
  j["gamma_year"] = years;
  return j;
}

inline ParameterSet params_from_json(const nlohmann::json& j) {
  ParameterSet p;
  auto vec = [](const nlohmann::json& a) {
    Vec v(a.size());
    for (size_t k = 0; k < a.size(); ++k) v[k] = a[k].get<double>();
    return v;
  };
  auto mat = [](const nlohmann::json& a) {
    const int r = static_cast<int>(a.size());
    const int c = r ? static_cast<int>(a[0].size()) : 0;
    Mat B(r, c);
    for (int i = 0; i < r; ++i)
      for (int k = 0; k < c; ++k) B(i, k) = a[i][k].get<double>();
    return B;
  };
  p.beta_score = vec(j.at("beta_score"));
  p.beta_attnd = vec(j.at("beta_attnd"));
  p.sigma2 = vec(j.at("sigma2"));
  p.gamma.gamma_stu = mat(j.at("gamma_stu"));
  for (const auto& B : j.at("gamma_year")) p.gamma.gamma_year.push_back(mat(B));
  return p;
}

inline void write_params_json(const FitResult& fit, std::ostream& out) {
  nlohmann::json j;
  j["mechanism"] = mechanism_name(fit.mechanism);
  j["converged"] = fit.converged;
  j["neg2loglik"] = fit.neg2loglik;
  j["iterations"] = fit.iterations;
  j["monotonicity_violations"] = fit.monotonicity_violations;
  j["attendance_years"] = fit.att_years;
  j["scale"] = {{"center", fit.scale.center}, {"spread", fit.scale.spread}};
  j["params"] = params_to_json(fit.params);
  nlohmann::json est = nlohmann::json::array();
  for (size_t k = 0; k < fit.param_names.size(); ++k) {
    nlohmann::json e;
    e["name"] = fit.param_names[k];
    e["value"] = fit.natural[k];
    if (fit.se[k]) e["se"] = *fit.se[k];
    else e["se"] = nullptr;
    est.push_back(e);
  }
  j["estimates"] = est;
  if (!fit.se_note.empty()) j["se_note"] = fit.se_note;
  j["notes"] = fit.notes;
  out << j.dump(2) << "\n";
}

inline void write_eblups_csv(const FitResult& fit, std::ostream& out) {
  out << "type,id,year,target_year,value,sd,lo,hi,class\n";
  char buf[256];
  for (const auto& rec : fit.eblups) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%.10g,%.10g,%.10g,%.10g,%c\n",
                  effect_type_name(rec.type).c_str(), rec.id.c_str(), rec.g,
                  rec.t, rec.value, rec.sd, rec.lo, rec.hi, rec.cls);
    out << buf;
  }
}

inline std::vector<EblupRecord> read_eblups_csv(std::istream& in) {
  CsvReader reader(in);
  std::vector<std::string> fields;
  if (!reader.next(fields) || fields.size() != 9 || fields[0] != "type")
    throw Error("eblups csv: bad header");
  std::vector<EblupRecord> out;
  while (reader.next(fields)) {
    if (fields.size() != 9)
      throw Error("eblups csv: record " + std::to_string(reader.record_no()) +
                  " has " + std::to_string(fields.size()) + " fields");
    EblupRecord rec;
    bool known = false;
    for (EffectType ty :
         {EffectType::StudentScore, EffectType::StudentAttnd,
          EffectType::TeacherScore, EffectType::TeacherAttnd})
      if (effect_type_name(ty) == fields[0]) {
        rec.type = ty;
        known = true;
      }
    if (!known) throw Error("eblups csv: unknown effect type '" + fields[0] + "'");
    rec.id = fields[1];
    rec.g = std::stoi(fields[2]);
    rec.t = std::stoi(fields[3]);
    rec.value = std::stod(fields[4]);
    rec.sd = std::stod(fields[5]);
    rec.lo = std::stod(fields[6]);
    rec.hi = std::stod(fields[7]);
    rec.cls = fields[8].empty() ? '0' : fields[8][0];
    out.push_back(rec);
  }
  return out;
}

template <int N>
inline void write_crosstab_csv(const Eigen::Matrix<int, N, N>& tab,
                               const std::vector<std::string>& labels,
                               const std::string& row_model,
                               const std::string& col_model,
                               std::ostream& out) {
  out << row_model << "\\" << col_model;
  for (const auto& lb : labels) out << "," << lb;
  out << "\n";
  for (int r = 0; r < N; ++r) {
    out << labels[r];
    for (int c = 0; c < N; ++c) out << "," << tab(r, c);
    out << "\n";
  }
}

inline void write_summary_text(const SensitivityReport& rep, std::ostream& out) {
  std::vector<std::string> names;
  for (const auto& run : rep.runs)
    if (run.ok)
      for (const auto& nm : run.fit.param_names)
        if (std::find(names.begin(), names.end(), nm) == names.end())
          names.push_back(nm);

  const int name_w = 24, col_w = 20;
  auto pad = [&](std::string s, int w) {
    if (static_cast<int>(s.size()) > w - 1) s = s.substr(0, w - 1);
    return s + std::string(w - s.size(), ' ');
  };
  out << "parameter estimates (standard errors)\n\n";
  out << pad("", name_w);
  for (const auto& run : rep.runs) out << pad(run.label, col_w);
  out << "\n";
  char buf[128];
  for (const auto& nm : names) {
    out << pad(nm, name_w);
    for (const auto& run : rep.runs) {
      std::string cell = "-";
      if (run.ok) {
        for (size_t k = 0; k < run.fit.param_names.size(); ++k)
          if (run.fit.param_names[k] == nm) {
            if (run.fit.se[k])
              std::snprintf(buf, sizeof buf, "%.3f (%.3f)", run.fit.natural[k],
                            *run.fit.se[k]);
            else
              std::snprintf(buf, sizeof buf, "%.3f", run.fit.natural[k]);
            cell = buf;
            break;
          }
      }
      out << pad(cell, col_w);
    }
    out << "\n";
  }
  auto stat_row = [&](const std::string& label, auto getter) {
    out << pad(label, name_w);
    for (const auto& run : rep.runs) out << pad(getter(run), col_w);
    out << "\n";
  };
  stat_row("-2 loglik", [&](const ModelRun& run) -> std::string {
    if (!run.ok) return "failed";
    std::snprintf(buf, sizeof buf, "%.3f", run.fit.neg2loglik);
    return buf;
  });
  stat_row("EM iterations", [&](const ModelRun& run) -> std::string {
    return run.ok ? std::to_string(run.fit.iterations) : "-";
  });
  stat_row("converged", [&](const ModelRun& run) -> std::string {
    return run.ok ? (run.fit.converged ? "yes" : "no") : "-";
  });
  out << "\nagreement with the mar run (year-" << rep.compare_g
      << " teacher effects on year-" << rep.compare_t << " outcomes)\n\n";
  stat_row("pearson rho", [&](const ModelRun& run) -> std::string {
    if (run.label == "mar") return run.ok ? "1.000" : "-";
    auto it = rep.rho.find(run.label);
    if (it == rep.rho.end() || !it->second) return "-";
    std::snprintf(buf, sizeof buf, "%.4f", *it->second);
    return buf;
  });
  stat_row("rank rho", [&](const ModelRun& run) -> std::string {
    if (run.label == "mar") return run.ok ? "1.000" : "-";
    auto it = rep.rank_rho.find(run.label);
    if (it == rep.rank_rho.end() || !it->second) return "-";
    std::snprintf(buf, sizeof buf, "%.4f", *it->second);
    return buf;
  });
  for (const auto& run : rep.runs) {
    if (run.ok) continue;
    out << "\n" << run.label << " failed: " << run.error << "\n";
  }
}

/// Writes one sensitivity run to a directory: per-model parameter and effect
/// files, cross-tabs against the MAR run, and a plain-text summary.
inline void write_report_dir(const SensitivityReport& rep,
                             const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& run : rep.runs) {
    if (!run.ok) continue;
    std::ofstream pj(dir + "/params_" + run.label + ".json");
    write_params_json(run.fit, pj);
    std::ofstream eb(dir + "/eblups_" + run.label + ".csv");
    write_eblups_csv(run.fit, eb);
  }
  for (const auto& [label, tabs] : rep.tabs) {
    {
      std::ofstream out(dir + "/crosstab_quartile_" + label + ".csv");
      write_crosstab_csv(tabs.quartile, {"q1", "q2", "q3", "q4"}, label, "mar",
                         out);
    }
    {
      std::ofstream out(dir + "/crosstab_ci_" + label + ".csv");
      write_crosstab_csv(tabs.ci, {"-", "0", "+"}, label, "mar", out);
    }
  }
  std::ofstream sum(dir + "/summary.txt");
  write_summary_text(rep, sum);
}

}  // namespace cpmvam
