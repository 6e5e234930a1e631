#pragma once

// Plain key=value run configuration: data schema, model specification, fit
// controls, and report options. Lines starting with '#' are comments.

#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "cpmvam/data.hpp"
#include "cpmvam/report.hpp"

namespace cpmvam {

struct RunConfig {
  CsvSchema schema;
  IngestOptions ingest;
  bool standardize = true;
  ModelSpec spec;
  FitOptions fit;
  SensitivityOptions sens;
};

namespace detail {

inline bool parse_bool_text(const std::string& v, const std::string& key) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw Error("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == sep && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

/// Term syntax: name[:cat|:cont][(level|level|...)][+missing]
inline TermSpec parse_term(std::string text) {
  TermSpec term;
  text = trim(text);
  if (text.size() >= 8 && text.substr(text.size() - 8) == "+missing") {
    term.missing_bucket = true;
    text = trim(text.substr(0, text.size() - 8));
  }
  std::string levels;
  const auto lp = text.find('(');
  if (lp != std::string::npos) {
    const auto rp = text.rfind(')');
    if (rp == std::string::npos || rp < lp)
      throw Error("config: unbalanced level list in term '" + text + "'");
    levels = text.substr(lp + 1, rp - lp - 1);
    text = trim(text.substr(0, lp) + text.substr(rp + 1));
  }
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::string kind = trim(text.substr(colon + 1));
    if (kind == "cat") term.categorical = true;
    else if (kind == "cont") term.categorical = false;
    else throw Error("config: term kind '" + kind + "' must be cat or cont");
    text = trim(text.substr(0, colon));
  }
  if (text.empty()) throw Error("config: empty term name");
  term.name = text;
  if (!levels.empty()) {
    for (const auto& lv : split_list(levels, '|')) term.levels.push_back(lv);
    if (!term.categorical)
      throw Error("config: level list on continuous term '" + term.name + "'");
  }
  return term;
}

inline std::vector<TermSpec> parse_terms(const std::string& v) {
  std::vector<TermSpec> out;
  for (const auto& item : split_list(v, ',')) out.push_back(parse_term(item));
  return out;
}

inline std::vector<int> parse_int_list(const std::string& v,
                                       const std::string& key) {
  std::vector<int> out;
  for (const auto& item : split_list(v, ',')) {
    int value = 0;
    if (!parse_int(item, value))
      throw Error("config: key '" + key + "' expects integers, got '" + item +
                  "'");
    out.push_back(value);
  }
  return out;
}

inline double parse_double_checked(const std::string& v,
                                   const std::string& key) {
  double value = 0.0;
  if (!parse_double(v, value))
    throw Error("config: key '" + key + "' expects a number, got '" + v + "'");
  return value;
}

inline int parse_int_checked(const std::string& v, const std::string& key) {
  int value = 0;
  if (!parse_int(v, value))
    throw Error("config: key '" + key + "' expects an integer, got '" + v + "'");
  return value;
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string text = detail::trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos)
      throw Error("config: line " + std::to_string(line_no) +
                  " is not key = value");
    const std::string key = detail::trim(text.substr(0, eq));
    const std::string value = detail::trim(text.substr(eq + 1));

    if (key == "data.student_col") cfg.schema.student_col = value;
    else if (key == "data.year_col") cfg.schema.year_col = value;
    else if (key == "data.teacher_col") cfg.schema.teacher_col = value;
    else if (key == "data.score_col") cfg.schema.score_col = value;
    else if (key == "data.covariate_cols")
      cfg.schema.covariate_cols = detail::split_list(value, ',');
    else if (key == "data.T")
      cfg.schema.expected_T = detail::parse_int_checked(value, key);
    else if (key == "data.require_first_year")
      cfg.ingest.require_first_year = detail::parse_bool_text(value, key);
    else if (key == "data.drop_unlinked")
      cfg.ingest.drop_unlinked = detail::parse_bool_text(value, key);
    else if (key == "data.standardize")
      cfg.standardize = detail::parse_bool_text(value, key);
    else if (key == "model.mechanism")
      cfg.spec.mechanism = parse_mechanism(value);
    else if (key == "model.score_terms")
      cfg.spec.score_terms = detail::parse_terms(value);
    else if (key == "model.attnd_terms")
      cfg.spec.attnd_terms = detail::parse_terms(value);
    else if (key == "model.attendance_years")
      cfg.spec.attendance_years = detail::parse_int_list(value, key);
    else if (key == "fit.em_tol")
      cfg.fit.em.em_rel_tol = detail::parse_double_checked(value, key);
    else if (key == "fit.param_tol")
      cfg.fit.em.param_tol = detail::parse_double_checked(value, key);
    else if (key == "fit.max_em")
      cfg.fit.em.max_em_iter = detail::parse_int_checked(value, key);
    else if (key == "fit.mode_tol")
      cfg.fit.em.mode.tol = detail::parse_double_checked(value, key);
    else if (key == "fit.mode_max_iter")
      cfg.fit.em.mode.max_iter = detail::parse_int_checked(value, key);
    else if (key == "fit.se")
      cfg.fit.compute_se = detail::parse_bool_text(value, key);
    else if (key == "fit.pin_attendance_corr")
      cfg.fit.pin_attendance_corr = detail::parse_bool_text(value, key);
    else if (key == "fit.start_gamma_diag")
      cfg.fit.start_gamma_diag = detail::parse_double_checked(value, key);
    else if (key == "report.models")
      cfg.sens.models = detail::split_list(value, ',');
    else if (key == "report.compare_g")
      cfg.sens.compare_g = detail::parse_int_checked(value, key);
    else if (key == "report.compare_t")
      cfg.sens.compare_t = detail::parse_int_checked(value, key);
    else
      throw Error("config: unknown key '" + key + "' on line " +
                  std::to_string(line_no));
  }
  cfg.sens.fit = cfg.fit;
  return cfg;
}

}  // namespace cpmvam
