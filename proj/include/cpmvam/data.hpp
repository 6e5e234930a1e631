#pragma once

// Long-format CSV ingest and score standardization.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cpmvam/csv.hpp"
#include "cpmvam/types.hpp"

namespace cpmvam {

struct CsvSchema {
  std::string student_col = "student_id";
  std::string year_col = "year";
  std::string teacher_col = "teacher_id";  // column may be absent entirely
  std::string score_col = "score";
  std::vector<std::string> covariate_cols;  // empty: every other column
  int expected_T = 0;                       // 0: infer from the data
};

struct IngestOptions {
  bool require_first_year = true;  // drop students with no year-1 row
  // A row with a score but no class link is always an error; a linkless row
  // without a score is kept (it still informs attendance) unless set to drop.
  bool drop_unlinked = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_int(const std::string& s, int& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  size_t used = 0;
  try {
    out = std::stoi(t, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == t.size();
}

inline bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  size_t used = 0;
  try {
    out = std::stod(t, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == t.size();
}

}  // namespace detail

/// Parses one cohort from long-format CSV: one row per (student, year).
/// An empty score field means the outcome was not observed that year.
inline CohortData parse_long_csv(std::istream& in, const CsvSchema& schema,
                                 const IngestOptions& opts = {}) {
  CsvReader reader(in);
  std::vector<std::string> header;
  if (!reader.next(header)) throw Error("csv: empty input");
  auto col_of = [&](const std::string& name) {
    for (size_t k = 0; k < header.size(); ++k)
      if (detail::trim(header[k]) == name) return static_cast<int>(k);
    return -1;
  };
  const int c_student = col_of(schema.student_col);
  const int c_year = col_of(schema.year_col);
  const int c_teacher = col_of(schema.teacher_col);
  const int c_score = col_of(schema.score_col);
  if (c_student < 0) throw Error("csv: missing column '" + schema.student_col + "'");
  if (c_year < 0) throw Error("csv: missing column '" + schema.year_col + "'");
  if (c_score < 0) throw Error("csv: missing column '" + schema.score_col + "'");

  std::vector<std::pair<std::string, int>> cov_cols;
  if (schema.covariate_cols.empty()) {
    for (size_t k = 0; k < header.size(); ++k) {
      const int ki = static_cast<int>(k);
      if (ki == c_student || ki == c_year || ki == c_teacher || ki == c_score)
        continue;
      cov_cols.emplace_back(detail::trim(header[k]), ki);
    }
  } else {
    for (const auto& name : schema.covariate_cols) {
      const int k = col_of(name);
      if (k < 0) throw Error("csv: missing covariate column '" + name + "'");
      cov_cols.emplace_back(name, k);
    }
  }

  std::vector<ObservationRow> rows;
  std::vector<std::string> fields;
  int max_year = 0;
  int dropped_unlinked = 0;
  while (reader.next(fields)) {
    bool all_empty = true;
    for (const auto& f : fields)
      if (!detail::trim(f).empty()) all_empty = false;
    if (all_empty) continue;
    if (fields.size() != header.size())
      throw Error("csv: record " + std::to_string(reader.record_no()) + " has " +
                  std::to_string(fields.size()) + " fields, expected " +
                  std::to_string(header.size()));
    ObservationRow row;
    row.student_id = detail::trim(fields[c_student]);
    if (row.student_id.empty())
      throw Error("csv: record " + std::to_string(reader.record_no()) +
                  ": empty student id");
    if (!detail::parse_int(fields[c_year], row.year))
      throw Error("csv: record " + std::to_string(reader.record_no()) +
                  ": cannot parse year '" + fields[c_year] + "'");
    if (c_teacher >= 0) row.teacher_id = detail::trim(fields[c_teacher]);
    const std::string score_text = detail::trim(fields[c_score]);
    if (!score_text.empty()) {
      double v = 0.0;
      if (!detail::parse_double(score_text, v))
        throw Error("csv: record " + std::to_string(reader.record_no()) +
                    ": cannot parse score '" + score_text + "'");
      row.score = v;
    }
    if (row.teacher_id.empty()) {
      if (row.score.has_value())
        throw Error("csv: record " + std::to_string(reader.record_no()) +
                    ": student " + row.student_id + " year " +
                    std::to_string(row.year) +
                    " has a score but no class link");
      if (opts.drop_unlinked) {
        ++dropped_unlinked;
        continue;
      }
    }
    for (const auto& [name, k] : cov_cols)
      row.covariates[name] = detail::trim(fields[k]);
    max_year = std::max(max_year, row.year);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("csv: no data rows");

  int dropped_first = 0;
  if (opts.require_first_year) {
    std::set<std::string> has_first;
    for (const auto& row : rows)
      if (row.year == 1) has_first.insert(row.student_id);
    std::vector<ObservationRow> kept;
    std::set<std::string> dropped_ids;
    for (auto& row : rows) {
      if (has_first.count(row.student_id)) kept.push_back(std::move(row));
      else dropped_ids.insert(row.student_id);
    }
    dropped_first = static_cast<int>(dropped_ids.size());
    rows = std::move(kept);
    if (rows.empty()) throw Error("csv: no students with a first-year row");
  }

  const int T = schema.expected_T > 0 ? schema.expected_T : max_year;
  CohortData c = finalize_cohort(std::move(rows), T);
  c.dropped_no_first_year = dropped_first;
  c.dropped_unlinked = dropped_unlinked;
  return c;
}

/// Centers and scales all observed scores jointly to mean 0, variance 1
/// (population denominator). The affine map back to the raw scale composes
/// with any scaling already applied.
inline CohortData standardize_scores(const CohortData& input) {
  double sum = 0.0;
  int count = 0;
  for (const auto& row : input.rows)
    if (row.score) {
      sum += *row.score;
      ++count;
    }
  if (count < 2) throw Error("standardize_scores: need at least two observed scores");
  const double mean = sum / count;
  double ss = 0.0;
  for (const auto& row : input.rows)
    if (row.score) ss += (*row.score - mean) * (*row.score - mean);
  const double sd = std::sqrt(ss / count);
  if (!(sd > 0.0))
    throw Error("standardize_scores: all observed scores are equal");
  CohortData out = input;
  for (auto& row : out.rows)
    if (row.score) row.score = (*row.score - mean) / sd;
  out.scale.center = input.scale.center + input.scale.spread * mean;
  out.scale.spread = input.scale.spread * sd;
  return out;
}

/// Writes a cohort back to long-format CSV (the parser's inverse for cohorts
/// whose covariate sets agree across rows).
inline void write_cohort_csv(const CohortData& c, std::ostream& out,
                             const CsvSchema& schema = {}) {
  std::vector<std::string> cov_names;
  for (const auto& row : c.rows)
    for (const auto& [name, value] : row.covariates)
      if (std::find(cov_names.begin(), cov_names.end(), name) == cov_names.end())
        cov_names.push_back(name);
  std::vector<std::string> fields = {schema.student_col, schema.year_col,
                                     schema.teacher_col, schema.score_col};
  fields.insert(fields.end(), cov_names.begin(), cov_names.end());
  write_csv_record(out, fields);
  char buf[64];
  for (const auto& row : c.rows) {
    fields.clear();
    fields.push_back(row.student_id);
    fields.push_back(std::to_string(row.year));
    fields.push_back(row.teacher_id);
    if (row.score) {
      std::snprintf(buf, sizeof buf, "%.17g", *row.score);
      fields.push_back(buf);
    } else {
      fields.push_back("");
    }
    for (const auto& name : cov_names) {
      auto it = row.covariates.find(name);
      fields.push_back(it == row.covariates.end() ? "" : it->second);
    }
    write_csv_record(out, fields);
  }
}

}  // namespace cpmvam
