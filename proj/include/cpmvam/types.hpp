#pragma once

// Core value types shared by every module: cohort data, model specification,
// and the parameter set of the joint score/attendance model.

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpmvam {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// All recoverable failures (bad input, non-convergence guards, dimension
/// mismatches) surface as this type; callers catch it at the CLI boundary.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raw covariate values keyed by column name; empty string means missing.
using Covariates = std::map<std::string, std::string>;

struct ObservationRow {
  std::string student_id;
  int year = 0;
  std::string teacher_id;  // empty: no class link that year
  std::optional<double> score;  // absent <=> the outcome was not observed
  Covariates covariates;
};

/// Affine map back to the raw score scale: raw = center + spread * value.
struct ScaleInfo {
  double center = 0.0;
  double spread = 1.0;
};

/// A finalized long-format cohort. Index structures are built once by
/// finalize_cohort and treated as immutable afterwards.
struct CohortData {
  int n = 0;  // students
  int T = 0;  // years
  std::vector<std::string> student_ids;              // index -> id, input order
  std::vector<std::vector<std::string>> rosters;     // [g-1] -> teacher ids
  std::vector<ObservationRow> rows;                  // input order
  ScaleInfo scale;

  // Derived indexes (filled by finalize_cohort).
  std::map<std::string, int> student_index;
  std::vector<std::map<std::string, int>> teacher_index;  // per year
  std::vector<std::vector<int>> row_at;      // [i][g-1] -> row index or -1
  std::vector<std::vector<int>> teacher_of;  // [i][g-1] -> roster index or -1
  std::vector<std::vector<int>> obs_years;   // years with an observed score, ascending

  int dropped_no_first_year = 0;
  int dropped_unlinked = 0;

  int m(int g) const { return static_cast<int>(rosters.at(g - 1).size()); }
  bool has_score(int i, int g) const {
    const int r = row_at[i][g - 1];
    return r >= 0 && rows[r].score.has_value();
  }
};

/// Validates rows (unique (student, year), years in [1, T], teacher links
/// consistent) and builds the index structures. Shared by the CSV parser and
/// the simulator so both produce identical cohorts for identical rows.
inline CohortData finalize_cohort(std::vector<ObservationRow> rows, int T,
                                  ScaleInfo scale = {}) {
  CohortData c;
  c.T = T;
  c.scale = scale;
  c.rows = std::move(rows);
  if (c.T < 1) throw Error("finalize_cohort: horizon T must be >= 1");
  c.rosters.resize(c.T);
  c.teacher_index.resize(c.T);
  for (const auto& row : c.rows) {
    if (row.year < 1 || row.year > c.T)
      throw Error("finalize_cohort: year " + std::to_string(row.year) +
                  " outside [1," + std::to_string(c.T) + "] for student " +
                  row.student_id);
    if (!c.student_index.count(row.student_id)) {
      c.student_index[row.student_id] = static_cast<int>(c.student_ids.size());
      c.student_ids.push_back(row.student_id);
    }
    if (!row.teacher_id.empty()) {
      auto& idx = c.teacher_index[row.year - 1];
      if (!idx.count(row.teacher_id)) {
        idx[row.teacher_id] = static_cast<int>(c.rosters[row.year - 1].size());
        c.rosters[row.year - 1].push_back(row.teacher_id);
      }
    }
  }
  c.n = static_cast<int>(c.student_ids.size());
  c.row_at.assign(c.n, std::vector<int>(c.T, -1));
  c.teacher_of.assign(c.n, std::vector<int>(c.T, -1));
  c.obs_years.assign(c.n, {});
  for (int k = 0; k < static_cast<int>(c.rows.size()); ++k) {
    const auto& row = c.rows[k];
    const int i = c.student_index.at(row.student_id);
    const int g = row.year;
    if (c.row_at[i][g - 1] >= 0)
      throw Error("finalize_cohort: duplicate (student, year) pair (" +
                  row.student_id + ", " + std::to_string(g) + ")");
    c.row_at[i][g - 1] = k;
    if (!row.teacher_id.empty())
      c.teacher_of[i][g - 1] = c.teacher_index[g - 1].at(row.teacher_id);
  }
  for (int i = 0; i < c.n; ++i)
    for (int g = 1; g <= c.T; ++g)
      if (c.has_score(i, g)) c.obs_years[i].push_back(g);
  return c;
}

/// How score observation relates to the random effects. "NextYear" variants
/// model year-t observation with the year-(t-1) teacher's effect; "CurrentYear"
/// variants use the year-t teacher.
enum class Mechanism {
  MAR,
  TeacherNextYear,
  TeacherCurrentYear,
  StudentOnly,
  TeacherAndStudentNextYear,
  TeacherAndStudentCurrentYear,
};

inline bool has_attendance(Mechanism m) { return m != Mechanism::MAR; }

inline bool has_teacher_attendance(Mechanism m) {
  return m == Mechanism::TeacherNextYear || m == Mechanism::TeacherCurrentYear ||
         m == Mechanism::TeacherAndStudentNextYear ||
         m == Mechanism::TeacherAndStudentCurrentYear;
}

inline bool has_student_attendance(Mechanism m) {
  return m == Mechanism::StudentOnly ||
         m == Mechanism::TeacherAndStudentNextYear ||
         m == Mechanism::TeacherAndStudentCurrentYear;
}

/// True when the attendance indicator for year t loads on the year-t teacher.
inline bool is_current_year(Mechanism m) {
  return m == Mechanism::TeacherCurrentYear ||
         m == Mechanism::TeacherAndStudentCurrentYear;
}

inline std::string mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::MAR: return "mar";
    case Mechanism::TeacherNextYear: return "teacher-next-year";
    case Mechanism::TeacherCurrentYear: return "teacher-current-year";
    case Mechanism::StudentOnly: return "student-only";
    case Mechanism::TeacherAndStudentNextYear: return "both-next-year";
    case Mechanism::TeacherAndStudentCurrentYear: return "both-current-year";
  }
  throw Error("mechanism_name: unknown mechanism");
}

inline Mechanism parse_mechanism(const std::string& s) {
  for (Mechanism m : {Mechanism::MAR, Mechanism::TeacherNextYear,
                      Mechanism::TeacherCurrentYear, Mechanism::StudentOnly,
                      Mechanism::TeacherAndStudentNextYear,
                      Mechanism::TeacherAndStudentCurrentYear})
    if (mechanism_name(m) == s) return m;
  throw Error("unknown mechanism '" + s +
              "' (expected mar, teacher-next-year, teacher-current-year, "
              "student-only, both-next-year, or both-current-year)");
}

/// Years whose observation indicators are modeled when none are given
/// explicitly. Current-year variants can carry effects in every year;
/// next-year and student-only variants start at year 2, where entry into the
/// cohort has already happened and dropout can show up.
inline std::vector<int> default_attendance_years(Mechanism m, int T) {
  std::vector<int> years;
  if (!has_attendance(m)) return years;
  for (int t = is_current_year(m) ? 1 : 2; t <= T; ++t) years.push_back(t);
  return years;
}

/// One fixed-effect term. Categorical terms are dummy-coded against their
/// first level; a missing bucket (when declared) becomes an explicit level.
struct TermSpec {
  std::string name;
  bool categorical = true;
  std::vector<std::string> levels;  // optional declared order; first = reference
  bool missing_bucket = false;
};

struct ModelSpec {
  Mechanism mechanism = Mechanism::MAR;
  std::vector<TermSpec> score_terms;
  std::vector<TermSpec> attnd_terms;
  std::vector<int> attendance_years;  // empty: defaults with auto-drop
  int T = 0;                          // 0: take the cohort's horizon
};

/// Random-effect covariance blocks: one student block shared by all students
/// and one block per year shared by that year's teachers.
struct CovarianceBlocks {
  Mat gamma_stu;
  std::vector<Mat> gamma_year;  // [g-1]
};

struct ParameterSet {
  Vec beta_score;
  Vec beta_attnd;  // empty for MAR fits; simulation truths keep dropout intercepts
  Vec sigma2;      // one residual variance per year
  CovarianceBlocks gamma;
};

}  // namespace cpmvam
