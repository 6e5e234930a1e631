#pragma once

// Random-effect layout, attendance-row enumeration, covariate encoding, and
// the sparse score/attendance design matrices.
//
// The joint effect vector is ordered: every student block first (score effect,
// then attendance effect when the mechanism has one), then teacher blocks by
// year and roster position. A year-g teacher block holds the persistence
// effects on years g..T followed by the attendance effect when present.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cpmvam/types.hpp"

namespace cpmvam {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

struct EtaBlock {
  bool is_student = false;
  int index = -1;  // student index, or roster index within the year
  int g = 0;       // teacher year (students: 0)
  int offset = 0;
  int dim = 0;
  int n_theta = 0;  // persistence coordinates (teachers only)
  bool has_attnd = false;
};

struct EtaLayout {
  int q = 0;
  int n = 0;
  int T = 0;
  Mechanism mechanism = Mechanism::MAR;
  int student_dim = 1;
  std::vector<int> m;  // teachers per year
  std::vector<EtaBlock> blocks;
  std::vector<int> student_block;
  std::vector<std::vector<int>> teacher_block;  // [g-1][j]

  bool teacher_has_lambda(int g) const {
    return has_teacher_attendance(mechanism) &&
           (is_current_year(mechanism) || g < T);
  }
  int teacher_dim(int g) const {
    return (T - g + 1) + (teacher_has_lambda(g) ? 1 : 0);
  }
  int delta(int i) const { return blocks[student_block[i]].offset; }
  int delta_attnd(int i) const {
    if (student_dim != 2)
      throw Error("layout: mechanism has no student attendance effect");
    return blocks[student_block[i]].offset + 1;
  }
  /// Coordinate of the year-g teacher j's effect on the year-t outcome.
  int theta(int g, int j, int t) const {
    if (t < g || t > T) throw Error("layout: persistence year out of range");
    return blocks[teacher_block[g - 1][j]].offset + (t - g);
  }
  int lambda(int g, int j) const {
    if (!teacher_has_lambda(g))
      throw Error("layout: year " + std::to_string(g) +
                  " teachers carry no attendance effect");
    const auto& b = blocks[teacher_block[g - 1][j]];
    return b.offset + b.n_theta;
  }
};

inline EtaLayout build_eta_layout_dims(int n, int T, const std::vector<int>& m,
                                       Mechanism mech) {
  if (static_cast<int>(m.size()) != T)
    throw Error("layout: need one roster size per year");
  EtaLayout L;
  L.n = n;
  L.T = T;
  L.mechanism = mech;
  L.m = m;
  L.student_dim = has_student_attendance(mech) ? 2 : 1;
  int off = 0;
  L.student_block.resize(n);
  for (int i = 0; i < n; ++i) {
    EtaBlock b;
    b.is_student = true;
    b.index = i;
    b.offset = off;
    b.dim = L.student_dim;
    b.has_attnd = L.student_dim == 2;
    L.student_block[i] = static_cast<int>(L.blocks.size());
    L.blocks.push_back(b);
    off += b.dim;
  }
  L.teacher_block.resize(T);
  for (int g = 1; g <= T; ++g) {
    L.teacher_block[g - 1].resize(m[g - 1]);
    for (int j = 0; j < m[g - 1]; ++j) {
      EtaBlock b;
      b.index = j;
      b.g = g;
      b.offset = off;
      b.n_theta = T - g + 1;
      b.has_attnd = L.teacher_has_lambda(g);
      b.dim = b.n_theta + (b.has_attnd ? 1 : 0);
      L.teacher_block[g - 1][j] = static_cast<int>(L.blocks.size());
      L.blocks.push_back(b);
      off += b.dim;
    }
  }
  L.q = off;
  return L;
}

inline EtaLayout build_eta_layout(const CohortData& c, Mechanism mech) {
  std::vector<int> m(c.T);
  for (int g = 1; g <= c.T; ++g) m[g - 1] = c.m(g);
  return build_eta_layout_dims(c.n, c.T, m, mech);
}

// ---------------------------------------------------------------------------
// Attendance rows

/// One modeled observation indicator: student's year-t score present or not,
/// linked to the teacher whose effect enters the predictor (j = -1 when the
/// student has no class in the linking year, or the mechanism is student-only).
struct AttendanceRow {
  int student = -1;
  int t = 0;  // modeled year
  int g = 0;  // linking year for the teacher effect (0 when none)
  int j = -1;
  bool r = false;
};

/// Enumerates modeled indicators year-major. With auto_drop set, years whose
/// indicators are all equal are removed (they carry no information and would
/// separate the probit); each removal is reported through notes.
inline std::vector<AttendanceRow> attendance_rows(
    const CohortData& c, Mechanism mech, std::vector<int> years,
    bool auto_drop, std::vector<std::string>* notes = nullptr,
    std::vector<int>* years_used = nullptr) {
  if (!has_attendance(mech))
    throw Error("attendance_rows: mechanism has no attendance model");
  const int t_min = is_current_year(mech) ? 1 : 2;
  if (years.empty()) years = default_attendance_years(mech, c.T);
  std::sort(years.begin(), years.end());
  years.erase(std::unique(years.begin(), years.end()), years.end());
  for (int t : years)
    if (t < t_min || t > c.T)
      throw Error("attendance_rows: year " + std::to_string(t) +
                  " cannot be modeled under mechanism " + mechanism_name(mech));
  if (years.empty()) throw Error("attendance_rows: no modeled years");

  std::vector<AttendanceRow> out;
  std::vector<int> kept;
  for (int t : years) {
    std::vector<AttendanceRow> batch;
    int n1 = 0;
    for (int i = 0; i < c.n; ++i) {
      AttendanceRow row;
      row.student = i;
      row.t = t;
      if (has_teacher_attendance(mech)) {
        const int gl = is_current_year(mech) ? t : t - 1;
        row.g = gl;
        row.j = c.teacher_of[i][gl - 1];
      }
      row.r = c.has_score(i, t);
      n1 += row.r ? 1 : 0;
      batch.push_back(row);
    }
    const int n0 = static_cast<int>(batch.size()) - n1;
    if (auto_drop && (n0 == 0 || n1 == 0)) {
      if (notes)
        notes->push_back("dropped attendance year " + std::to_string(t) +
                         ": all indicators are " + (n0 == 0 ? "1" : "0"));
      continue;
    }
    kept.push_back(t);
    out.insert(out.end(), batch.begin(), batch.end());
  }
  if (out.empty())
    throw Error("attendance_rows: no usable modeled years remain");
  if (years_used) *years_used = kept;
  return out;
}

// ---------------------------------------------------------------------------
// Covariate encoding

/// Resolves a covariate value for student i: the year-t row's own value when
/// available, else the student's earliest non-empty value (covariates recorded
/// once per student are the common case). Empty means missing. Pass t = 0 to
/// skip the row-level lookup.
inline std::string resolve_covariate(const CohortData& c, int i, int t,
                                     const std::string& key) {
  if (t >= 1 && t <= c.T) {
    const int k = c.row_at[i][t - 1];
    if (k >= 0) {
      auto it = c.rows[k].covariates.find(key);
      if (it != c.rows[k].covariates.end() && !it->second.empty())
        return it->second;
    }
  }
  for (int g = 1; g <= c.T; ++g) {
    const int k = c.row_at[i][g - 1];
    if (k < 0) continue;
    auto it = c.rows[k].covariates.find(key);
    if (it != c.rows[k].covariates.end() && !it->second.empty())
      return it->second;
  }
  return "";
}

inline const std::string kMissingLevel = "(missing)";

/// Dummy coding against the first level carrying data. A declared level order
/// fixes the reference; undeclared levels order by first appearance. A missing
/// bucket, when declared, becomes the last level.
struct CovariateEncoding {
  std::string name;
  bool categorical = true;
  std::vector<std::string> levels;  // [0] is the reference
  bool has_missing_level = false;
  int n_cols() const {
    return categorical ? static_cast<int>(levels.size()) - 1 : 1;
  }
  /// Column within this term's span for a resolved value; -1 for the reference.
  int column_of(const std::string& value) const {
    const std::string v = value.empty() && has_missing_level ? kMissingLevel : value;
    for (int k = 0; k < static_cast<int>(levels.size()); ++k)
      if (levels[k] == v) return k - 1;
    throw Error("covariate '" + name + "': unknown level '" + value + "'");
  }
};

inline std::vector<CovariateEncoding> encode_covariates(
    const CohortData& c, const std::vector<TermSpec>& terms) {
  std::vector<CovariateEncoding> out;
  for (const auto& term : terms) {
    CovariateEncoding enc;
    enc.name = term.name;
    enc.categorical = term.categorical;
    if (!term.categorical) {
      if (term.missing_bucket)
        throw Error("covariate '" + term.name +
                    "': missing bucket requires a categorical term");
      out.push_back(enc);
      continue;
    }
    // Collect levels with data: per-row values, then per-student values (the
    // latter is what attendance rows see for students with no row that year).
    std::vector<std::string> seen;
    bool missing_seen = false;
    auto note = [&](const std::string& v) {
      if (v.empty()) {
        missing_seen = true;
        return;
      }
      if (v == kMissingLevel)
        throw Error("covariate '" + term.name + "': value collides with the " +
                    kMissingLevel + " bucket label");
      if (std::find(seen.begin(), seen.end(), v) == seen.end()) seen.push_back(v);
    };
    for (const auto& row : c.rows) {
      auto it = row.covariates.find(term.name);
      note(it == row.covariates.end() ? "" : it->second);
    }
    for (int i = 0; i < c.n; ++i) note(resolve_covariate(c, i, 0, term.name));
    if (missing_seen && !term.missing_bucket)
      throw Error("covariate '" + term.name +
                  "' has missing values and no missing bucket");
    if (!term.levels.empty()) {
      std::vector<std::string> ordered;
      for (const auto& lv : term.levels)
        if (std::find(seen.begin(), seen.end(), lv) != seen.end())
          ordered.push_back(lv);
      for (const auto& lv : seen)
        if (std::find(ordered.begin(), ordered.end(), lv) == ordered.end())
          throw Error("covariate '" + term.name + "': level '" + lv +
                      "' not in the declared level list");
      seen = ordered;
    }
    if (missing_seen && term.missing_bucket) seen.push_back(kMissingLevel);
    if (seen.size() < 2)
      throw Error("covariate '" + term.name +
                  "' needs at least two levels with data");
    enc.levels = seen;
    enc.has_missing_level = missing_seen && term.missing_bucket;
    out.push_back(enc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Separation check

struct SeparationLevel {
  std::string term;
  std::string level;
  int n0 = 0;
  int n1 = 0;
  bool flagged() const { return n0 == 0 || n1 == 0; }
};

struct SeparationReport {
  std::vector<SeparationLevel> levels;
  bool any_flagged() const {
    for (const auto& lv : levels)
      if (lv.flagged()) return true;
    return false;
  }
  std::string flagged_summary() const {
    std::string s;
    for (const auto& lv : levels) {
      if (!lv.flagged()) continue;
      if (!s.empty()) s += ", ";
      s += lv.term + "=" + lv.level + " (r=0: " + std::to_string(lv.n0) +
           ", r=1: " + std::to_string(lv.n1) + ")";
    }
    return s;
  }
};

inline SeparationReport count_separation(
    const CohortData& c, const std::vector<AttendanceRow>& rows,
    const std::vector<CovariateEncoding>& encodings) {
  SeparationReport rep;
  std::vector<int> years;
  for (const auto& row : rows)
    if (std::find(years.begin(), years.end(), row.t) == years.end())
      years.push_back(row.t);
  for (int t : years) {
    SeparationLevel lv;
    lv.term = "year";
    lv.level = std::to_string(t);
    for (const auto& row : rows)
      if (row.t == t) (row.r ? lv.n1 : lv.n0)++;
    rep.levels.push_back(lv);
  }
  for (const auto& enc : encodings) {
    if (!enc.categorical) continue;
    for (const auto& level : enc.levels) {
      SeparationLevel lv;
      lv.term = enc.name;
      lv.level = level;
      for (const auto& row : rows) {
        std::string v = resolve_covariate(c, row.student, 0, enc.name);
        if (v.empty() && enc.has_missing_level) v = kMissingLevel;
        if (v == level) (row.r ? lv.n1 : lv.n0)++;
      }
      rep.levels.push_back(lv);
    }
  }
  return rep;
}

/// Quasi-complete-separation screen for the attendance probit: every modeled
/// year and every categorical level must carry both observed and missing
/// outcomes. Runs on the full modeled-year set (no auto-drop) so callers see
/// exactly which levels are degenerate.
inline SeparationReport check_separation(
    const CohortData& c, const std::vector<CovariateEncoding>& attnd_encodings,
    Mechanism mech, std::vector<int> years = {}) {
  const auto rows = attendance_rows(c, mech, std::move(years), false);
  return count_separation(c, rows, attnd_encodings);
}

// ---------------------------------------------------------------------------
// Design matrices

struct DesignMatrices {
  // Score side: one row per observed score.
  Mat X;
  SpMat S;
  Vec y;
  std::vector<int> score_row_student;
  std::vector<int> score_row_year;
  std::vector<std::string> score_colnames;
  std::vector<CovariateEncoding> score_enc;

  // Attendance side: one row per modeled indicator.
  Mat W;
  SpMat Z;
  std::vector<AttendanceRow> att;
  std::vector<int> att_years;  // modeled years actually retained
  std::vector<std::string> attnd_colnames;
  std::vector<CovariateEncoding> attnd_enc;

  std::vector<std::string> notes;  // e.g. auto-dropped degenerate years

  int n_score_rows() const { return static_cast<int>(y.size()); }
  int n_att_rows() const { return static_cast<int>(att.size()); }
};

namespace detail {

inline void fill_covariate_columns(const CohortData& c, int student, int t,
                                   const std::vector<CovariateEncoding>& encs,
                                   Mat& dst, int row, int offset) {
  for (const auto& enc : encs) {
    const std::string v = resolve_covariate(c, student, t, enc.name);
    if (enc.categorical) {
      if (v.empty() && !enc.has_missing_level)
        throw Error("covariate '" + enc.name + "' missing for student " +
                    c.student_ids[student]);
      const int col = enc.column_of(v);
      if (col >= 0) dst(row, offset + col) = 1.0;
    } else {
      if (v.empty())
        throw Error("continuous covariate '" + enc.name +
                    "' missing for student " + c.student_ids[student]);
      size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(v, &used);
      } catch (const std::exception&) {
        throw Error("continuous covariate '" + enc.name +
                    "': cannot parse value '" + v + "'");
      }
      if (used != v.size())
        throw Error("continuous covariate '" + enc.name +
                    "': cannot parse value '" + v + "'");
      dst(row, offset) = x;
    }
    offset += enc.n_cols();
  }
}

inline void append_covariate_names(const std::vector<CovariateEncoding>& encs,
                                   std::vector<std::string>& names) {
  for (const auto& enc : encs) {
    if (enc.categorical) {
      for (size_t k = 1; k < enc.levels.size(); ++k)
        names.push_back(enc.name + "=" + enc.levels[k]);
    } else {
      names.push_back(enc.name);
    }
  }
}

}  // namespace detail

/// Builds the score design (yearly means plus covariates; sparse incidence of
/// student and persistence effects) and the attendance design (modeled-year
/// means plus covariates; incidence of attendance effects).
inline DesignMatrices build_designs(const CohortData& c, const ModelSpec& spec,
                                    const EtaLayout& L) {
  if (spec.T > 0 && spec.T != c.T)
    throw Error("build_designs: spec horizon " + std::to_string(spec.T) +
                " does not match the cohort horizon " + std::to_string(c.T));
  if (L.n != c.n || L.T != c.T)
    throw Error("build_designs: layout does not match the cohort");
  DesignMatrices dm;
  dm.score_enc = encode_covariates(c, spec.score_terms);

  int p_cov = 0;
  for (const auto& enc : dm.score_enc) p_cov += enc.n_cols();
  int n_rows = 0;
  for (int i = 0; i < c.n; ++i) n_rows += static_cast<int>(c.obs_years[i].size());

  dm.X = Mat::Zero(n_rows, c.T + p_cov);
  dm.y = Vec::Zero(n_rows);
  for (int g = 1; g <= c.T; ++g)
    dm.score_colnames.push_back("mu_y[" + std::to_string(g) + "]");
  detail::append_covariate_names(dm.score_enc, dm.score_colnames);

  std::vector<Triplet> s_trip;
  int r = 0;
  for (int i = 0; i < c.n; ++i) {
    for (int g : c.obs_years[i]) {
      dm.y[r] = *c.rows[c.row_at[i][g - 1]].score;
      dm.X(r, g - 1) = 1.0;
      detail::fill_covariate_columns(c, i, g, dm.score_enc, dm.X, r, c.T);
      s_trip.emplace_back(r, L.delta(i), 1.0);
      for (int gp = 1; gp <= g; ++gp) {
        const int j = c.teacher_of[i][gp - 1];
        if (j >= 0) s_trip.emplace_back(r, L.theta(gp, j, g), 1.0);
      }
      dm.score_row_student.push_back(i);
      dm.score_row_year.push_back(g);
      ++r;
    }
  }
  dm.S.resize(n_rows, L.q);
  dm.S.setFromTriplets(s_trip.begin(), s_trip.end());

  if (has_attendance(spec.mechanism)) {
    dm.attnd_enc = encode_covariates(c, spec.attnd_terms);
    const bool auto_drop = spec.attendance_years.empty();
    dm.att = attendance_rows(c, spec.mechanism, spec.attendance_years,
                             auto_drop, &dm.notes, &dm.att_years);

    int w_cov = 0;
    for (const auto& enc : dm.attnd_enc) w_cov += enc.n_cols();
    const int n_att = static_cast<int>(dm.att.size());
    const int n_years = static_cast<int>(dm.att_years.size());
    dm.W = Mat::Zero(n_att, n_years + w_cov);
    for (int t : dm.att_years)
      dm.attnd_colnames.push_back("mu_r[" + std::to_string(t) + "]");
    detail::append_covariate_names(dm.attnd_enc, dm.attnd_colnames);

    std::vector<Triplet> z_trip;
    for (int k = 0; k < n_att; ++k) {
      const auto& row = dm.att[k];
      const int year_col = static_cast<int>(
          std::find(dm.att_years.begin(), dm.att_years.end(), row.t) -
          dm.att_years.begin());
      dm.W(k, year_col) = 1.0;
      detail::fill_covariate_columns(c, row.student, 0, dm.attnd_enc, dm.W, k,
                                     n_years);
      if (has_student_attendance(spec.mechanism))
        z_trip.emplace_back(k, L.delta_attnd(row.student), 1.0);
      if (row.j >= 0) z_trip.emplace_back(k, L.lambda(row.g, row.j), 1.0);
    }
    dm.Z.resize(n_att, L.q);
    dm.Z.setFromTriplets(z_trip.begin(), z_trip.end());
  } else {
    dm.Z.resize(0, L.q);
    dm.W.resize(0, 0);
  }
  return dm;
}

/// Debug dump: every matrix in coordinate format, one entry per line.
inline void dump_designs(const DesignMatrices& dm, const std::string& dir) {
  auto dump_sparse = [&](const SpMat& A, const std::string& path) {
    std::ofstream out(path);
    out.precision(17);
    out << A.rows() << " " << A.cols() << "\n";
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it)
        out << it.row() << " " << it.col() << " " << it.value() << "\n";
  };
  auto dump_dense = [&](const Mat& A, const std::string& path) {
    std::ofstream out(path);
    out.precision(17);
    out << A.rows() << " " << A.cols() << "\n";
    for (int r = 0; r < A.rows(); ++r)
      for (int cidx = 0; cidx < A.cols(); ++cidx)
        if (A(r, cidx) != 0.0) out << r << " " << cidx << " " << A(r, cidx) << "\n";
  };
  dump_sparse(dm.S, dir + "/S.txt");
  dump_sparse(dm.Z, dir + "/Z.txt");
  dump_dense(dm.X, dir + "/X.txt");
  dump_dense(dm.W, dir + "/W.txt");
  std::ofstream out(dir + "/y.txt");
  out.precision(17);
  for (int k = 0; k < dm.y.size(); ++k) out << dm.y[k] << "\n";
}

// ---------------------------------------------------------------------------
// Block covariance operator

/// The random-effect covariance is block diagonal: Gamma_stu repeated for each
/// student, Gamma_g repeated for each year-g teacher. Only the distinct blocks
/// are factorized.
class GOperator {
 public:
  GOperator(const ParameterSet& p, const EtaLayout& L) : layout_(&L) {
    auto invert = [](const Mat& block, const std::string& name, Mat& inv) {
      if (block.rows() != block.cols())
        throw Error(name + " is not square");
      Eigen::LLT<Mat> llt(block);
      if (llt.info() != Eigen::Success)
        throw Error(name + " is not positive definite");
      inv = llt.solve(Mat::Identity(block.rows(), block.cols()));
      double ld = 0.0;
      for (int k = 0; k < block.rows(); ++k)
        ld += 2.0 * std::log(llt.matrixLLT()(k, k));
      return ld;
    };
    if (p.gamma.gamma_stu.rows() != L.student_dim)
      throw Error("gamma_stu has dimension " +
                  std::to_string(p.gamma.gamma_stu.rows()) + ", expected " +
                  std::to_string(L.student_dim));
    logdet_ = L.n * invert(p.gamma.gamma_stu, "gamma_stu", inv_stu_);
    if (static_cast<int>(p.gamma.gamma_year.size()) != L.T)
      throw Error("need one gamma_year block per year");
    inv_year_.resize(L.T);
    for (int g = 1; g <= L.T; ++g) {
      const std::string name = "gamma_year[" + std::to_string(g) + "]";
      if (p.gamma.gamma_year[g - 1].rows() != L.teacher_dim(g))
        throw Error(name + " has dimension " +
                    std::to_string(p.gamma.gamma_year[g - 1].rows()) +
                    ", expected " + std::to_string(L.teacher_dim(g)));
      Mat inv;
      const double ld = invert(p.gamma.gamma_year[g - 1], name, inv);
      inv_year_[g - 1] = inv;
      logdet_ += L.m[g - 1] * ld;
    }
  }

  double log_det() const { return logdet_; }

  const Mat& inv_block(const EtaBlock& b) const {
    return b.is_student ? inv_stu_ : inv_year_[b.g - 1];
  }

  Vec solve(const Vec& eta) const {
    check_dim(eta);
    Vec out(eta.size());
    for (const auto& b : layout_->blocks)
      out.segment(b.offset, b.dim) =
          inv_block(b) * eta.segment(b.offset, b.dim);
    return out;
  }

  double quad_form(const Vec& eta) const {
    check_dim(eta);
    double s = 0.0;
    for (const auto& b : layout_->blocks)
      s += eta.segment(b.offset, b.dim)
               .dot(inv_block(b) * eta.segment(b.offset, b.dim));
    return s;
  }

  void add_inverse_triplets(std::vector<Triplet>& out) const {
    for (const auto& b : layout_->blocks) {
      const Mat& inv = inv_block(b);
      for (int a = 0; a < b.dim; ++a)
        for (int bb = 0; bb < b.dim; ++bb)
          out.emplace_back(b.offset + a, b.offset + bb, inv(a, bb));
    }
  }

  const EtaLayout& layout() const { return *layout_; }

 private:
  void check_dim(const Vec& eta) const {
    if (eta.size() != layout_->q)
      throw Error("GOperator: effect vector has wrong dimension");
  }
  const EtaLayout* layout_;
  Mat inv_stu_;
  std::vector<Mat> inv_year_;
  double logdet_ = 0.0;
};

inline GOperator assemble_G(const ParameterSet& p, const EtaLayout& L) {
  return GOperator(p, L);
}

}  // namespace cpmvam
