#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <string>

#include "cpmvam/config.hpp"

using namespace cpmvam;

namespace {

RunConfig parse_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

}  // namespace

TEST_CASE("defaults survive an empty config", "[config]") {
  const RunConfig cfg = parse_text("");
  CHECK(cfg.schema.student_col == "student_id");
  CHECK(cfg.schema.year_col == "year");
  CHECK(cfg.schema.teacher_col == "teacher_id");
  CHECK(cfg.schema.score_col == "score");
  CHECK(cfg.schema.expected_T == 0);
  CHECK(cfg.ingest.require_first_year);
  CHECK_FALSE(cfg.ingest.drop_unlinked);
  CHECK(cfg.standardize);
  CHECK(cfg.spec.mechanism == Mechanism::MAR);
  CHECK(cfg.spec.score_terms.empty());
  CHECK(cfg.spec.attendance_years.empty());
  CHECK(cfg.sens.models ==
        std::vector<std::string>{"mar", "mnar-t", "mnar-s", "mnar-b"});
}

TEST_CASE("every key lands in its field", "[config]") {
  const RunConfig cfg = parse_text(R"(# run configuration
data.student_col = sid
data.year_col = grade_year

data.teacher_col = tid
data.score_col = scaled
data.covariate_cols = group, xcont
data.T = 3
data.require_first_year = no
data.drop_unlinked = yes
data.standardize = false
model.mechanism = both-next-year
model.score_terms = group(A|B)+missing, xcont:cont
model.attnd_terms = frl:cat
model.attendance_years = 2, 3
fit.em_tol = 1e-9
fit.param_tol = 1e-5
fit.max_em = 321
fit.mode_tol = 1e-10
fit.mode_max_iter = 77
fit.se = no
fit.pin_attendance_corr = true
fit.start_gamma_diag = 0.25
report.models = mar, mnar-t
report.compare_g = 2
report.compare_t = 3
)");
  CHECK(cfg.schema.student_col == "sid");
  CHECK(cfg.schema.year_col == "grade_year");
  CHECK(cfg.schema.teacher_col == "tid");
  CHECK(cfg.schema.score_col == "scaled");
  CHECK(cfg.schema.covariate_cols == std::vector<std::string>{"group", "xcont"});
  CHECK(cfg.schema.expected_T == 3);
  CHECK_FALSE(cfg.ingest.require_first_year);
  CHECK(cfg.ingest.drop_unlinked);
  CHECK_FALSE(cfg.standardize);
  CHECK(cfg.spec.mechanism == Mechanism::TeacherAndStudentNextYear);

  REQUIRE(cfg.spec.score_terms.size() == 2);
  const TermSpec& grp = cfg.spec.score_terms[0];
  CHECK(grp.name == "group");
  CHECK(grp.categorical);
  CHECK(grp.levels == std::vector<std::string>{"A", "B"});
  CHECK(grp.missing_bucket);
  const TermSpec& xc = cfg.spec.score_terms[1];
  CHECK(xc.name == "xcont");
  CHECK_FALSE(xc.categorical);
  CHECK(xc.levels.empty());
  CHECK_FALSE(xc.missing_bucket);

  REQUIRE(cfg.spec.attnd_terms.size() == 1);
  CHECK(cfg.spec.attnd_terms[0].name == "frl");
  CHECK(cfg.spec.attnd_terms[0].categorical);

  CHECK(cfg.spec.attendance_years == std::vector<int>{2, 3});
  CHECK(cfg.fit.em.em_rel_tol == 1e-9);
  CHECK(cfg.fit.em.param_tol == 1e-5);
  CHECK(cfg.fit.em.max_em_iter == 321);
  CHECK(cfg.fit.em.mode.tol == 1e-10);
  CHECK(cfg.fit.em.mode.max_iter == 77);
  CHECK_FALSE(cfg.fit.compute_se);
  CHECK(cfg.fit.pin_attendance_corr);
  CHECK(cfg.fit.start_gamma_diag == 0.25);
  CHECK(cfg.sens.models == std::vector<std::string>{"mar", "mnar-t"});
  CHECK(cfg.sens.compare_g == 2);
  CHECK(cfg.sens.compare_t == 3);

  // The ladder reuses the fit controls as configured.
  CHECK_FALSE(cfg.sens.fit.compute_se);
  CHECK(cfg.sens.fit.em.max_em_iter == 321);
}

TEST_CASE("term syntax variants", "[config]") {
  auto terms = [](const std::string& v) {
    return parse_text("model.score_terms = " + v).spec.score_terms;
  };

  auto plain = terms("grp");
  REQUIRE(plain.size() == 1);
  CHECK(plain[0].name == "grp");
  CHECK(plain[0].categorical);
  CHECK(plain[0].levels.empty());
  CHECK_FALSE(plain[0].missing_bucket);

  CHECK_FALSE(terms("x:cont")[0].categorical);
  CHECK(terms("grp:cat")[0].categorical);
  CHECK(terms("grp+missing")[0].missing_bucket);
  CHECK(terms("grp(B|A)")[0].levels == std::vector<std::string>{"B", "A"});

  // Commas inside a level list do not split terms, and levels may hold them.
  auto tricky = terms("a(x,y|z), b");
  REQUIRE(tricky.size() == 2);
  CHECK(tricky[0].name == "a");
  CHECK(tricky[0].levels == std::vector<std::string>{"x,y", "z"});
  CHECK(tricky[1].name == "b");

  auto combo = terms("grp:cat(A|B|C)+missing");
  CHECK(combo[0].name == "grp");
  CHECK(combo[0].levels.size() == 3);
  CHECK(combo[0].missing_bucket);

  CHECK_THROWS_AS(terms("x:cont(1|2)"), Error);
  CHECK_THROWS_AS(terms(":cont"), Error);
  CHECK_THROWS_AS(terms("grp(A|B"), Error);
  CHECK_THROWS_AS(terms("grp:int"), Error);
}

TEST_CASE("config error messages carry the key and line", "[config]") {
  CHECK_THROWS_WITH(parse_text("data.T = soon"),
                    Catch::Matchers::ContainsSubstring("data.T") &&
                        Catch::Matchers::ContainsSubstring("soon"));
  CHECK_THROWS_WITH(parse_text("fit.em_tol = tiny"),
                    Catch::Matchers::ContainsSubstring("fit.em_tol"));
  CHECK_THROWS_WITH(parse_text("fit.se = maybe"),
                    Catch::Matchers::ContainsSubstring("fit.se"));
  CHECK_THROWS_WITH(parse_text("model.attendance_years = 2, soon"),
                    Catch::Matchers::ContainsSubstring("attendance_years"));
  CHECK_THROWS_WITH(parse_text("\n\nnot.a.key = 1"),
                    Catch::Matchers::ContainsSubstring("line 3"));
  CHECK_THROWS_WITH(parse_text("# fine\njust some words"),
                    Catch::Matchers::ContainsSubstring("line 2"));
  CHECK_THROWS_AS(parse_text("model.mechanism = sometimes"), Error);
}

TEST_CASE("whitespace and comments are tolerated", "[config]") {
  const RunConfig cfg = parse_text(
      "  # indented comment\n"
      "\t\n"
      "   data.T=2\n"
      "fit.max_em   =    9\n");
  CHECK(cfg.schema.expected_T == 2);
  CHECK(cfg.fit.em.max_em_iter == 9);
}
