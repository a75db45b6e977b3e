#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "debias/evaluate.hpp"
#include "debias/ingest.hpp"
#include "debias/simulate.hpp"

using namespace debias;
using evaluate::CvScheme;
using evaluate::EvalOptions;
using models::ModelFamily;

namespace {

Dataset parallel_dataset() {
  simulate::SimulationConfig cfg;
  cfg.seed = 51;
  cfg.countries = 3;
  cfg.regions_per_country = 12;
  cfg.region_size_median = 150000;
  cfg.region_size_sigma = 0.5;
  cfg.inclusion = simulate::InclusionForm::Inhomogeneous;
  cfg.nu = 0.25;
  cfg.pi_scale = 0.015;
  cfg.f1 = {1.0, 1.2, 1.5, 0.9};
  cfg.f2 = {1.0, 0.75};
  cfg.country_multipliers = {0.8, 1.0, 1.2};
  auto out = simulate::generate(cfg);
  return ingest::align(out.census, out.platform);
}

std::string report_bytes(const evaluate::FamilyEvaluation& ev, const EvalOptions& opts) {
  std::ostringstream s;
  evaluate::write_report_json(s, {ev}, {}, opts.bootstrap_B, opts.bootstrap_seed);
  return s.str();
}

void check_identical(const evaluate::FamilyEvaluation& a, const evaluate::FamilyEvaluation& b,
                     const EvalOptions& opts) {
  REQUIRE(a.folds.size() == b.folds.size());
  for (std::size_t i = 0; i < a.folds.size(); ++i) {
    CHECK(a.folds[i].held_out == b.folds[i].held_out);
    CHECK(a.folds[i].failed == b.folds[i].failed);
    CHECK(a.folds[i].mape == b.folds[i].mape);  // bitwise
    REQUIRE(a.folds[i].beta.size() == b.folds[i].beta.size());
    for (Eigen::Index k = 0; k < a.folds[i].beta.size(); ++k)
      CHECK(a.folds[i].beta(k) == b.folds[i].beta(k));
  }
  REQUIRE(a.region_terms.size() == b.region_terms.size());
  for (std::size_t i = 0; i < a.region_terms.size(); ++i) {
    CHECK(a.region_terms[i].region == b.region_terms[i].region);
    CHECK(a.region_terms[i].pred_n == b.region_terms[i].pred_n);
    CHECK(a.region_terms[i].mape == b.region_terms[i].mape);
  }
  CHECK(a.mean_mape == b.mean_mape);
  CHECK(a.ci_low == b.ci_low);
  CHECK(a.ci_high == b.ci_high);
  CHECK(report_bytes(a, opts) == report_bytes(b, opts));
}

}  // namespace

TEST_CASE("threaded cross-validation reproduces the serial path bit for bit") {
  auto ds = parallel_dataset();
  for (auto family : {ModelFamily::JointHomogeneous, ModelFamily::JointLog}) {
    for (auto scheme : {CvScheme::LeaveOneRegionOut, CvScheme::LeaveOneCountryOut}) {
      EvalOptions serial;
      serial.bootstrap_B = 200;
      serial.bootstrap_seed = 9;
      serial.force_serial = true;
      EvalOptions par = serial;
      par.force_serial = false;
      par.threads = 4;
      auto a = evaluate::cross_validate(family, ds, scheme, serial);
      auto b = evaluate::cross_validate(family, ds, scheme, par);
      check_identical(a, b, serial);
    }
  }
}

TEST_CASE("multilevel folds are thread-count invariant too") {
  auto ds = parallel_dataset();
  EvalOptions serial;
  serial.bootstrap_B = 150;
  serial.bootstrap_seed = 2;
  serial.force_serial = true;
  serial.fit.multilevel = true;
  EvalOptions par = serial;
  par.force_serial = false;
  par.threads = 3;
  auto a = evaluate::cross_validate(ModelFamily::JointLog, ds, CvScheme::LeaveOneRegionOut, serial);
  auto b = evaluate::cross_validate(ModelFamily::JointLog, ds, CvScheme::LeaveOneRegionOut, par);
  check_identical(a, b, serial);
}

TEST_CASE("thread cap from the environment changes nothing about the numbers") {
  auto ds = parallel_dataset();
  EvalOptions opts;
  opts.bootstrap_B = 150;
  opts.bootstrap_seed = 4;
  opts.force_serial = true;
  auto baseline =
      evaluate::cross_validate(ModelFamily::JointHomogeneous, ds, CvScheme::LeaveOneRegionOut,
                               opts);

  ::setenv("DEBIAS_THREADS", "2", 1);
  EvalOptions env_opts = opts;
  env_opts.force_serial = false;  // threads = 0 falls through to the env cap
  auto capped = evaluate::cross_validate(ModelFamily::JointHomogeneous, ds,
                                         CvScheme::LeaveOneRegionOut, env_opts);
  ::unsetenv("DEBIAS_THREADS");
  check_identical(baseline, capped, opts);
}
