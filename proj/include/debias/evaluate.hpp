#pragma once

// Cross-validation harness: refits a model family with one region, country,
// or stratum held out per fold, scores held-out predictions with MAPE, and
// attaches percentile-bootstrap intervals and covariate correlations.
// Folds run under OpenMP; a serial path is kept for equivalence testing.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "debias/domain.hpp"
#include "debias/models.hpp"

namespace debias::evaluate {

struct EvaluateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class CvScheme { LeaveOneRegionOut, LeaveOneCountryOut, LeaveOneStratumOut };

CvScheme parse_scheme(const std::string& token);  // loro | loco | loso
const std::string& to_string(CvScheme s);

// 100%/n * sum |pred_i - actual_i| / |actual_i|. Any actual == 0 is an error.
double mape(const std::vector<double>& predicted, const std::vector<double>& actual);

struct PredRecord {
  RegionId region;
  CountryId country;
  std::optional<Stratum> stratum;  // set for per-cell predictions (JointLog)
  double true_n = 0.0;
  double pred_n = 0.0;
  bool used_random_effects = false;
};

struct FoldResult {
  std::string held_out;  // region id / country id / stratum token
  bool failed = false;
  std::string failure;             // why, when failed
  std::string warning;             // non-fatal note (e.g. fixed-effects fallback)
  double mape = 0.0;               // over this fold's held-out terms
  Eigen::VectorXd beta;            // fold coefficients; in-memory only
  std::vector<PredRecord> predictions;
  int dropped_zero_m = 0;          // training rows dropped in this fold
  int dropped_zero_n = 0;
};

struct RegionTerm {
  RegionId region;
  CountryId country;
  double true_n = 0.0;  // census total
  double pred_n = 0.0;  // out-of-fold predicted total
  double mape = 0.0;    // 100 * |pred - true| / true
};

struct FamilyEvaluation {
  models::ModelFamily family = models::ModelFamily::Baseline;
  CvScheme scheme = CvScheme::LeaveOneRegionOut;
  std::vector<FoldResult> folds;        // deterministic fold order
  std::vector<RegionTerm> region_terms; // sorted by region id
  double mean_mape = 0.0;               // mean of region_terms
  double ci_low = 0.0;                  // percentile bootstrap over region terms
  double ci_high = 0.0;
  std::optional<double> cell_mape;      // per-cell MAPE, JointLog only
  int failed_folds = 0;
  int unscored_zero_true_cells = 0;     // cells skipped in cell_mape (true N = 0)
  std::vector<std::string> warnings;
  double runtime_seconds = 0.0;         // not serialized; manifest carries timing
};

struct EvalOptions {
  models::FitOptions fit;
  int bootstrap_B = 1000;
  std::uint64_t bootstrap_seed = 0;
  int threads = 0;           // 0: DEBIAS_THREADS env, else OpenMP default
  bool force_serial = false; // serial reference path
};

FamilyEvaluation cross_validate(models::ModelFamily family, const Dataset& ds, CvScheme scheme,
                                const EvalOptions& opts = {});

// Percentile interval of the mean under resampling-with-replacement.
std::pair<double, double> bootstrap_ci(const std::vector<double>& per_region_errors, int B,
                                       std::uint64_t seed);

struct CorrelationEntry {
  std::string scope;      // "overall" or a country id
  std::string covariate;  // area_km2 | density | income
  int n = 0;
  bool insufficient = false;  // n < 3 or zero variance
  double pearson = 0.0;
  double pearson_p = 0.0;
  double spearman = 0.0;
  double spearman_p = 0.0;
};

// Per-region MAPE vs each covariate, overall and per country. Regions lacking
// a covariate are excluded from that covariate's entries.
std::vector<CorrelationEntry> covariate_correlation(const std::vector<RegionTerm>& terms,
                                                    const CovariateTable& covariates);

// Pearson correlation with a two-sided t-approximation p-value.
// Returns false (insufficient) when n < 3 or either side has zero variance.
bool pearson_test(const std::vector<double>& x, const std::vector<double>& y, double& r,
                  double& p);
bool spearman_test(const std::vector<double>& x, const std::vector<double>& y, double& rho,
                   double& p);

void write_report_json(std::ostream& out, const std::vector<FamilyEvaluation>& evals,
                       const std::vector<CorrelationEntry>& correlations, int bootstrap_B,
                       std::uint64_t bootstrap_seed);
void write_scatter_csv(std::ostream& out, const std::vector<FamilyEvaluation>& evals);
void write_region_mape_csv(std::ostream& out, const FamilyEvaluation& headline);
void write_correlations_csv(std::ostream& out, const std::vector<CorrelationEntry>& correlations);

}  // namespace debias::evaluate
