#pragma once

// The five debiasing model families: design recipes over an aligned dataset,
// fitting (pooled or multilevel), inclusion-probability extraction from the
// fitted coefficients, and population prediction.

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "debias/domain.hpp"
#include "debias/regress.hpp"

namespace debias::models {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Baseline         N^i ~ M^i                      (1 column, no intercept)
// GenderMarginal   N^i ~ M^i(g)                   (2 columns, no intercept)
// AgeMarginal      N^i ~ M^i(a)                   (4 columns, no intercept)
// JointHomogeneous N^i ~ M^i(a,g)                 (8 columns, no intercept)
// JointLog         log N^i(a,g) ~ log M^i(a,g) + intercept + age + gender
enum class ModelFamily { Baseline, GenderMarginal, AgeMarginal, JointHomogeneous, JointLog };

ModelFamily parse_family(const std::string& token);  // baseline|gender|age|joint|joint-log
const std::string& to_string(ModelFamily f);
bool is_log_family(ModelFamily f);

// Zero platform cells in the log model: drop the row (and count it) or use
// log(M + 1) everywhere.
enum class ZeroPolicy { Drop, AddOne };
const std::string& to_string(ZeroPolicy z);
ZeroPolicy parse_zero_policy(const std::string& token);

enum class SolverKind { Ols, Nnls };
const std::string& to_string(SolverKind s);
SolverKind parse_solver(const std::string& token);

struct FitOptions {
  bool multilevel = false;  // per-country random effects on intercept and all slopes
  SolverKind solver = SolverKind::Ols;
  ZeroPolicy zero_policy = ZeroPolicy::Drop;
  // Diagnostics only: adds an intercept column to the homogeneous families,
  // which the defining equation does not have.
  bool intercept_override = false;
  // Leave-one-stratum-out support: rows of this cell are withheld from the
  // design (JointLog only; other families use strata as columns, not rows).
  std::optional<Stratum> exclude_stratum;
};

struct DesignInfo {
  regress::DesignMatrix dm;
  int dropped_zero_m = 0;  // JointLog rows dropped for M = 0 under Drop
  int dropped_zero_n = 0;  // JointLog rows dropped for N = 0 (log undefined)
  int dropped_rows() const { return dropped_zero_m + dropped_zero_n; }
};

DesignInfo build_design(ModelFamily family, const Dataset& ds, ZeroPolicy zero_policy,
                        const std::optional<Stratum>& exclude_stratum = std::nullopt,
                        bool intercept_override = false);

struct FittedDebiasModel {
  ModelFamily family = ModelFamily::Baseline;
  FitOptions options;
  std::variant<regress::FixedFit, regress::MixedFit> fit;
  int dropped_zero_m = 0;
  int dropped_zero_n = 0;
  InclusionProbabilityTable pi;  // global + per-country (+ per-region for JointLog)
  bool any_pi_out_of_range = false;
  std::string dataset_hash;  // content hash of the aligned training tables

  bool is_multilevel() const { return std::holds_alternative<regress::MixedFit>(fit); }
  const std::vector<std::string>& columns() const;
  // Fixed-effect coefficient by column name.
  double coefficient(const std::string& column) const;
};

FittedDebiasModel fit(ModelFamily family, const Dataset& ds, const FitOptions& opts = {});

// Subset of the model's table at the requested scope. Homogeneous families
// carry Global (and PerCountry when multilevel) entries; JointLog carries
// factor maps plus PerRegion per-cell estimates over the training regions.
InclusionProbabilityTable inclusion_probabilities(const FittedDebiasModel& model, PiScope scope);

struct PredictionRow {
  RegionId region;
  CountryId country;
  std::optional<Stratum> stratum;  // set on JointLog per-cell rows
  double predicted = 0.0;
  bool used_random_effects = false;
  bool imputed_zero = false;  // cell absent under Drop; counted as 0 in the total
};

struct PopulationPrediction {
  std::vector<PredictionRow> cells;   // JointLog only, region-major canonical order
  std::vector<PredictionRow> totals;  // one per region for every family
};

// Predicts region populations for the given platform counts. JointLog
// predicts per-cell log values, exponentiates, and sums present cells into
// the total. Countries unseen at training fall back to fixed effects.
PopulationPrediction predict_population(const FittedDebiasModel& model,
                                        const PlatformTable& platform,
                                        bool use_random_effects = true);

// Single JSON document; field order fixed, doubles round-trip bit-exactly.
void write_model(std::ostream& out, const FittedDebiasModel& model);
void write_model_file(const std::string& path, const FittedDebiasModel& model);
FittedDebiasModel read_model(std::istream& in, const std::string& source_name);
FittedDebiasModel read_model_file(const std::string& path);

// FNV-1a over the canonical CSV serialization of both tables.
std::string dataset_hash(const Dataset& ds);

}  // namespace debias::models
