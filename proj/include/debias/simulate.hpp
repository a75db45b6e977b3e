#pragma once

// Synthetic multi-country populations with known inclusion probabilities,
// plus biased platform sampling and organization injection. Ground truth for
// every estimator test.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/domain.hpp"
#include "debias/ingest.hpp"

namespace debias::simulate {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NoiseMode { Expected, Binomial };
enum class InclusionForm { Homogeneous, Inhomogeneous };

struct SimulationConfig {
  std::uint64_t seed = 1;
  int countries = 1;
  int regions_per_country = 10;

  // Region person totals are lognormal; heavy-tailed like real regions.
  double region_size_median = 50000.0;
  double region_size_sigma = 0.5;

  // Mean stratum composition (sums to 1) with per-region lognormal jitter of
  // strength share_sigma, renormalized. Without jitter the homogeneous design
  // would be rank-deficient in expectation (every column proportional to the
  // region total), so keep share_sigma > 0 for anything that gets fitted.
  std::array<double, kNumStrata> stratum_shares{0.125, 0.125, 0.125, 0.125,
                                                0.125, 0.125, 0.125, 0.125};
  double share_sigma = 0.4;

  // Census cells are rounded to multiples of this and floored at one quantum.
  // With quantum q and pi a multiple of 1/q, expected-mode platform counts
  // are exact integers and regression recovery is exact to machine precision.
  std::int64_t cell_quantum = 1;

  NoiseMode noise = NoiseMode::Binomial;
  InclusionForm inclusion = InclusionForm::Homogeneous;

  // Homogeneous: pi(a,g) per stratum, optionally scaled per country.
  std::array<double, kNumStrata> pi{0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
  std::vector<double> country_multipliers;  // empty = all 1.0; else one per country

  // Inhomogeneous: pi^i(a,g) = pi_scale * N^i(a,g)^theta * f1(a) * f2(g)
  // with theta = nu / (1 - nu), times the country multiplier. This direct
  // form conditions on N; the realized data then satisfies the observed-count
  // form pi = M^nu * g1(a) * g2(g) in expectation (substituting M = pi N).
  double nu = 0.0;
  std::array<double, kNumAgeBuckets> f1{1.0, 1.0, 1.0, 1.0};
  std::array<double, kNumGenders> f2{1.0, 1.0};
  double pi_scale = 1.0;

  // Organization accounts added on top of the human counts: the total is
  // rate/(1-rate) times the human total (orgs are `rate` of the result),
  // spread over regions proportional to (region count)^concentration and
  // uniformly over strata within a region.
  double org_rate = 0.0;
  double org_concentration = 0.0;

  bool emit_users = false;  // per-account records with exact p_org flags
};

struct SimulationOutput {
  CensusTable census;
  PlatformTable platform;  // includes injected organizations when org_rate > 0
  InclusionProbabilityTable truth;  // exact human inclusion probabilities used
  CovariateTable covariates;
  std::vector<ingest::UserRecord> users;        // empty unless emit_users
  std::map<RegionId, std::int64_t> org_counts;  // empty unless org_rate > 0
};

// Regions are named C<country>R<region>, countries C<country>. Deterministic
// for a fixed config: same seed, bit-identical tables.
SimulationOutput generate(const SimulationConfig& config);

std::pair<PlatformTable, std::map<RegionId, std::int64_t>> inject_organizations(
    const PlatformTable& platform, double rate, double concentration, std::uint64_t seed);

// Flat key=value config text (one pair per line, # comments). Unknown keys
// and malformed values raise SimulationError naming the field.
SimulationConfig parse_config(std::istream& in);
SimulationConfig parse_config_file(const std::string& path);

// truth_pi.csv: scope,country,age_bucket,gender,pi. The second column holds
// the scope unit (country id, region id, or empty for global).
void write_truth_pi(std::ostream& out, const InclusionProbabilityTable& table);
InclusionProbabilityTable read_truth_pi(std::istream& in, const std::string& source_name);

}  // namespace debias::simulate
