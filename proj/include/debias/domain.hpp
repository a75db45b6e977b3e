#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Core vocabulary shared by every other module. All types here are immutable
// after construction and safe to share across concurrent readers.

namespace debias {

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Four fixed age buckets. Order is load-bearing: it anchors the canonical
// stratum order and therefore every design-matrix column layout downstream.
enum class AgeBucket : int { Age0_18 = 0, Age19_29 = 1, Age30_39 = 2, Age40_99 = 3 };
inline constexpr int kNumAgeBuckets = 4;

enum class Gender : int { Female = 0, Male = 1 };
inline constexpr int kNumGenders = 2;

const std::string& to_string(AgeBucket a);
const std::string& to_string(Gender g);
AgeBucket parse_age_bucket(const std::string& token);  // throws DomainError
Gender parse_gender(const std::string& token);         // throws DomainError

struct Stratum {
  AgeBucket age;
  Gender gender;
  bool operator==(const Stratum&) const = default;
};

inline constexpr int kNumStrata = kNumAgeBuckets * kNumGenders;

// Bijection onto [0,8). Age-major, then gender: ("0-18","female") -> 0,
// ("40-99","male") -> 7.
inline int stratum_index(Stratum s) {
  return static_cast<int>(s.age) * kNumGenders + static_cast<int>(s.gender);
}
inline Stratum stratum_from_index(int i) {
  if (i < 0 || i >= kNumStrata) throw DomainError("stratum index out of range");
  return Stratum{static_cast<AgeBucket>(i / kNumGenders), static_cast<Gender>(i % kNumGenders)};
}
const std::array<Stratum, kNumStrata>& all_strata();
std::string to_string(Stratum s);  // "age/gender", e.g. "0-18/female"

using RegionId = std::string;
using CountryId = std::string;

// Per-region counts over the 8 strata. Shared layout of census and platform
// tables; regions are kept sorted by id so iteration order is deterministic.
struct RegionCounts {
  RegionId region;
  CountryId country;
  std::array<std::int64_t, kNumStrata> counts{};
  std::int64_t total = 0;  // derived, equals the sum of counts exactly
};

namespace detail {
// Validation and bookkeeping common to both count tables.
struct CountGrid {
  std::vector<RegionCounts> regions;          // sorted by region id
  std::map<RegionId, std::size_t> index;      // region -> position
  std::array<std::int64_t, kNumStrata> global_counts{};
  std::int64_t global_total = 0;

  void build(std::vector<RegionCounts> rows, const char* what, bool require_positive_region);
  const RegionCounts* find(const RegionId& r) const;
};
}  // namespace detail

// Ground-truth population counts N^i(a,g) with derived totals N^i, N and the
// global distribution P_N(a,g).
class CensusTable {
 public:
  static CensusTable create(std::vector<RegionCounts> rows);

  const std::vector<RegionCounts>& regions() const { return grid_.regions; }
  const RegionCounts* find(const RegionId& r) const { return grid_.find(r); }
  std::int64_t global_total() const { return grid_.global_total; }
  const std::array<std::int64_t, kNumStrata>& global_counts() const { return grid_.global_counts; }
  // P_N(a,g); sums to 1 within 1e-12 by construction.
  std::array<double, kNumStrata> distribution() const;
  CountryId country_of(const RegionId& r) const;
  std::map<RegionId, CountryId> region_country_map() const;

 private:
  detail::CountGrid grid_;
};

// Observed (biased) platform counts M^i(a,g). Zero cells and all-zero regions
// are legal; the latter are flagged.
class PlatformTable {
 public:
  static PlatformTable create(std::vector<RegionCounts> rows);

  const std::vector<RegionCounts>& regions() const { return grid_.regions; }
  const RegionCounts* find(const RegionId& r) const { return grid_.find(r); }
  std::int64_t global_total() const { return grid_.global_total; }
  const std::array<std::int64_t, kNumStrata>& global_counts() const { return grid_.global_counts; }
  std::array<double, kNumStrata> distribution() const;
  const std::vector<RegionId>& zero_observation_regions() const { return zero_regions_; }

 private:
  detail::CountGrid grid_;
  std::vector<RegionId> zero_regions_;
};

// Census and platform restricted to their common region set, in identical
// order. Produced by ingest::align; consumed by models and evaluate.
struct Dataset {
  CensusTable census;
  PlatformTable platform;
  std::vector<RegionId> dropped_census_regions;    // in census only
  std::vector<RegionId> dropped_platform_regions;  // in platform only

  std::size_t num_regions() const { return census.regions().size(); }
  std::vector<CountryId> countries() const;  // distinct, sorted
  Dataset without_regions(const std::vector<RegionId>& exclude) const;
  Dataset without_country(const CountryId& c) const;
};

enum class PiScope { Global, PerCountry, PerRegion };
const std::string& to_string(PiScope s);

// One estimated or ground-truth inclusion probability. Marginal entries leave
// the irrelevant attribute unset. Values outside (0,1] are stored and
// flagged, never clamped.
struct PiEntry {
  PiScope scope = PiScope::Global;
  std::string unit;  // "" for global, else country or region id
  std::optional<AgeBucket> age;
  std::optional<Gender> gender;
  double pi = 0.0;
  bool valid = false;  // pi in (0,1] and finite
};

// Multiplicative factorization reported for inhomogeneous (log-model) fits:
// pi^i(a,g) = M^i(a,g)^nu * phi(a,g), phi = f1(a)*f2(g) under the
// normalization f2(female) = 1.
struct PiFactors {
  double nu = 0.0;
  std::array<double, kNumStrata> phi{};
  std::array<double, kNumAgeBuckets> f1{};
  std::array<double, kNumGenders> f2{};
};

struct InclusionProbabilityTable {
  std::vector<PiEntry> entries;
  // Keyed by unit ("" = global/fixed-effects); present for log-model fits.
  std::map<std::string, PiFactors> factors;

  static bool in_range(double pi);
  const PiEntry* find(PiScope scope, const std::string& unit, std::optional<AgeBucket> age,
                      std::optional<Gender> gender) const;
};

// Per-region covariates; any field may be absent. Present values are finite
// and > 0 (validated at parse time).
struct CovariateRow {
  RegionId region;
  std::optional<double> area_km2;
  std::optional<double> density;
  std::optional<double> income;
};

struct CovariateTable {
  std::vector<CovariateRow> rows;  // sorted by region id
  const CovariateRow* find(const RegionId& r) const;
};

}  // namespace debias
