#include "debias/domain.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace debias {

namespace {
const std::array<std::string, kNumAgeBuckets> kAgeTokens = {"0-18", "19-29", "30-39", "40-99"};
const std::array<std::string, kNumGenders> kGenderTokens = {"female", "male"};
const std::array<std::string, 3> kScopeTokens = {"global", "country", "region"};
}  // namespace

const std::string& to_string(AgeBucket a) { return kAgeTokens[static_cast<int>(a)]; }
const std::string& to_string(Gender g) { return kGenderTokens[static_cast<int>(g)]; }
const std::string& to_string(PiScope s) { return kScopeTokens[static_cast<int>(s)]; }

AgeBucket parse_age_bucket(const std::string& token) {
  for (int i = 0; i < kNumAgeBuckets; ++i)
    if (token == kAgeTokens[i]) return static_cast<AgeBucket>(i);
  throw DomainError("unknown age bucket \"" + token + "\" (expected one of 0-18, 19-29, 30-39, 40-99)");
}

Gender parse_gender(const std::string& token) {
  for (int i = 0; i < kNumGenders; ++i)
    if (token == kGenderTokens[i]) return static_cast<Gender>(i);
  throw DomainError("unknown gender \"" + token + "\" (expected female or male)");
}

const std::array<Stratum, kNumStrata>& all_strata() {
  static const std::array<Stratum, kNumStrata> strata = [] {
    std::array<Stratum, kNumStrata> s{};
    for (int i = 0; i < kNumStrata; ++i) s[i] = stratum_from_index(i);
    return s;
  }();
  return strata;
}

std::string to_string(Stratum s) { return to_string(s.age) + "/" + to_string(s.gender); }

namespace detail {

void CountGrid::build(std::vector<RegionCounts> rows, const char* what,
                      bool require_positive_region) {
  std::sort(rows.begin(), rows.end(),
            [](const RegionCounts& a, const RegionCounts& b) { return a.region < b.region; });
  regions = std::move(rows);
  index.clear();
  global_counts.fill(0);
  global_total = 0;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    RegionCounts& r = regions[i];
    if (r.region.empty()) throw DomainError(std::string(what) + ": empty region id");
    if (r.country.empty())
      throw DomainError(std::string(what) + ": region " + r.region + " has empty country id");
    if (!index.emplace(r.region, i).second)
      throw DomainError(std::string(what) + ": duplicate region " + r.region);
    r.total = 0;
    bool any_positive = false;
    for (int s = 0; s < kNumStrata; ++s) {
      if (r.counts[s] < 0)
        throw DomainError(std::string(what) + ": negative count in region " + r.region +
                          ", stratum " + to_string(stratum_from_index(s)));
      r.total += r.counts[s];
      global_counts[s] += r.counts[s];
      any_positive = any_positive || r.counts[s] > 0;
    }
    global_total += r.total;
    if (require_positive_region && !any_positive)
      throw DomainError(std::string(what) + ": region " + r.region +
                        " has no positive stratum count");
  }
}

const RegionCounts* CountGrid::find(const RegionId& r) const {
  auto it = index.find(r);
  return it == index.end() ? nullptr : &regions[it->second];
}

}  // namespace detail

CensusTable CensusTable::create(std::vector<RegionCounts> rows) {
  CensusTable t;
  t.grid_.build(std::move(rows), "census", /*require_positive_region=*/true);
  if (t.grid_.regions.empty()) throw DomainError("census: no regions");
  return t;
}

std::array<double, kNumStrata> CensusTable::distribution() const {
  std::array<double, kNumStrata> p{};
  for (int s = 0; s < kNumStrata; ++s)
    p[s] = static_cast<double>(grid_.global_counts[s]) / static_cast<double>(grid_.global_total);
  return p;
}

CountryId CensusTable::country_of(const RegionId& r) const {
  const RegionCounts* row = grid_.find(r);
  if (!row) throw DomainError("census: unknown region " + r);
  return row->country;
}

std::map<RegionId, CountryId> CensusTable::region_country_map() const {
  std::map<RegionId, CountryId> m;
  for (const auto& r : grid_.regions) m[r.region] = r.country;
  return m;
}

PlatformTable PlatformTable::create(std::vector<RegionCounts> rows) {
  PlatformTable t;
  t.grid_.build(std::move(rows), "platform", /*require_positive_region=*/false);
  for (const auto& r : t.grid_.regions)
    if (r.total == 0) t.zero_regions_.push_back(r.region);
  return t;
}

std::array<double, kNumStrata> PlatformTable::distribution() const {
  std::array<double, kNumStrata> p{};
  if (grid_.global_total == 0) return p;
  for (int s = 0; s < kNumStrata; ++s)
    p[s] = static_cast<double>(grid_.global_counts[s]) / static_cast<double>(grid_.global_total);
  return p;
}

std::vector<CountryId> Dataset::countries() const {
  std::set<CountryId> set;
  for (const auto& r : census.regions()) set.insert(r.country);
  return {set.begin(), set.end()};
}

Dataset Dataset::without_regions(const std::vector<RegionId>& exclude) const {
  std::set<RegionId> drop(exclude.begin(), exclude.end());
  std::vector<RegionCounts> c, p;
  for (const auto& r : census.regions())
    if (!drop.count(r.region)) c.push_back(r);
  for (const auto& r : platform.regions())
    if (!drop.count(r.region)) p.push_back(r);
  return Dataset{CensusTable::create(std::move(c)), PlatformTable::create(std::move(p)), {}, {}};
}

Dataset Dataset::without_country(const CountryId& c) const {
  std::vector<RegionId> drop;
  for (const auto& r : census.regions())
    if (r.country == c) drop.push_back(r.region);
  return without_regions(drop);
}

bool InclusionProbabilityTable::in_range(double pi) {
  return std::isfinite(pi) && pi > 0.0 && pi <= 1.0;
}

const PiEntry* InclusionProbabilityTable::find(PiScope scope, const std::string& unit,
                                               std::optional<AgeBucket> age,
                                               std::optional<Gender> gender) const {
  for (const auto& e : entries)
    if (e.scope == scope && e.unit == unit && e.age == age && e.gender == gender) return &e;
  return nullptr;
}

const CovariateRow* CovariateTable::find(const RegionId& r) const {
  auto it = std::lower_bound(rows.begin(), rows.end(), r,
                             [](const CovariateRow& row, const RegionId& id) { return row.region < id; });
  return (it != rows.end() && it->region == r) ? &*it : nullptr;
}

}  // namespace debias
