#include "debias/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "debias/csv.hpp"
#include "debias/util.hpp"

namespace debias::ingest {

namespace {

std::string loc(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line);
}

void expect_header(const csv::Table& t, const std::vector<std::string>& expected,
                   std::size_t required_prefix, const std::string& source) {
  if (t.header.size() < required_prefix || t.header.size() > expected.size())
    throw IngestError(source + ": bad header, expected \"" + [&] {
      std::string s;
      for (std::size_t i = 0; i < expected.size(); ++i) s += (i ? "," : "") + expected[i];
      return s;
    }() + "\"");
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] != expected[i])
      throw IngestError(source + ": bad header column " + std::to_string(i + 1) + " \"" +
                        t.header[i] + "\", expected \"" + expected[i] + "\"");
}

std::int64_t parse_count(const std::string& field, const std::string& where) {
  if (field.empty()) throw IngestError(where + ": empty count");
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(field.c_str(), &end, 10);
  if (errno != 0 || end != field.c_str() + field.size())
    throw IngestError(where + ": unparsable count \"" + field + "\"");
  if (v < 0) throw IngestError(where + ": negative count " + field);
  return v;
}

double parse_real(const std::string& field, const std::string& where) {
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(field.c_str(), &end);
  if (field.empty() || errno != 0 || end != field.c_str() + field.size() || !std::isfinite(v))
    throw IngestError(where + ": unparsable value \"" + field + "\"");
  return v;
}

double parse_probability(const std::string& field, const std::string& where) {
  double v = parse_real(field, where);
  if (v < 0.0 || v > 1.0) throw IngestError(where + ": probability " + field + " outside [0,1]");
  return v;
}

// Shared by census and platform: both files are one row per
// (region, stratum) cell, all 8 cells required exactly once.
std::vector<RegionCounts> parse_count_rows(const csv::Table& t, const std::string& source,
                                           const std::string& count_column) {
  struct Partial {
    CountryId country;
    std::array<std::optional<std::int64_t>, kNumStrata> cells;
  };
  std::map<RegionId, Partial> regions;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = loc(source, t.line_numbers[i]);
    if (row[0].empty()) throw IngestError(where + ": empty country id");
    if (row[1].empty()) throw IngestError(where + ": empty region id");
    Stratum s{};
    try {
      s = Stratum{parse_age_bucket(row[2]), parse_gender(row[3])};
    } catch (const DomainError& e) {
      throw IngestError(where + ": " + e.what());
    }
    std::int64_t count = parse_count(row[4], where);
    auto [it, inserted] = regions.try_emplace(row[1]);
    if (inserted) {
      it->second.country = row[0];
    } else if (it->second.country != row[0]) {
      throw IngestError(where + ": region " + row[1] + " listed under two countries (" +
                        it->second.country + ", " + row[0] + ")");
    }
    auto& cell = it->second.cells[stratum_index(s)];
    if (cell.has_value())
      throw IngestError(where + ": duplicate cell (" + row[1] + ", " + to_string(s) + ")");
    cell = count;
  }
  std::vector<RegionCounts> out;
  out.reserve(regions.size());
  for (const auto& [region, partial] : regions) {
    RegionCounts rc;
    rc.region = region;
    rc.country = partial.country;
    for (int s = 0; s < kNumStrata; ++s) {
      if (!partial.cells[s].has_value())
        throw IngestError(source + ": missing stratum (" + region + ", " +
                          to_string(stratum_from_index(s)) + ") in " + count_column + " table");
      rc.counts[s] = *partial.cells[s];
    }
    out.push_back(std::move(rc));
  }
  return out;
}

}  // namespace

CensusTable parse_census(std::istream& in, const std::string& source_name) {
  csv::Table t = csv::read(in, source_name);
  expect_header(t, {"country", "region", "age_bucket", "gender", "population"}, 5, source_name);
  try {
    return CensusTable::create(parse_count_rows(t, source_name, "population"));
  } catch (const DomainError& e) {
    throw IngestError(source_name + ": " + e.what());
  }
}

CensusTable parse_census_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path + ": cannot open file");
  return parse_census(in, path);
}

PlatformTable parse_platform_aggregated(std::istream& in, const std::string& source_name) {
  csv::Table t = csv::read(in, source_name);
  expect_header(t, {"country", "region", "age_bucket", "gender", "count"}, 5, source_name);
  try {
    return PlatformTable::create(parse_count_rows(t, source_name, "count"));
  } catch (const DomainError& e) {
    throw IngestError(source_name + ": " + e.what());
  }
}

PlatformTable parse_platform_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path + ": cannot open file");
  return parse_platform_aggregated(in, path);
}

std::vector<UserRecord> parse_users(std::istream& in, const std::string& source_name) {
  csv::Table t = csv::read(in, source_name);
  expect_header(t, {"user_id", "region", "age_bucket", "gender", "p_org", "conf_age", "conf_gender"},
                4, source_name);
  std::vector<UserRecord> out;
  out.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = loc(source_name, t.line_numbers[i]);
    UserRecord u;
    u.user_id = row[0];
    u.region = row[1];
    if (u.region.empty()) throw IngestError(where + ": empty region id");
    try {
      u.age = parse_age_bucket(row[2]);
      u.gender = parse_gender(row[3]);
    } catch (const DomainError& e) {
      throw IngestError(where + ": " + e.what());
    }
    if (row.size() > 4 && !row[4].empty()) u.p_org = parse_probability(row[4], where);
    if (row.size() > 5 && !row[5].empty()) u.conf_age = parse_probability(row[5], where);
    if (row.size() > 6 && !row[6].empty()) u.conf_gender = parse_probability(row[6], where);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<UserRecord> parse_users_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path + ": cannot open file");
  return parse_users(in, path);
}

CovariateTable parse_covariates(std::istream& in, const std::string& source_name) {
  csv::Table t = csv::read(in, source_name);
  expect_header(t, {"region", "area_km2", "density", "income"}, 4, source_name);
  CovariateTable table;
  std::set<RegionId> seen;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = loc(source_name, t.line_numbers[i]);
    CovariateRow c;
    c.region = row[0];
    if (c.region.empty()) throw IngestError(where + ": empty region id");
    if (!seen.insert(c.region).second)
      throw IngestError(where + ": duplicate covariate row for region " + c.region);
    auto parse_positive = [&](const std::string& field,
                              const char* name) -> std::optional<double> {
      if (field.empty()) return std::nullopt;
      double v = parse_real(field, where);
      if (v <= 0.0)
        throw IngestError(where + ": " + name + " must be positive, got " + field);
      return v;
    };
    c.area_km2 = parse_positive(row[1], "area_km2");
    c.density = parse_positive(row[2], "density");
    c.income = parse_positive(row[3], "income");
    table.rows.push_back(std::move(c));
  }
  std::sort(table.rows.begin(), table.rows.end(),
            [](const CovariateRow& a, const CovariateRow& b) { return a.region < b.region; });
  return table;
}

CovariateTable parse_covariates_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path + ": cannot open file");
  return parse_covariates(in, path);
}

std::pair<PlatformTable, AggregationDiagnostics> aggregate_user_records(
    const std::vector<UserRecord>& records, const std::map<RegionId, CountryId>& region_country,
    const AggregationOptions& opts) {
  if (opts.org_threshold && (*opts.org_threshold < 0.0 || *opts.org_threshold > 1.0))
    throw IngestError("org_threshold outside [0,1]");
  if (opts.min_conf_age < 0.0 || opts.min_conf_age > 1.0 || opts.min_conf_gender < 0.0 ||
      opts.min_conf_gender > 1.0)
    throw IngestError("confidence thresholds outside [0,1]");

  std::map<RegionId, RegionCounts> cells;
  AggregationDiagnostics diag;
  std::set<RegionId> unresolved;
  for (const auto& u : records) {
    auto it = region_country.find(u.region);
    if (it == region_country.end()) {
      ++diag.unresolvable_region;
      unresolved.insert(u.region);
      continue;
    }
    if (opts.org_threshold && u.p_org >= *opts.org_threshold) {
      ++diag.org_excluded;
      continue;
    }
    if (u.conf_age < opts.min_conf_age || u.conf_gender < opts.min_conf_gender) {
      ++diag.confidence_excluded;
      continue;
    }
    auto [cell_it, inserted] = cells.try_emplace(u.region);
    if (inserted) {
      cell_it->second.region = u.region;
      cell_it->second.country = it->second;
    }
    ++cell_it->second.counts[stratum_index(Stratum{u.age, u.gender})];
    ++diag.retained;
  }
  // Regions known to the mapping but with no retained users still appear,
  // with zero counts, so downstream alignment sees the full region set.
  for (const auto& [region, country] : region_country) {
    auto [cell_it, inserted] = cells.try_emplace(region);
    if (inserted) {
      cell_it->second.region = region;
      cell_it->second.country = country;
    }
  }
  diag.unresolvable_regions = {unresolved.begin(), unresolved.end()};
  std::vector<RegionCounts> rows;
  rows.reserve(cells.size());
  for (auto& [_, rc] : cells) rows.push_back(std::move(rc));
  return {PlatformTable::create(std::move(rows)), std::move(diag)};
}

namespace {

void write_counts(std::ostream& out, const std::vector<RegionCounts>& regions,
                  const char* count_column) {
  csv::write_row(out, {"country", "region", "age_bucket", "gender", count_column});
  for (const auto& r : regions)
    for (int s = 0; s < kNumStrata; ++s) {
      const Stratum st = stratum_from_index(s);
      csv::write_row(out, {r.country, r.region, to_string(st.age), to_string(st.gender),
                           std::to_string(r.counts[s])});
    }
}

}  // namespace

void write_census(std::ostream& out, const CensusTable& census) {
  write_counts(out, census.regions(), "population");
}

void write_platform(std::ostream& out, const PlatformTable& platform) {
  write_counts(out, platform.regions(), "count");
}

void write_users(std::ostream& out, const std::vector<UserRecord>& users) {
  csv::write_row(out, {"user_id", "region", "age_bucket", "gender", "p_org", "conf_age",
                       "conf_gender"});
  for (const auto& u : users)
    csv::write_row(out, {u.user_id, u.region, to_string(u.age), to_string(u.gender),
                         format_double(u.p_org), format_double(u.conf_age),
                         format_double(u.conf_gender)});
}

void write_covariates(std::ostream& out, const CovariateTable& covariates) {
  csv::write_row(out, {"region", "area_km2", "density", "income"});
  for (const auto& r : covariates.rows)
    csv::write_row(out, {r.region, r.area_km2 ? format_double(*r.area_km2) : "",
                         r.density ? format_double(*r.density) : "",
                         r.income ? format_double(*r.income) : ""});
}

Dataset align(const CensusTable& census, const PlatformTable& platform) {
  std::set<RegionId> census_regions, platform_regions;
  for (const auto& r : census.regions()) census_regions.insert(r.region);
  for (const auto& r : platform.regions()) platform_regions.insert(r.region);

  Dataset ds{census, platform, {}, {}};
  std::vector<RegionId> drop_census, drop_platform;
  for (const auto& r : census_regions)
    if (!platform_regions.count(r)) drop_census.push_back(r);
  for (const auto& r : platform_regions)
    if (!census_regions.count(r)) drop_platform.push_back(r);
  if (drop_census.size() == census_regions.size())
    throw IngestError("align: census and platform share no regions");

  std::vector<RegionCounts> c, p;
  for (const auto& r : census.regions())
    if (platform_regions.count(r.region)) c.push_back(r);
  for (const auto& r : platform.regions())
    if (census_regions.count(r.region)) p.push_back(r);
  return Dataset{CensusTable::create(std::move(c)), PlatformTable::create(std::move(p)),
                 std::move(drop_census), std::move(drop_platform)};
}

}  // namespace debias::ingest
