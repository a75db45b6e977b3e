#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "debias/domain.hpp"

// CSV ingestion and validation. File schemas:
//   census.csv:     country,region,age_bucket,gender,population
//   platform.csv:   country,region,age_bucket,gender,count
//   users.csv:      user_id,region,age_bucket,gender,p_org,conf_age,conf_gender
//                   (last three columns optional)
//   covariates.csv: region,area_km2,density,income   (empty field = absent)

namespace debias::ingest {

struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One platform account with inferred demographics. Confidences default to 1.
struct UserRecord {
  std::string user_id;
  RegionId region;
  AgeBucket age;
  Gender gender;
  double p_org = 0.0;
  double conf_age = 1.0;
  double conf_gender = 1.0;
};

struct AggregationOptions {
  // Accounts with p_org >= threshold are excluded; nullopt keeps all.
  std::optional<double> org_threshold;
  double min_conf_age = 0.0;
  double min_conf_gender = 0.0;
};

struct AggregationDiagnostics {
  std::int64_t retained = 0;
  std::int64_t org_excluded = 0;
  std::int64_t confidence_excluded = 0;
  std::int64_t unresolvable_region = 0;
  std::vector<RegionId> unresolvable_regions;  // distinct, sorted
};

CensusTable parse_census(std::istream& in, const std::string& source_name);
CensusTable parse_census_file(const std::string& path);

PlatformTable parse_platform_aggregated(std::istream& in, const std::string& source_name);
PlatformTable parse_platform_file(const std::string& path);

std::vector<UserRecord> parse_users(std::istream& in, const std::string& source_name);
std::vector<UserRecord> parse_users_file(const std::string& path);

CovariateTable parse_covariates(std::istream& in, const std::string& source_name);
CovariateTable parse_covariates_file(const std::string& path);

// Bins retained records into platform counts. Exclusion categories are
// disjoint, tested in the order: unresolvable region, organization filter,
// confidence filter. retained + excluded counts always sum to the input size.
std::pair<PlatformTable, AggregationDiagnostics> aggregate_user_records(
    const std::vector<UserRecord>& records, const std::map<RegionId, CountryId>& region_country,
    const AggregationOptions& opts);

// Intersects the region sets. Hard error when the intersection is empty.
Dataset align(const CensusTable& census, const PlatformTable& platform);

// Writers matching the schemas above, byte-stable for fixed inputs.
void write_census(std::ostream& out, const CensusTable& census);
void write_platform(std::ostream& out, const PlatformTable& platform);
void write_users(std::ostream& out, const std::vector<UserRecord>& users);
void write_covariates(std::ostream& out, const CovariateTable& covariates);

}  // namespace debias::ingest
