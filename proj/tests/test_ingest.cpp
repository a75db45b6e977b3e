#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "debias/csv.hpp"
#include "debias/ingest.hpp"

using namespace debias;

namespace {

std::string census_csv() {
  std::ostringstream ss;
  ss << "country,region,age_bucket,gender,population\n";
  for (const char* r : {"R1", "R2"})
    for (const Stratum& s : all_strata())
      ss << "C1," << r << "," << to_string(s.age) << "," << to_string(s.gender) << ","
         << 100 + stratum_index(s) << "\n";
  return ss.str();
}

std::vector<ingest::UserRecord> sample_users() {
  std::vector<ingest::UserRecord> users;
  auto add = [&](const std::string& id, const std::string& region, int s, double p_org,
                 double ca, double cg) {
    ingest::UserRecord u;
    u.user_id = id;
    u.region = region;
    u.age = stratum_from_index(s).age;
    u.gender = stratum_from_index(s).gender;
    u.p_org = p_org;
    u.conf_age = ca;
    u.conf_gender = cg;
    users.push_back(u);
  };
  add("u1", "R1", 0, 0.0, 1.0, 1.0);
  add("u2", "R1", 0, 0.0, 1.0, 1.0);
  add("u3", "R1", 3, 0.9, 1.0, 1.0);   // org at threshold 0.5
  add("u4", "R2", 5, 0.0, 0.4, 1.0);   // low age confidence
  add("u5", "R2", 5, 0.0, 1.0, 0.3);   // low gender confidence
  add("u6", "R2", 7, 0.2, 0.9, 0.9);
  add("u7", "XX", 1, 0.0, 1.0, 1.0);   // unresolvable region
  add("u8", "XX", 1, 0.99, 0.1, 0.1);  // unresolvable wins over org+confidence
  return users;
}

const std::map<RegionId, CountryId> kRegions = {{"R1", "C1"}, {"R2", "C1"}};

}  // namespace

TEST_CASE("census parser reads the documented schema") {
  std::istringstream in(census_csv());
  CensusTable t = ingest::parse_census(in, "mem");
  REQUIRE(t.regions().size() == 2);
  CHECK(t.find("R1")->counts[0] == 100);
  CHECK(t.find("R2")->counts[7] == 107);
  CHECK(t.find("R1")->total == 8 * 100 + 28);
}

TEST_CASE("census parser errors name the offending cell") {
  SUBCASE("duplicate cell") {
    std::string body = census_csv();
    body += "C1,R1,0-18,female,5\n";
    std::istringstream in(body);
    CHECK_THROWS_WITH_AS(ingest::parse_census(in, "mem"),
                         doctest::Contains("duplicate"), ingest::IngestError);
  }
  SUBCASE("missing stratum") {
    std::string body = "country,region,age_bucket,gender,population\nC1,R1,0-18,female,5\n";
    std::istringstream in(body);
    CHECK_THROWS_WITH_AS(ingest::parse_census(in, "mem"), doctest::Contains("missing"),
                         ingest::IngestError);
  }
  SUBCASE("region in two countries") {
    std::string body = census_csv();
    body.replace(body.find("C1,R2"), 5, "C9,R2");
    std::istringstream in(body);
    CHECK_THROWS_WITH_AS(ingest::parse_census(in, "mem"), doctest::Contains("countries"),
                         ingest::IngestError);
  }
  SUBCASE("negative count") {
    std::string body = census_csv();
    body.replace(body.find(",100\n"), 5, ",-100\n");
    std::istringstream in(body);
    CHECK_THROWS_AS(ingest::parse_census(in, "mem"), ingest::IngestError);
  }
  SUBCASE("bad header") {
    std::istringstream in("region,country,age_bucket,gender,population\n");
    CHECK_THROWS_AS(ingest::parse_census(in, "mem"), ingest::IngestError);
  }
}

TEST_CASE("aggregation bins users like a hand tally") {
  ingest::AggregationOptions opts;
  opts.org_threshold = 0.5;
  opts.min_conf_age = 0.5;
  opts.min_conf_gender = 0.5;
  auto [platform, diag] = ingest::aggregate_user_records(sample_users(), kRegions, opts);

  // hand tally: u1,u2 -> R1 s0; u6 -> R2 s7. u3 org, u4/u5 confidence,
  // u7/u8 unresolvable.
  CHECK(diag.retained == 3);
  CHECK(diag.org_excluded == 1);
  CHECK(diag.confidence_excluded == 2);
  CHECK(diag.unresolvable_region == 2);
  CHECK(diag.unresolvable_regions == std::vector<RegionId>{"XX"});
  REQUIRE(platform.regions().size() == 2);  // R2 present even with few users
  CHECK(platform.find("R1")->counts[0] == 2);
  CHECK(platform.find("R1")->counts[3] == 0);
  CHECK(platform.find("R2")->counts[7] == 1);
  CHECK(platform.find("R2")->counts[5] == 0);
  CHECK(platform.find("R1")->country == "C1");
}

TEST_CASE("exclusion precedence: unresolvable, then org, then confidence") {
  ingest::AggregationOptions opts;
  opts.org_threshold = 0.5;
  opts.min_conf_age = 0.5;
  auto [platform, diag] = ingest::aggregate_user_records(sample_users(), kRegions, opts);
  (void)platform;
  // u8 is org AND low confidence AND unresolvable: counted once, as unresolvable.
  CHECK(diag.unresolvable_region == 2);
  CHECK(diag.org_excluded == 1);       // only u3
  CHECK(diag.confidence_excluded == 1);  // only u4 (min_conf_gender off)
  CHECK(diag.retained + diag.org_excluded + diag.confidence_excluded +
            diag.unresolvable_region ==
        static_cast<std::int64_t>(sample_users().size()));
}

TEST_CASE("aggregation is invariant to input order") {
  ingest::AggregationOptions opts;
  opts.org_threshold = 0.7;
  auto users = sample_users();
  auto [p1, d1] = ingest::aggregate_user_records(users, kRegions, opts);
  std::mt19937 rng(123);
  std::shuffle(users.begin(), users.end(), rng);
  auto [p2, d2] = ingest::aggregate_user_records(users, kRegions, opts);
  CHECK(d1.retained == d2.retained);
  for (const auto& r : p1.regions())
    for (int s = 0; s < kNumStrata; ++s)
      CHECK(r.counts[s] == p2.find(r.region)->counts[s]);
}

TEST_CASE("tightening the org threshold removes weakly more accounts") {
  std::int64_t last = -1;
  for (double thr : {1.0, 0.95, 0.5, 0.15, 0.0}) {
    ingest::AggregationOptions opts;
    opts.org_threshold = thr;
    auto [p, d] = ingest::aggregate_user_records(sample_users(), kRegions, opts);
    (void)p;
    if (last >= 0) CHECK(d.org_excluded >= last);
    last = d.org_excluded;
  }
  ingest::AggregationOptions bad;
  bad.org_threshold = 1.01;
  CHECK_THROWS_AS(ingest::aggregate_user_records(sample_users(), kRegions, bad),
                  ingest::IngestError);
}

TEST_CASE("users parser defaults optional columns and validates probabilities") {
  std::istringstream in(
      "user_id,region,age_bucket,gender\n"
      "u1,R1,0-18,female\n");
  auto users = ingest::parse_users(in, "mem");
  REQUIRE(users.size() == 1);
  CHECK(users[0].p_org == 0.0);
  CHECK(users[0].conf_age == 1.0);
  CHECK(users[0].conf_gender == 1.0);

  std::istringstream bad(
      "user_id,region,age_bucket,gender,p_org,conf_age,conf_gender\n"
      "u1,R1,0-18,female,1.5,1,1\n");
  CHECK_THROWS_AS(ingest::parse_users(bad, "mem"), ingest::IngestError);
}

TEST_CASE("covariates: empty fields mean absent") {
  std::istringstream in(
      "region,area_km2,density,income\n"
      "R1,100.5,,20000\n"
      "R2,,,\n");
  CovariateTable t = ingest::parse_covariates(in, "mem");
  const CovariateRow* r1 = t.find("R1");
  REQUIRE(r1 != nullptr);
  CHECK(*r1->area_km2 == 100.5);
  CHECK_FALSE(r1->density.has_value());
  CHECK(*r1->income == 20000.0);
  const CovariateRow* r2 = t.find("R2");
  REQUIRE(r2 != nullptr);
  CHECK_FALSE(r2->area_km2.has_value());
  CHECK(t.find("R3") == nullptr);
}

TEST_CASE("align intersects region sets and reports drops") {
  std::istringstream cin(census_csv());
  CensusTable census = ingest::parse_census(cin, "mem");

  std::ostringstream pss;
  pss << "country,region,age_bucket,gender,count\n";
  for (const char* r : {"R2", "R9"})
    for (const Stratum& s : all_strata())
      pss << "C1," << r << "," << to_string(s.age) << "," << to_string(s.gender) << ",7\n";
  std::istringstream pin(pss.str());
  PlatformTable platform = ingest::parse_platform_aggregated(pin, "mem");

  Dataset ds = ingest::align(census, platform);
  CHECK(ds.num_regions() == 1);
  CHECK(ds.census.find("R2") != nullptr);
  CHECK(ds.dropped_census_regions == std::vector<RegionId>{"R1"});
  CHECK(ds.dropped_platform_regions == std::vector<RegionId>{"R9"});

  std::istringstream pin2(pss.str());
  PlatformTable disjoint = ingest::parse_platform_aggregated(pin2, "mem");
  std::vector<RegionCounts> other;
  RegionCounts rc;
  rc.region = "Z1";
  rc.country = "C1";
  rc.counts[0] = 5;
  other.push_back(rc);
  CHECK_THROWS_WITH_AS(ingest::align(CensusTable::create(other), disjoint),
                       doctest::Contains("share no regions"), ingest::IngestError);
}

TEST_CASE("writers round-trip through the parsers") {
  std::istringstream cin(census_csv());
  CensusTable census = ingest::parse_census(cin, "mem");
  std::ostringstream out;
  ingest::write_census(out, census);
  std::istringstream back(out.str());
  CensusTable again = ingest::parse_census(back, "mem");
  CHECK(again.global_total() == census.global_total());
  std::ostringstream out2;
  ingest::write_census(out2, again);
  CHECK(out.str() == out2.str());

  auto users = sample_users();
  std::ostringstream uout;
  ingest::write_users(uout, users);
  std::istringstream uback(uout.str());
  auto users2 = ingest::parse_users(uback, "mem");
  REQUIRE(users2.size() == users.size());
  for (std::size_t i = 0; i < users.size(); ++i) {
    CHECK(users2[i].user_id == users[i].user_id);
    CHECK(users2[i].p_org == users[i].p_org);
    CHECK(users2[i].conf_age == users[i].conf_age);
  }

  std::istringstream covin(
      "region,area_km2,density,income\n"
      "R1,100.5,,20000\n");
  CovariateTable cov = ingest::parse_covariates(covin, "mem");
  std::ostringstream covout;
  ingest::write_covariates(covout, cov);
  CHECK(covout.str() == "region,area_km2,density,income\nR1,100.5,,20000\n");
}

TEST_CASE("csv layer: quoting round-trips") {
  std::ostringstream out;
  csv::write_row(out, {"a,b", "plain", "with \"quotes\"", ""});
  std::istringstream in(out.str());
  csv::Table t = csv::read(in, "mem");
  REQUIRE(t.header.size() == 4);
  CHECK(t.header[0] == "a,b");
  CHECK(t.header[2] == "with \"quotes\"");
  CHECK(t.header[3] == "");
}
