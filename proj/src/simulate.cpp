#include "debias/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "debias/csv.hpp"
#include "debias/util.hpp"

namespace debias::simulate {

namespace {

constexpr std::uint64_t kOrgSeedSalt = 0x6f72677321ULL;

std::string country_id(int c) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "C%02d", c);
  return buf;
}

std::string region_id(int c, int r) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "C%02dR%03d", c, r);
  return buf;
}

void validate(const SimulationConfig& cfg) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw SimulationError("config: " + field + " " + why);
  };
  if (cfg.countries < 1) fail("countries", "must be >= 1");
  if (cfg.regions_per_country < 1) fail("regions_per_country", "must be >= 1");
  if (!(cfg.region_size_median > 0.0) || !std::isfinite(cfg.region_size_median))
    fail("region_size_median", "must be a positive finite number");
  if (!(cfg.region_size_sigma >= 0.0) || !std::isfinite(cfg.region_size_sigma))
    fail("region_size_sigma", "must be >= 0");
  double share_sum = 0.0;
  for (double s : cfg.stratum_shares) {
    if (!(s >= 0.0) || !std::isfinite(s)) fail("stratum_shares", "entries must be >= 0");
    share_sum += s;
  }
  if (std::abs(share_sum - 1.0) > 1e-9) fail("stratum_shares", "must sum to 1");
  if (!(cfg.share_sigma >= 0.0)) fail("share_sigma", "must be >= 0");
  if (cfg.cell_quantum < 1) fail("cell_quantum", "must be >= 1");
  if (!cfg.country_multipliers.empty() &&
      static_cast<int>(cfg.country_multipliers.size()) != cfg.countries)
    fail("country_multipliers", "needs one entry per country");
  for (double m : cfg.country_multipliers)
    if (!(m > 0.0) || !std::isfinite(m)) fail("country_multipliers", "entries must be > 0");
  if (cfg.inclusion == InclusionForm::Homogeneous) {
    for (double p : cfg.pi)
      if (!std::isfinite(p)) fail("pi", "entries must be finite");
  } else {
    if (!(cfg.nu >= 0.0 && cfg.nu < 1.0)) fail("nu", "must be in [0, 1)");
    for (double f : cfg.f1)
      if (!(f > 0.0) || !std::isfinite(f)) fail("f1", "entries must be > 0");
    for (double f : cfg.f2)
      if (!(f > 0.0) || !std::isfinite(f)) fail("f2", "entries must be > 0");
    if (!(cfg.pi_scale > 0.0) || !std::isfinite(cfg.pi_scale)) fail("pi_scale", "must be > 0");
  }
  if (!(cfg.org_rate >= 0.0 && cfg.org_rate < 1.0)) fail("org_rate", "must be in [0, 1)");
  if (!(cfg.org_concentration >= 0.0) || !std::isfinite(cfg.org_concentration))
    fail("org_concentration", "must be >= 0");
}

// Multinomial split of `total` over `weights` by sequential conditional
// binomials; deterministic in the draw order of `items`.
std::vector<std::int64_t> multinomial(std::mt19937_64& rng, std::int64_t total,
                                      const std::vector<double>& weights) {
  std::vector<std::int64_t> out(weights.size(), 0);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::int64_t remaining = total;
  for (std::size_t i = 0; i < weights.size() && remaining > 0; ++i) {
    if (wsum <= 0.0) break;
    double p = std::clamp(weights[i] / wsum, 0.0, 1.0);
    std::int64_t k;
    if (i + 1 == weights.size()) {
      k = remaining;
    } else {
      std::binomial_distribution<std::int64_t> dist(remaining, p);
      k = dist(rng);
    }
    out[i] = k;
    remaining -= k;
    wsum -= weights[i];
  }
  return out;
}

// Adds organization accounts; returns per-region-per-stratum added counts
// aligned with platform.regions() order.
std::vector<std::array<std::int64_t, kNumStrata>> inject_detail(
    std::vector<RegionCounts>& rows, double rate, double concentration, std::uint64_t seed) {
  std::vector<std::array<std::int64_t, kNumStrata>> added(rows.size());
  for (auto& a : added) a.fill(0);
  if (rate <= 0.0) return added;
  std::int64_t total = 0;
  for (const auto& r : rows) total += r.total;
  const std::int64_t orgs = std::llround(rate / (1.0 - rate) * static_cast<double>(total));
  if (orgs <= 0) return added;

  std::mt19937_64 rng(seed);
  std::vector<double> weights(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    weights[i] = std::pow(static_cast<double>(rows[i].total), concentration);
  std::vector<std::int64_t> per_region = multinomial(rng, orgs, weights);
  const std::vector<double> uniform(kNumStrata, 1.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (per_region[i] == 0) continue;
    std::vector<std::int64_t> per_stratum = multinomial(rng, per_region[i], uniform);
    for (int s = 0; s < kNumStrata; ++s) {
      added[i][s] = per_stratum[s];
      rows[i].counts[s] += per_stratum[s];
    }
  }
  return added;
}

}  // namespace

std::pair<PlatformTable, std::map<RegionId, std::int64_t>> inject_organizations(
    const PlatformTable& platform, double rate, double concentration, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw SimulationError("org rate must be in [0, 1)");
  if (!(concentration >= 0.0) || !std::isfinite(concentration))
    throw SimulationError("org concentration must be >= 0");
  std::vector<RegionCounts> rows = platform.regions();
  auto added = inject_detail(rows, rate, concentration, seed);
  std::map<RegionId, std::int64_t> per_region;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::int64_t sum = 0;
    for (int s = 0; s < kNumStrata; ++s) sum += added[i][s];
    per_region[rows[i].region] = sum;
  }
  return {PlatformTable::create(std::move(rows)), std::move(per_region)};
}

SimulationOutput generate(const SimulationConfig& cfg) {
  validate(cfg);
  const double theta = cfg.inclusion == InclusionForm::Inhomogeneous
                           ? cfg.nu / (1.0 - cfg.nu)
                           : 0.0;
  auto multiplier = [&](int c) {
    return cfg.country_multipliers.empty() ? 1.0 : cfg.country_multipliers[c];
  };

  if (cfg.inclusion == InclusionForm::Homogeneous) {
    for (int c = 0; c < cfg.countries; ++c)
      for (int s = 0; s < kNumStrata; ++s) {
        const double p = cfg.pi[s] * multiplier(c);
        if (!InclusionProbabilityTable::in_range(p))
          throw SimulationError("simulate: pi " + std::to_string(p) + " outside (0,1] for country " +
                                country_id(c) + " stratum " + to_string(stratum_from_index(s)));
      }
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;

  std::vector<RegionCounts> census_rows, human_rows;
  CovariateTable covariates;
  InclusionProbabilityTable truth;
  const std::int64_t q = cfg.cell_quantum;

  for (int c = 0; c < cfg.countries; ++c) {
    const CountryId cid = country_id(c);
    for (int r = 0; r < cfg.regions_per_country; ++r) {
      const RegionId rid = region_id(c, r);
      const double size = cfg.region_size_median * std::exp(cfg.region_size_sigma * normal(rng));
      std::array<double, kNumStrata> w{};
      double wsum = 0.0;
      for (int s = 0; s < kNumStrata; ++s) {
        w[s] = cfg.stratum_shares[s] * std::exp(cfg.share_sigma * normal(rng));
        wsum += w[s];
      }
      RegionCounts census_rc, human_rc;
      census_rc.region = human_rc.region = rid;
      census_rc.country = human_rc.country = cid;
      for (int s = 0; s < kNumStrata; ++s) {
        const double target = size * w[s] / wsum;
        census_rc.counts[s] = std::max<std::int64_t>(q, std::llround(target / q) * q);
      }
      for (int s = 0; s < kNumStrata; ++s) {
        const std::int64_t n_cell = census_rc.counts[s];
        double p;
        if (cfg.inclusion == InclusionForm::Homogeneous) {
          p = cfg.pi[s] * multiplier(c);
        } else {
          p = cfg.pi_scale * std::pow(static_cast<double>(n_cell), theta) *
              cfg.f1[static_cast<int>(stratum_from_index(s).age)] *
              cfg.f2[static_cast<int>(stratum_from_index(s).gender)] * multiplier(c);
          if (!InclusionProbabilityTable::in_range(p))
            throw SimulationError("simulate: pi " + std::to_string(p) +
                                  " outside (0,1] for region " + rid + " stratum " +
                                  to_string(stratum_from_index(s)));
          PiEntry e;
          e.scope = PiScope::PerRegion;
          e.unit = rid;
          e.age = stratum_from_index(s).age;
          e.gender = stratum_from_index(s).gender;
          e.pi = p;
          e.valid = true;
          truth.entries.push_back(e);
        }
        if (cfg.noise == NoiseMode::Expected) {
          human_rc.counts[s] = std::llround(p * static_cast<double>(n_cell));
        } else {
          std::binomial_distribution<std::int64_t> dist(n_cell, p);
          human_rc.counts[s] = dist(rng);
        }
      }
      census_rows.push_back(census_rc);
      human_rows.push_back(human_rc);

      CovariateRow cov;
      cov.region = rid;
      cov.area_km2 = 1000.0 * std::exp(1.0 * normal(rng));
      std::int64_t pop = 0;
      for (auto v : census_rc.counts) pop += v;
      cov.density = static_cast<double>(pop) / *cov.area_km2;
      cov.income = 20000.0 * std::exp(0.3 * normal(rng));
      covariates.rows.push_back(cov);
    }
  }
  std::sort(covariates.rows.begin(), covariates.rows.end(),
            [](const CovariateRow& a, const CovariateRow& b) { return a.region < b.region; });

  if (cfg.inclusion == InclusionForm::Homogeneous) {
    if (cfg.country_multipliers.empty()) {
      for (int s = 0; s < kNumStrata; ++s) {
        PiEntry e;
        e.scope = PiScope::Global;
        e.age = stratum_from_index(s).age;
        e.gender = stratum_from_index(s).gender;
        e.pi = cfg.pi[s];
        e.valid = true;
        truth.entries.push_back(e);
      }
    } else {
      for (int c = 0; c < cfg.countries; ++c)
        for (int s = 0; s < kNumStrata; ++s) {
          PiEntry e;
          e.scope = PiScope::PerCountry;
          e.unit = country_id(c);
          e.age = stratum_from_index(s).age;
          e.gender = stratum_from_index(s).gender;
          e.pi = cfg.pi[s] * multiplier(c);
          e.valid = true;
          truth.entries.push_back(e);
        }
    }
  }

  SimulationOutput out{CensusTable::create(census_rows), PlatformTable::create(human_rows),
                       std::move(truth), std::move(covariates), {}, {}};

  std::vector<std::array<std::int64_t, kNumStrata>> org_cells(human_rows.size());
  for (auto& a : org_cells) a.fill(0);
  if (cfg.org_rate > 0.0) {
    std::vector<RegionCounts> rows = out.platform.regions();
    org_cells = inject_detail(rows, cfg.org_rate, cfg.org_concentration,
                              cfg.seed ^ kOrgSeedSalt);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::int64_t sum = 0;
      for (int s = 0; s < kNumStrata; ++s) sum += org_cells[i][s];
      out.org_counts[rows[i].region] = sum;
    }
    out.platform = PlatformTable::create(std::move(rows));
  }

  if (cfg.emit_users) {
    // Humans come from pre-injection counts; organizations get p_org = 1.
    std::int64_t uid = 0;
    const auto& humans = human_rows;
    for (std::size_t i = 0; i < humans.size(); ++i) {
      for (int s = 0; s < kNumStrata; ++s) {
        const Stratum st = stratum_from_index(s);
        for (std::int64_t k = 0; k < humans[i].counts[s]; ++k) {
          ingest::UserRecord u;
          u.user_id = "U" + std::to_string(++uid);
          u.region = humans[i].region;
          u.age = st.age;
          u.gender = st.gender;
          u.p_org = 0.0;
          out.users.push_back(std::move(u));
        }
        for (std::int64_t k = 0; k < org_cells[i][s]; ++k) {
          ingest::UserRecord u;
          u.user_id = "U" + std::to_string(++uid);
          u.region = humans[i].region;
          u.age = st.age;
          u.gender = st.gender;
          u.p_org = 1.0;
          out.users.push_back(std::move(u));
        }
      }
    }
  }
  return out;
}

namespace {

double parse_number(const std::string& field, const std::string& key) {
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(field.c_str(), &end);
  if (field.empty() || errno != 0 || end != field.c_str() + field.size() || !std::isfinite(v))
    throw SimulationError("config: " + key + " has unparsable value \"" + field + "\"");
  return v;
}

std::vector<double> parse_list(const std::string& field, const std::string& key) {
  std::vector<double> out;
  std::string item;
  std::istringstream ss(field);
  while (std::getline(ss, item, ',')) out.push_back(parse_number(item, key));
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

SimulationConfig parse_config(std::istream& in) {
  SimulationConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw SimulationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    auto fixed_list = [&](std::size_t want) {
      auto v = parse_list(value, key);
      if (v.size() != want)
        throw SimulationError("config: " + key + " needs " + std::to_string(want) +
                              " comma-separated values, got " + std::to_string(v.size()));
      return v;
    };

    if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(std::strtoull(value.c_str(), nullptr, 10));
    } else if (key == "countries") {
      cfg.countries = static_cast<int>(parse_number(value, key));
    } else if (key == "regions_per_country") {
      cfg.regions_per_country = static_cast<int>(parse_number(value, key));
    } else if (key == "region_size_median") {
      cfg.region_size_median = parse_number(value, key);
    } else if (key == "region_size_sigma") {
      cfg.region_size_sigma = parse_number(value, key);
    } else if (key == "stratum_shares") {
      if (value == "uniform") {
        cfg.stratum_shares.fill(1.0 / kNumStrata);
      } else {
        auto v = fixed_list(kNumStrata);
        std::copy(v.begin(), v.end(), cfg.stratum_shares.begin());
      }
    } else if (key == "share_sigma") {
      cfg.share_sigma = parse_number(value, key);
    } else if (key == "cell_quantum") {
      cfg.cell_quantum = static_cast<std::int64_t>(parse_number(value, key));
    } else if (key == "noise") {
      if (value == "expected") cfg.noise = NoiseMode::Expected;
      else if (value == "binomial") cfg.noise = NoiseMode::Binomial;
      else throw SimulationError("config: noise must be expected or binomial, got " + value);
    } else if (key == "inclusion") {
      if (value == "homogeneous") cfg.inclusion = InclusionForm::Homogeneous;
      else if (value == "inhomogeneous") cfg.inclusion = InclusionForm::Inhomogeneous;
      else throw SimulationError("config: inclusion must be homogeneous or inhomogeneous, got " +
                                 value);
    } else if (key == "pi") {
      auto v = parse_list(value, key);
      if (v.size() == 1) cfg.pi.fill(v[0]);
      else if (v.size() == kNumStrata) std::copy(v.begin(), v.end(), cfg.pi.begin());
      else throw SimulationError("config: pi needs 1 or 8 values");
    } else if (key == "country_multipliers") {
      cfg.country_multipliers = parse_list(value, key);
    } else if (key == "nu") {
      cfg.nu = parse_number(value, key);
    } else if (key == "f1") {
      auto v = fixed_list(kNumAgeBuckets);
      std::copy(v.begin(), v.end(), cfg.f1.begin());
    } else if (key == "f2") {
      auto v = fixed_list(kNumGenders);
      std::copy(v.begin(), v.end(), cfg.f2.begin());
    } else if (key == "pi_scale") {
      cfg.pi_scale = parse_number(value, key);
    } else if (key == "org_rate") {
      cfg.org_rate = parse_number(value, key);
    } else if (key == "org_concentration") {
      cfg.org_concentration = parse_number(value, key);
    } else if (key == "emit_users") {
      if (value == "true" || value == "1") cfg.emit_users = true;
      else if (value == "false" || value == "0") cfg.emit_users = false;
      else throw SimulationError("config: emit_users must be true or false, got " + value);
    } else {
      throw SimulationError("config: unknown key \"" + key + "\"");
    }
  }
  return cfg;
}

SimulationConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimulationError(path + ": cannot open file");
  return parse_config(in);
}

void write_truth_pi(std::ostream& out, const InclusionProbabilityTable& table) {
  csv::write_row(out, {"scope", "country", "age_bucket", "gender", "pi"});
  for (const auto& e : table.entries) {
    csv::write_row(out, {to_string(e.scope), e.unit, e.age ? to_string(*e.age) : "",
                         e.gender ? to_string(*e.gender) : "", format_double(e.pi)});
  }
}

InclusionProbabilityTable read_truth_pi(std::istream& in, const std::string& source_name) {
  csv::Table t = csv::read(in, source_name);
  const std::vector<std::string> want = {"scope", "country", "age_bucket", "gender", "pi"};
  if (t.header != want) throw SimulationError(source_name + ": bad truth_pi header");
  InclusionProbabilityTable table;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    PiEntry e;
    if (row[0] == "global") e.scope = PiScope::Global;
    else if (row[0] == "country") e.scope = PiScope::PerCountry;
    else if (row[0] == "region") e.scope = PiScope::PerRegion;
    else
      throw SimulationError(source_name + ":" + std::to_string(t.line_numbers[i]) +
                            ": unknown scope " + row[0]);
    e.unit = row[1];
    if (!row[2].empty()) e.age = parse_age_bucket(row[2]);
    if (!row[3].empty()) e.gender = parse_gender(row[3]);
    e.pi = parse_number(row[4], "pi");
    e.valid = InclusionProbabilityTable::in_range(e.pi);
    table.entries.push_back(e);
  }
  return table;
}

}  // namespace debias::simulate
