#include "debias/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <sstream>

#include "debias/ingest.hpp"
#include "debias/util.hpp"

namespace debias::models {

using ordered_json = nlohmann::ordered_json;

namespace {

const std::map<std::string, ModelFamily> kFamilyTokens = {
    {"baseline", ModelFamily::Baseline},
    {"gender", ModelFamily::GenderMarginal},
    {"age", ModelFamily::AgeMarginal},
    {"joint", ModelFamily::JointHomogeneous},
    {"joint-log", ModelFamily::JointLog},
};

}  // namespace

ModelFamily parse_family(const std::string& token) {
  auto it = kFamilyTokens.find(token);
  if (it == kFamilyTokens.end())
    throw ModelError("unknown family \"" + token +
                     "\" (expected baseline|gender|age|joint|joint-log)");
  return it->second;
}

const std::string& to_string(ModelFamily f) {
  static const std::string names[] = {"baseline", "gender", "age", "joint", "joint-log"};
  return names[static_cast<int>(f)];
}

bool is_log_family(ModelFamily f) { return f == ModelFamily::JointLog; }

const std::string& to_string(ZeroPolicy z) {
  static const std::string names[] = {"drop", "add-one"};
  return names[static_cast<int>(z)];
}

ZeroPolicy parse_zero_policy(const std::string& token) {
  if (token == "drop") return ZeroPolicy::Drop;
  if (token == "add-one") return ZeroPolicy::AddOne;
  throw ModelError("unknown zero policy \"" + token + "\" (expected drop|add-one)");
}

const std::string& to_string(SolverKind s) {
  static const std::string names[] = {"ols", "nnls"};
  return names[static_cast<int>(s)];
}

SolverKind parse_solver(const std::string& token) {
  if (token == "ols") return SolverKind::Ols;
  if (token == "nnls") return SolverKind::Nnls;
  throw ModelError("unknown solver \"" + token + "\" (expected ols|nnls)");
}

namespace {

int homogeneous_width(ModelFamily f) {
  switch (f) {
    case ModelFamily::Baseline: return 1;
    case ModelFamily::GenderMarginal: return kNumGenders;
    case ModelFamily::AgeMarginal: return kNumAgeBuckets;
    case ModelFamily::JointHomogeneous: return kNumStrata;
    case ModelFamily::JointLog: break;
  }
  throw ModelError("not a homogeneous family");
}

std::vector<std::string> homogeneous_columns(ModelFamily f) {
  std::vector<std::string> cols;
  switch (f) {
    case ModelFamily::Baseline:
      cols = {"m_total"};
      break;
    case ModelFamily::GenderMarginal:
      for (int g = 0; g < kNumGenders; ++g) cols.push_back("m_" + to_string(Gender(g)));
      break;
    case ModelFamily::AgeMarginal:
      for (int a = 0; a < kNumAgeBuckets; ++a) cols.push_back("m_" + to_string(AgeBucket(a)));
      break;
    case ModelFamily::JointHomogeneous:
      for (const Stratum& s : all_strata()) cols.push_back("m_" + to_string(s));
      break;
    case ModelFamily::JointLog:
      throw ModelError("not a homogeneous family");
  }
  return cols;
}

Eigen::RowVectorXd homogeneous_row(ModelFamily f, const RegionCounts& m) {
  Eigen::RowVectorXd x(homogeneous_width(f));
  switch (f) {
    case ModelFamily::Baseline:
      x(0) = static_cast<double>(m.total);
      break;
    case ModelFamily::GenderMarginal: {
      x.setZero();
      for (int s = 0; s < kNumStrata; ++s)
        x(static_cast<int>(stratum_from_index(s).gender)) += static_cast<double>(m.counts[s]);
      break;
    }
    case ModelFamily::AgeMarginal: {
      x.setZero();
      for (int s = 0; s < kNumStrata; ++s)
        x(static_cast<int>(stratum_from_index(s).age)) += static_cast<double>(m.counts[s]);
      break;
    }
    case ModelFamily::JointHomogeneous:
      for (int s = 0; s < kNumStrata; ++s) x(s) = static_cast<double>(m.counts[s]);
      break;
    case ModelFamily::JointLog:
      throw ModelError("not a homogeneous family");
  }
  return x;
}

const std::vector<std::string>& joint_log_columns() {
  static const std::vector<std::string> cols = {
      "log_m",      "intercept",  "age_" + to_string(AgeBucket::Age19_29),
      "age_" + to_string(AgeBucket::Age30_39), "age_" + to_string(AgeBucket::Age40_99),
      "gender_" + to_string(Gender::Male)};
  return cols;
}

void joint_log_row(double log_m, const Stratum& s, Eigen::Ref<Eigen::RowVectorXd> x) {
  x.setZero();
  x(0) = log_m;
  x(1) = 1.0;
  if (s.age != AgeBucket::Age0_18) x(1 + static_cast<int>(s.age)) = 1.0;
  if (s.gender == Gender::Male) x(5) = 1.0;
}

}  // namespace

DesignInfo build_design(ModelFamily family, const Dataset& ds, ZeroPolicy zero_policy,
                        const std::optional<Stratum>& exclude_stratum, bool intercept_override) {
  if (exclude_stratum && family != ModelFamily::JointLog)
    throw ModelError("stratum exclusion only applies to joint-log (other families use strata as "
                     "columns)");
  DesignInfo di;
  const auto& census = ds.census.regions();

  if (family != ModelFamily::JointLog) {
    const int p = homogeneous_width(family);
    const Eigen::Index n = static_cast<Eigen::Index>(census.size());
    di.dm.column_names = homogeneous_columns(family);
    di.dm.y.resize(n);
    di.dm.X.resize(n, p);
    di.dm.rows.reserve(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const RegionCounts& c = census[i];
      const RegionCounts* m = ds.platform.find(c.region);
      di.dm.y(i) = static_cast<double>(c.total);
      di.dm.X.row(i) = homogeneous_row(family, *m);
      di.dm.rows.push_back({c.region, c.country, std::nullopt});
    }
    if (intercept_override) {
      Eigen::MatrixXd X(di.dm.X.rows(), di.dm.X.cols() + 1);
      X.col(0).setOnes();
      X.rightCols(di.dm.X.cols()) = di.dm.X;
      di.dm.X = std::move(X);
      di.dm.column_names.insert(di.dm.column_names.begin(), "intercept");
    }
    return di;
  }

  std::vector<double> y;
  std::vector<std::array<double, 6>> xs;
  std::vector<regress::RowInfo> rows;
  for (const RegionCounts& c : census) {
    const RegionCounts* m = ds.platform.find(c.region);
    for (const Stratum& s : all_strata()) {
      if (exclude_stratum && s.age == exclude_stratum->age &&
          s.gender == exclude_stratum->gender)
        continue;
      const std::int64_t n_cell = c.counts[stratum_index(s)];
      const std::int64_t m_cell = m->counts[stratum_index(s)];
      if (n_cell == 0) {
        ++di.dropped_zero_n;
        continue;
      }
      double log_m;
      if (zero_policy == ZeroPolicy::Drop) {
        if (m_cell == 0) {
          ++di.dropped_zero_m;
          continue;
        }
        log_m = std::log(static_cast<double>(m_cell));
      } else {
        log_m = std::log(static_cast<double>(m_cell) + 1.0);
      }
      y.push_back(std::log(static_cast<double>(n_cell)));
      Eigen::RowVectorXd x(6);
      joint_log_row(log_m, s, x);
      xs.push_back({x(0), x(1), x(2), x(3), x(4), x(5)});
      rows.push_back({c.region, c.country, s});
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  di.dm.column_names = joint_log_columns();
  di.dm.y.resize(n);
  di.dm.X.resize(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    di.dm.y(i) = y[i];
    for (int j = 0; j < 6; ++j) di.dm.X(i, j) = xs[i][j];
  }
  di.dm.rows = std::move(rows);
  return di;
}

namespace {

// (age, gender) attribution of each coefficient column, per family.
std::pair<std::optional<AgeBucket>, std::optional<Gender>> column_attrs(ModelFamily f, int j) {
  switch (f) {
    case ModelFamily::Baseline: return {std::nullopt, std::nullopt};
    case ModelFamily::GenderMarginal: return {std::nullopt, Gender(j)};
    case ModelFamily::AgeMarginal: return {AgeBucket(j), std::nullopt};
    case ModelFamily::JointHomogeneous:
      return {stratum_from_index(j).age, stratum_from_index(j).gender};
    case ModelFamily::JointLog: break;
  }
  throw ModelError("not a homogeneous family");
}

PiEntry reciprocal_entry(PiScope scope, const std::string& unit,
                         std::pair<std::optional<AgeBucket>, std::optional<Gender>> attrs,
                         double coef) {
  PiEntry e;
  e.scope = scope;
  e.unit = unit;
  e.age = attrs.first;
  e.gender = attrs.second;
  e.pi = 1.0 / coef;
  e.valid = coef > 0.0 && InclusionProbabilityTable::in_range(e.pi);
  return e;
}

// Named fixed-effect lookup plus the per-country offset when multilevel.
struct CoefView {
  const FittedDebiasModel* model;
  std::map<std::string, Eigen::Index> col_of;
  std::map<std::string, Eigen::Index> rand_of;
  std::map<CountryId, Eigen::Index> group_of;

  explicit CoefView(const FittedDebiasModel& m) : model(&m) {
    const auto& cols = m.columns();
    for (std::size_t j = 0; j < cols.size(); ++j)
      col_of[cols[j]] = static_cast<Eigen::Index>(j);
    if (m.is_multilevel()) {
      const auto& mx = std::get<regress::MixedFit>(m.fit);
      for (std::size_t k = 0; k < mx.random_columns.size(); ++k)
        rand_of[mx.random_columns[k]] = static_cast<Eigen::Index>(k);
      for (std::size_t c = 0; c < mx.groups.size(); ++c)
        group_of[mx.groups[c]] = static_cast<Eigen::Index>(c);
    }
  }

  double fixed(const std::string& col) const {
    const Eigen::Index j = col_of.at(col);
    return model->is_multilevel() ? std::get<regress::MixedFit>(model->fit).beta(j)
                                  : std::get<regress::FixedFit>(model->fit).beta(j);
  }

  // fixed + BLUP for a country (0 when the column carries no random effect).
  double for_country(const std::string& col, const CountryId& country) const {
    double v = fixed(col);
    if (!model->is_multilevel()) return v;
    auto g = group_of.find(country);
    auto r = rand_of.find(col);
    if (g == group_of.end() || r == rand_of.end()) return v;
    return v + std::get<regress::MixedFit>(model->fit).blups(g->second, r->second);
  }

  std::vector<CountryId> countries() const {
    std::vector<CountryId> out;
    for (const auto& [c, _] : group_of) out.push_back(c);
    return out;
  }
};

PiFactors log_factors(const CoefView& cv, const std::string& unit_country, bool per_country) {
  auto coef = [&](const std::string& col) {
    return per_country ? cv.for_country(col, unit_country) : cv.fixed(col);
  };
  PiFactors f;
  f.nu = 1.0 - coef("log_m");
  const double b0 = coef("intercept");
  std::array<double, kNumAgeBuckets> beta_age{};
  for (int a = 1; a < kNumAgeBuckets; ++a)
    beta_age[a] = coef("age_" + to_string(AgeBucket(a)));
  std::array<double, kNumGenders> beta_gender{};
  beta_gender[static_cast<int>(Gender::Male)] = coef("gender_" + to_string(Gender::Male));
  for (int a = 0; a < kNumAgeBuckets; ++a) f.f1[a] = std::exp(-b0 - beta_age[a]);
  for (int g = 0; g < kNumGenders; ++g) f.f2[g] = std::exp(-beta_gender[g]);
  for (int s = 0; s < kNumStrata; ++s) {
    const Stratum st = stratum_from_index(s);
    f.phi[s] = f.f1[static_cast<int>(st.age)] * f.f2[static_cast<int>(st.gender)];
  }
  return f;
}

InclusionProbabilityTable derive_pi(const FittedDebiasModel& model, const Dataset& ds) {
  InclusionProbabilityTable table;
  CoefView cv(model);

  if (model.family != ModelFamily::JointLog) {
    const auto& cols = model.columns();
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (cols[j] == "intercept") continue;
      const int attr_index = static_cast<int>(j) - (model.options.intercept_override ? 1 : 0);
      table.entries.push_back(reciprocal_entry(
          PiScope::Global, "", column_attrs(model.family, attr_index), cv.fixed(cols[j])));
    }
    if (model.is_multilevel()) {
      for (const CountryId& c : cv.countries())
        for (std::size_t j = 0; j < cols.size(); ++j) {
          if (cols[j] == "intercept") continue;
          const int attr_index = static_cast<int>(j) - (model.options.intercept_override ? 1 : 0);
          table.entries.push_back(reciprocal_entry(PiScope::PerCountry, c,
                                                   column_attrs(model.family, attr_index),
                                                   cv.for_country(cols[j], c)));
        }
    }
    return table;
  }

  table.factors[""] = log_factors(cv, "", false);
  if (model.is_multilevel())
    for (const CountryId& c : cv.countries()) table.factors[c] = log_factors(cv, c, true);

  for (const RegionCounts& m : ds.platform.regions()) {
    const PiFactors& f = model.is_multilevel() && table.factors.count(m.country)
                             ? table.factors.at(m.country)
                             : table.factors.at("");
    for (int s = 0; s < kNumStrata; ++s) {
      PiEntry e;
      e.scope = PiScope::PerRegion;
      e.unit = m.region;
      e.age = stratum_from_index(s).age;
      e.gender = stratum_from_index(s).gender;
      const std::int64_t m_cell = m.counts[s];
      e.pi = m_cell > 0 ? std::pow(static_cast<double>(m_cell), f.nu) * f.phi[s] : 0.0;
      e.valid = m_cell > 0 && InclusionProbabilityTable::in_range(e.pi);
      table.entries.push_back(e);
    }
  }
  return table;
}

}  // namespace

const std::vector<std::string>& FittedDebiasModel::columns() const {
  return is_multilevel() ? std::get<regress::MixedFit>(fit).column_names
                         : std::get<regress::FixedFit>(fit).column_names;
}

double FittedDebiasModel::coefficient(const std::string& column) const {
  const auto& cols = columns();
  for (std::size_t j = 0; j < cols.size(); ++j)
    if (cols[j] == column)
      return is_multilevel() ? std::get<regress::MixedFit>(fit).beta(static_cast<Eigen::Index>(j))
                             : std::get<regress::FixedFit>(fit).beta(static_cast<Eigen::Index>(j));
  throw ModelError("no coefficient named " + column);
}

FittedDebiasModel fit(ModelFamily family, const Dataset& ds, const FitOptions& opts) {
  if (opts.multilevel && opts.solver == SolverKind::Nnls)
    throw ModelError("nnls is not available for multilevel fits");
  if (opts.multilevel && ds.countries().size() < 2)
    throw ModelError("multilevel fit requires at least 2 countries, got " +
                     std::to_string(ds.countries().size()));

  DesignInfo di = build_design(family, ds, opts.zero_policy, opts.exclude_stratum,
                               opts.intercept_override && !is_log_family(family));
  FittedDebiasModel model;
  model.family = family;
  model.options = opts;
  model.dropped_zero_m = di.dropped_zero_m;
  model.dropped_zero_n = di.dropped_zero_n;
  if (opts.multilevel) {
    model.fit = regress::reml_fit(di.dm, di.dm.column_names);
  } else if (opts.solver == SolverKind::Nnls) {
    model.fit = regress::nnls(di.dm);
  } else {
    model.fit = regress::ols(di.dm);
  }
  model.pi = derive_pi(model, ds);
  model.any_pi_out_of_range = std::any_of(model.pi.entries.begin(), model.pi.entries.end(),
                                          [](const PiEntry& e) { return !e.valid; });
  model.dataset_hash = dataset_hash(ds);
  return model;
}

InclusionProbabilityTable inclusion_probabilities(const FittedDebiasModel& model, PiScope scope) {
  InclusionProbabilityTable out;
  for (const auto& e : model.pi.entries)
    if (e.scope == scope) out.entries.push_back(e);
  if (model.family == ModelFamily::JointLog) {
    if (scope == PiScope::Global) out.factors[""] = model.pi.factors.at("");
    if (scope == PiScope::PerCountry)
      for (const auto& [unit, f] : model.pi.factors)
        if (!unit.empty()) out.factors[unit] = f;
  }
  return out;
}

PopulationPrediction predict_population(const FittedDebiasModel& model,
                                        const PlatformTable& platform, bool use_random_effects) {
  PopulationPrediction out;
  const bool multilevel = model.is_multilevel();
  std::map<CountryId, bool> seen_country;
  if (multilevel)
    for (const auto& g : std::get<regress::MixedFit>(model.fit).groups) seen_country[g] = true;
  auto has_re = [&](const CountryId& c) {
    return multilevel && use_random_effects && seen_country.count(c) > 0;
  };

  const auto& regions = platform.regions();
  if (model.family != ModelFamily::JointLog) {
    regress::DesignMatrix dm;
    const Eigen::Index n = static_cast<Eigen::Index>(regions.size());
    const bool iovr = model.options.intercept_override;
    dm.column_names = model.columns();
    dm.y = Eigen::VectorXd::Zero(n);
    dm.X.resize(n, static_cast<Eigen::Index>(dm.column_names.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (iovr) {
        dm.X(i, 0) = 1.0;
        dm.X.row(i).tail(dm.X.cols() - 1) = homogeneous_row(model.family, regions[i]);
      } else {
        dm.X.row(i) = homogeneous_row(model.family, regions[i]);
      }
      dm.rows.push_back({regions[i].region, regions[i].country, std::nullopt});
    }
    Eigen::VectorXd pred =
        multilevel
            ? regress::predict(std::get<regress::MixedFit>(model.fit), dm, use_random_effects)
            : regress::predict(std::get<regress::FixedFit>(model.fit), dm);
    for (Eigen::Index i = 0; i < n; ++i) {
      PredictionRow row;
      row.region = regions[i].region;
      row.country = regions[i].country;
      row.predicted = pred(i);
      row.used_random_effects = has_re(regions[i].country);
      out.totals.push_back(std::move(row));
    }
    return out;
  }

  // Log model: predict each present cell on the log scale, exponentiate,
  // and sum into the region total. Absent cells contribute zero and flag
  // both the cell row and the total.
  regress::DesignMatrix dm;
  std::vector<bool> present;
  std::vector<regress::RowInfo> meta;
  std::vector<std::array<double, 6>> xs;
  for (const RegionCounts& m : regions) {
    for (const Stratum& s : all_strata()) {
      const std::int64_t m_cell = m.counts[stratum_index(s)];
      bool here = model.options.zero_policy == ZeroPolicy::AddOne || m_cell > 0;
      present.push_back(here);
      meta.push_back({m.region, m.country, s});
      if (!here) {
        xs.push_back({});
        continue;
      }
      const double log_m = model.options.zero_policy == ZeroPolicy::AddOne
                               ? std::log(static_cast<double>(m_cell) + 1.0)
                               : std::log(static_cast<double>(m_cell));
      Eigen::RowVectorXd x(6);
      joint_log_row(log_m, s, x);
      xs.push_back({x(0), x(1), x(2), x(3), x(4), x(5)});
    }
  }
  Eigen::Index n_present = 0;
  for (bool b : present) n_present += b ? 1 : 0;
  dm.column_names = joint_log_columns();
  dm.y = Eigen::VectorXd::Zero(n_present);
  dm.X.resize(n_present, 6);
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < present.size(); ++i) {
    if (!present[i]) continue;
    for (int j = 0; j < 6; ++j) dm.X(r, j) = xs[i][j];
    dm.rows.push_back(meta[i]);
    ++r;
  }
  Eigen::VectorXd pred =
      multilevel
          ? regress::predict(std::get<regress::MixedFit>(model.fit), dm, use_random_effects)
          : regress::predict(std::get<regress::FixedFit>(model.fit), dm);

  r = 0;
  std::size_t flat = 0;
  for (const RegionCounts& m : regions) {
    PredictionRow total;
    total.region = m.region;
    total.country = m.country;
    total.used_random_effects = has_re(m.country);
    for (const Stratum& s : all_strata()) {
      PredictionRow cell;
      cell.region = m.region;
      cell.country = m.country;
      cell.stratum = s;
      cell.used_random_effects = total.used_random_effects;
      if (present[flat]) {
        cell.predicted = std::exp(pred(r));
        total.predicted += cell.predicted;
        ++r;
      } else {
        cell.predicted = 0.0;
        cell.imputed_zero = true;
        total.imputed_zero = true;
      }
      out.cells.push_back(std::move(cell));
      ++flat;
    }
    out.totals.push_back(std::move(total));
  }
  return out;
}

std::string dataset_hash(const Dataset& ds) {
  std::ostringstream ss;
  ingest::write_census(ss, ds.census);
  ingest::write_platform(ss, ds.platform);
  return hex64(fnv1a(ss.str()));
}

namespace {

ordered_json finite_or_tag(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double from_finite_or_tag(const ordered_json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  throw ModelError("bad numeric tag \"" + s + "\"");
}

ordered_json vec_json(const Eigen::VectorXd& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd json_vec(const ordered_json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

ordered_json mat_json(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd json_mat(const ordered_json& rows, Eigen::Index cols_hint) {
  const Eigen::Index r = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index c = r > 0 ? static_cast<Eigen::Index>(rows[0].size()) : cols_hint;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rows[i][j].get<double>();
  return m;
}

ordered_json pi_json(const InclusionProbabilityTable& t) {
  ordered_json entries = ordered_json::array();
  for (const auto& e : t.entries) {
    ordered_json je;
    je["scope"] = to_string(e.scope);
    je["unit"] = e.unit;
    je["age"] = e.age ? ordered_json(to_string(*e.age)) : ordered_json(nullptr);
    je["gender"] = e.gender ? ordered_json(to_string(*e.gender)) : ordered_json(nullptr);
    je["pi"] = finite_or_tag(e.pi);
    je["valid"] = e.valid;
    entries.push_back(std::move(je));
  }
  ordered_json factors = ordered_json::object();
  for (const auto& [unit, f] : t.factors) {
    ordered_json jf;
    jf["nu"] = f.nu;
    jf["phi"] = f.phi;
    jf["f1"] = f.f1;
    jf["f2"] = f.f2;
    factors[unit] = std::move(jf);
  }
  ordered_json out;
  out["entries"] = std::move(entries);
  out["factors"] = std::move(factors);
  return out;
}

InclusionProbabilityTable json_pi(const ordered_json& j) {
  InclusionProbabilityTable t;
  for (const auto& je : j.at("entries")) {
    PiEntry e;
    const std::string scope = je.at("scope").get<std::string>();
    if (scope == "global") e.scope = PiScope::Global;
    else if (scope == "country") e.scope = PiScope::PerCountry;
    else if (scope == "region") e.scope = PiScope::PerRegion;
    else throw ModelError("bad pi scope " + scope);
    e.unit = je.at("unit").get<std::string>();
    if (!je.at("age").is_null()) e.age = parse_age_bucket(je.at("age").get<std::string>());
    if (!je.at("gender").is_null()) e.gender = parse_gender(je.at("gender").get<std::string>());
    e.pi = from_finite_or_tag(je.at("pi"));
    e.valid = je.at("valid").get<bool>();
    t.entries.push_back(std::move(e));
  }
  for (const auto& [unit, jf] : j.at("factors").items()) {
    PiFactors f;
    f.nu = jf.at("nu").get<double>();
    f.phi = jf.at("phi").get<std::array<double, kNumStrata>>();
    f.f1 = jf.at("f1").get<std::array<double, kNumAgeBuckets>>();
    f.f2 = jf.at("f2").get<std::array<double, kNumGenders>>();
    t.factors[unit] = f;
  }
  return t;
}

constexpr const char* kModelFormat = "debias-model/1";

}  // namespace

void write_model(std::ostream& out, const FittedDebiasModel& model) {
  ordered_json j;
  j["format"] = kModelFormat;
  j["family"] = to_string(model.family);
  ordered_json opts;
  opts["multilevel"] = model.options.multilevel;
  opts["solver"] = to_string(model.options.solver);
  opts["zero_policy"] = to_string(model.options.zero_policy);
  opts["intercept_override"] = model.options.intercept_override;
  opts["exclude_stratum"] = model.options.exclude_stratum
                                ? ordered_json(to_string(*model.options.exclude_stratum))
                                : ordered_json(nullptr);
  j["options"] = std::move(opts);
  j["dropped_zero_m"] = model.dropped_zero_m;
  j["dropped_zero_n"] = model.dropped_zero_n;
  j["dataset_hash"] = model.dataset_hash;
  j["any_pi_out_of_range"] = model.any_pi_out_of_range;
  if (model.is_multilevel()) {
    const auto& f = std::get<regress::MixedFit>(model.fit);
    j["fit_kind"] = "mixed";
    ordered_json jf;
    jf["columns"] = f.column_names;
    jf["random_columns"] = f.random_columns;
    jf["beta"] = vec_json(f.beta);
    jf["groups"] = f.groups;
    jf["blups"] = mat_json(f.blups);
    jf["variance_components"] = vec_json(f.variance_components);
    jf["sigma2"] = f.sigma2;
    jf["reml_loglik"] = f.reml_loglik;
    jf["iterations"] = f.iterations;
    jf["grad_norm"] = f.grad_norm;
    jf["converged"] = f.converged;
    j["fit"] = std::move(jf);
  } else {
    const auto& f = std::get<regress::FixedFit>(model.fit);
    j["fit_kind"] = "fixed";
    ordered_json jf;
    jf["columns"] = f.column_names;
    jf["beta"] = vec_json(f.beta);
    jf["sigma2"] = f.sigma2;
    jf["beta_cov"] = mat_json(f.beta_cov);
    jf["rank"] = f.rank;
    jf["condition"] = f.condition;
    jf["n"] = f.n;
    jf["p"] = f.p;
    j["fit"] = std::move(jf);
  }
  j["pi"] = pi_json(model.pi);
  out << j.dump(2) << "\n";
}

void write_model_file(const std::string& path, const FittedDebiasModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError(path + ": cannot open for writing");
  write_model(out, model);
}

FittedDebiasModel read_model(std::istream& in, const std::string& source_name) {
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw ModelError(source_name + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kModelFormat)
      throw ModelError("unsupported model format " + j.at("format").get<std::string>());
    FittedDebiasModel m;
    m.family = parse_family(j.at("family").get<std::string>());
    const auto& opts = j.at("options");
    m.options.multilevel = opts.at("multilevel").get<bool>();
    m.options.solver = parse_solver(opts.at("solver").get<std::string>());
    m.options.zero_policy = parse_zero_policy(opts.at("zero_policy").get<std::string>());
    m.options.intercept_override = opts.at("intercept_override").get<bool>();
    if (!opts.at("exclude_stratum").is_null()) {
      const std::string tok = opts.at("exclude_stratum").get<std::string>();
      const auto slash = tok.find('/');
      if (slash == std::string::npos) throw ModelError("bad exclude_stratum " + tok);
      m.options.exclude_stratum =
          Stratum{parse_age_bucket(tok.substr(0, slash)), parse_gender(tok.substr(slash + 1))};
    }
    m.dropped_zero_m = j.at("dropped_zero_m").get<int>();
    m.dropped_zero_n = j.at("dropped_zero_n").get<int>();
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
    m.any_pi_out_of_range = j.at("any_pi_out_of_range").get<bool>();
    const auto& jf = j.at("fit");
    if (j.at("fit_kind").get<std::string>() == "mixed") {
      regress::MixedFit f;
      f.column_names = jf.at("columns").get<std::vector<std::string>>();
      f.random_columns = jf.at("random_columns").get<std::vector<std::string>>();
      f.beta = json_vec(jf.at("beta"));
      f.groups = jf.at("groups").get<std::vector<std::string>>();
      f.blups = json_mat(jf.at("blups"), static_cast<Eigen::Index>(f.random_columns.size()));
      f.variance_components = json_vec(jf.at("variance_components"));
      f.sigma2 = jf.at("sigma2").get<double>();
      f.reml_loglik = jf.at("reml_loglik").get<double>();
      f.iterations = jf.at("iterations").get<int>();
      f.grad_norm = jf.at("grad_norm").get<double>();
      f.converged = jf.at("converged").get<bool>();
      m.fit = std::move(f);
    } else if (j.at("fit_kind").get<std::string>() == "fixed") {
      regress::FixedFit f;
      f.column_names = jf.at("columns").get<std::vector<std::string>>();
      f.beta = json_vec(jf.at("beta"));
      f.sigma2 = jf.at("sigma2").get<double>();
      f.beta_cov = json_mat(jf.at("beta_cov"), f.beta.size());
      f.rank = jf.at("rank").get<Eigen::Index>();
      f.condition = jf.at("condition").get<double>();
      f.n = jf.at("n").get<Eigen::Index>();
      f.p = jf.at("p").get<Eigen::Index>();
      m.fit = std::move(f);
    } else {
      throw ModelError("bad fit_kind " + j.at("fit_kind").get<std::string>());
    }
    m.pi = json_pi(j.at("pi"));
    return m;
  } catch (const ordered_json::exception& e) {
    throw ModelError(source_name + ": " + e.what());
  }
}

FittedDebiasModel read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError(path + ": cannot open file");
  return read_model(in, path);
}

}  // namespace debias::models
