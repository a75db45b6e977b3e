#include "debias/evaluate.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "debias/csv.hpp"
#include "debias/regress.hpp"
#include "debias/util.hpp"

namespace debias::evaluate {

using ordered_json = nlohmann::ordered_json;

CvScheme parse_scheme(const std::string& token) {
  if (token == "loro") return CvScheme::LeaveOneRegionOut;
  if (token == "loco") return CvScheme::LeaveOneCountryOut;
  if (token == "loso") return CvScheme::LeaveOneStratumOut;
  throw EvaluateError("unknown cv scheme \"" + token + "\" (expected loro|loco|loso)");
}

const std::string& to_string(CvScheme s) {
  static const std::string names[] = {"loro", "loco", "loso"};
  return names[static_cast<int>(s)];
}

double mape(const std::vector<double>& predicted, const std::vector<double>& actual) {
  if (predicted.size() != actual.size())
    throw EvaluateError("mape: length mismatch (" + std::to_string(predicted.size()) + " vs " +
                        std::to_string(actual.size()) + ")");
  if (predicted.empty()) throw EvaluateError("mape: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (actual[i] == 0.0)
      throw EvaluateError("mape: actual value at index " + std::to_string(i) + " is zero");
    sum += std::fabs(predicted[i] - actual[i]) / std::fabs(actual[i]);
  }
  return 100.0 * sum / static_cast<double>(predicted.size());
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& per_region_errors, int B,
                                       std::uint64_t seed) {
  if (B < 100) throw EvaluateError("bootstrap: B must be >= 100, got " + std::to_string(B));
  if (per_region_errors.empty()) throw EvaluateError("bootstrap: empty error vector");
  const std::size_t n = per_region_errors.size();
  SplitMix64 rng(seed);
  std::vector<double> means(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += per_region_errors[rng.next_below(n)];
    means[static_cast<std::size_t>(b)] = sum / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const auto lo = static_cast<std::size_t>(std::floor(0.025 * B));
  const auto hi = static_cast<std::size_t>(std::ceil(0.975 * B)) - 1;
  return {means[lo], means[hi]};
}

namespace {

int resolve_threads(const EvalOptions& opts) {
  if (opts.force_serial) return 1;
  if (opts.threads > 0) return opts.threads;
  if (const char* env = std::getenv("DEBIAS_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return omp_get_max_threads();
}

const Eigen::VectorXd& fit_beta(const models::FittedDebiasModel& m) {
  return m.is_multilevel() ? std::get<regress::MixedFit>(m.fit).beta
                           : std::get<regress::FixedFit>(m.fit).beta;
}

// One unit of cross-validation work. For LORO/LOCO the held-out unit is a set
// of regions; for LOSO it is one stratum across every region.
struct FoldSpec {
  std::string label;
  std::vector<RegionId> regions;     // held out (LORO/LOCO)
  std::optional<Stratum> stratum;    // held out (LOSO)
};

FoldResult run_fold(models::ModelFamily family, const Dataset& ds, CvScheme scheme,
                    const FoldSpec& spec, const EvalOptions& opts) {
  FoldResult fr;
  fr.held_out = spec.label;
  try {
    models::FitOptions fit_opts = opts.fit;
    Dataset train;
    if (scheme == CvScheme::LeaveOneStratumOut) {
      train = ds;
      fit_opts.exclude_stratum = spec.stratum;
    } else {
      train = ds.without_regions(spec.regions);
    }
    if (fit_opts.multilevel && train.countries().size() < 2) {
      fit_opts.multilevel = false;
      fr.warning = "fold " + spec.label + ": fixed-effects fallback (" +
                   std::to_string(train.countries().size()) + " training country)";
    }
    models::FittedDebiasModel model = models::fit(family, train, fit_opts);
    fr.beta = fit_beta(model);
    fr.dropped_zero_m = model.dropped_zero_m;
    fr.dropped_zero_n = model.dropped_zero_n;

    // LOCO scores a new country: fixed effects only. LORO/LOSO keep the
    // held-out unit's country effects (the country stays in training).
    const bool use_re = scheme != CvScheme::LeaveOneCountryOut;

    PlatformTable holdout_platform;
    if (scheme == CvScheme::LeaveOneStratumOut) {
      holdout_platform = ds.platform;
    } else {
      std::vector<RegionCounts> rows;
      for (const RegionId& r : spec.regions) rows.push_back(*ds.platform.find(r));
      holdout_platform = PlatformTable::create(std::move(rows));
    }
    models::PopulationPrediction pred =
        models::predict_population(model, holdout_platform, use_re);

    if (scheme == CvScheme::LeaveOneStratumOut) {
      std::vector<double> cell_pred, cell_true;
      for (const auto& cell : pred.cells) {
        if (!(cell.stratum->age == spec.stratum->age &&
              cell.stratum->gender == spec.stratum->gender))
          continue;
        PredRecord rec;
        rec.region = cell.region;
        rec.country = cell.country;
        rec.stratum = cell.stratum;
        rec.true_n = static_cast<double>(
            ds.census.find(cell.region)->counts[stratum_index(*cell.stratum)]);
        rec.pred_n = cell.predicted;
        rec.used_random_effects = cell.used_random_effects;
        if (rec.true_n > 0) {
          cell_pred.push_back(rec.pred_n);
          cell_true.push_back(rec.true_n);
        }
        fr.predictions.push_back(std::move(rec));
      }
      fr.mape = cell_true.empty() ? 0.0 : mape(cell_pred, cell_true);
      return fr;
    }

    // LORO/LOCO: per-cell records for the log model, one total per region
    // otherwise; fold MAPE over region totals either way.
    std::map<RegionId, std::pair<double, double>> totals;  // region -> (pred, true)
    if (family == models::ModelFamily::JointLog) {
      for (const auto& cell : pred.cells) {
        PredRecord rec;
        rec.region = cell.region;
        rec.country = cell.country;
        rec.stratum = cell.stratum;
        rec.true_n = static_cast<double>(
            ds.census.find(cell.region)->counts[stratum_index(*cell.stratum)]);
        rec.pred_n = cell.predicted;
        rec.used_random_effects = cell.used_random_effects;
        auto& t = totals[cell.region];
        t.first += rec.pred_n;
        t.second += rec.true_n;
        fr.predictions.push_back(std::move(rec));
      }
    } else {
      for (const auto& row : pred.totals) {
        PredRecord rec;
        rec.region = row.region;
        rec.country = row.country;
        rec.true_n = static_cast<double>(ds.census.find(row.region)->total);
        rec.pred_n = row.predicted;
        rec.used_random_effects = row.used_random_effects;
        totals[row.region] = {rec.pred_n, rec.true_n};
        fr.predictions.push_back(std::move(rec));
      }
    }
    std::vector<double> tp, tt;
    for (const auto& [region, t] : totals) {
      if (t.second == 0.0)
        throw EvaluateError("region " + region + " has zero true population");
      tp.push_back(t.first);
      tt.push_back(t.second);
    }
    fr.mape = mape(tp, tt);
    return fr;
  } catch (const std::exception& e) {
    // Rank deficiency, REML non-convergence, or anything else the fold's fit
    // throws: the fold is excluded and reported, the evaluation continues.
    fr.failed = true;
    fr.failure = e.what();
  }
  fr.predictions.clear();
  return fr;
}

}  // namespace

FamilyEvaluation cross_validate(models::ModelFamily family, const Dataset& ds, CvScheme scheme,
                                const EvalOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  if (scheme == CvScheme::LeaveOneStratumOut && family != models::ModelFamily::JointLog)
    throw EvaluateError("loso is only valid for joint-log (other families use strata as columns)");

  std::vector<FoldSpec> specs;
  if (scheme == CvScheme::LeaveOneRegionOut) {
    for (const auto& r : ds.census.regions()) specs.push_back({r.region, {r.region}, {}});
  } else if (scheme == CvScheme::LeaveOneCountryOut) {
    for (const auto& c : ds.countries()) {
      FoldSpec s;
      s.label = c;
      for (const auto& r : ds.census.regions())
        if (r.country == c) s.regions.push_back(r.region);
      specs.push_back(std::move(s));
    }
  } else {
    for (const Stratum& s : all_strata()) specs.push_back({to_string(s), {}, s});
  }
  if (specs.size() < 2)
    throw EvaluateError("cross-validation needs at least 2 folds, got " +
                        std::to_string(specs.size()));

  FamilyEvaluation ev;
  ev.family = family;
  ev.scheme = scheme;
  ev.folds.resize(specs.size());

  const int threads = resolve_threads(opts);
  const auto n_folds = static_cast<std::int64_t>(specs.size());
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n_folds; ++i)
      ev.folds[static_cast<std::size_t>(i)] =
          run_fold(family, ds, scheme, specs[static_cast<std::size_t>(i)], opts);
  } else {
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::int64_t i = 0; i < n_folds; ++i)
      ev.folds[static_cast<std::size_t>(i)] =
          run_fold(family, ds, scheme, specs[static_cast<std::size_t>(i)], opts);
  }

  for (const FoldResult& fr : ev.folds) {
    if (fr.failed) {
      ++ev.failed_folds;
      ev.warnings.push_back("fold " + fr.held_out + " failed: " + fr.failure);
    }
    if (!fr.warning.empty()) ev.warnings.push_back(fr.warning);
  }

  // Region totals from out-of-fold predictions. Each region's cells appear in
  // exactly one fold (LORO/LOCO) or one per stratum fold (LOSO); failed folds
  // simply contribute nothing, so a partially covered region is scored on the
  // covered strata.
  struct Acc {
    CountryId country;
    double pred = 0.0, truth = 0.0;
  };
  std::map<RegionId, Acc> acc;
  double cell_abs_sum = 0.0;
  std::int64_t cell_count = 0;
  for (const FoldResult& fr : ev.folds) {
    if (fr.failed) continue;
    for (const PredRecord& rec : fr.predictions) {
      auto& a = acc[rec.region];
      a.country = rec.country;
      a.pred += rec.pred_n;
      a.truth += rec.true_n;
      if (rec.stratum) {
        if (rec.true_n > 0) {
          cell_abs_sum += std::fabs(rec.pred_n - rec.true_n) / rec.true_n;
          ++cell_count;
        } else {
          ++ev.unscored_zero_true_cells;
        }
      }
    }
  }
  for (const auto& [region, a] : acc) {
    if (a.truth == 0.0)
      throw EvaluateError("region " + region + " has zero true population");
    RegionTerm t;
    t.region = region;
    t.country = a.country;
    t.true_n = a.truth;
    t.pred_n = a.pred;
    t.mape = 100.0 * std::fabs(a.pred - a.truth) / a.truth;
    ev.region_terms.push_back(std::move(t));
  }
  if (family == models::ModelFamily::JointLog && cell_count > 0)
    ev.cell_mape = 100.0 * cell_abs_sum / static_cast<double>(cell_count);

  if (ev.region_terms.empty()) {
    ev.mean_mape = std::numeric_limits<double>::quiet_NaN();
    ev.ci_low = ev.ci_high = ev.mean_mape;
    ev.warnings.push_back("no scored regions: every fold failed");
  } else {
    std::vector<double> errs;
    for (const auto& t : ev.region_terms) errs.push_back(t.mape);
    ev.mean_mape = std::accumulate(errs.begin(), errs.end(), 0.0) / errs.size();
    std::tie(ev.ci_low, ev.ci_high) = bootstrap_ci(errs, opts.bootstrap_B, opts.bootstrap_seed);
  }
  ev.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return ev;
}

namespace {

// Regularized incomplete beta via Lentz continued fraction; drives the
// two-sided t-approximation p-value P(|T_df| > t) = I_{df/(df+t^2)}(df/2, 1/2).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

double ibeta_reg(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                     b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

double two_sided_p(double r, std::size_t n) {
  const double df = static_cast<double>(n) - 2.0;
  const double denom = 1.0 - r * r;
  if (denom <= 0.0) return 0.0;
  const double t2 = r * r * df / denom;
  return ibeta_reg(df / 2.0, 0.5, df / (df + t2));
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

bool pearson_test(const std::vector<double>& x, const std::vector<double>& y, double& r,
                  double& p) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 3) return false;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return false;
  r = sxy / std::sqrt(sxx * syy);
  r = std::clamp(r, -1.0, 1.0);
  p = two_sided_p(r, n);
  return true;
}

bool spearman_test(const std::vector<double>& x, const std::vector<double>& y, double& rho,
                   double& p) {
  if (x.size() != y.size() || x.size() < 3) return false;
  return pearson_test(average_ranks(x), average_ranks(y), rho, p);
}

std::vector<CorrelationEntry> covariate_correlation(const std::vector<RegionTerm>& terms,
                                                    const CovariateTable& covariates) {
  struct Pull {
    const char* name;
    const std::optional<double> CovariateRow::* field;
  };
  static const Pull kPulls[] = {{"area_km2", &CovariateRow::area_km2},
                                {"density", &CovariateRow::density},
                                {"income", &CovariateRow::income}};

  std::vector<CountryId> countries;
  for (const auto& t : terms)
    if (std::find(countries.begin(), countries.end(), t.country) == countries.end())
      countries.push_back(t.country);
  std::sort(countries.begin(), countries.end());

  std::vector<CorrelationEntry> out;
  for (const Pull& pull : kPulls) {
    auto make_entry = [&](const std::string& scope, const CountryId* only) {
      CorrelationEntry e;
      e.scope = scope;
      e.covariate = pull.name;
      std::vector<double> xs, ys;
      for (const auto& t : terms) {
        if (only && t.country != *only) continue;
        const CovariateRow* row = covariates.find(t.region);
        if (!row || !(row->*(pull.field))) continue;
        xs.push_back(t.mape);
        ys.push_back(*(row->*(pull.field)));
      }
      e.n = static_cast<int>(xs.size());
      const bool pe = pearson_test(xs, ys, e.pearson, e.pearson_p);
      const bool se = spearman_test(xs, ys, e.spearman, e.spearman_p);
      e.insufficient = !(pe && se);
      if (e.insufficient) e.pearson = e.pearson_p = e.spearman = e.spearman_p = 0.0;
      return e;
    };
    out.push_back(make_entry("overall", nullptr));
    for (const CountryId& c : countries) out.push_back(make_entry(c, &c));
  }
  return out;
}

namespace {

ordered_json jnum(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

void write_report_json(std::ostream& out, const std::vector<FamilyEvaluation>& evals,
                       const std::vector<CorrelationEntry>& correlations, int bootstrap_B,
                       std::uint64_t bootstrap_seed) {
  ordered_json j;
  j["format"] = "debias-report/1";
  j["scheme"] = evals.empty() ? "" : to_string(evals.front().scheme);
  j["bootstrap"] = {{"B", bootstrap_B}, {"seed", bootstrap_seed}};
  ordered_json families = ordered_json::array();
  for (const FamilyEvaluation& ev : evals) {
    ordered_json je;
    je["family"] = to_string(ev.family);
    je["mean_mape"] = jnum(ev.mean_mape);
    je["ci_low"] = jnum(ev.ci_low);
    je["ci_high"] = jnum(ev.ci_high);
    je["cell_mape"] = ev.cell_mape ? ordered_json(*ev.cell_mape) : ordered_json(nullptr);
    je["failed_folds"] = ev.failed_folds;
    int dm = 0, dn = 0;
    for (const auto& f : ev.folds) {
      dm += f.dropped_zero_m;
      dn += f.dropped_zero_n;
    }
    je["dropped"] = {{"zero_m_training_rows", dm},
                     {"zero_n_training_rows", dn},
                     {"unscored_zero_true_cells", ev.unscored_zero_true_cells}};
    je["warnings"] = ev.warnings;
    ordered_json terms = ordered_json::array();
    for (const RegionTerm& t : ev.region_terms)
      terms.push_back({{"region", t.region},
                       {"country", t.country},
                       {"true_n", t.true_n},
                       {"pred_n", t.pred_n},
                       {"mape", t.mape}});
    je["region_mape"] = std::move(terms);
    ordered_json folds = ordered_json::array();
    for (const FoldResult& f : ev.folds) {
      ordered_json jf;
      jf["held_out"] = f.held_out;
      jf["failed"] = f.failed;
      if (f.failed) jf["failure"] = f.failure;
      jf["mape"] = jnum(f.mape);
      ordered_json preds = ordered_json::array();
      for (const PredRecord& r : f.predictions)
        preds.push_back({{"region", r.region},
                         {"country", r.country},
                         {"stratum", r.stratum ? ordered_json(to_string(*r.stratum))
                                               : ordered_json(nullptr)},
                         {"true_n", r.true_n},
                         {"pred_n", r.pred_n},
                         {"used_random_effects", r.used_random_effects}});
      jf["predictions"] = std::move(preds);
      folds.push_back(std::move(jf));
    }
    je["folds"] = std::move(folds);
    families.push_back(std::move(je));
  }
  j["families"] = std::move(families);
  ordered_json corr = ordered_json::array();
  for (const CorrelationEntry& e : correlations) {
    ordered_json jc;
    jc["scope"] = e.scope;
    jc["covariate"] = e.covariate;
    jc["n"] = e.n;
    jc["insufficient"] = e.insufficient;
    if (!e.insufficient) {
      jc["pearson"] = e.pearson;
      jc["pearson_p"] = e.pearson_p;
      jc["spearman"] = e.spearman;
      jc["spearman_p"] = e.spearman_p;
    }
    corr.push_back(std::move(jc));
  }
  j["correlations"] = std::move(corr);
  out << j.dump(2) << "\n";
}

void write_scatter_csv(std::ostream& out, const std::vector<FamilyEvaluation>& evals) {
  csv::write_row(out, {"region", "country", "true_n", "pred_n", "family"});
  for (const FamilyEvaluation& ev : evals)
    for (const RegionTerm& t : ev.region_terms)
      csv::write_row(out, {t.region, t.country, format_double(t.true_n),
                           format_double(t.pred_n), to_string(ev.family)});
}

void write_region_mape_csv(std::ostream& out, const FamilyEvaluation& headline) {
  csv::write_row(out, {"region", "country", "mape"});
  for (const RegionTerm& t : headline.region_terms)
    csv::write_row(out, {t.region, t.country, format_double(t.mape)});
}

void write_correlations_csv(std::ostream& out, const std::vector<CorrelationEntry>& correlations) {
  csv::write_row(out, {"scope", "covariate", "n", "insufficient", "pearson", "pearson_p",
                       "spearman", "spearman_p"});
  for (const CorrelationEntry& e : correlations) {
    if (e.insufficient) {
      csv::write_row(out, {e.scope, e.covariate, std::to_string(e.n), "1", "", "", "", ""});
    } else {
      csv::write_row(out, {e.scope, e.covariate, std::to_string(e.n), "0",
                           format_double(e.pearson), format_double(e.pearson_p),
                           format_double(e.spearman), format_double(e.spearman_p)});
    }
  }
}

}  // namespace debias::evaluate
