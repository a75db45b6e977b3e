#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "debias/csv.hpp"
#include "debias/evaluate.hpp"
#include "debias/ingest.hpp"
#include "debias/models.hpp"
#include "debias/simulate.hpp"
#include "debias/util.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace debias;

namespace {

constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 runtime/solver failure, 2 usage/validation failure.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hash_file(const std::string& path) { return hex64(fnv1a(read_file_bytes(path))); }

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

// One manifest per output directory: command, resolved options, input content
// hashes, seed, version, duration. Outputs are reproducible bit-exactly from
// it (duration aside).
struct ManifestBuilder {
  ordered_json j;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  explicit ManifestBuilder(const std::string& command) {
    j["format"] = "debias-manifest/1";
    j["command"] = command;
    j["version"] = kVersion;
    j["options"] = ordered_json::object();
    j["inputs"] = ordered_json::object();
    j["seed"] = nullptr;
  }
  void input(const std::string& path) { j["inputs"][path] = hash_file(path); }
  void write(const fs::path& dir) {
    j["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_file(dir / "manifest.json", j.dump(2) + "\n");
  }
};

fs::path ensure_out_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

struct DataArgs {
  std::string census;
  std::string platform;
  std::string users;
  std::optional<double> org_threshold;
  double min_conf_age = 0.0;
  double min_conf_gender = 0.0;
};

void add_data_flags(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--census", a.census, "census CSV (country,region,age_bucket,gender,population)")
      ->required();
  cmd->add_option("--platform", a.platform, "aggregated platform counts CSV");
  cmd->add_option("--users", a.users, "per-account platform CSV, binned during ingestion");
  cmd->add_option("--org-threshold", a.org_threshold,
                  "exclude accounts with p_org >= threshold (requires --users)");
  cmd->add_option("--min-conf-age", a.min_conf_age, "exclude accounts below this age confidence");
  cmd->add_option("--min-conf-gender", a.min_conf_gender,
                  "exclude accounts below this gender confidence");
}

Dataset load_dataset(const DataArgs& a, ManifestBuilder& mf) {
  if (a.platform.empty() == a.users.empty())
    throw UsageError("exactly one of --platform or --users is required");
  if ((a.org_threshold || a.min_conf_age > 0 || a.min_conf_gender > 0) && a.users.empty())
    throw UsageError("--org-threshold/--min-conf-* require --users");
  mf.input(a.census);
  CensusTable census = ingest::parse_census_file(a.census);
  PlatformTable platform;
  if (!a.platform.empty()) {
    mf.input(a.platform);
    platform = ingest::parse_platform_file(a.platform);
  } else {
    mf.input(a.users);
    ingest::AggregationOptions opts;
    opts.org_threshold = a.org_threshold;
    opts.min_conf_age = a.min_conf_age;
    opts.min_conf_gender = a.min_conf_gender;
    auto [table, diag] =
        ingest::aggregate_user_records(ingest::parse_users_file(a.users),
                                       census.region_country_map(), opts);
    platform = std::move(table);
    std::fprintf(stderr,
                 "aggregated %lld accounts: retained %lld, org %lld, low-confidence %lld, "
                 "unresolvable region %lld\n",
                 static_cast<long long>(diag.retained + diag.org_excluded +
                                        diag.confidence_excluded + diag.unresolvable_region),
                 static_cast<long long>(diag.retained), static_cast<long long>(diag.org_excluded),
                 static_cast<long long>(diag.confidence_excluded),
                 static_cast<long long>(diag.unresolvable_region));
  }
  Dataset ds = ingest::align(census, platform);
  if (!ds.dropped_census_regions.empty() || !ds.dropped_platform_regions.empty())
    std::fprintf(stderr, "align: dropped %zu census-only and %zu platform-only regions\n",
                 ds.dropped_census_regions.size(), ds.dropped_platform_regions.size());
  return ds;
}

void record_data_options(ManifestBuilder& mf, const DataArgs& a) {
  mf.j["options"]["census"] = a.census;
  if (!a.platform.empty()) mf.j["options"]["platform"] = a.platform;
  if (!a.users.empty()) {
    mf.j["options"]["users"] = a.users;
    mf.j["options"]["org_threshold"] =
        a.org_threshold ? ordered_json(*a.org_threshold) : ordered_json(nullptr);
    mf.j["options"]["min_conf_age"] = a.min_conf_age;
    mf.j["options"]["min_conf_gender"] = a.min_conf_gender;
  }
}

std::string pi_label(const PiEntry& e) {
  const std::string age = e.age ? to_string(*e.age) : "*";
  const std::string gender = e.gender ? to_string(*e.gender) : "*";
  return age + "/" + gender;
}

void print_fit_summary(const models::FittedDebiasModel& model, const Dataset& ds) {
  std::printf("family: %s  (%s, solver=%s, zero-policy=%s)\n",
              models::to_string(model.family).c_str(),
              model.options.multilevel ? "multilevel" : "fixed effects",
              models::to_string(model.options.solver).c_str(),
              models::to_string(model.options.zero_policy).c_str());
  std::printf("regions: %zu in %zu countries; dropped training rows: zero-platform=%d "
              "zero-census=%d\n",
              ds.num_regions(), ds.countries().size(), model.dropped_zero_m,
              model.dropped_zero_n);
  if (model.is_multilevel()) {
    const auto& mx = std::get<regress::MixedFit>(model.fit);
    std::printf("reml: %s in %d iterations (|grad|=%.2e, loglik=%.4f)\n",
                mx.converged ? "converged" : "not converged", mx.iterations, mx.grad_norm,
                mx.reml_loglik);
  }
  if (model.family == models::ModelFamily::JointLog) {
    const PiFactors& f = model.pi.factors.at("");
    std::printf("nu_hat: %.6f\n", f.nu);
    std::printf("f1(age): ");
    for (int a = 0; a < kNumAgeBuckets; ++a)
      std::printf("%s=%.4g ", to_string(AgeBucket(a)).c_str(), f.f1[a]);
    std::printf("\nf2(gender): ");
    for (int g = 0; g < kNumGenders; ++g)
      std::printf("%s=%.4g ", to_string(Gender(g)).c_str(), f.f2[g]);
    std::printf("\n");
    int region_entries = 0, flagged = 0;
    for (const auto& e : model.pi.entries)
      if (e.scope == PiScope::PerRegion) {
        ++region_entries;
        if (!e.valid) ++flagged;
      }
    std::printf("per-region pi_hat entries: %d (%d flagged outside (0,1])\n", region_entries,
                flagged);
  } else {
    std::printf("global pi_hat:\n");
    for (const auto& e : model.pi.entries) {
      if (e.scope != PiScope::Global) continue;
      std::printf("  %-12s %.6f%s\n", pi_label(e).c_str(), e.pi,
                  e.valid ? "" : "  ** outside (0,1]");
    }
    if (model.is_multilevel()) {
      int country_entries = 0, flagged = 0;
      for (const auto& e : model.pi.entries)
        if (e.scope == PiScope::PerCountry) {
          ++country_entries;
          if (!e.valid) ++flagged;
        }
      std::printf("per-country pi_hat entries: %d (%d flagged outside (0,1])\n", country_entries,
                  flagged);
    }
  }
  if (model.any_pi_out_of_range)
    std::printf("WARNING: some pi_hat values fall outside (0,1]; stored unclamped and flagged\n");
}

int cmd_simulate(const std::string& config_path, const std::string& out) {
  ManifestBuilder mf("simulate");
  simulate::SimulationConfig cfg;
  simulate::SimulationOutput sim;
  try {
    cfg = simulate::parse_config_file(config_path);
    sim = simulate::generate(cfg);
  } catch (const simulate::SimulationError& e) {
    std::fprintf(stderr, "debias simulate: %s\n", e.what());
    return 2;
  }
  const fs::path dir = ensure_out_dir(out);
  mf.input(config_path);
  mf.j["options"]["config"] = config_path;
  mf.j["options"]["out"] = out;
  mf.j["seed"] = cfg.seed;

  std::ostringstream census, platform, truth, covariates;
  ingest::write_census(census, sim.census);
  ingest::write_platform(platform, sim.platform);
  simulate::write_truth_pi(truth, sim.truth);
  ingest::write_covariates(covariates, sim.covariates);
  write_file(dir / "census.csv", census.str());
  write_file(dir / "platform.csv", platform.str());
  write_file(dir / "truth_pi.csv", truth.str());
  write_file(dir / "covariates.csv", covariates.str());
  if (cfg.emit_users) {
    std::ostringstream users;
    ingest::write_users(users, sim.users);
    write_file(dir / "users.csv", users.str());
  }
  mf.write(dir);
  std::printf("simulated %zu regions in %d countr%s -> %s\n", sim.census.regions().size(),
              cfg.countries, cfg.countries == 1 ? "y" : "ies", out.c_str());
  return 0;
}

struct FitArgs {
  DataArgs data;
  std::string family = "joint";
  bool multilevel = false;
  std::string zero_policy = "drop";
  std::string solver = "ols";
  bool intercept = false;
  std::string out;
};

int cmd_fit(const FitArgs& a) {
  models::ModelFamily family;
  models::FitOptions opts;
  try {
    family = models::parse_family(a.family);
    opts.zero_policy = models::parse_zero_policy(a.zero_policy);
    opts.solver = models::parse_solver(a.solver);
  } catch (const models::ModelError& e) {
    throw UsageError(e.what());
  }
  opts.multilevel = a.multilevel;
  opts.intercept_override = a.intercept;
  if (opts.multilevel && opts.solver == models::SolverKind::Nnls)
    throw UsageError("nnls is not available for multilevel fits");

  ManifestBuilder mf("fit");
  Dataset ds = load_dataset(a.data, mf);
  models::FittedDebiasModel model = models::fit(family, ds, opts);

  const fs::path dir = ensure_out_dir(a.out);
  std::ostringstream body;
  models::write_model(body, model);
  write_file(dir / "model.json", body.str());
  record_data_options(mf, a.data);
  mf.j["options"]["family"] = a.family;
  mf.j["options"]["multilevel"] = a.multilevel;
  mf.j["options"]["zero_policy"] = a.zero_policy;
  mf.j["options"]["solver"] = a.solver;
  mf.j["options"]["intercept"] = a.intercept;
  mf.j["options"]["out"] = a.out;
  mf.write(dir);
  print_fit_summary(model, ds);
  std::printf("model written to %s\n", (dir / "model.json").string().c_str());
  return 0;
}

struct PredictArgs {
  std::string model;
  std::string platform;
  std::string out;
  bool no_random_effects = false;
};

int cmd_predict(const PredictArgs& a) {
  ManifestBuilder mf("predict");
  mf.input(a.model);
  mf.input(a.platform);
  models::FittedDebiasModel model = models::read_model_file(a.model);
  PlatformTable platform = ingest::parse_platform_file(a.platform);
  models::PopulationPrediction pred =
      models::predict_population(model, platform, !a.no_random_effects);

  const fs::path dir = ensure_out_dir(a.out);
  std::ostringstream body;
  csv::write_row(body, {"region", "country", "stratum_or_total", "pred_n",
                        "used_random_effects"});
  // Cell rows (log model only) precede each region's total row; cells and
  // totals are interleaved per region to keep the file grep-friendly.
  std::size_t cell_idx = 0;
  for (const auto& total : pred.totals) {
    for (; cell_idx < pred.cells.size() && pred.cells[cell_idx].region == total.region;
         ++cell_idx) {
      const auto& c = pred.cells[cell_idx];
      csv::write_row(body, {c.region, c.country, to_string(*c.stratum),
                            format_double(c.predicted), c.used_random_effects ? "1" : "0"});
    }
    csv::write_row(body, {total.region, total.country, "total", format_double(total.predicted),
                          total.used_random_effects ? "1" : "0"});
  }
  write_file(dir / "predictions.csv", body.str());
  mf.j["options"]["model"] = a.model;
  mf.j["options"]["platform"] = a.platform;
  mf.j["options"]["no_random_effects"] = a.no_random_effects;
  mf.j["options"]["out"] = a.out;
  mf.write(dir);
  std::printf("wrote predictions for %zu regions to %s\n", pred.totals.size(),
              (dir / "predictions.csv").string().c_str());
  return 0;
}

struct EvaluateArgs {
  DataArgs data;
  std::vector<std::string> families;
  std::string cv = "loro";
  std::string covariates;
  int bootstrap = 1000;
  std::uint64_t seed = 0;
  bool multilevel = false;
  std::string zero_policy = "drop";
  std::string solver = "ols";
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a) {
  evaluate::CvScheme scheme;
  std::vector<models::ModelFamily> families;
  models::FitOptions fit_opts;
  try {
    scheme = evaluate::parse_scheme(a.cv);
    for (const auto& tok : a.families) families.push_back(models::parse_family(tok));
    fit_opts.zero_policy = models::parse_zero_policy(a.zero_policy);
    fit_opts.solver = models::parse_solver(a.solver);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (families.empty()) throw UsageError("--families requires at least one family");
  for (std::size_t i = 0; i < families.size(); ++i)
    for (std::size_t k = i + 1; k < families.size(); ++k)
      if (families[i] == families[k])
        throw UsageError("duplicate family " + models::to_string(families[i]));
  if (scheme == evaluate::CvScheme::LeaveOneStratumOut)
    for (auto f : families)
      if (f != models::ModelFamily::JointLog)
        throw UsageError("loso is only valid for joint-log, got " + models::to_string(f));
  if (a.bootstrap < 100) throw UsageError("--bootstrap must be >= 100");
  fit_opts.multilevel = a.multilevel;

  ManifestBuilder mf("evaluate");
  Dataset ds = load_dataset(a.data, mf);
  CovariateTable covariates;
  if (!a.covariates.empty()) {
    mf.input(a.covariates);
    covariates = ingest::parse_covariates_file(a.covariates);
  }

  evaluate::EvalOptions opts;
  opts.fit = fit_opts;
  opts.bootstrap_B = a.bootstrap;
  opts.bootstrap_seed = a.seed;
  std::vector<evaluate::FamilyEvaluation> evals;
  for (auto f : families) evals.push_back(evaluate::cross_validate(f, ds, scheme, opts));

  // Headline family: lowest mean MAPE (ties and NaNs lose).
  std::size_t best = 0;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    const double a_ = evals[i].mean_mape, b_ = evals[best].mean_mape;
    if (std::isfinite(a_) && (!std::isfinite(b_) || a_ < b_)) best = i;
  }
  std::vector<evaluate::CorrelationEntry> correlations;
  if (!a.covariates.empty())
    correlations = evaluate::covariate_correlation(evals[best].region_terms, covariates);

  const fs::path dir = ensure_out_dir(a.out);
  std::ostringstream report, scatter, region_mape;
  evaluate::write_report_json(report, evals, correlations, a.bootstrap, a.seed);
  evaluate::write_scatter_csv(scatter, evals);
  evaluate::write_region_mape_csv(region_mape, evals[best]);
  write_file(dir / "report.json", report.str());
  write_file(dir / "scatter.csv", scatter.str());
  write_file(dir / "region_mape.csv", region_mape.str());
  if (!a.covariates.empty()) {
    std::ostringstream corr;
    evaluate::write_correlations_csv(corr, correlations);
    write_file(dir / "correlations.csv", corr.str());
  }
  record_data_options(mf, a.data);
  mf.j["options"]["families"] = a.families;
  mf.j["options"]["cv"] = a.cv;
  if (!a.covariates.empty()) mf.j["options"]["covariates"] = a.covariates;
  mf.j["options"]["bootstrap"] = a.bootstrap;
  mf.j["options"]["multilevel"] = a.multilevel;
  mf.j["options"]["zero_policy"] = a.zero_policy;
  mf.j["options"]["solver"] = a.solver;
  mf.j["options"]["out"] = a.out;
  mf.j["seed"] = a.seed;
  mf.write(dir);

  std::printf("%-10s %6s  %10s  %-22s %10s  %s\n", "family", "scheme", "mean MAPE", "95% CI",
              "cell MAPE", "failed folds");
  for (const auto& ev : evals) {
    char ci[64];
    std::snprintf(ci, sizeof ci, "[%.3f, %.3f]", ev.ci_low, ev.ci_high);
    char cell[32];
    if (ev.cell_mape)
      std::snprintf(cell, sizeof cell, "%9.3f%%", *ev.cell_mape);
    else
      std::snprintf(cell, sizeof cell, "%10s", "-");
    std::printf("%-10s %6s  %9.3f%%  %-22s %s  %d\n", models::to_string(ev.family).c_str(),
                evaluate::to_string(ev.scheme).c_str(), ev.mean_mape, ci, cell, ev.failed_folds);
    for (const auto& w : ev.warnings) std::printf("  warning: %s\n", w.c_str());
  }
  std::printf("report written to %s\n", (dir / "report.json").string().c_str());
  return 0;
}

int cmd_inspect(const std::string& model_path) {
  models::FittedDebiasModel model = models::read_model_file(model_path);
  std::ostringstream body;
  models::write_model(body, model);
  std::fputs(body.str().c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"debias: estimate per-demographic platform inclusion probabilities from biased "
               "stratum counts and census histograms"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string sim_config, sim_out;
  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic census/platform pair");
  sim->add_option("--config", sim_config, "flat key=value config file")->required();
  sim->add_option("--out", sim_out, "output directory")->required();

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "fit one debiasing model family");
  add_data_flags(fit, fit_args.data);
  fit->add_option("--family", fit_args.family, "baseline|gender|age|joint|joint-log");
  fit->add_flag("--multilevel", fit_args.multilevel, "per-country random effects (REML)");
  fit->add_option("--zero-policy", fit_args.zero_policy,
                  "drop|add-one handling of zero platform cells (joint-log)");
  fit->add_option("--solver", fit_args.solver, "ols|nnls");
  fit->add_flag("--intercept", fit_args.intercept,
                "add an intercept column to homogeneous families");
  fit->add_option("--out", fit_args.out, "output directory")->required();

  PredictArgs pred_args;
  CLI::App* pred = app.add_subcommand("predict", "predict populations from a fitted model");
  pred->add_option("--model", pred_args.model, "model JSON from fit")->required();
  pred->add_option("--platform", pred_args.platform, "aggregated platform counts CSV")
      ->required();
  pred->add_flag("--no-random-effects", pred_args.no_random_effects,
                 "ignore country effects even when available");
  pred->add_option("--out", pred_args.out, "output directory")->required();

  EvaluateArgs eval_args;
  CLI::App* eval = app.add_subcommand("evaluate", "cross-validate model families");
  add_data_flags(eval, eval_args.data);
  eval->add_option("--families", eval_args.families, "comma-separated family list")
      ->required()
      ->delimiter(',');
  eval->add_option("--cv", eval_args.cv, "loro|loco|loso");
  eval->add_option("--covariates", eval_args.covariates,
                   "region covariates CSV for MAPE correlations");
  eval->add_option("--bootstrap", eval_args.bootstrap, "bootstrap replicates (>= 100)");
  eval->add_option("--seed", eval_args.seed, "bootstrap seed");
  eval->add_flag("--multilevel", eval_args.multilevel, "per-country random effects (REML)");
  eval->add_option("--zero-policy", eval_args.zero_policy, "drop|add-one (joint-log)");
  eval->add_option("--solver", eval_args.solver, "ols|nnls");
  eval->add_option("--out", eval_args.out, "output directory")->required();

  std::string inspect_model;
  CLI::App* ins = app.add_subcommand("inspect", "pretty-print a model JSON");
  ins->add_option("model", inspect_model, "model JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_config, sim_out);
    if (fit->parsed()) return cmd_fit(fit_args);
    if (pred->parsed()) return cmd_predict(pred_args);
    if (eval->parsed()) return cmd_evaluate(eval_args);
    if (ins->parsed()) return cmd_inspect(inspect_model);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "debias: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "debias: %s\n", e.what());
    return 1;
  }
  return 0;
}
