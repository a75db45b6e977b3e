#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "debias/ingest.hpp"

// End-to-end checks against the installed binary (path injected at build
// time). Each case works in its own temp directory tree.

namespace fs = std::filesystem;

namespace {

const std::string kBin = DEBIAS_BIN;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("debias_cli_" + std::to_string(std::rand()) + "_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const std::string& p) const { return path / p; }
};

int run(const std::string& args) {
  const std::string cmd = kBin + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

// Homogeneous world with gentle noise; small enough for fast CLI runs.
const char* kSimConfig =
    "seed = 71\n"
    "countries = 2\n"
    "regions_per_country = 8\n"
    "region_size_median = 120000\n"
    "pi = 0.12\n"
    "country_multipliers = 0.9, 1.1\n";

const char* kLogConfig =
    "seed = 72\n"
    "countries = 1\n"
    "regions_per_country = 12\n"
    "region_size_median = 200000\n"
    "noise = expected\n"
    "inclusion = inhomogeneous\n"
    "nu = 0.2\n"
    "pi_scale = 0.02\n"
    "f1 = 1.0, 1.3, 1.6, 0.8\n"
    "f2 = 1.0, 0.7\n";

}  // namespace

TEST_CASE("simulate emits byte-identical outputs for a fixed config") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  for (const char* sub : {"a", "b"}) {
    fs::create_directories(td / sub);
    REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " +
                (td / sub).string()) == 0);
  }
  for (const char* f : {"census.csv", "platform.csv", "truth_pi.csv", "covariates.csv"})
    CHECK(slurp(td / "a" / f) == slurp(td / "b" / f));

  // outputs re-ingest cleanly
  auto census = debias::ingest::parse_census_file((td / "a" / "census.csv").string());
  auto platform = debias::ingest::parse_platform_file((td / "a" / "platform.csv").string());
  CHECK(census.regions().size() == 16);
  CHECK(platform.regions().size() == 16);

  // the manifest records the command and input hash
  auto manifest = nlohmann::json::parse(slurp(td / "a" / "manifest.json"));
  CHECK(manifest["format"] == "debias-manifest/1");
  CHECK(manifest["command"] == "simulate");
  CHECK(manifest.contains("duration_seconds"));
}

TEST_CASE("simulate rejects malformed configs with a usage exit") {
  TempDir td;
  spit(td / "bad.cfg", "regions_per_country = -3\n");
  CHECK(run("simulate --config " + (td / "bad.cfg").string() + " --out " + td.path.string()) ==
        2);
  spit(td / "unknown.cfg", "not_a_key = 1\n");
  CHECK(run("simulate --config " + (td / "unknown.cfg").string() + " --out " +
            td.path.string()) == 2);
  CHECK(run("simulate --config " + (td / "missing.cfg").string() + " --out " +
            td.path.string()) == 2);
}

TEST_CASE("fit writes a model and validates its options") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  const std::string data = " --census " + (td / "census.csv").string() + " --platform " +
                           (td / "platform.csv").string();
  fs::create_directories(td / "fit");
  REQUIRE(run("fit" + data + " --family joint --multilevel --out " + (td / "fit").string()) == 0);
  auto model = nlohmann::json::parse(slurp(td / "fit" / "model.json"));
  CHECK(model["format"] == "debias-model/1");
  CHECK(model["family"] == "joint");
  CHECK(model["options"]["multilevel"] == true);
  CHECK(model["fit_kind"] == "mixed");
  CHECK(fs::exists(td / "fit" / "manifest.json"));

  CHECK(run("fit" + data + " --family cubic --out " + (td / "fit").string()) == 2);
  CHECK(run("fit" + data + " --family joint --solver nnls --multilevel --out " +
            (td / "fit").string()) == 2);
  CHECK(run("fit --census " + (td / "census.csv").string() + " --family joint --out " +
            (td / "fit").string()) == 2);  // no platform or users source
}

TEST_CASE("predictions sum per-cell rows into totals and track unseen countries") {
  TempDir td;
  spit(td / "sim.cfg", kLogConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  fs::create_directories(td / "fit");
  REQUIRE(run("fit --census " + (td / "census.csv").string() + " --platform " +
              (td / "platform.csv").string() + " --family joint-log --out " +
              (td / "fit").string()) == 0);
  fs::create_directories(td / "pred");
  REQUIRE(run("predict --model " + (td / "fit" / "model.json").string() + " --platform " +
              (td / "platform.csv").string() + " --out " + (td / "pred").string()) == 0);

  std::istringstream in(slurp(td / "pred" / "predictions.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "region,country,stratum_or_total,pred_n,used_random_effects");
  auto census = debias::ingest::parse_census_file((td / "census.csv").string());
  double cell_sum = 0.0;
  int totals_seen = 0;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string region, country, stratum, pred, re;
    std::getline(fields, region, ',');
    std::getline(fields, country, ',');
    std::getline(fields, stratum, ',');
    std::getline(fields, pred, ',');
    std::getline(fields, re, ',');
    if (stratum == "total") {
      ++totals_seen;
      CHECK(std::stod(pred) == doctest::Approx(cell_sum).epsilon(1e-9));
      // noiseless single-country world: totals land on the census
      CHECK(std::stod(pred) ==
            doctest::Approx(double(census.find(region)->total)).epsilon(1e-3));
      cell_sum = 0.0;
    } else {
      cell_sum += std::stod(pred);
    }
  }
  CHECK(totals_seen == 12);
}

TEST_CASE("random effects drop out for countries the model never saw") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  fs::create_directories(td / "fit");
  REQUIRE(run("fit --census " + (td / "census.csv").string() + " --platform " +
              (td / "platform.csv").string() + " --family joint --multilevel --out " +
              (td / "fit").string()) == 0);

  // rename every region into countries the training set lacks
  auto platform = slurp(td / "platform.csv");
  std::string renamed;
  for (std::size_t i = 0; i < platform.size(); ++i) {
    if (platform.compare(i, 3, "C00") == 0) {
      renamed += "C08";
      i += 2;
    } else if (platform.compare(i, 3, "C01") == 0) {
      renamed += "C09";
      i += 2;
    } else {
      renamed += platform[i];
    }
  }
  spit(td / "platform_other.csv", renamed);
  fs::create_directories(td / "pred");
  REQUIRE(run("predict --model " + (td / "fit" / "model.json").string() + " --platform " +
              (td / "platform_other.csv").string() + " --out " + (td / "pred").string()) == 0);
  std::istringstream in(slurp(td / "pred" / "predictions.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    CHECK(line.back() == '0');  // used_random_effects column
    const bool unseen_country =
        line.find("C08") != std::string::npos || line.find("C09") != std::string::npos;
    CHECK(unseen_country);
  }

  // the same platform under the training names does use them
  fs::create_directories(td / "pred2");
  REQUIRE(run("predict --model " + (td / "fit" / "model.json").string() + " --platform " +
              (td / "platform.csv").string() + " --out " + (td / "pred2").string()) == 0);
  std::istringstream in2(slurp(td / "pred2" / "predictions.csv"));
  std::getline(in2, line);
  while (std::getline(in2, line)) CHECK(line.back() == '1');

  // and can be disabled explicitly
  fs::create_directories(td / "pred3");
  REQUIRE(run("predict --model " + (td / "fit" / "model.json").string() + " --platform " +
              (td / "platform.csv").string() + " --no-random-effects --out " +
              (td / "pred3").string()) == 0);
  std::istringstream in3(slurp(td / "pred3" / "predictions.csv"));
  std::getline(in3, line);
  while (std::getline(in3, line)) CHECK(line.back() == '0');
}

TEST_CASE("evaluate compares families reproducibly") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  const std::string data = " --census " + (td / "census.csv").string() + " --platform " +
                           (td / "platform.csv").string();
  for (const char* sub : {"e1", "e2"}) {
    fs::create_directories(td / sub);
    REQUIRE(run("evaluate" + data +
                " --families baseline,joint --cv loro --bootstrap 200 --seed 11"
                " --covariates " +
                (td / "covariates.csv").string() + " --out " + (td / sub).string()) == 0);
  }
  for (const char* f : {"report.json", "scatter.csv", "region_mape.csv", "correlations.csv"})
    CHECK(slurp(td / "e1" / f) == slurp(td / "e2" / f));

  auto report = nlohmann::json::parse(slurp(td / "e1" / "report.json"));
  REQUIRE(report["families"].size() == 2);
  CHECK(report["families"][0]["family"] == "baseline");
  CHECK(report["families"][1]["family"] == "joint");
  CHECK(report["bootstrap"]["B"] == 200);
  CHECK(report["bootstrap"]["seed"] == 11);
  // region_mape.csv carries the headline family: the lowest mean MAPE in the report
  const double headline_mean =
      std::min(report["families"][0]["mean_mape"].get<double>(),
               report["families"][1]["mean_mape"].get<double>());
  std::istringstream rm(slurp(td / "e1" / "region_mape.csv"));
  std::string line;
  std::getline(rm, line);
  CHECK(line == "region,country,mape");
  double sum = 0.0;
  int n = 0;
  while (std::getline(rm, line)) {
    sum += std::stod(line.substr(line.rfind(',') + 1));
    ++n;
  }
  REQUIRE(n == 16);
  CHECK(sum / n == doctest::Approx(headline_mean).epsilon(1e-9));
}

TEST_CASE("evaluate rejects invalid family and scheme combinations") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  const std::string data = " --census " + (td / "census.csv").string() + " --platform " +
                           (td / "platform.csv").string() + " --out " + td.path.string();
  CHECK(run("evaluate" + data + " --families baseline --cv loso") == 2);
  CHECK(run("evaluate" + data + " --families baseline,baseline --cv loro") == 2);
  CHECK(run("evaluate" + data + " --families baseline --cv k-fold") == 2);
  CHECK(run("evaluate" + data + " --families baseline --bootstrap 50") == 2);
}

TEST_CASE("inspect round-trips the model document") {
  TempDir td;
  spit(td / "sim.cfg", kSimConfig);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  fs::create_directories(td / "fit");
  REQUIRE(run("fit --census " + (td / "census.csv").string() + " --platform " +
              (td / "platform.csv").string() + " --family gender --out " + (td / "fit").string()) ==
          0);
  const std::string out = (td / "inspect.json").string();
  const std::string cmd = kBin + " inspect " + (td / "fit" / "model.json").string() + " > " + out +
                          " 2>/dev/null";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  auto echoed = nlohmann::json::parse(slurp(out));
  auto original = nlohmann::json::parse(slurp(td / "fit" / "model.json"));
  CHECK(echoed == original);

  CHECK(run("inspect " + (td / "nope.json").string()) == 1);
}

TEST_CASE("per-account ingestion matches pre-aggregated counts end to end") {
  TempDir td;
  std::string cfg = std::string(kSimConfig) +
                    "org_rate = 0.1\norg_concentration = 1.0\nemit_users = true\n";
  spit(td / "sim.cfg", cfg);
  REQUIRE(run("simulate --config " + (td / "sim.cfg").string() + " --out " + td.path.string()) ==
          0);
  REQUIRE(fs::exists(td / "users.csv"));

  // without an org threshold every account is kept, reproducing platform.csv
  fs::create_directories(td / "all");
  REQUIRE(run("fit --census " + (td / "census.csv").string() + " --users " +
              (td / "users.csv").string() + " --family joint --out " +
              (td / "all").string()) == 0);
  fs::create_directories(td / "agg");
  REQUIRE(run("fit --census " + (td / "census.csv").string() + " --platform " +
              (td / "platform.csv").string() + " --family joint --out " + (td / "agg").string()) ==
          0);
  auto a = nlohmann::json::parse(slurp(td / "all" / "model.json"));
  auto b = nlohmann::json::parse(slurp(td / "agg" / "model.json"));
  CHECK(a["dataset_hash"] == b["dataset_hash"]);
  CHECK(a["fit"]["beta"] == b["fit"]["beta"]);

  // both sources at once is a usage error
  CHECK(run("fit --census " + (td / "census.csv").string() + " --users " +
            (td / "users.csv").string() + " --platform " + (td / "platform.csv").string() +
            " --family joint --out " + (td / "all").string()) == 2);
}
