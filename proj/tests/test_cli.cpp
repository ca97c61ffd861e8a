#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "echolab/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "echolab");
  return echolab::cli::run(args);
}

std::string cfg_path(const std::string& name) {
  return std::string(ECHOLAB_CONFIG_DIR) + "/" + name;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("echolab-cli-" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return sub.empty() ? path.string() : (path / sub).string();
  }
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return json::parse(in);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const std::string& text) {
  int n = 0;
  for (const char c : text)
    if (c == '\n') ++n;
  return n;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace

TEST_CASE("cli: shipped esp config holds and emits a full report") {
  TempDir tmp("esp");
  CHECK(run_cli({"esp", "--config", cfg_path("esp_linear.json"), "--out",
                 tmp.str()}) == 0);
  const json rep = read_json(tmp.str("report.json"));
  CHECK(rep["subcommand"] == "esp");
  CHECK(rep["tool_version"].is_string());
  CHECK(rep["result"]["holds"] == true);
  CHECK(rep["result"]["diverged"] == 0);
  CHECK(rep["result"]["final_diameter"].get<double>() < 1e-10);
  // resolved config echoes defaults alongside given fields
  CHECK(rep["config"]["solver"]["horizon"] == 80);
  CHECK(rep["config"]["solver"].contains("keep_len"));
  CHECK(rep["config"]["solver"].contains("metric_rate"));
  CHECK(rep["config"]["system"]["state_map"]["kind"] == "linear");
  // curve: initial spread plus one entry per step
  const std::string curve = read_text(tmp.str("diameter_curve.csv"));
  CHECK(line_count(curve) == 81);
}

TEST_CASE("cli: repeated runs produce byte-identical reports") {
  TempDir a("det-a"), b("det-b"), c("det-c");
  const std::string cfg = cfg_path("stoch_solve_linear.json");
  CHECK(run_cli({"stoch-solve", "--config", cfg, "--out", a.str()}) == 0);
  CHECK(run_cli({"stoch-solve", "--config", cfg, "--out", b.str()}) == 0);
  CHECK(read_text(a.str("report.json")) == read_text(b.str("report.json")));
  CHECK(read_text(a.str("cloud.csv")) == read_text(b.str("cloud.csv")));
  // a different seed must change the result
  CHECK(run_cli({"stoch-solve", "--config", cfg, "--seed", "99", "--out",
                 c.str()}) == 0);
  CHECK(read_text(a.str("report.json")) != read_text(c.str("report.json")));
  const json rep = read_json(c.str("report.json"));
  CHECK(rep["config"]["seed"] == 99);
}

TEST_CASE("cli: bad invocations exit 2") {
  CHECK(run_cli({"bogus-subcommand"}) == 2);
  CHECK(run_cli({"esp"}) == 2);                                    // no config
  CHECK(run_cli({"esp", "--config", "/no/such/file.json"}) == 2);  // missing file
  CHECK(run_cli({"--help"}) == 0);
}

TEST_CASE("cli: config validation failures exit 2") {
  TempDir tmp("val");
  const std::string cfg = cfg_path("esp_linear.json");
  CHECK(run_cli({"esp", "--config", cfg, "--set", "solver.horizon=-5", "--out",
                 tmp.str()}) == 2);
  CHECK(run_cli({"esp", "--config", cfg, "--set", "solver.cluster_tol=0",
                 "--out", tmp.str()}) == 2);
  CHECK(run_cli({"esp", "--config", cfg, "--set", "unexpected_field=1", "--out",
                 tmp.str()}) == 2);
  CHECK(run_cli({"esp", "--config", cfg, "--set", "solver.metric_rate=1.5",
                 "--out", tmp.str()}) == 2);
  // malformed JSON config file
  write_file(tmp.str("broken.json"), "{not json");
  CHECK(run_cli({"esp", "--config", tmp.str("broken.json")}) == 2);
}

TEST_CASE("cli: numerical blowup exits 3") {
  TempDir tmp("blow");
  const json cfg = {
      {"system",
       {{"state_map",
         {{"kind", "linear"},
          {"A", {{4.0, 0.0}, {0.0, 4.0}}},
          {"B", {{1.0}, {1.0}}}}},
        {"readout", {{"kind", "identity"}}}}},
      {"input", {{"kind", "constant"}, {"value", {1.0}}, {"len", 400}}},
      {"x0", {1e300, 1e300}},
  };
  write_file(tmp.str("cfg.json"), cfg.dump());
  CHECK(run_cli({"simulate", "--config", tmp.str("cfg.json"), "--out",
                 tmp.str("out")}) == 3);
}

TEST_CASE("cli: output directory precedence and config echo") {
  TempDir tmp("outdir");
  json cfg = read_json(cfg_path("esp_linear.json"));
  cfg["out"] = tmp.str("from-config");
  write_file(tmp.str("cfg.json"), cfg.dump());

  // config.out applies when no flag or env var is given
  CHECK(run_cli({"esp", "--config", tmp.str("cfg.json")}) == 0);
  CHECK(fs::exists(tmp.str("from-config") + "/report.json"));

  // env var beats config.out
  setenv("ECHOLAB_OUT", (tmp.str("from-env")).c_str(), 1);
  CHECK(run_cli({"esp", "--config", tmp.str("cfg.json")}) == 0);
  CHECK(fs::exists(tmp.str("from-env") + "/report.json"));

  // flag beats both
  CHECK(run_cli({"esp", "--config", tmp.str("cfg.json"), "--out",
                 tmp.str("from-flag")}) == 0);
  CHECK(fs::exists(tmp.str("from-flag") + "/report.json"));
  unsetenv("ECHOLAB_OUT");

  // reports are identical across output locations: the echoed config owns
  // every input that affects results, and the out dir is not one of them
  const std::string r1 = read_text(tmp.str("from-config") + "/report.json");
  const std::string r2 = read_text(tmp.str("from-env") + "/report.json");
  const std::string r3 = read_text(tmp.str("from-flag") + "/report.json");
  CHECK(r1 == r2);
  CHECK(r1 == r3);
  CHECK(!read_json(tmp.str("from-flag") + "/report.json")["config"].contains("out"));
}

TEST_CASE("cli: --set overrides nested fields and the echo reflects them") {
  TempDir tmp("set");
  CHECK(run_cli({"esp", "--config", cfg_path("esp_linear.json"), "--set",
                 "solver.horizon=40", "--set", "input.len=40", "--out",
                 tmp.str()}) == 0);
  const json rep = read_json(tmp.str("report.json"));
  CHECK(rep["config"]["solver"]["horizon"] == 40);
  CHECK(line_count(read_text(tmp.str("diameter_curve.csv"))) == 41);
}

TEST_CASE("cli: example-kloeden certifies three echo states and attraction") {
  TempDir tmp("ek");
  CHECK(run_cli({"example-kloeden", "--out", tmp.str()}) == 0);
  const json r = read_json(tmp.str("report.json"))["result"];
  CHECK(r["echo_plus"]["index"] == 3);
  CHECK(r["echo_plus"]["stable"] == true);
  REQUIRE(r["echo_plus"]["representatives"].size() == 3);
  const double fp = 0.5;
  const std::vector<double> expect = {-fp, 0.0, fp};
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(r["echo_plus"]["representatives"][i].get<double>() -
                   expect[i]) < 1e-6);
  CHECK(r["echo_plus"]["oracle_error"].get<double>() < 1e-6);
  CHECK(r["echo_minus"]["index"] == 1);
  CHECK(r["forward"]["entered_plus_at"].get<int>() > 0);
  CHECK(r["forward"]["entered_minus_at"].get<int>() > 0);
  CHECK(r["forward"]["remains_in_band"] == true);
  CHECK(fs::exists(tmp.str("forward_paths.csv")));
  CHECK(fs::exists(tmp.str("representatives.csv")));
}

TEST_CASE("cli: example-linear matches the closed form and the decay rate") {
  TempDir tmp("el");
  CHECK(run_cli({"example-linear", "--out", tmp.str()}) == 0);
  const json r = read_json(tmp.str("report.json"))["result"];
  CHECK(r["closed_form_error"].get<double>() < 1e-8);
  CHECK(r["resolved"] == true);
  CHECK(r["spectral_radius"].get<double>() == doctest::Approx(0.4).epsilon(1e-6));
  CHECK(r["rate_bounded_by_radius"] == true);
  CHECK(r["diameter_decay_rate"].get<double>() > 0.2);
  CHECK(fs::exists(tmp.str("fiber.csv")));
  CHECK(fs::exists(tmp.str("diameter_curve.csv")));
}

TEST_CASE("cli: filter subcommand runs all three models") {
  TempDir tmp("filt");
  CHECK(run_cli({"filter", "--config", cfg_path("filter_kalman.json"), "--out",
                 tmp.str("k")}) == 0);
  const json k = read_json(tmp.str("k") + "/report.json")["result"];
  CHECK(k["method"] == "kalman");
  CHECK(k["steps"] == 8);
  CHECK(k["log_likelihood"].is_number());
  CHECK(line_count(read_text(tmp.str("k") + "/trace.csv")) == 8);

  CHECK(run_cli({"filter", "--config", cfg_path("filter_augmented.json"),
                 "--out", tmp.str("a")}) == 0);
  const json a = read_json(tmp.str("a") + "/report.json")["result"];
  CHECK(a["method"] == "augmented_kalman");
  CHECK(a["final_mean"].size() == 2);  // augmented: state plus input estimate

  CHECK(run_cli({"filter", "--config", cfg_path("filter_particle.json"),
                 "--out", tmp.str("p")}) == 0);
  const json p = read_json(tmp.str("p") + "/report.json")["result"];
  CHECK(p["method"] == "particle");
  CHECK(p["steps"] == 6);
  CHECK(p["min_ess"].get<double>() > 10.0);
  CHECK(p["log_likelihood"].is_number());
}

TEST_CASE("cli: simulate trajectory csv has one row per step") {
  TempDir tmp("sim");
  CHECK(run_cli({"simulate", "--config", cfg_path("simulate_leaky.json"),
                 "--out", tmp.str()}) == 0);
  const json rep = read_json(tmp.str("report.json"));
  CHECK(rep["result"]["steps"] == 50);
  const std::string csv = read_text(tmp.str("trajectory.csv"));
  CHECK(line_count(csv) == 50);
  // t, two state entries, two output entries
  const std::string first = csv.substr(0, csv.find('\n'));
  CHECK(std::count(first.begin(), first.end(), ',') == 4);
}

TEST_CASE("cli: csv input kind matches inline values") {
  TempDir tmp("csvin");
  // same three-step input given two ways
  write_file(tmp.str("input.csv"), "0.5\n-0.25\n1.0\n");
  const json sys = {{"state_map",
                     {{"kind", "linear"}, {"A", {{0.5}}}, {"B", {{1.0}}}}},
                    {"readout", {{"kind", "identity"}}}};
  json cfg_csv = {{"system", sys},
                  {"input", {{"kind", "csv"}, {"path", tmp.str("input.csv")}}}};
  json cfg_val = {{"system", sys},
                  {"input",
                   {{"kind", "values"},
                    {"rows", {{0.5}, {-0.25}, {1.0}}}}}};
  write_file(tmp.str("a.json"), cfg_csv.dump());
  write_file(tmp.str("b.json"), cfg_val.dump());
  CHECK(run_cli({"simulate", "--config", tmp.str("a.json"), "--out",
                 tmp.str("a")}) == 0);
  CHECK(run_cli({"simulate", "--config", tmp.str("b.json"), "--out",
                 tmp.str("b")}) == 0);
  const json ra = read_json(tmp.str("a") + "/report.json");
  const json rb = read_json(tmp.str("b") + "/report.json");
  CHECK(ra["result"] == rb["result"]);
  // x3 = 0.5^2*0.5 + 0.5*(-0.25) + 1.0
  CHECK(ra["result"]["final_state"][0].get<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cli: remaining shipped configs all run clean") {
  const std::vector<std::pair<std::string, std::string>> runs = {
      {"echo-index", "echo_index_kloeden.json"},
      {"fmp", "fmp_linear.json"},
      {"scan", "scan_kloeden.json"},
      {"forward", "forward_kloeden.json"},
      {"stoch-fmp", "stoch_fmp_ar1.json"},
      {"causality", "causality_ar1.json"},
      {"causality", "causality_markov.json"},
      {"periodicity", "periodicity_alternating.json"},
  };
  TempDir tmp("all");
  int i = 0;
  for (const auto& [sub, cfg] : runs) {
    CAPTURE(cfg);
    CHECK(run_cli({sub, "--config", cfg_path(cfg), "--out",
                   tmp.str("r" + std::to_string(i++))}) == 0);
  }
  // spot checks on the semantically loaded ones
  const json idx = read_json(tmp.str("r0") + "/report.json")["result"];
  CHECK(idx["index"] == 3);
  const json caus = read_json(tmp.str("r5") + "/report.json")["result"];
  CHECK(caus["causal"] == true);
  const json peri = read_json(tmp.str("r7") + "/report.json")["result"];
  CHECK(peri["distance"].get<double>() <
        peri["divisor_distances"]["1"].get<double>());
}
