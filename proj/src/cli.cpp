#include "echolab/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "echolab/causality.hpp"
#include "echolab/common.hpp"
#include "echolab/filtering.hpp"
#include "echolab/measure.hpp"
#include "echolab/pullback.hpp"
#include "echolab/report.hpp"
#include "echolab/system.hpp"
#include "echolab/window.hpp"

namespace echolab::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// config plumbing

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

template <typename T>
const char* type_name();
template <>
const char* type_name<double>() { return "number"; }
template <>
const char* type_name<int>() { return "integer"; }
template <>
const char* type_name<std::uint64_t>() { return "unsigned integer"; }
template <>
const char* type_name<bool>() { return "boolean"; }
template <>
const char* type_name<std::string>() { return "string"; }

template <typename T>
bool type_matches(const json& v) {
  if constexpr (std::is_same_v<T, double>) return v.is_number();
  if constexpr (std::is_same_v<T, int>) return v.is_number_integer();
  if constexpr (std::is_same_v<T, std::uint64_t>)
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
  if constexpr (std::is_same_v<T, std::string>) return v.is_string();
  return false;
}

// Reads fields out of a config section while echoing every value actually
// used (defaults included) into the resolved-config object embedded in the
// report.
struct Cfg {
  const json* in;  // null when the section is absent
  json* out;
  std::string path;

  bool has(const std::string& key) const {
    return in != nullptr && in->contains(key);
  }

  const json& raw(const std::string& key) const {
    if (!has(key)) fail(path + "." + key + ": required field is missing");
    return (*in)[key];
  }

  template <typename T>
  T get(const std::string& key, T def) const {
    if (!has(key)) {
      (*out)[key] = def;
      return def;
    }
    const json& v = (*in)[key];
    if (!type_matches<T>(v))
      fail(path + "." + key + ": expected " + type_name<T>());
    T val = v.get<T>();
    (*out)[key] = val;
    return val;
  }

  template <typename T>
  T require(const std::string& key) const {
    const json& v = raw(key);
    if (!type_matches<T>(v))
      fail(path + "." + key + ": expected " + type_name<T>());
    T val = v.get<T>();
    (*out)[key] = val;
    return val;
  }

  // echoes the raw JSON value (for structured blocks parsed elsewhere)
  const json& echo_raw(const std::string& key) const {
    const json& v = raw(key);
    (*out)[key] = v;
    return v;
  }

  Cfg section(const std::string& key) const {
    if (has(key) && !(*in)[key].is_object())
      fail(path + "." + key + ": expected object");
    json& slot = (*out)[key] = json::object();
    return Cfg{has(key) ? &(*in)[key] : nullptr, &slot, path + "." + key};
  }

  void check_keys(std::initializer_list<const char*> allowed) const {
    if (in == nullptr) return;
    for (const auto& [key, value] : in->items()) {
      bool ok = false;
      for (const char* a : allowed)
        if (key == a) ok = true;
      if (!ok) fail(path + "." + key + ": unknown field");
    }
  }
};

double get_metric_p(const Cfg& c, const std::string& key) {
  if (!c.has(key)) {
    (*c.out)[key] = "inf";
    return kInf;
  }
  const json& v = c.raw(key);
  if (v.is_string() && v.get<std::string>() == "inf") {
    (*c.out)[key] = "inf";
    return kInf;
  }
  if (v.is_number()) {
    (*c.out)[key] = v.get<double>();
    return v.get<double>();
  }
  fail(c.path + "." + key + ": expected number or \"inf\"");
}

Eigen::VectorXd parse_vector(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) fail(path + ": expected non-empty array");
  Eigen::VectorXd out(static_cast<int>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) fail(path + ": expected numbers");
    out(static_cast<int>(i)) = v[i].get<double>();
  }
  return out;
}

Eigen::MatrixXd parse_matrix(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) fail(path + ": expected array of rows");
  const Eigen::VectorXd first = parse_vector(v[0], path + "[0]");
  Eigen::MatrixXd out(static_cast<int>(v.size()), first.size());
  out.row(0) = first;
  for (std::size_t i = 1; i < v.size(); ++i) {
    const Eigen::VectorXd row = parse_vector(v[i], path + "[" + std::to_string(i) + "]");
    if (row.size() != first.size()) fail(path + ": ragged rows");
    out.row(static_cast<int>(i)) = row;
  }
  return out;
}

std::vector<std::pair<double, double>> parse_box(const json& v,
                                                 const std::string& path) {
  if (!v.is_array() || v.empty()) fail(path + ": expected array of [lo, hi] pairs");
  std::vector<std::pair<double, double>> box;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    if (!v[i].is_array() || v[i].size() != 2 || !v[i][0].is_number() ||
        !v[i][1].is_number())
      fail(p + ": expected [lo, hi]");
    box.push_back({v[i][0].get<double>(), v[i][1].get<double>()});
    if (box.back().first > box.back().second) fail(p + ": lo > hi");
  }
  return box;
}

pullback::PullbackConfig parse_solver(const Cfg& root, std::uint64_t seed) {
  Cfg c = root.section("solver");
  c.check_keys({"horizon", "ensemble", "init_box", "cluster_tol", "keep_len",
                "metric_rate", "metric_p"});
  pullback::PullbackConfig cfg;
  cfg.horizon = c.get<int>("horizon", cfg.horizon);
  if (cfg.horizon < 1) fail(c.path + ".horizon: must be >= 1");
  cfg.ensemble = c.get<int>("ensemble", cfg.ensemble);
  if (cfg.ensemble < 1) fail(c.path + ".ensemble: must be >= 1");
  if (c.has("init_box"))
    cfg.init_box = parse_box(c.echo_raw("init_box"), c.path + ".init_box");
  else
    (*c.out)["init_box"] = json::array({json::array({-1.0, 1.0})});
  cfg.cluster_tol = c.get<double>("cluster_tol", cfg.cluster_tol);
  if (cfg.cluster_tol <= 0.0) fail(c.path + ".cluster_tol: must be > 0");
  cfg.keep_len = c.get<int>("keep_len", cfg.keep_len);
  const double rate = c.get<double>("metric_rate", 0.5);
  if (rate <= 0.0 || rate >= 1.0) fail(c.path + ".metric_rate: must be in (0, 1)");
  cfg.metric = seq::WeightSeq::geometric(rate);
  cfg.metric_p = get_metric_p(c, "metric_p");
  cfg.seed = seed;
  return cfg;
}

stoch::MeasureMetric parse_metric(const Cfg& root, std::uint64_t seed) {
  Cfg c = root.section("metric");
  c.check_keys({"rate", "metric_p", "order", "exact_cap", "sliced_projections"});
  stoch::MeasureMetric m;
  const double rate = c.get<double>("rate", 0.5);
  if (rate <= 0.0 || rate >= 1.0) fail(c.path + ".rate: must be in (0, 1)");
  m.weights = seq::WeightSeq::geometric(rate);
  m.metric_p = get_metric_p(c, "metric_p");
  m.order = c.get<double>("order", 1.0);
  if (m.order < 1.0) fail(c.path + ".order: must be >= 1");
  const int cap = c.get<int>("exact_cap", 1000000);
  if (cap < 1) fail(c.path + ".exact_cap: must be >= 1");
  m.exact_cap = static_cast<std::size_t>(cap);
  m.sliced_projections = c.get<int>("sliced_projections", 64);
  if (m.sliced_projections < 1)
    fail(c.path + ".sliced_projections: must be >= 1");
  m.sliced_seed = rng::derive(seed, "cli-sliced", 0);
  return m;
}

sys::SystemInstance parse_system(const Cfg& root) {
  const json& spec = root.echo_raw("system");
  try {
    return sys::SystemInstance::from_json(spec);
  } catch (const json::exception& e) {
    fail(root.path + ".system: " + e.what());
  }
}

std::string read_file(const std::string& path, const std::string& field) {
  if (!fs::exists(path)) fail(field + ": file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(field + ": cannot read: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ResolvedInput {
  bool is_law = false;
  seq::Window window;
  stoch::InputLawSpec law;
  int len = 0;
};

// use_len: law inputs carry an explicit sample length; subcommands whose
// sample length is fixed elsewhere (solver horizon, filter observations)
// reject the field instead
ResolvedInput parse_input(const Cfg& root, bool allow_window, bool allow_law,
                          int default_len, bool use_len = true) {
  if (!root.has("input")) fail(root.path + ".input: required field is missing");
  Cfg c = root.section("input");
  const std::string kind = c.require<std::string>("kind");
  ResolvedInput out;
  if (kind == "csv") {
    c.check_keys({"kind", "path"});
    const std::string path = c.require<std::string>("path");
    out.window = seq::window_from_csv(read_file(path, c.path + ".path"));
    out.len = out.window.len();
  } else if (kind == "values") {
    c.check_keys({"kind", "rows"});
    const Eigen::MatrixXd rows = parse_matrix(c.echo_raw("rows"), c.path + ".rows");
    std::vector<Eigen::VectorXd> cols;
    for (int i = 0; i < rows.rows(); ++i)
      cols.push_back(rows.row(i).transpose());
    out.window = seq::Window::from_columns(cols);
    out.len = out.window.len();
  } else if (kind == "constant") {
    c.check_keys({"kind", "value", "len"});
    const Eigen::VectorXd v = parse_vector(c.echo_raw("value"), c.path + ".value");
    const int len = c.require<int>("len");
    if (len < 1) fail(c.path + ".len: must be >= 1");
    out.window = seq::Window::from_columns(
        std::vector<Eigen::VectorXd>(static_cast<std::size_t>(len), v));
    out.len = len;
  } else if (kind == "piecewise") {
    c.check_keys({"kind", "segments"});
    const json& segs = c.echo_raw("segments");
    if (!segs.is_array() || segs.empty())
      fail(c.path + ".segments: expected non-empty array");
    std::vector<Eigen::VectorXd> cols;
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const std::string p = c.path + ".segments[" + std::to_string(i) + "]";
      if (!segs[i].is_object() || !segs[i].contains("value") ||
          !segs[i].contains("len"))
        fail(p + ": expected {value, len}");
      const Eigen::VectorXd v = parse_vector(segs[i]["value"], p + ".value");
      if (!segs[i]["len"].is_number_integer() || segs[i]["len"].get<int>() < 1)
        fail(p + ".len: must be a positive integer");
      for (int k = 0; k < segs[i]["len"].get<int>(); ++k) cols.push_back(v);
    }
    out.window = seq::Window::from_columns(cols);
    out.len = out.window.len();
  } else if (kind == "law") {
    if (use_len)
      c.check_keys({"kind", "law", "len"});
    else
      c.check_keys({"kind", "law"});
    const json& law = c.echo_raw("law");
    try {
      out.law = stoch::InputLawSpec::from_json(law);
    } catch (const json::exception& e) {
      fail(c.path + ".law: " + e.what());
    }
    out.is_law = true;
    if (use_len) {
      out.len = c.get<int>("len", default_len);
      if (out.len < 1) fail(c.path + ".len: must be >= 1");
    }
  } else {
    fail(c.path + ".kind: unknown input kind '" + kind + "'");
  }
  if (!out.is_law && !allow_window)
    fail(c.path + ": this subcommand needs a stochastic input law");
  if (out.is_law && !allow_law)
    fail(c.path + ": this subcommand needs a deterministic input window");
  return out;
}

// deterministic window: given directly, or sampled from the law by seed
seq::Window materialize(const ResolvedInput& in, std::uint64_t seed,
                        std::uint64_t index) {
  if (!in.is_law) return in.window;
  rng::Rng r(rng::derive(seed, "cli-input", index));
  const auto path = in.law.sample_path(in.len, 0, r);
  return seq::Window::from_columns(path);
}

// peek at the input kind before full parsing (seed requirements depend on it)
bool input_is_law(const Cfg& root) {
  return root.has("input") && (*root.in)["input"].is_object() &&
         (*root.in)["input"].contains("kind") &&
         (*root.in)["input"]["kind"] == "law";
}

std::uint64_t parse_seed(const Cfg& root, bool required) {
  if (!root.has("seed")) {
    if (required) fail(root.path + ".seed: required for stochastic runs");
    (*root.out)["seed"] = 0;
    return 0;
  }
  return root.require<std::uint64_t>("seed");
}

stoch::StateInitLaw parse_init(const Cfg& root) {
  if (!root.has("init")) return stoch::StateInitLaw{};
  const json& j = root.echo_raw("init");
  try {
    return stoch::StateInitLaw::from_json(j);
  } catch (const json::exception& e) {
    fail(root.path + ".init: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// output helpers

void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  out << content;
}

std::string csv_row(const std::vector<double>& cells) {
  std::string row;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) row.push_back(',');
    row += report::format_double(cells[i]);
  }
  row.push_back('\n');
  return row;
}

json vec_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

// ---------------------------------------------------------------------------
// subcommands

json run_simulate(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "x0", "steps", "seed", "out"});
  const auto system = parse_system(root);
  const auto input = parse_input(root, true, true, 64);
  const std::uint64_t seed = parse_seed(root, input.is_law);
  const seq::Window w = materialize(input, seed, 0);
  if (w.dim() != system.input_dim())
    fail("config.input: dimension mismatch with the system");
  const int steps = root.get<int>("steps", w.len());
  if (steps < 1 || steps > w.len())
    fail("config.steps: must be in [1, input length]");
  Eigen::VectorXd x = Eigen::VectorXd::Zero(system.state_dim());
  if (root.has("x0")) x = parse_vector(root.echo_raw("x0"), "config.x0");
  if (x.size() != system.state_dim()) fail("config.x0: dimension mismatch");

  std::string csv;
  Eigen::VectorXd y;
  for (int t = 0; t < steps; ++t) {
    x = system.f(x, w.values().col(t));
    y = system.h(x);
    std::vector<double> row = {static_cast<double>(t + 1)};
    for (int i = 0; i < x.size(); ++i) row.push_back(x(i));
    for (int i = 0; i < y.size(); ++i) row.push_back(y(i));
    csv += csv_row(row);
  }
  write_text(outdir / "trajectory.csv", csv);

  json result;
  result["steps"] = steps;
  result["final_state"] = vec_json(x);
  result["final_output"] = vec_json(y);
  return result;
}

json esp_like_common(Cfg& root, const fs::path& outdir, bool index_mode) {
  root.check_keys({"system", "input", "solver", "seed", "out"});
  const auto system = parse_system(root);
  const std::uint64_t seed = parse_seed(root, input_is_law(root));
  const auto cfg = parse_solver(root, seed);
  const auto input = parse_input(root, true, true, cfg.horizon);
  const seq::Window w = materialize(input, seed, 0);

  json result;
  if (index_mode) {
    const auto rep = pullback::echo_index(system, w, cfg);
    result["index"] = rep.index;
    result["stable"] = rep.stable;
    result["resolved"] = rep.resolved;
    result["refined_index"] = rep.refined_index;
    result["diameters"] = rep.diameters;
    result["diverged"] = rep.fiber.diverged;
    json reps = json::array();
    std::string csv;
    for (std::size_t i = 0; i < rep.fiber.representatives.size(); ++i) {
      const Eigen::VectorXd state = rep.fiber.representatives[i].at_lag(0);
      reps.push_back(vec_json(state));
      std::vector<double> row = {static_cast<double>(i)};
      for (int c = 0; c < state.size(); ++c) row.push_back(state(c));
      csv += csv_row(row);
    }
    result["representatives"] = reps;
    write_text(outdir / "representatives.csv", csv);
  } else {
    const auto rep = pullback::esp_check(system, w, cfg);
    result["holds"] = rep.holds;
    result["final_diameter"] = rep.final_diameter;
    result["curve_monotone"] = rep.curve_monotone;
    result["diverged"] = rep.diverged;
    result["clusters"] = rep.clusters;
    std::string csv;
    for (std::size_t t = 0; t < rep.diameter_curve.size(); ++t)
      csv += csv_row({static_cast<double>(t), rep.diameter_curve[t]});
    write_text(outdir / "diameter_curve.csv", csv);
  }
  return result;
}

json run_esp(Cfg& root, const fs::path& outdir) {
  return esp_like_common(root, outdir, false);
}

json run_echo_index(Cfg& root, const fs::path& outdir) {
  return esp_like_common(root, outdir, true);
}

json run_fmp(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "solver", "lags", "deltas", "seed", "out"});
  const auto system = parse_system(root);
  const std::uint64_t seed = parse_seed(root, input_is_law(root));
  const auto cfg = parse_solver(root, seed);
  const auto input = parse_input(root, true, true, cfg.horizon);
  const seq::Window w = materialize(input, seed, 0);

  const json& jlags = root.echo_raw("lags");
  const json& jdeltas = root.echo_raw("deltas");
  if (!jlags.is_array() || jlags.empty()) fail("config.lags: expected array");
  if (!jdeltas.is_array() || jdeltas.empty()) fail("config.deltas: expected array");
  std::vector<int> lags;
  std::vector<double> deltas;
  for (const auto& v : jlags) {
    if (!v.is_number_integer() || v.get<int>() < 0)
      fail("config.lags: expected non-negative integers");
    lags.push_back(v.get<int>());
  }
  for (const auto& v : jdeltas) {
    if (!v.is_number()) fail("config.deltas: expected numbers");
    deltas.push_back(v.get<double>());
  }

  const auto rep = pullback::fmp_probe(system, w, lags, deltas, cfg);
  json table = json::array();
  std::string csv;
  for (const auto& e : rep.table) {
    table.push_back({{"lag", e.lag}, {"delta", e.delta}, {"response", e.response}});
    csv += csv_row({static_cast<double>(e.lag), e.delta, e.response});
  }
  write_text(outdir / "fmp.csv", csv);
  json result;
  result["table"] = table;
  return result;
}

json run_scan(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "solver", "n_inputs", "seed", "out"});
  const auto system = parse_system(root);
  const std::uint64_t seed = parse_seed(root, true);
  const auto cfg = parse_solver(root, seed);
  const auto input = parse_input(root, false, true, cfg.horizon);
  const int n_inputs = root.require<int>("n_inputs");
  if (n_inputs < 1) fail("config.n_inputs: must be >= 1");

  const auto rep = pullback::generic_constancy_scan(
      system,
      [&](int i) {
        rng::Rng r(rng::derive(seed, "cli-scan", static_cast<std::uint64_t>(i)));
        return seq::Window::from_columns(input.law.sample_path(input.len, 0, r));
      },
      n_inputs, cfg);

  json hist = json::object();
  std::string csv;
  for (const auto& [index, count] : rep.histogram) {
    hist[std::to_string(index)] = count;
    csv += csv_row({static_cast<double>(index), static_cast<double>(count)});
  }
  write_text(outdir / "scan.csv", csv);
  json result;
  result["histogram"] = hist;
  result["unresolved"] = rep.unresolved;
  result["unstable"] = rep.unstable;
  result["total"] = rep.total;
  return result;
}

json run_forward(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "starts", "steps", "seed", "out"});
  const auto system = parse_system(root);
  const auto input = parse_input(root, true, false, 0);
  const seq::Window w = input.window;
  if (w.dim() != system.input_dim())
    fail("config.input: dimension mismatch with the system");
  parse_seed(root, false);

  const json& jstarts = root.echo_raw("starts");
  if (!jstarts.is_array() || jstarts.empty())
    fail("config.starts: expected array of state vectors");
  std::vector<Eigen::VectorXd> starts;
  for (std::size_t i = 0; i < jstarts.size(); ++i) {
    starts.push_back(
        parse_vector(jstarts[i], "config.starts[" + std::to_string(i) + "]"));
    if (starts.back().size() != system.state_dim())
      fail("config.starts[" + std::to_string(i) + "]: dimension mismatch");
  }
  const int steps = root.get<int>("steps", w.len());
  if (steps < 1 || steps > w.len())
    fail("config.steps: must be in [1, input length]");

  std::vector<Eigen::VectorXd> states = starts;
  std::string csv;
  json finals = json::array();
  for (int t = 0; t < steps; ++t) {
    std::vector<double> row = {static_cast<double>(t + 1)};
    for (int c = 0; c < w.dim(); ++c) row.push_back(w.values()(c, t));
    for (auto& x : states) {
      x = system.f(x, w.values().col(t));
      for (int c = 0; c < x.size(); ++c) row.push_back(x(c));
    }
    csv += csv_row(row);
  }
  for (const auto& x : states) finals.push_back(vec_json(x));
  write_text(outdir / "forward_paths.csv", csv);

  json result;
  result["steps"] = steps;
  result["n_starts"] = static_cast<int>(starts.size());
  result["final_states"] = finals;
  return result;
}

void write_cloud_csv(const stoch::ParticleMeasure& mu, const fs::path& path) {
  std::string csv;
  for (int i = 0; i < mu.size(); ++i) {
    const auto& p = mu.particles[static_cast<std::size_t>(i)];
    std::vector<double> row = {static_cast<double>(i), mu.weights(i)};
    if (p.state.len() > 0) {
      const Eigen::VectorXd x = p.state.at_lag(0);
      for (int c = 0; c < x.size(); ++c) row.push_back(x(c));
    }
    const Eigen::VectorXd u = p.input.past.at_lag(0);
    for (int c = 0; c < u.size(); ++c) row.push_back(u(c));
    csv += csv_row(row);
  }
  write_text(path, csv);
}

json run_stoch_solve(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "solver", "metric", "particles", "n_future",
                   "init", "tol", "seed", "out"});
  const auto system = parse_system(root);
  const auto input = parse_input(root, false, true, 0, false);
  const std::uint64_t seed = parse_seed(root, true);
  const auto cfg = parse_solver(root, seed);
  const auto metric = parse_metric(root, seed);
  const auto init = parse_init(root);
  const int N = root.get<int>("particles", 256);
  if (N < 1) fail("config.particles: must be >= 1");
  const int n_future = root.get<int>("n_future", 0);
  if (n_future < 0) fail("config.n_future: must be >= 0");
  const double tol = root.get<double>("tol", 1e-10);

  const auto mu = stoch::pullback_measure(system, input.law, cfg, init, N, n_future);
  const auto check = stoch::check_stochastic_solution(system, mu, tol);
  const double fp = stoch::fixedpoint_residual(system, mu, metric);
  write_cloud_csv(mu, outdir / "cloud.csv");

  json result;
  result["n_particles"] = mu.size();
  result["diverged"] = mu.diverged;
  result["weights_sum"] = mu.weights.sum();
  result["is_solution"] = check.is_solution;
  result["max_residual"] = check.max_residual;
  result["fixedpoint_residual"] = fp;
  result["horizon"] = mu.horizon;
  return result;
}

json run_stoch_fmp(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "perturbed", "solver", "metric",
                   "particles", "seed", "out"});
  const auto system = parse_system(root);
  const auto input = parse_input(root, false, true, 0, false);
  const std::uint64_t seed = parse_seed(root, true);
  const auto cfg = parse_solver(root, seed);
  const auto metric = parse_metric(root, seed);
  const int N = root.get<int>("particles", 256);
  if (N < 1) fail("config.particles: must be >= 1");

  const json& jperturbed = root.echo_raw("perturbed");
  if (!jperturbed.is_array() || jperturbed.empty())
    fail("config.perturbed: expected non-empty array of input laws");
  std::vector<stoch::InputLawSpec> perturbed;
  for (std::size_t i = 0; i < jperturbed.size(); ++i) {
    try {
      perturbed.push_back(stoch::InputLawSpec::from_json(jperturbed[i]));
    } catch (const json::exception& e) {
      fail("config.perturbed[" + std::to_string(i) + "]: " + e.what());
    }
  }

  const auto rep = stoch::stoch_fmp_probe(system, input.law, perturbed, cfg, metric, N);
  json table = json::array();
  std::string csv;
  for (std::size_t i = 0; i < rep.table.size(); ++i) {
    const auto& e = rep.table[i];
    table.push_back({{"input_dist", e.input_dist},
                     {"solution_dist", e.solution_dist},
                     {"pair_dist", e.pair_dist},
                     {"ratio", e.ratio}});
    csv += csv_row({static_cast<double>(i), e.input_dist, e.solution_dist,
                    e.pair_dist, e.ratio});
  }
  write_text(outdir / "stoch_fmp.csv", csv);
  json result;
  result["table"] = table;
  return result;
}

json run_causality(Cfg& root, const fs::path& outdir) {
  const std::string mode = root.get<std::string>("mode", "cmi");
  const auto system = parse_system(root);
  const auto input = parse_input(root, false, true, 0, false);
  const std::uint64_t seed = parse_seed(root, true);

  if (mode == "markov") {
    root.check_keys({"mode", "system", "input", "trajectories", "length",
                     "bins", "gap_edges", "max_order", "burn_in", "alpha",
                     "n_permutations", "x0", "seed", "out"});
    const int n_traj = root.get<int>("trajectories", 6);
    const int length = root.get<int>("length", 2000);
    if (n_traj < 1) fail("config.trajectories: must be >= 1");
    if (length < 10) fail("config.length: must be >= 10");
    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(system.state_dim());
    if (root.has("x0")) x0 = parse_vector(root.echo_raw("x0"), "config.x0");
    if (x0.size() != system.state_dim()) fail("config.x0: dimension mismatch");

    causality::MarkovOptions opt;
    opt.bins = root.get<int>("bins", opt.bins);
    opt.gap_edges = root.get<bool>("gap_edges", opt.gap_edges);
    opt.burn_in = root.get<int>("burn_in", opt.burn_in);
    opt.alpha = root.get<double>("alpha", opt.alpha);
    opt.n_permutations = root.get<int>("n_permutations", opt.n_permutations);
    opt.seed = rng::derive(seed, "cli-markov", 0);
    const int max_order = root.get<int>("max_order", 1);
    if (max_order < 1) fail("config.max_order: must be >= 1");

    const auto trajs = causality::simulate_trajectories(
        system, input.law, length, n_traj, rng::derive(seed, "cli-traj", 0), x0);
    const auto rep = causality::markov_augmentation_test(trajs, max_order, opt);
    std::string csv;
    for (const auto& e : rep.orders)
      csv += csv_row({static_cast<double>(e.order), e.cmi_augmented,
                      e.thr_augmented, e.pass_augmented ? 1.0 : 0.0, e.cmi_raw,
                      e.thr_raw, e.pass_raw ? 1.0 : 0.0});
    write_text(outdir / "markov.csv", csv);
    return rep.to_json();
  }

  if (mode != "cmi") fail("config.mode: expected \"cmi\" or \"markov\"");
  root.check_keys({"mode", "system", "input", "solver", "particles", "n_future",
                   "init", "estimator", "cond_order", "alpha", "n_permutations",
                   "knn_k", "quantize_tol", "seed", "out"});
  const auto cfg = parse_solver(root, seed);
  const auto init = parse_init(root);
  const int N = root.get<int>("particles", 512);
  if (N < 1) fail("config.particles: must be >= 1");
  const int n_future = root.get<int>("n_future", 0);
  if (n_future < 0) fail("config.n_future: must be >= 0");

  causality::CmiOptions opt;
  const std::string est = root.get<std::string>("estimator", "gaussian");
  opt.estimator = causality::cmi_estimator_from_string(est);
  opt.cond_order = root.get<int>("cond_order", causality::default_cond_order(input.law));
  opt.alpha = root.get<double>("alpha", opt.alpha);
  opt.n_permutations = root.get<int>("n_permutations", opt.n_permutations);
  opt.knn_k = root.get<int>("knn_k", opt.knn_k);
  opt.quantize_tol = root.get<double>("quantize_tol", opt.quantize_tol);
  opt.seed = rng::derive(seed, "cli-cmi", 0);

  auto mu = stoch::pullback_measure(system, input.law, cfg, init, N);
  json result;
  if (n_future > 0) {
    const auto ext = causality::causal_extension(mu, input.law, n_future,
                                                 rng::derive(seed, "cli-ext", 0));
    mu = ext.measure;
    result["extension"] = {{"marginal_dist", ext.marginal_dist},
                           {"marginal_hi", ext.marginal_hi},
                           {"marginal_warning", ext.marginal_warning},
                           {"ambiguous_phases", ext.ambiguous_phases}};
  }
  const auto rep = causality::is_causal_report(mu, opt);
  std::string csv;
  for (const auto& e : rep.lags)
    csv += csv_row({static_cast<double>(e.lag), e.cmi, e.threshold,
                    e.below ? 1.0 : 0.0});
  write_text(outdir / "cmi.csv", csv);
  result["report"] = rep.to_json();
  result["causal"] = rep.causal;
  return result;
}

json run_periodicity(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "solver", "metric", "particles", "init",
                   "k", "seed", "out"});
  const auto system = parse_system(root);
  const auto input = parse_input(root, false, true, 0, false);
  const std::uint64_t seed = parse_seed(root, true);
  const auto cfg = parse_solver(root, seed);
  const auto metric = parse_metric(root, seed);
  const auto init = parse_init(root);
  const int N = root.get<int>("particles", 256);
  if (N < 1) fail("config.particles: must be >= 1");
  int default_k = 0;
  if (input.law.kind == stoch::InputLawSpec::Kind::periodic)
    default_k = static_cast<int>(input.law.cycle.size());
  const int k = root.has("k") ? root.require<int>("k") : default_k;
  (*root.out)["k"] = k;
  if (k < 0) fail("config.k: must be >= 0");
  if (!root.has("k") && default_k == 0)
    fail("config.k: required for non-periodic input laws");

  const auto mu = stoch::pullback_measure(system, input.law, cfg, init, N);
  const auto rep = stoch::periodicity_check(mu, k, metric);
  std::string csv = csv_row({static_cast<double>(k), rep.distance});
  json divisors = json::object();
  for (const auto& [d, dist] : rep.divisor_distances) {
    divisors[std::to_string(d)] = dist;
    csv += csv_row({static_cast<double>(d), dist});
  }
  write_text(outdir / "periodicity.csv", csv);
  json result;
  result["k"] = k;
  result["distance"] = rep.distance;
  result["divisor_distances"] = divisors;
  return result;
}

filtering::ObservationSeries parse_observations(const Cfg& root) {
  if (!root.has("observations"))
    fail(root.path + ".observations: required field is missing");
  Cfg c = root.section("observations");
  if (c.has("csv")) {
    c.check_keys({"csv"});
    const std::string path = c.require<std::string>("csv");
    return filtering::observations_from_csv(read_file(path, c.path + ".csv"));
  }
  c.check_keys({"values"});
  if (!c.has("values")) fail(c.path + ": expected csv or values");
  const Eigen::MatrixXd rows = parse_matrix(c.echo_raw("values"), c.path + ".values");
  if (rows.cols() < 2) fail(c.path + ".values: rows need time plus components");
  filtering::ObservationSeries series;
  series.values.resize(rows.cols() - 1, rows.rows());
  for (int i = 0; i < rows.rows(); ++i) {
    series.times.push_back(rows(i, 0));
    series.values.col(i) = rows.row(i).segment(1, rows.cols() - 1).transpose();
    if (i > 0 && series.times[static_cast<std::size_t>(i)] <=
                     series.times[static_cast<std::size_t>(i - 1)])
      fail(c.path + ".values: times must increase");
  }
  return series;
}

filtering::GaussianBelief parse_prior(const Cfg& root, int dim) {
  filtering::GaussianBelief prior;
  prior.mean = Eigen::VectorXd::Zero(dim);
  prior.cov = Eigen::MatrixXd::Identity(dim, dim);
  if (!root.has("prior")) return prior;
  Cfg c = root.section("prior");
  c.check_keys({"mean", "cov"});
  if (c.has("mean")) prior.mean = parse_vector(c.echo_raw("mean"), c.path + ".mean");
  if (c.has("cov")) prior.cov = parse_matrix(c.echo_raw("cov"), c.path + ".cov");
  if (prior.mean.size() != dim || prior.cov.rows() != dim || prior.cov.cols() != dim)
    fail(c.path + ": dimension mismatch");
  return prior;
}

json trace_result(const filtering::FilterTrace& trace, const fs::path& outdir) {
  write_text(outdir / "trace.csv", trace.to_csv());
  const int last = trace.steps() - 1;
  json result;
  result["method"] = trace.method;
  result["steps"] = trace.steps();
  if (trace.has_log_likelihood)
    result["log_likelihood"] = trace.log_likelihood;
  else
    result["log_likelihood"] = nullptr;
  result["final_mean"] = vec_json(trace.mean_at(last));
  result["final_var_diag"] = vec_json(trace.var_diag_at(last));
  if (!trace.ess.empty()) {
    double lo = trace.ess[0];
    for (const double e : trace.ess) lo = std::min(lo, e);
    result["min_ess"] = lo;
  }
  result["trace"] = trace.to_json();
  return result;
}

json run_filter(Cfg& root, const fs::path& outdir) {
  const std::string model = root.require<std::string>("model");
  const auto series = parse_observations(root);
  const Eigen::MatrixXd& obs = series.values;

  filtering::KalmanOptions kopt;
  if (model == "kalman" || model == "augmented") {
    kopt.skip_update = root.get<bool>("skip_update", false);
    kopt.perfect_obs = root.get<bool>("perfect_obs", false);
  }

  if (model == "kalman") {
    root.check_keys({"model", "observations", "A", "B", "W", "Q", "R", "prior",
                     "skip_update", "perfect_obs", "seed", "out"});
    parse_seed(root, false);
    const auto A = parse_matrix(root.echo_raw("A"), "config.A");
    const auto B = parse_matrix(root.echo_raw("B"), "config.B");
    const auto W = parse_matrix(root.echo_raw("W"), "config.W");
    const auto Q = parse_matrix(root.echo_raw("Q"), "config.Q");
    const auto R = parse_matrix(root.echo_raw("R"), "config.R");
    const auto prior = parse_prior(root, static_cast<int>(A.rows()));
    auto trace = filtering::kalman_filter(A, B, W, Q, R, obs, prior, kopt);
    trace.times = series.times;
    return trace_result(trace, outdir);
  }
  if (model == "augmented") {
    root.check_keys({"model", "observations", "A", "B", "W", "a_u", "Q_u", "R",
                     "prior", "skip_update", "perfect_obs", "seed", "out"});
    parse_seed(root, false);
    const auto A = parse_matrix(root.echo_raw("A"), "config.A");
    const auto B = parse_matrix(root.echo_raw("B"), "config.B");
    const auto W = parse_matrix(root.echo_raw("W"), "config.W");
    const double a_u = root.require<double>("a_u");
    const auto Q_u = parse_matrix(root.echo_raw("Q_u"), "config.Q_u");
    const auto R = parse_matrix(root.echo_raw("R"), "config.R");
    const auto prior = parse_prior(root, static_cast<int>(A.rows()));
    auto trace = filtering::augmented_kalman(A, B, W, a_u, Q_u, R, obs, prior, kopt);
    trace.times = series.times;
    return trace_result(trace, outdir);
  }
  if (model == "particle") {
    root.check_keys({"model", "observations", "system", "input", "sigma",
                     "particles", "init", "resample_fraction", "history_len",
                     "seed", "out"});
    const auto system = parse_system(root);
    const auto input = parse_input(root, false, true, 0, false);
    const std::uint64_t seed = parse_seed(root, true);
    filtering::ObsModel om;
    om.sigma = root.get<double>("sigma", 1.0);
    filtering::ParticleFilterOptions opt;
    if (root.has("init")) opt.init = parse_init(root);
    opt.resample_fraction = root.get<double>("resample_fraction", opt.resample_fraction);
    opt.history_len = root.get<int>("history_len", opt.history_len);
    const int N = root.get<int>("particles", 1000);
    auto trace = filtering::bootstrap_particle_filter(system, input.law, om, obs,
                                                      N, seed, opt);
    trace.times = series.times;
    return trace_result(trace, outdir);
  }
  fail("config.model: expected \"kalman\", \"augmented\", or \"particle\"");
}

json run_example_kloeden(Cfg& root, const fs::path& outdir) {
  root.check_keys({"horizon", "ensemble", "cluster_tol", "u_plus", "u_minus",
                   "settle_steps", "post_steps", "start_eps", "band", "seed",
                   "out"});
  const int horizon = root.get<int>("horizon", 200);
  const int ensemble = root.get<int>("ensemble", 256);
  const double cluster_tol = root.get<double>("cluster_tol", 1e-4);
  const double u_plus = root.get<double>("u_plus", 1.5);
  const double u_minus = root.get<double>("u_minus", 0.5);
  const int settle = root.get<int>("settle_steps", 20);
  const int post = root.get<int>("post_steps", 150);
  const double eps = root.get<double>("start_eps", 1e-6);
  const double band = root.get<double>("band", 1e-3);
  parse_seed(root, false);
  if (u_plus <= 1.0) fail("config.u_plus: must be > 1");
  if (u_minus <= 0.0 || u_minus >= 1.0) fail("config.u_minus: must be in (0, 1)");

  const auto system = sys::SystemInstance::kloeden();
  pullback::PullbackConfig cfg;
  cfg.horizon = horizon;
  cfg.ensemble = ensemble;
  cfg.cluster_tol = cluster_tol;
  cfg.init_box = {{-3.0, 3.0}};

  const double fp = u_plus - 1.0;
  json result;
  {
    const auto w = seq::Window::constant(1, horizon, u_plus);
    const auto rep = pullback::echo_index(system, w, cfg);
    json reps = json::array();
    std::string csv;
    double oracle_err = 0.0;
    for (std::size_t i = 0; i < rep.fiber.representatives.size(); ++i) {
      const double x = rep.fiber.representatives[i].scalar_at_lag(0);
      reps.push_back(x);
      csv += csv_row({static_cast<double>(i), x});
      const double err = std::min({std::abs(x + fp), std::abs(x), std::abs(x - fp)});
      oracle_err = std::max(oracle_err, err);
    }
    write_text(outdir / "representatives.csv", csv);
    result["echo_plus"] = {{"index", rep.index},
                           {"stable", rep.stable},
                           {"resolved", rep.resolved},
                           {"representatives", reps},
                           {"fixed_points", json::array({-fp, 0.0, fp})},
                           {"oracle_error", oracle_err}};
  }
  {
    const auto w = seq::Window::constant(1, horizon, u_minus);
    const auto rep = pullback::echo_index(system, w, cfg);
    json reps = json::array();
    for (const auto& r : rep.fiber.representatives)
      reps.push_back(r.scalar_at_lag(0));
    result["echo_minus"] = {{"index", rep.index},
                            {"stable", rep.stable},
                            {"resolved", rep.resolved},
                            {"representatives", reps}};
  }
  {
    // run under the repelling input, then switch on the attracting one
    double xp = eps, xm = -eps;
    std::string csv;
    int entered_plus = -1, entered_minus = -1;
    bool remains = true;
    const Eigen::VectorXd up = Eigen::VectorXd::Constant(1, u_plus);
    const Eigen::VectorXd um = Eigen::VectorXd::Constant(1, u_minus);
    for (int t = 0; t < settle + post; ++t) {
      const Eigen::VectorXd& u = t < settle ? um : up;
      xp = system.f(Eigen::VectorXd::Constant(1, xp), u)(0);
      xm = system.f(Eigen::VectorXd::Constant(1, xm), u)(0);
      csv += csv_row({static_cast<double>(t + 1), u(0), xp, xm});
      if (t >= settle) {
        const int k = t - settle + 1;
        const bool in_plus = std::abs(xp - fp) <= band;
        const bool in_minus = std::abs(xm + fp) <= band;
        if (in_plus && entered_plus < 0) entered_plus = k;
        if (in_minus && entered_minus < 0) entered_minus = k;
        if (entered_plus > 0 && !in_plus) remains = false;
        if (entered_minus > 0 && !in_minus) remains = false;
      }
    }
    write_text(outdir / "forward_paths.csv", csv);
    result["forward"] = {{"entered_plus_at", entered_plus},
                         {"entered_minus_at", entered_minus},
                         {"remains_in_band", remains},
                         {"band", band},
                         {"targets", json::array({fp, -fp})}};
  }
  return result;
}

json run_example_linear(Cfg& root, const fs::path& outdir) {
  root.check_keys({"system", "input", "solver", "seed", "out"});
  sys::SystemInstance system = [&] {
    if (root.has("system")) return parse_system(root);
    Eigen::MatrixXd A(2, 2), B(2, 2);
    A << 0.4, 0.2, 0.0, 0.3;
    B = Eigen::MatrixXd::Identity(2, 2);
    auto def = sys::SystemInstance::linear(A, B);
    (*root.out)["system"] = def.to_json();
    return def;
  }();
  if (!system.is_linear()) fail("config.system: expected a linear system");

  const std::uint64_t seed = root.has("seed") ? root.require<std::uint64_t>("seed")
                                              : (((*root.out)["seed"] = 7), 7);
  auto cfg = parse_solver(root, seed);
  // the closed-form tail bound consumes input history beyond the compared
  // stretch, so the default horizon is generous
  const bool horizon_given = root.has("solver") &&
                             (*root.in)["solver"].is_object() &&
                             (*root.in)["solver"].contains("horizon");
  if (!horizon_given) {
    cfg.horizon = 120;
    (*root.out)["solver"]["horizon"] = 120;
  }
  ResolvedInput input;
  if (root.has("input")) {
    input = parse_input(root, true, true, cfg.horizon);
  } else {
    input.is_law = true;
    input.law = stoch::InputLawSpec::iid_uniform(
        Eigen::VectorXd::Constant(system.input_dim(), -1.0),
        Eigen::VectorXd::Constant(system.input_dim(), 1.0));
    input.len = cfg.horizon;
    (*root.out)["input"] = {{"kind", "law"},
                            {"law", input.law.to_json()},
                            {"len", input.len}};
  }
  const seq::Window w = materialize(input, seed, 0);

  const auto fiber = pullback::solution_fibers(system, w, cfg);
  if (fiber.representatives.size() != 1)
    throw NumericalError("example-linear: expected a single solution fiber");
  const Eigen::MatrixXd& A = system.linear_map()->A;
  const Eigen::MatrixXd& B = system.linear_map()->B;
  const auto closed = pullback::linear_closed_form(
      A, B, w, std::min(cfg.stored_len(), w.len()));
  double match_err = 0.0;
  std::string fiber_csv;
  const auto& rep = fiber.representatives[0];
  // both windows end at time 0; compare the overlap, right-aligned
  const int common = std::min(rep.len(), closed.len());
  const int rep_off = rep.len() - common;
  const int cl_off = closed.len() - common;
  for (int t = 0; t < common; ++t) {
    std::vector<double> row = {static_cast<double>(t)};
    for (int c = 0; c < rep.dim(); ++c) {
      const double a = rep.values()(c, rep_off + t);
      const double b = closed.values()(c, cl_off + t);
      row.push_back(a);
      row.push_back(b);
      match_err = std::max(match_err, std::abs(a - b));
    }
    fiber_csv += csv_row(row);
  }
  write_text(outdir / "fiber.csv", fiber_csv);

  const auto run = pullback::pullback_ensemble(system, w, cfg);
  std::string curve_csv;
  for (std::size_t t = 0; t < run.diameter_curve.size(); ++t)
    curve_csv += csv_row({static_cast<double>(t), run.diameter_curve[t]});
  write_text(outdir / "diameter_curve.csv", curve_csv);

  // decay-rate fit on the usable stretch of the diameter curve
  double rate = 0.0;
  {
    std::vector<double> logs;
    for (const double d : run.diameter_curve) {
      if (d <= 1e-13) break;
      logs.push_back(std::log(d));
    }
    if (logs.size() >= 3) {
      const int n = static_cast<int>(logs.size());
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      for (int i = 0; i < n; ++i) {
        sx += i;
        sy += logs[static_cast<std::size_t>(i)];
        sxx += static_cast<double>(i) * i;
        sxy += i * logs[static_cast<std::size_t>(i)];
      }
      rate = std::exp((n * sxy - sx * sy) / (n * sxx - sx * sx));
    }
  }
  const double rho = pullback::spectral_radius_estimate(A);

  json result;
  result["closed_form_error"] = match_err;
  result["spectral_radius"] = rho;
  result["diameter_decay_rate"] = rate;
  result["rate_bounded_by_radius"] = rate <= rho + 0.05;
  result["resolved"] = fiber.resolved;
  result["max_diameter"] = fiber.max_diameter;
  return result;
}

// ---------------------------------------------------------------------------
// driver

void apply_set(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail("--set: expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }

  json* node = &config;
  std::size_t pos = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = key.find('.', pos);
    parts.push_back(key.substr(pos, dot == std::string::npos ? dot : dot - pos));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& part = parts[i];
    if (part.empty()) fail("--set: empty path segment in '" + key + "'");
    const bool is_index =
        std::all_of(part.begin(), part.end(), [](char c) { return std::isdigit(c); });
    const bool last = i + 1 == parts.size();
    if (is_index && node->is_array()) {
      const std::size_t idx = std::stoul(part);
      while (node->size() <= idx) node->push_back(nullptr);
      if (last) {
        (*node)[idx] = value;
        return;
      }
      node = &(*node)[idx];
    } else {
      if (!node->is_object()) *node = json::object();
      if (last) {
        (*node)[part] = value;
        return;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
    }
  }
}

struct Subcommand {
  const char* name;
  const char* desc;
  bool needs_config;
  json (*fn)(Cfg&, const fs::path&);
};

const Subcommand kSubcommands[] = {
    {"simulate", "forward-simulate a system over a given input", true, run_simulate},
    {"esp", "check the echo state property via pullback contraction", true, run_esp},
    {"echo-index", "count solutions by clustering the pullback ensemble", true,
     run_echo_index},
    {"fmp", "probe fading memory by perturbing inputs at past lags", true, run_fmp},
    {"scan", "echo-index histogram over sampled inputs", true, run_scan},
    {"forward", "forward trajectories from explicit starting states", true,
     run_forward},
    {"stoch-solve", "build a stochastic solution cloud and verify it", true,
     run_stoch_solve},
    {"stoch-fmp", "law-to-law fading memory probe", true, run_stoch_fmp},
    {"causality", "conditional-independence tests on solution clouds", true,
     run_causality},
    {"periodicity", "shift-periodicity certificate for solution laws", true,
     run_periodicity},
    {"filter", "kalman, augmented-kalman, or particle filtering", true, run_filter},
    {"example-kloeden", "multiple-solution showcase with forward attraction", false,
     run_example_kloeden},
    {"example-linear", "linear closed-form and contraction-rate showcase", false,
     run_example_linear},
};

int dispatch(const std::string& name, const std::string& config_path,
             const std::vector<std::string>& sets, bool seed_given,
             std::uint64_t seed_flag, const std::string& out_flag) {
  const Subcommand* sub = nullptr;
  for (const auto& s : kSubcommands)
    if (name == s.name) sub = &s;
  if (sub == nullptr) fail("unknown subcommand '" + name + "'");

  json config = json::object();
  if (!config_path.empty()) {
    const std::string text = read_file(config_path, "--config");
    try {
      config = json::parse(text);
    } catch (const json::exception& e) {
      fail("--config: " + config_path + " is not valid JSON: " + e.what());
    }
    if (!config.is_object()) fail("--config: top level must be an object");
  } else if (sub->needs_config) {
    fail(std::string("--config is required for '") + name + "'");
  }

  for (const auto& s : sets) apply_set(config, s);
  if (seed_given) config["seed"] = seed_flag;

  std::string out = out_flag;
  if (out.empty()) {
    if (const char* env = std::getenv("ECHOLAB_OUT"); env != nullptr && *env)
      out = env;
  }
  if (out.empty() && config.contains("out")) {
    if (!config["out"].is_string()) fail("config.out: expected string");
    out = config["out"].get<std::string>();
  }
  if (out.empty()) out = "echolab-out";
  const fs::path outdir(out);

  json resolved = json::object();
  Cfg root{&config, &resolved, "config"};
  const json result = sub->fn(root, outdir);

  json report;
  report["tool_version"] = kToolVersion;
  report["subcommand"] = name;
  report["config"] = resolved;
  report["result"] = result;
  report::write_json((outdir / "report.json").string(), report);
  std::cout << outdir.string() << "/report.json\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"state-space system experiments: deterministic and stochastic "
               "solution analysis, causality tests, and filtering"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  std::uint64_t seed_flag = 0;
  std::vector<std::string> sets;
  std::string chosen;

  for (const auto& s : kSubcommands) {
    auto* sc = app.add_subcommand(s.name, s.desc);
    sc->add_option("--config", config_path, "JSON experiment config");
    sc->add_option("--seed", seed_flag, "override config.seed");
    sc->add_option("--out", out_flag,
                   "output directory (also via ECHOLAB_OUT env var)");
    sc->add_option("--set", sets, "override config fields, dotted key=value");
    sc->callback([&chosen, name = std::string(s.name)] { chosen = name; });
  }

  std::uint64_t seed_count = 0;
  try {
    app.parse(argc, argv);
    for (const auto* sc : app.get_subcommands())
      seed_count += sc->count("--seed");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return dispatch(chosen, config_path, sets, seed_count > 0, seed_flag, out_flag);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace echolab::cli
