#include "echolab/pullback.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace echolab::pullback {
namespace {

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};

double radical_inverse(int base, std::uint64_t i) {
  double result = 0.0;
  double f = 1.0 / base;
  while (i > 0) {
    result += f * static_cast<double>(i % static_cast<std::uint64_t>(base));
    i /= static_cast<std::uint64_t>(base);
    f /= base;
  }
  return result;
}

// lexicographic on entries, newest first
bool window_less(const Window& a, const Window& b) {
  for (int k = 0; k < a.len(); ++k) {
    for (int c = 0; c < a.dim(); ++c) {
      const double x = a.values()(c, a.len() - 1 - k);
      const double y = b.values()(c, b.len() - 1 - k);
      if (x != y) return x < y;
    }
  }
  return false;
}

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

void PullbackConfig::validate(int state_dim) const {
  require(horizon >= 1, "pullback: horizon must be >= 1");
  require(ensemble >= 2, "pullback: ensemble must be >= 2");
  require(cluster_tol > 0.0, "pullback: cluster_tol must be positive");
  require(!init_box.empty(), "pullback: init_box must be nonempty");
  require(static_cast<int>(init_box.size()) == 1 ||
              static_cast<int>(init_box.size()) == state_dim,
          "pullback: init_box must have 1 or state-dim entries");
  for (const auto& [lo, hi] : init_box)
    require(lo <= hi, "pullback: init_box bounds out of order");
  require(metric_p >= 1.0, "pullback: metric_p must be in [1, inf]");
}

std::vector<std::pair<double, double>> PullbackConfig::box_for(int state_dim) const {
  if (static_cast<int>(init_box.size()) == state_dim) return init_box;
  return std::vector<std::pair<double, double>>(static_cast<std::size_t>(state_dim),
                                                init_box.front());
}

int PullbackConfig::stored_len() const {
  if (keep_len > 0) return std::min(keep_len, horizon + 1);
  return std::min(horizon + 1, 64);
}

std::vector<Eigen::VectorXd> init_ensemble(const PullbackConfig& cfg, int state_dim) {
  require(state_dim <= static_cast<int>(std::size(kPrimes)),
          "pullback: state dimension too large for the Halton bases");
  const auto box = cfg.box_for(state_dim);
  std::vector<Eigen::VectorXd> points;
  points.reserve(static_cast<std::size_t>(cfg.ensemble));
  // corners (all 2^dim when they fit, otherwise the first ensemble-1)
  const std::uint64_t n_corners =
      state_dim < 60 ? (std::uint64_t{1} << state_dim) : std::uint64_t(-1);
  for (std::uint64_t mask = 0;
       mask < n_corners && points.size() + 1 < static_cast<std::size_t>(cfg.ensemble);
       ++mask) {
    Eigen::VectorXd p(state_dim);
    for (int c = 0; c < state_dim; ++c)
      p[c] = (mask >> c) & 1 ? box[static_cast<std::size_t>(c)].second
                             : box[static_cast<std::size_t>(c)].first;
    points.push_back(std::move(p));
  }
  // Halton fill starting at index 1: the base-2 coordinate hits 0.5 first,
  // so a symmetric box always contributes its exact midpoint
  for (std::uint64_t i = 1; points.size() < static_cast<std::size_t>(cfg.ensemble); ++i) {
    Eigen::VectorXd p(state_dim);
    for (int c = 0; c < state_dim; ++c) {
      const auto& [lo, hi] = box[static_cast<std::size_t>(c)];
      p[c] = lo + (hi - lo) * radical_inverse(kPrimes[c], i);
    }
    points.push_back(std::move(p));
  }
  return points;
}

EnsembleRun pullback_ensemble(const SystemInstance& sys, const Window& input,
                              const PullbackConfig& cfg, bool want_curve) {
  cfg.validate(sys.state_dim());
  const int n = cfg.horizon;
  require(input.len() >= n, "pullback: input window shorter than horizon");
  require(input.dim() == sys.input_dim(), "pullback: input dimension mismatch");
  const int keep = cfg.stored_len();
  const int M = cfg.ensemble;

  const std::vector<Eigen::VectorXd> inits = init_ensemble(cfg, sys.state_dim());
  std::vector<Eigen::VectorXd> state = inits;
  std::vector<bool> alive(static_cast<std::size_t>(M), true);
  std::vector<Eigen::MatrixXd> tails(
      static_cast<std::size_t>(M),
      Eigen::MatrixXd::Zero(sys.state_dim(), keep));

  EnsembleRun run;
  const auto spread = [&]() {
    // max pairwise Euclidean distance among live current states
    double best = 0.0;
    if (sys.state_dim() == 1) {
      double lo = kInf, hi = -kInf;
      for (int i = 0; i < M; ++i)
        if (alive[static_cast<std::size_t>(i)]) {
          lo = std::min(lo, state[static_cast<std::size_t>(i)][0]);
          hi = std::max(hi, state[static_cast<std::size_t>(i)][0]);
        }
      return hi > lo ? hi - lo : 0.0;
    }
    for (int i = 0; i < M; ++i) {
      if (!alive[static_cast<std::size_t>(i)]) continue;
      for (int j = i + 1; j < M; ++j) {
        if (!alive[static_cast<std::size_t>(j)]) continue;
        best = std::max(best, (state[static_cast<std::size_t>(i)] -
                               state[static_cast<std::size_t>(j)])
                                  .norm());
      }
    }
    return best;
  };

  if (want_curve) run.diameter_curve.push_back(spread());
  // iterate times t = -n+1 .. 0; u_t sits at input lag -t
  for (int step = 1; step <= n; ++step) {
    const Eigen::VectorXd u = input.at_lag(n - step);
    for (int i = 0; i < M; ++i) {
      auto& xi = state[static_cast<std::size_t>(i)];
      if (!alive[static_cast<std::size_t>(i)]) continue;
      try {
        xi = sys.f(xi, u);
      } catch (const NumericalError&) {
        alive[static_cast<std::size_t>(i)] = false;
        continue;
      }
      const int slot = keep - (n - step) - 1;  // window column for time t
      if (slot >= 0) tails[static_cast<std::size_t>(i)].col(slot) = xi;
    }
    if (want_curve) run.diameter_curve.push_back(spread());
  }
  // keep == horizon+1: the stored window also covers the initial state
  if (keep > n) {
    for (int i = 0; i < M; ++i)
      if (alive[static_cast<std::size_t>(i)])
        tails[static_cast<std::size_t>(i)].col(0) = inits[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < M; ++i) {
    if (!alive[static_cast<std::size_t>(i)]) {
      ++run.diverged;
      continue;
    }
    Window w(sys.state_dim(), keep);
    w.values() = tails[static_cast<std::size_t>(i)];
    run.members.push_back(std::move(w));
    run.member_ids.push_back(i);
  }
  return run;
}

namespace {

SolutionFiber cluster_run(const EnsembleRun& run, const PullbackConfig& cfg) {
  SolutionFiber fiber;
  fiber.diverged = run.diverged;
  fiber.horizon = cfg.horizon;
  const int m = static_cast<int>(run.members.size());
  if (m == 0) {
    fiber.resolved = false;
    return fiber;
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      d(i, j) = d(j, i) = seq::dist(run.members[static_cast<std::size_t>(i)],
                                    run.members[static_cast<std::size_t>(j)],
                                    cfg.metric, cfg.metric_p);
  DisjointSet ds(m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      if (d(i, j) <= cfg.cluster_tol) ds.unite(i, j);

  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < m; ++i) groups[ds.find(i)].push_back(i);

  struct Cluster {
    Window rep;
    std::vector<int> members;
    double diameter;
  };
  std::vector<Cluster> clusters;
  for (auto& [root, idxs] : groups) {
    double diameter = 0.0;
    for (std::size_t a = 0; a < idxs.size(); ++a)
      for (std::size_t b = a + 1; b < idxs.size(); ++b)
        diameter = std::max(diameter, d(idxs[a], idxs[b]));
    // medoid representative: an actual trajectory, so pullback consistency
    // (re-running it forward reproduces it) is meaningful for nonlinear f
    int best = idxs.front();
    double best_sum = kInf;
    for (int i : idxs) {
      double s = 0.0;
      for (int j : idxs) s += d(i, j);
      if (s < best_sum - 1e-15 ||
          (std::abs(s - best_sum) <= 1e-15 &&
           window_less(run.members[static_cast<std::size_t>(i)],
                       run.members[static_cast<std::size_t>(best)]))) {
        best_sum = s;
        best = i;
      }
    }
    clusters.push_back(Cluster{run.members[static_cast<std::size_t>(best)], idxs, diameter});
  }
  std::sort(clusters.begin(), clusters.end(),
            [](const Cluster& a, const Cluster& b) { return window_less(a.rep, b.rep); });

  fiber.membership.assign(static_cast<std::size_t>(m), -1);
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    fiber.representatives.push_back(clusters[c].rep);
    fiber.diameters.push_back(clusters[c].diameter);
    fiber.max_diameter = std::max(fiber.max_diameter, clusters[c].diameter);
    for (int i : clusters[c].members)
      fiber.membership[static_cast<std::size_t>(i)] = static_cast<int>(c);
  }
  fiber.resolved = fiber.max_diameter <= cfg.cluster_tol;
  return fiber;
}

}  // namespace

SolutionFiber solution_fibers(const SystemInstance& sys, const Window& input,
                              const PullbackConfig& cfg) {
  const EnsembleRun run = pullback_ensemble(sys, input, cfg, /*want_curve=*/false);
  return cluster_run(run, cfg);
}

EspReport esp_check(const SystemInstance& sys, const Window& input,
                    const PullbackConfig& cfg) {
  const EnsembleRun run = pullback_ensemble(sys, input, cfg, /*want_curve=*/true);
  const SolutionFiber fiber = cluster_run(run, cfg);
  EspReport rep;
  rep.diameter_curve = run.diameter_curve;
  rep.diverged = run.diverged;
  rep.clusters = static_cast<int>(fiber.representatives.size());
  for (std::size_t i = 0; i + 1 < run.diameter_curve.size(); ++i)
    if (run.diameter_curve[i + 1] > run.diameter_curve[i] + 1e-15)
      rep.curve_monotone = false;
  double final_diam = 0.0;
  for (std::size_t i = 0; i < run.members.size(); ++i)
    for (std::size_t j = i + 1; j < run.members.size(); ++j)
      final_diam = std::max(final_diam, seq::dist(run.members[i], run.members[j],
                                                  cfg.metric, cfg.metric_p));
  rep.final_diameter = final_diam;
  rep.holds = fiber.resolved && run.diverged == 0 && rep.clusters == 1 &&
              final_diam < cfg.cluster_tol;
  return rep;
}

EchoIndexReport echo_index(const SystemInstance& sys, const Window& input,
                           const PullbackConfig& cfg) {
  EchoIndexReport rep;
  rep.fiber = solution_fibers(sys, input, cfg);
  rep.index = static_cast<int>(rep.fiber.representatives.size());
  rep.diameters = rep.fiber.diameters;
  rep.resolved = rep.fiber.resolved;

  PullbackConfig refined = cfg;
  refined.ensemble = 2 * cfg.ensemble;
  refined.horizon = 2 * cfg.horizon;
  if (input.len() < refined.horizon) refined.horizon = input.len();
  const SolutionFiber fine = solution_fibers(sys, input, refined);
  rep.refined_index = static_cast<int>(fine.representatives.size());
  rep.stable = rep.resolved && fine.resolved && rep.refined_index == rep.index;
  return rep;
}

namespace {

double hausdorff(const std::vector<Window>& a, const std::vector<Window>& b,
                 const seq::WeightSeq& metric, double p) {
  if (a.empty() || b.empty())
    throw NumericalError("fmp_probe: empty representative set");
  double worst = 0.0;
  const auto one_sided = [&](const std::vector<Window>& from,
                             const std::vector<Window>& to) {
    for (const auto& w : from) {
      double nearest = kInf;
      for (const auto& v : to) nearest = std::min(nearest, seq::dist(w, v, metric, p));
      worst = std::max(worst, nearest);
    }
  };
  one_sided(a, b);
  one_sided(b, a);
  return worst;
}

}  // namespace

FmpReport fmp_probe(const SystemInstance& sys, const Window& input,
                    const std::vector<int>& lags, const std::vector<double>& deltas,
                    const PullbackConfig& cfg) {
  require(!lags.empty() && !deltas.empty(), "fmp_probe: need lags and deltas");
  for (int lag : lags)
    require(lag >= 0 && lag < input.len(), "fmp_probe: lag outside input window");
  const SolutionFiber base = solution_fibers(sys, input, cfg);
  if (!base.resolved) throw NumericalError("fmp_probe: unresolved base fiber");
  FmpReport rep;
  for (int lag : lags) {
    for (double delta : deltas) {
      Window perturbed = input;
      Eigen::VectorXd v = perturbed.at_lag(lag);
      v[0] += delta;
      perturbed.set_at_lag(lag, v);
      const SolutionFiber moved = solution_fibers(sys, perturbed, cfg);
      if (!moved.resolved) throw NumericalError("fmp_probe: unresolved perturbed fiber");
      rep.table.push_back(FmpEntry{
          lag, delta,
          hausdorff(base.representatives, moved.representatives, cfg.metric,
                    cfg.metric_p)});
    }
  }
  return rep;
}

ScanReport generic_constancy_scan(const SystemInstance& sys,
                                  const std::function<Window(int)>& input_gen,
                                  int n_inputs, const PullbackConfig& cfg) {
  require(n_inputs >= 1, "scan: need at least one input");
  ScanReport rep;
  rep.total = n_inputs;
  for (int i = 0; i < n_inputs; ++i) {
    const Window input = input_gen(i);
    const EchoIndexReport idx = echo_index(sys, input, cfg);
    if (!idx.resolved) {
      ++rep.unresolved;
      continue;
    }
    if (!idx.stable) ++rep.unstable;
    ++rep.histogram[idx.index];
  }
  return rep;
}

std::vector<Eigen::VectorXd> forward_trajectory(const SystemInstance& sys,
                                                const WindowWithFuture& input,
                                                const Eigen::VectorXd& x_init,
                                                int t_steps) {
  require(t_steps >= 1, "forward_trajectory: need t_steps >= 1");
  require(input.n_future() >= t_steps,
          "forward_trajectory: not enough future inputs");
  std::vector<Eigen::VectorXd> path;
  path.reserve(static_cast<std::size_t>(t_steps));
  Eigen::VectorXd x = x_init;
  for (int t = 0; t < t_steps; ++t) {
    x = sys.f(x, input.future[static_cast<std::size_t>(t)]);
    path.push_back(x);
  }
  return path;
}

double spectral_radius_estimate(const Eigen::MatrixXd& A) {
  require(A.rows() == A.cols(), "spectral_radius_estimate: A must be square");
  const int n = static_cast<int>(A.rows());
  if (n == 0) return 0.0;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(n).normalized();
  // deterministic tilt so that v is not orthogonal to the dominant subspace
  for (int i = 0; i < n; ++i) v[i] += 1e-3 * static_cast<double>(i + 1) / n;
  v.normalize();
  const int iters = 400;
  const int avg_window = 120;
  double log_acc = 0.0;
  int counted = 0;
  for (int k = 0; k < iters; ++k) {
    Eigen::VectorXd w = A * v;
    const double r = w.norm();
    if (r < 1e-290) return 0.0;  // (numerically) nilpotent
    if (k >= iters - avg_window) {
      log_acc += std::log(r);
      ++counted;
    }
    v = w / r;
  }
  return std::exp(log_acc / counted);
}

Window linear_closed_form(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                          const Window& input, int out_len) {
  require(A.rows() == A.cols(), "linear_closed_form: A must be square");
  require(B.rows() == A.rows(), "linear_closed_form: B row count mismatch");
  require(input.dim() == static_cast<int>(B.cols()),
          "linear_closed_form: input dimension mismatch");
  require(out_len >= 1 && out_len <= input.len(),
          "linear_closed_form: bad output length");
  const double rho = spectral_radius_estimate(A);
  if (!(rho < 1.0))
    throw ValidationError("linear_closed_form: spectral radius estimate >= 1");

  double umax = 0.0;
  for (int k = 0; k < input.len(); ++k)
    umax = std::max(umax, input.at_lag(k).norm());
  const double bnorm = B.norm();

  // series terms M_k = A^k, truncated when the geometric tail bound
  // ||M_k|| ||B|| umax / (1 - rho) falls below 1e-12
  std::vector<Eigen::MatrixXd> powers;
  powers.push_back(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
  const double tail_target = 1e-12 * std::max(1.0, 1.0 - rho);
  const int k_available = input.len() - out_len;
  int K = 0;
  if (umax > 0.0 && bnorm > 0.0) {
    while (powers.back().norm() * bnorm * umax >= tail_target) {
      if (static_cast<int>(powers.size()) - 1 >= k_available)
        throw ValidationError(
            "linear_closed_form: input window too short for the tail bound");
      if (powers.size() > 100000)
        throw NumericalError("linear_closed_form: series failed to converge");
      powers.push_back(powers.back() * A);
    }
    K = static_cast<int>(powers.size()) - 1;
  }

  Window out(static_cast<int>(A.rows()), out_len);
  for (int lag = 0; lag < out_len; ++lag) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(A.rows());
    for (int k = 0; k <= K; ++k) x += powers[static_cast<std::size_t>(k)] * (B * input.at_lag(lag + k));
    out.set_at_lag(lag, x);
  }
  return out;
}

}  // namespace echolab::pullback
