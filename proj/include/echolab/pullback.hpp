// Deterministic solution sets as pullback ensembles: ESP checks, echo index
// via clustering, fading-memory probes, forward experiments, and the linear
// closed-form oracle.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "echolab/system.hpp"

namespace echolab::pullback {

using seq::Window;
using seq::WindowWithFuture;
using sys::SystemInstance;

struct PullbackConfig {
  int horizon = 60;    // steps of pullback iteration
  int ensemble = 64;   // initial states
  // per-coordinate (lo, hi); a single entry is broadcast to every coordinate
  std::vector<std::pair<double, double>> init_box = {{-1.0, 1.0}};
  double cluster_tol = 1e-4;
  std::uint64_t seed = 0;
  seq::WeightSeq metric = seq::WeightSeq::geometric(0.5);
  double metric_p = kInf;
  int keep_len = 0;  // stored window length; 0 means min(horizon+1, 64)

  void validate(int state_dim) const;
  std::vector<std::pair<double, double>> box_for(int state_dim) const;
  int stored_len() const;
};

// Low-discrepancy initial conditions: box corners first, then Halton points
// (index starting at 1, so the base-2 axis begins at the box midpoint).
// Independent of the seed by design; the seed drives input sampling only.
std::vector<Eigen::VectorXd> init_ensemble(const PullbackConfig& cfg, int state_dim);

struct EnsembleRun {
  std::vector<Window> members;  // survivors, stored_len() window each
  std::vector<int> member_ids;  // original ensemble indices of survivors
  int diverged = 0;
  // per-step max pairwise Euclidean distance among surviving current states;
  // entry 0 is the initial spread, entry t the spread after t steps
  std::vector<double> diameter_curve;
};

EnsembleRun pullback_ensemble(const SystemInstance& sys, const Window& input,
                              const PullbackConfig& cfg, bool want_curve = true);

struct SolutionFiber {
  std::vector<Window> representatives;  // cluster medoids, lexicographic order
  std::vector<int> membership;          // survivor -> representative index
  std::vector<double> diameters;        // per cluster (window metric)
  double max_diameter = 0.0;
  bool resolved = true;  // false when a cluster's diameter exceeds cluster_tol
  int diverged = 0;
  int horizon = 0;
};

SolutionFiber solution_fibers(const SystemInstance& sys, const Window& input,
                              const PullbackConfig& cfg);

struct EspReport {
  bool holds = false;
  double final_diameter = 0.0;  // window metric over the surviving ensemble
  std::vector<double> diameter_curve;
  bool curve_monotone = true;  // reported, never assumed
  int diverged = 0;
  int clusters = 0;
};

EspReport esp_check(const SystemInstance& sys, const Window& input,
                    const PullbackConfig& cfg);

struct EchoIndexReport {
  int index = 0;
  bool stable = false;  // same index under (2M, 2n), both runs resolved
  std::vector<double> diameters;
  bool resolved = false;
  int refined_index = 0;
  SolutionFiber fiber;
};

EchoIndexReport echo_index(const SystemInstance& sys, const Window& input,
                           const PullbackConfig& cfg);

struct FmpEntry {
  int lag = 0;
  double delta = 0.0;
  double response = 0.0;  // Hausdorff distance between representative sets
};

struct FmpReport {
  std::vector<FmpEntry> table;
};

// Perturbs input component 0 at each requested lag by each delta and measures
// the fiber displacement in the configured window metric.
FmpReport fmp_probe(const SystemInstance& sys, const Window& input,
                    const std::vector<int>& lags, const std::vector<double>& deltas,
                    const PullbackConfig& cfg);

struct ScanReport {
  std::map<int, int> histogram;  // stable index -> count
  int unresolved = 0;
  int unstable = 0;
  int total = 0;
};

ScanReport generic_constancy_scan(const SystemInstance& sys,
                                  const std::function<Window(int)>& input_gen,
                                  int n_inputs, const PullbackConfig& cfg);

// forward iteration x_1..x_T from x_init consuming the input's future entries
std::vector<Eigen::VectorXd> forward_trajectory(const SystemInstance& sys,
                                                const WindowWithFuture& input,
                                                const Eigen::VectorXd& x_init,
                                                int t_steps);

// |largest eigenvalue| via normalized power iteration (Gelfand-style average)
double spectral_radius_estimate(const Eigen::MatrixXd& A);

// x_t = sum_{k>=0} A^k B u_{t-k}, truncated once the tail bound drops below
// 1e-12; requires rho(A) < 1 and an input window long enough for the bound
Window linear_closed_form(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                          const Window& input, int out_len);

}  // namespace echolab::pullback
