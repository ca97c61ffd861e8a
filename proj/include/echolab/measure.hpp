// Particle measures over (state window, input window) pairs: input-law
// sampling, measure-level pullback of the state equation, push-forward
// dynamics, and Wasserstein diagnostics between particle clouds.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "echolab/pullback.hpp"
#include "echolab/system.hpp"
#include "echolab/window.hpp"

namespace echolab::stoch {

using seq::Window;
using seq::WindowWithFuture;
using sys::SystemInstance;

struct Particle {
  Window state;  // may be empty for input-only measures
  WindowWithFuture input;
};

struct ParticleMeasure {
  std::vector<Particle> particles;
  Eigen::VectorXd weights;  // sums to 1
  int horizon = 0;          // input window length used at construction
  std::uint64_t seed = 0;
  int diverged = 0;  // particles dropped for non-finite states

  int size() const { return static_cast<int>(particles.size()); }
  bool has_states() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ParticleMeasure from_json(const nlohmann::json& j);
  std::string to_csv() const;  // weight, state entries, input entries per row
};

struct InputLawSpec {
  enum class Kind { iid, markov_chain, gaussian_ar1, periodic };
  enum class Base { dirac, uniform, normal, atoms };

  Kind kind = Kind::iid;

  // iid fields
  Base base = Base::dirac;
  Eigen::VectorXd value;  // dirac point / normal mean
  Eigen::VectorXd lo, hi;
  Eigen::VectorXd sd;
  std::vector<Eigen::VectorXd> atom_values;
  std::vector<double> atom_probs;

  // markov_chain fields
  std::vector<Eigen::VectorXd> alphabet;
  Eigen::MatrixXd transition;      // row-stochastic
  std::vector<double> init_probs;  // empty means stationary

  // gaussian_ar1 fields (scalar law)
  double ar_coeff = 0.0;
  double ar_noise_sd = 1.0;

  // periodic fields: one cycle of deterministic values, a weight per phase,
  // optional iid gaussian jitter on every entry
  std::vector<Eigen::VectorXd> cycle;
  std::vector<double> phase_weights;
  double cycle_noise_sd = 0.0;

  int dim() const;
  int period() const { return static_cast<int>(cycle.size()); }
  void validate() const;

  nlohmann::json to_json() const;
  static InputLawSpec from_json(const nlohmann::json& j);

  static InputLawSpec iid_dirac(const Eigen::VectorXd& v);
  static InputLawSpec iid_uniform(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
  static InputLawSpec iid_normal(const Eigen::VectorXd& mean, const Eigen::VectorXd& sd);
  static InputLawSpec iid_atoms(std::vector<Eigen::VectorXd> values,
                                std::vector<double> probs);
  static InputLawSpec markov(std::vector<Eigen::VectorXd> alphabet,
                             Eigen::MatrixXd transition,
                             std::vector<double> init = {});
  static InputLawSpec ar1(double a, double noise_sd);
  static InputLawSpec periodic_cycle(std::vector<Eigen::VectorXd> cycle,
                                     std::vector<double> phase_weights,
                                     double noise_sd = 0.0);

  // stationary law of the markov_chain kind (power iteration)
  std::vector<double> stationary() const;

  // one joint trajectory of total_len values, oldest first; the entry at
  // position anchor_pos is time 0 (fixes the phase of periodic laws)
  std::vector<Eigen::VectorXd> sample_path(int total_len, int anchor_pos,
                                           rng::Rng& r) const;
};

// N weighted input trajectories (input-only particles), deterministic given seed
ParticleMeasure sample_input_law(const InputLawSpec& spec, int len, int n_future,
                                 int N, std::uint64_t seed);

// one-step push-forward: phi applied particle-wise
ParticleMeasure pushforward_phi_star(const SystemInstance& sys,
                                     const ParticleMeasure& mu);

struct StateInitLaw {
  enum class Kind { uniform_box, dirac, normal };
  // uniform_box is realized by the deterministic low-discrepancy grid
  // (corners, then Halton starting at the box midpoint); dirac and normal
  // draw from the per-particle seed stream
  Kind kind = Kind::uniform_box;
  std::vector<std::pair<double, double>> box;  // empty means cfg init_box
  Eigen::VectorXd value;                       // dirac point / normal mean
  double sd = 1.0;

  nlohmann::json to_json() const;
  static StateInitLaw from_json(const nlohmann::json& j);
};

// finite-horizon measure-level pullback: initial states drawn from the init
// law at time -horizon, inputs drawn from the spec, state equation iterated
// to time 0. Every particle is a genuine solution segment.
ParticleMeasure pullback_measure(const SystemInstance& sys, const InputLawSpec& spec,
                                 const pullback::PullbackConfig& cfg,
                                 const StateInitLaw& init, int N, int n_future = 0);

// ground metric and transport settings for measure comparisons
struct MeasureMetric {
  seq::WeightSeq weights = seq::WeightSeq::geometric(0.5);
  double metric_p = kInf;  // norm order inside the window metric
  double order = 1.0;      // Wasserstein order
  std::size_t exact_cap = 1000000;  // max atom-pair count for exact transport
  int sliced_projections = 64;      // past the cap: sliced approximation
  std::uint64_t sliced_seed = 0;
};

// W_p between particle clouds; ground distance is the sum of the state and
// input window metrics over the selected parts. Windows are truncated to the
// shorter common length on each part. Beyond the exact cap a sliced
// approximation runs on the weighted l2 embedding (geometric weights only).
double measure_dist(const ParticleMeasure& a, const ParticleMeasure& b,
                    const MeasureMetric& metric, bool use_states = true,
                    bool use_inputs = true);

struct SolutionCheck {
  bool is_solution = false;
  double max_residual = 0.0;
};

// a.s.-level check: per-particle state-equation residuals
SolutionCheck check_stochastic_solution(const SystemInstance& sys,
                                        const ParticleMeasure& mu,
                                        double tol = 1e-10);

// law-level check: exact transport distance between the one-step image cloud
// of the extended map and the identity embedding on the common window
double fixedpoint_residual(const SystemInstance& sys, const ParticleMeasure& mu,
                           const MeasureMetric& metric);

// inputs sampled from the law, each solved deterministically under a verified
// unique-solution check; throws when any sampled input fails it
ParticleMeasure pushforward_solution_map(const SystemInstance& sys,
                                         const InputLawSpec& spec,
                                         const pullback::PullbackConfig& cfg, int N,
                                         int n_future = 0);

struct PeriodicityReport {
  double distance = 0.0;                // W(T^k mu, mu) on the overlap
  std::map<int, double> divisor_distances;  // proper divisors of k
};

PeriodicityReport periodicity_check(const ParticleMeasure& mu, int k,
                                    const MeasureMetric& metric);

struct StochFmpEntry {
  double input_dist = 0.0;
  double solution_dist = 0.0;  // state marginals
  double pair_dist = 0.0;      // joint (state, input) clouds
  double ratio = 0.0;          // solution_dist / input_dist
};

struct StochFmpReport {
  std::vector<StochFmpEntry> table;  // one entry per perturbed spec
};

// modulus-of-continuity probe of the input-law -> solution-law assignment,
// common random numbers across specs
StochFmpReport stoch_fmp_probe(const SystemInstance& sys, const InputLawSpec& base,
                               const std::vector<InputLawSpec>& perturbed,
                               const pullback::PullbackConfig& cfg,
                               const MeasureMetric& metric, int N);

struct Envelope {
  double mean = 0.0;
  double sd = 0.0;
  double hi = 0.0;       // mean + 3 sd
  double max_seen = 0.0;
  int reps = 0;
};

// calibrates a two-sample tolerance: repeated distances between independent
// draws of the same construction
Envelope two_sample_envelope(
    const std::function<double(std::uint64_t, std::uint64_t)>& dist_between_draws,
    int reps, std::uint64_t seed);

// The law-vs-almost-sure gap exhibit: iid standard-normal state windows paired
// with an independent iid standard-normal input law. Under f(x,u) = x (linear
// A=[[1]], B=[[0]]) the one-step image law equals the identity law, yet no
// realization satisfies the state equation.
ParticleMeasure product_counterexample(int N, int len, std::uint64_t seed);

}  // namespace echolab::stoch
