// Causal couplings between state and input histories: conditional future
// samplers per input-law kind, causal extension of past-measures, permutation-
// calibrated conditional-independence diagnostics, and Markov-order tests on
// augmented trajectories.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "echolab/measure.hpp"

namespace echolab::causality {

using seq::Window;
using stoch::InputLawSpec;
using stoch::ParticleMeasure;

// ---- conditional sampling ----

struct ConditionalDraw {
  std::vector<Eigen::VectorXd> future;  // future[0] is time +1
  // periodic laws only: the past matched more than one phase, so the phase
  // was drawn from the phase weights restricted to the matching set
  bool phase_ambiguous = false;
};

// Sample n_future inputs from the conditional law of the future given the
// past window. iid laws draw fresh values; markov chains continue from the
// symbol nearest the last entry; gaussian_ar1 recurses from the last value;
// periodic laws identify the phase by least squares over the whole window.
// Deterministic given (spec, past, seed).
ConditionalDraw conditional_future_sampler(const InputLawSpec& spec,
                                           const Window& past, int n_future,
                                           std::uint64_t seed);

// spec bundled with its conditional map; draw() delegates to the free function
class ConditionalSampler {
 public:
  explicit ConditionalSampler(InputLawSpec spec);
  const InputLawSpec& spec() const { return spec_; }
  ConditionalDraw draw(const Window& past, int n_future, std::uint64_t seed) const;

 private:
  InputLawSpec spec_;
};

// ---- causal extension ----

struct CausalExtensionOptions {
  bool check_marginal = true;  // two-sample check of the input marginal
  int check_cap = 256;         // particles entering the check
  int check_reps = 2;          // calibration pairs for the envelope
  double hard_factor = 3.0;    // error beyond this multiple of the envelope
  stoch::MeasureMetric metric;
};

struct CausalExtensionResult {
  ParticleMeasure measure;       // futures appended, pasts untouched
  double marginal_dist = 0.0;    // input-marginal distance to fresh draws
  double marginal_hi = 0.0;      // calibration envelope
  bool marginal_warning = false;
  int ambiguous_phases = 0;

  nlohmann::json to_json() const;
};

// Append n_future conditionally sampled inputs to every particle, states
// untouched. Dropping the appended futures recovers mu_minus bit-exactly,
// and the extension is independent of the states given the input pasts.
CausalExtensionResult causal_extension(const ParticleMeasure& mu_minus,
                                       const InputLawSpec& spec, int n_future,
                                       std::uint64_t seed,
                                       const CausalExtensionOptions& opt = {});

// copy with every particle's future inputs folded onto the right end of its
// past window (for metric comparisons, which read past windows only)
ParticleMeasure fold_future_into_past(const ParticleMeasure& mu);

// ---- conditional mutual information ----

enum class CmiEstimator { discrete, gaussian, knn };

std::string to_string(CmiEstimator e);
CmiEstimator cmi_estimator_from_string(const std::string& s);

// conditioning order that makes the truncation exact: 0 for iid, 1 for
// markov_chain and gaussian_ar1, period-1 for periodic laws
int default_cond_order(const InputLawSpec& spec);

struct CmiOptions {
  CmiEstimator estimator = CmiEstimator::gaussian;
  int cond_order = 1;       // input lags conditioned on (0 for iid laws)
  int n_permutations = 200;
  double alpha = 0.05;      // per-test level; the sweep divides by lag count
  int knn_k = 5;
  double quantize_tol = 1e-9;  // symbol matching for the discrete estimator
  std::uint64_t seed = 0;
};

struct CmiEntry {
  int lag = -1;       // negative time t of the split
  double cmi = 0.0;   // nats, floored at zero
  double threshold = 0.0;
  bool below = true;
};

struct CmiReport {
  std::vector<CmiEntry> lags;
  std::string estimator;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  int cond_order = 1;
  bool causal = true;  // every lag below its threshold

  nlohmann::json to_json() const;
};

// Estimate I(state at time t ; inputs at times t+1..0 | cond_order inputs at
// times <= t) across the particle cloud, with a permutation-null threshold at
// level opt.alpha (X permuted within conditioning strata).
CmiEntry cmi_test(const ParticleMeasure& mu, int lag, const CmiOptions& opt);

// cmi_test swept over every lag the windows cover, Bonferroni-corrected
CmiReport is_causal_report(const ParticleMeasure& mu, const CmiOptions& opt);

// ---- estimator cores (data columns are samples) ----

// exact weighted plug-in CMI over symbol triples, in nats
double discrete_cmi(const std::vector<int>& x, const std::vector<int>& y,
                    const std::vector<int>& z, const Eigen::VectorXd& w);

// Gaussian CMI from log-determinants of the pooled covariance; Z may have
// zero rows for plain mutual information
double gaussian_cmi(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                    const Eigen::MatrixXd& Z, const Eigen::VectorXd& w);

// Frenzel-Pompe k-nearest-neighbor CMI with the max norm (KSG for empty Z)
double knn_cmi(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
               const Eigen::MatrixXd& Z, int k);

// columns mapped to symbol ids by rounding entries to the tol grid
std::vector<int> symbolize(const Eigen::MatrixXd& data, double tol);

// ---- Markov augmentation ----

struct Trajectory {
  Eigen::MatrixXd states;  // dim_x x T, column t holds the state after input t
  Eigen::MatrixXd inputs;  // dim_u x T
};

// forward simulation from x0 under one input path per trajectory
std::vector<Trajectory> simulate_trajectories(const sys::SystemInstance& sys,
                                              const InputLawSpec& spec, int len,
                                              int n_traj, std::uint64_t seed,
                                              const Eigen::VectorXd& x0);

struct MarkovOptions {
  int bins = 2;          // bins per coordinate
  bool gap_edges = true; // edges at the largest value gaps (exact for discrete
                         // states); false bins by quantiles instead
  int n_permutations = 200;
  double alpha = 0.05;
  int burn_in = 20;
  std::uint64_t seed = 0;
};

struct MarkovOrderEntry {
  int order = 1;
  double cmi_augmented = 0.0;
  double thr_augmented = 0.0;
  bool pass_augmented = true;
  double cmi_raw = 0.0;
  double thr_raw = 0.0;
  bool pass_raw = true;
};

struct MarkovReport {
  std::vector<MarkovOrderEntry> orders;
  int bins = 2;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Quantize trajectories and test, for each order m <= max_order, whether the
// chain forgets its past beyond m steps: I(S_t ; S_{t-m-1} | S_{t-1..t-m})
// with a within-strata permutation threshold. Runs once on augmented
// (state, input) symbols and once on the raw state symbols.
MarkovReport markov_augmentation_test(const std::vector<Trajectory>& trajs,
                                      int max_order, const MarkovOptions& opt = {});

}  // namespace echolab::causality
