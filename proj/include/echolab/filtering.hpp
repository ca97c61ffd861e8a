// Bayesian state inference for state-space systems: Kalman recursions for
// linear-Gaussian models, input augmentation for AR(1) inputs, a bootstrap
// particle filter driven by conditional input sampling, and an exact
// grid-based oracle for scalar nonlinear models.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "echolab/causality.hpp"
#include "echolab/common.hpp"
#include "echolab/measure.hpp"
#include "echolab/system.hpp"

namespace echolab::filtering {

// Gaussian posterior over a state vector.
struct GaussianBelief {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  // cov must be symmetric to 1e-12 and have eigenvalues >= -1e-10
  void validate() const;
  nlohmann::json to_json() const;
};

// Weighted particle cloud over augmented (state, input) pairs.
struct ParticleCloud {
  Eigen::MatrixXd states;   // dim_x x N
  Eigen::MatrixXd inputs;   // dim_u x N
  Eigen::VectorXd weights;  // sums to 1

  double ess() const;
  Eigen::VectorXd state_mean() const;
  Eigen::VectorXd state_var_diag() const;
};

// Time-ordered filtering output. Gaussian filters fill `beliefs`; the
// particle filter fills `clouds` and `ess`. Both accumulate the observation
// log-likelihood (left at zero when an exact-limit flag disables it).
struct FilterTrace {
  std::string method;
  std::vector<double> times;
  std::vector<GaussianBelief> beliefs;
  std::vector<ParticleCloud> clouds;
  std::vector<double> ess;
  double log_likelihood = 0.0;
  bool has_log_likelihood = true;

  int steps() const;
  // posterior state mean / covariance diagonal at step i (either backend)
  Eigen::VectorXd mean_at(int i) const;
  Eigen::VectorXd var_diag_at(int i) const;

  // rows: time, mean..., cov diag..., ess (empty for gaussian traces)
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// Exact-limit switches for the Kalman update.
//   skip_update: ignore observations entirely (infinite observation noise);
//   perfect_obs: treat observations as noise-free (zero observation noise).
// Either flag disables log-likelihood accumulation.
struct KalmanOptions {
  bool skip_update = false;
  bool perfect_obs = false;
};

// Linear-Gaussian filter for x_t = A x_{t-1} + B u_t, u_t ~ N(0, Q) iid,
// y_t = W x_t + v_t, v_t ~ N(0, R). Observations are columns of `obs`.
FilterTrace kalman_filter(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                          const Eigen::MatrixXd& W, const Eigen::MatrixXd& Q,
                          const Eigen::MatrixXd& R, const Eigen::MatrixXd& obs,
                          const GaussianBelief& prior,
                          const KalmanOptions& opt = {});

// Same model with AR(1) inputs u_t = a_u u_{t-1} + e_t, e_t ~ N(0, Q_u):
// runs kalman_filter on the augmented state (x, u) with block dynamics
// [[A, B a_u], [0, a_u I]] and noise entering through [B; I]. The returned
// beliefs cover the augmented state; the leading block is x.
FilterTrace augmented_kalman(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                             const Eigen::MatrixXd& W, double a_u,
                             const Eigen::MatrixXd& Q_u, const Eigen::MatrixXd& R,
                             const Eigen::MatrixXd& obs,
                             const GaussianBelief& prior,
                             const KalmanOptions& opt = {});

// Observation model for the particle filter: y = h(x) + N(0, sigma^2 I).
struct ObsModel {
  sys::Readout h;
  double sigma = 1.0;
};

struct ParticleFilterOptions {
  // resample when ESS drops below resample_fraction * N
  double resample_fraction = 0.5;
  // defaults to a standard normal over the state
  stoch::StateInitLaw init;
  // input history kept per particle for conditional propagation
  int history_len = 8;

  ParticleFilterOptions() {
    init.kind = stoch::StateInitLaw::Kind::normal;
    init.sd = 1.0;
  }
};

// Bootstrap filter over augmented particles (x, u): inputs advance through
// causality::conditional_future_sampler, weights multiply the Gaussian
// observation likelihood, systematic resampling triggers at low ESS.
// Throws NumericalError when the weights collapse (ESS < 2).
FilterTrace bootstrap_particle_filter(const sys::SystemInstance& system,
                                      const stoch::InputLawSpec& spec,
                                      const ObsModel& obs_model,
                                      const Eigen::MatrixXd& obs, int n_particles,
                                      std::uint64_t seed,
                                      const ParticleFilterOptions& opt = {});

// Scalar augmented grid (state x input). input_trans rows are conditional
// distributions over the next input grid point; input_init is the prior.
struct GridSpec {
  Eigen::VectorXd state_grid;
  Eigen::VectorXd input_grid;
  Eigen::MatrixXd input_trans;
  Eigen::VectorXd input_init;
  Eigen::VectorXd state_init;  // prior over state grid

  void validate() const;
};

// Exact discrete posterior from the HMM forward recursion on the augmented
// chain: the state moves deterministically by `system` (snapped to the
// nearest grid point), the input moves by input_trans, and obs_lik scores
// each observation column against a grid point. Caps at 10^4 grid cells.
struct GridPosterior {
  std::vector<Eigen::MatrixXd> joint;  // per step, state_grid x input_grid
  std::vector<double> times;
  Eigen::VectorXd grid_points;
  double log_likelihood = 0.0;

  Eigen::VectorXd state_marginal(int i) const;
  double state_mean(int i) const;
  double state_var(int i) const;
};

GridPosterior grid_bayes_oracle(
    const sys::SystemInstance& system, const GridSpec& grid,
    const std::function<double(const Eigen::VectorXd& y, double x)>& obs_lik,
    const Eigen::MatrixXd& obs);

// CSV bridge: rows "time,y1,...,yd". Returns observations as columns plus
// the time stamps. Emission mirrors the trace format.
struct ObservationSeries {
  std::vector<double> times;
  Eigen::MatrixXd values;  // dim_y x T
};

ObservationSeries observations_from_csv(const std::string& text);
std::string observations_to_csv(const ObservationSeries& series);

}  // namespace echolab::filtering
