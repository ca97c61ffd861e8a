#include "echolab/filtering.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "echolab/report.hpp"
#include "echolab/window.hpp"

namespace echolab::filtering {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& P) {
  return 0.5 * (P + P.transpose());
}

double logdet_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

constexpr double kLog2Pi = 1.8378770664093453;

Eigen::VectorXd draw_pf_init(const stoch::StateInitLaw& law, int dim, rng::Rng& r) {
  using Kind = stoch::StateInitLaw::Kind;
  switch (law.kind) {
    case Kind::dirac:
      require(law.value.size() == dim, "particle init: value dimension mismatch");
      return law.value;
    case Kind::normal: {
      Eigen::VectorXd mean = law.value.size() == 0
                                 ? Eigen::VectorXd::Zero(dim).eval()
                                 : law.value;
      require(mean.size() == dim, "particle init: value dimension mismatch");
      Eigen::VectorXd x(dim);
      for (int i = 0; i < dim; ++i) x(i) = mean(i) + law.sd * r.normal();
      return x;
    }
    case Kind::uniform_box: {
      require(static_cast<int>(law.box.size()) == dim,
              "particle init: uniform_box needs one interval per coordinate");
      Eigen::VectorXd x(dim);
      for (int i = 0; i < dim; ++i) {
        const auto& [lo, hi] = law.box[static_cast<std::size_t>(i)];
        require(lo <= hi, "particle init: box lo > hi");
        x(i) = r.uniform(lo, hi);
      }
      return x;
    }
  }
  throw ValidationError("particle init: unknown kind");
}

}  // namespace

void GaussianBelief::validate() const {
  require(mean.size() > 0, "belief: empty mean");
  require(cov.rows() == mean.size() && cov.cols() == mean.size(),
          "belief: covariance shape mismatch");
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw NumericalError("belief: covariance asymmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov,
                                                    Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-10 * scale)
    throw NumericalError("belief: covariance not positive semi-definite");
}

nlohmann::json GaussianBelief::to_json() const {
  nlohmann::json j;
  j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < cov.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < cov.cols(); ++c) row.push_back(cov(i, c));
    rows.push_back(row);
  }
  j["cov"] = rows;
  return j;
}

double ParticleCloud::ess() const {
  const double s2 = weights.squaredNorm();
  return s2 > 0.0 ? 1.0 / s2 : 0.0;
}

Eigen::VectorXd ParticleCloud::state_mean() const { return states * weights; }

Eigen::VectorXd ParticleCloud::state_var_diag() const {
  const Eigen::VectorXd m = state_mean();
  Eigen::VectorXd v = Eigen::VectorXd::Zero(states.rows());
  for (int i = 0; i < states.cols(); ++i)
    v += weights(i) * (states.col(i) - m).cwiseAbs2();
  return v;
}

int FilterTrace::steps() const {
  return static_cast<int>(beliefs.empty() ? clouds.size() : beliefs.size());
}

Eigen::VectorXd FilterTrace::mean_at(int i) const {
  if (!beliefs.empty()) return beliefs[static_cast<std::size_t>(i)].mean;
  return clouds[static_cast<std::size_t>(i)].state_mean();
}

Eigen::VectorXd FilterTrace::var_diag_at(int i) const {
  if (!beliefs.empty())
    return beliefs[static_cast<std::size_t>(i)].cov.diagonal();
  return clouds[static_cast<std::size_t>(i)].state_var_diag();
}

std::string FilterTrace::to_csv() const {
  std::string out;
  for (int i = 0; i < steps(); ++i) {
    out += report::format_double(times[static_cast<std::size_t>(i)]);
    const Eigen::VectorXd m = mean_at(i);
    const Eigen::VectorXd v = var_diag_at(i);
    for (int c = 0; c < m.size(); ++c) out += "," + report::format_double(m(c));
    for (int c = 0; c < v.size(); ++c) out += "," + report::format_double(v(c));
    out.push_back(',');
    if (!ess.empty()) out += report::format_double(ess[static_cast<std::size_t>(i)]);
    out.push_back('\n');
  }
  return out;
}

nlohmann::json FilterTrace::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["times"] = times;
  if (has_log_likelihood)
    j["log_likelihood"] = log_likelihood;
  else
    j["log_likelihood"] = nullptr;
  nlohmann::json steps_json = nlohmann::json::array();
  for (int i = 0; i < steps(); ++i) {
    nlohmann::json s;
    s["time"] = times[static_cast<std::size_t>(i)];
    if (!beliefs.empty()) {
      s["belief"] = beliefs[static_cast<std::size_t>(i)].to_json();
    } else {
      const Eigen::VectorXd m = mean_at(i);
      const Eigen::VectorXd v = var_diag_at(i);
      s["mean"] = std::vector<double>(m.data(), m.data() + m.size());
      s["var_diag"] = std::vector<double>(v.data(), v.data() + v.size());
      s["ess"] = ess[static_cast<std::size_t>(i)];
    }
    steps_json.push_back(s);
  }
  j["steps"] = steps_json;
  return j;
}

FilterTrace kalman_filter(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                          const Eigen::MatrixXd& W, const Eigen::MatrixXd& Q,
                          const Eigen::MatrixXd& R, const Eigen::MatrixXd& obs,
                          const GaussianBelief& prior, const KalmanOptions& opt) {
  const int nx = static_cast<int>(A.rows());
  const int ny = static_cast<int>(W.rows());
  require(A.cols() == nx, "kalman: A must be square");
  require(B.rows() == nx, "kalman: B row mismatch");
  require(Q.rows() == B.cols() && Q.cols() == B.cols(), "kalman: Q shape mismatch");
  require(W.cols() == nx, "kalman: W column mismatch");
  require(R.rows() == ny && R.cols() == ny, "kalman: R shape mismatch");
  require(obs.rows() == ny, "kalman: observation dimension mismatch");
  require(prior.mean.size() == nx, "kalman: prior dimension mismatch");
  require(!(opt.skip_update && opt.perfect_obs),
          "kalman: skip_update and perfect_obs are mutually exclusive");
  prior.validate();
  if (!opt.skip_update && !opt.perfect_obs) {
    Eigen::LLT<Eigen::MatrixXd> rl(symmetrized(R));
    require(rl.info() == Eigen::Success, "kalman: R must be positive definite");
  }

  const Eigen::MatrixXd noise = B * Q * B.transpose();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(nx, nx);

  FilterTrace trace;
  trace.method = "kalman";
  trace.has_log_likelihood = !opt.skip_update && !opt.perfect_obs;

  Eigen::VectorXd m = prior.mean;
  Eigen::MatrixXd P = symmetrized(prior.cov);
  for (int t = 0; t < obs.cols(); ++t) {
    m = A * m;
    P = symmetrized(A * P * A.transpose() + noise);

    if (!opt.skip_update) {
      const Eigen::VectorXd e = obs.col(t) - W * m;
      Eigen::MatrixXd K;
      if (opt.perfect_obs) {
        const Eigen::MatrixXd S = symmetrized(W * P * W.transpose());
        K = P * W.transpose() *
            S.completeOrthogonalDecomposition().pseudoInverse();
        const Eigen::MatrixXd IKW = I - K * W;
        P = symmetrized(IKW * P * IKW.transpose());
      } else {
        const Eigen::MatrixXd S = symmetrized(W * P * W.transpose() + R);
        Eigen::LLT<Eigen::MatrixXd> llt(S);
        if (llt.info() != Eigen::Success)
          throw NumericalError("kalman: singular innovation covariance at step " +
                               std::to_string(t));
        K = llt.solve(W * P).transpose();
        const Eigen::MatrixXd IKW = I - K * W;
        P = symmetrized(IKW * P * IKW.transpose() + K * R * K.transpose());
        trace.log_likelihood +=
            -0.5 * (ny * kLog2Pi + logdet_llt(llt) + e.dot(llt.solve(e)));
      }
      m += K * e;
    }

    GaussianBelief belief{m, P};
    belief.validate();
    trace.beliefs.push_back(std::move(belief));
    trace.times.push_back(static_cast<double>(t + 1));
  }
  return trace;
}

FilterTrace augmented_kalman(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                             const Eigen::MatrixXd& W, double a_u,
                             const Eigen::MatrixXd& Q_u, const Eigen::MatrixXd& R,
                             const Eigen::MatrixXd& obs,
                             const GaussianBelief& prior,
                             const KalmanOptions& opt) {
  const int nx = static_cast<int>(A.rows());
  const int nu = static_cast<int>(B.cols());
  require(std::abs(a_u) < 1.0, "augmented kalman: |a_u| must be < 1");
  require(Q_u.rows() == nu && Q_u.cols() == nu,
          "augmented kalman: Q_u shape mismatch");
  require(prior.mean.size() == nx, "augmented kalman: prior covers the state block");

  Eigen::MatrixXd A_aug = Eigen::MatrixXd::Zero(nx + nu, nx + nu);
  A_aug.topLeftCorner(nx, nx) = A;
  A_aug.topRightCorner(nx, nu) = B * a_u;
  A_aug.bottomRightCorner(nu, nu) =
      a_u * Eigen::MatrixXd::Identity(nu, nu);

  Eigen::MatrixXd G(nx + nu, nu);
  G.topRows(nx) = B;
  G.bottomRows(nu) = Eigen::MatrixXd::Identity(nu, nu);

  Eigen::MatrixXd W_aug = Eigen::MatrixXd::Zero(W.rows(), nx + nu);
  W_aug.leftCols(nx) = W;

  GaussianBelief prior_aug;
  prior_aug.mean = Eigen::VectorXd::Zero(nx + nu);
  prior_aug.mean.head(nx) = prior.mean;
  prior_aug.cov = Eigen::MatrixXd::Zero(nx + nu, nx + nu);
  prior_aug.cov.topLeftCorner(nx, nx) = prior.cov;
  prior_aug.cov.bottomRightCorner(nu, nu) = Q_u / (1.0 - a_u * a_u);

  FilterTrace trace = kalman_filter(A_aug, G, W_aug, Q_u, R, obs, prior_aug, opt);
  trace.method = "augmented_kalman";
  return trace;
}

FilterTrace bootstrap_particle_filter(const sys::SystemInstance& system,
                                      const stoch::InputLawSpec& spec,
                                      const ObsModel& obs_model,
                                      const Eigen::MatrixXd& obs, int n_particles,
                                      std::uint64_t seed,
                                      const ParticleFilterOptions& opt) {
  const int nx = system.state_dim();
  const int nu = system.input_dim();
  require(n_particles >= 100, "particle filter: need at least 100 particles");
  require(spec.dim() == nu, "particle filter: input law dimension mismatch");
  require(obs_model.sigma > 0.0, "particle filter: sigma must be positive");
  require(opt.resample_fraction > 0.0 && opt.resample_fraction <= 1.0,
          "particle filter: resample_fraction in (0, 1]");
  require(opt.history_len >= 1, "particle filter: history_len must be >= 1");
  const sys::SystemInstance observed(system.state_map(), obs_model.h);
  require(obs.rows() == observed.readout_dim(),
          "particle filter: observation dimension mismatch");

  const int N = n_particles;
  Eigen::MatrixXd xs(nx, N);
  Eigen::MatrixXd us(nu, N);
  std::vector<seq::Window> hist(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    rng::Rng r(rng::derive(seed, "pf-init", static_cast<std::uint64_t>(i)));
    xs.col(i) = draw_pf_init(opt.init, nx, r);
    us.col(i) = spec.sample_path(1, 0, r)[0];
    hist[static_cast<std::size_t>(i)] =
        seq::Window::from_columns({Eigen::VectorXd(us.col(i))});
  }
  Eigen::VectorXd logw = Eigen::VectorXd::Constant(N, -std::log(double(N)));

  FilterTrace trace;
  trace.method = "particle";
  const double inv2s2 = 0.5 / (obs_model.sigma * obs_model.sigma);
  const double lognorm =
      -0.5 * obs.rows() * (kLog2Pi + 2.0 * std::log(obs_model.sigma));

  for (int t = 0; t < obs.cols(); ++t) {
    for (int i = 0; i < N; ++i) {
      const auto step_seed = rng::derive(
          seed, "pf-prop",
          static_cast<std::uint64_t>(t) * static_cast<std::uint64_t>(N) +
              static_cast<std::uint64_t>(i));
      const auto draw = causality::conditional_future_sampler(
          spec, hist[static_cast<std::size_t>(i)], 1, step_seed);
      const Eigen::VectorXd u = draw.future[0];
      xs.col(i) = system.f(xs.col(i), u);
      us.col(i) = u;
      auto& h = hist[static_cast<std::size_t>(i)];
      h = h.appended(u);
      if (h.len() > opt.history_len) h = seq::truncate_left(h, opt.history_len);
      const Eigen::VectorXd resid = obs.col(t) - observed.h(xs.col(i));
      logw(i) += lognorm - resid.squaredNorm() * inv2s2;
    }

    const double mx = logw.maxCoeff();
    if (!std::isfinite(mx))
      throw NumericalError("particle filter: all weights vanished at step " +
                           std::to_string(t));
    const double sumexp = (logw.array() - mx).exp().sum();
    trace.log_likelihood += mx + std::log(sumexp);
    Eigen::VectorXd w = (logw.array() - mx).exp() / sumexp;
    logw = w.array().log();

    const double ess_now = 1.0 / w.squaredNorm();
    if (ess_now < 2.0)
      throw NumericalError(
          "particle filter: weight collapse at step " + std::to_string(t) +
          " (ess " + std::to_string(ess_now) + ", max weight " +
          std::to_string(w.maxCoeff()) + ")");

    ParticleCloud cloud{xs, us, w};
    trace.clouds.push_back(cloud);
    trace.ess.push_back(ess_now);
    trace.times.push_back(static_cast<double>(t + 1));

    if (ess_now < opt.resample_fraction * N) {
      rng::Rng rr(rng::derive(seed, "pf-resample", static_cast<std::uint64_t>(t)));
      const double u0 = rr.uniform01();
      Eigen::MatrixXd nxs(nx, N), nus(nu, N);
      std::vector<seq::Window> nhist(static_cast<std::size_t>(N));
      double cum = w(0);
      int src = 0;
      for (int j = 0; j < N; ++j) {
        const double target = (j + u0) / N;
        while (cum < target && src + 1 < N) cum += w(++src);
        nxs.col(j) = xs.col(src);
        nus.col(j) = us.col(src);
        nhist[static_cast<std::size_t>(j)] = hist[static_cast<std::size_t>(src)];
      }
      xs = std::move(nxs);
      us = std::move(nus);
      hist = std::move(nhist);
      logw.setConstant(-std::log(double(N)));
    }
  }
  return trace;
}

void GridSpec::validate() const {
  const int ns = static_cast<int>(state_grid.size());
  const int nu = static_cast<int>(input_grid.size());
  require(ns >= 1 && nu >= 1, "grid: empty axis");
  require(static_cast<long>(ns) * nu <= 10000, "grid: more than 10^4 cells");
  for (int i = 1; i < ns; ++i)
    require(state_grid(i) > state_grid(i - 1), "grid: state grid not increasing");
  for (int i = 1; i < nu; ++i)
    require(input_grid(i) > input_grid(i - 1), "grid: input grid not increasing");
  require(input_trans.rows() == nu && input_trans.cols() == nu,
          "grid: transition shape mismatch");
  for (int i = 0; i < nu; ++i) {
    require(input_trans.row(i).minCoeff() >= 0.0, "grid: negative transition");
    require(std::abs(input_trans.row(i).sum() - 1.0) <= 1e-9,
            "grid: transition rows must sum to 1");
  }
  require(input_init.size() == nu && std::abs(input_init.sum() - 1.0) <= 1e-9 &&
              input_init.minCoeff() >= 0.0,
          "grid: bad input prior");
  require(state_init.size() == ns && std::abs(state_init.sum() - 1.0) <= 1e-9 &&
              state_init.minCoeff() >= 0.0,
          "grid: bad state prior");
}

Eigen::VectorXd GridPosterior::state_marginal(int i) const {
  return joint[static_cast<std::size_t>(i)].rowwise().sum();
}

double GridPosterior::state_mean(int i) const {
  return grid_points.dot(state_marginal(i));
}

double GridPosterior::state_var(int i) const {
  const Eigen::VectorXd p = state_marginal(i);
  const double m = grid_points.dot(p);
  return (grid_points.array() - m).square().matrix().dot(p);
}

GridPosterior grid_bayes_oracle(
    const sys::SystemInstance& system, const GridSpec& grid,
    const std::function<double(const Eigen::VectorXd& y, double x)>& obs_lik,
    const Eigen::MatrixXd& obs) {
  grid.validate();
  require(system.state_dim() == 1 && system.input_dim() == 1,
          "grid oracle: scalar systems only");
  const int ns = static_cast<int>(grid.state_grid.size());
  const int nu = static_cast<int>(grid.input_grid.size());

  auto nearest = [&](double x) {
    const double* begin = grid.state_grid.data();
    const double* end = begin + ns;
    const double* it = std::lower_bound(begin, end, x);
    if (it == begin) return 0;
    if (it == end) return ns - 1;
    const int hi = static_cast<int>(it - begin);
    return (x - grid.state_grid(hi - 1) <= grid.state_grid(hi) - x) ? hi - 1 : hi;
  };

  Eigen::MatrixXi next_idx(ns, nu);
  for (int xi = 0; xi < ns; ++xi)
    for (int uj = 0; uj < nu; ++uj) {
      const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, grid.state_grid(xi));
      const Eigen::VectorXd u = Eigen::VectorXd::Constant(1, grid.input_grid(uj));
      next_idx(xi, uj) = nearest(system.f(x, u)(0));
    }

  GridPosterior post;
  post.grid_points = grid.state_grid;
  Eigen::MatrixXd p = grid.state_init * grid.input_init.transpose();

  for (int t = 0; t < obs.cols(); ++t) {
    Eigen::MatrixXd pred = Eigen::MatrixXd::Zero(ns, nu);
    for (int uj = 0; uj < nu; ++uj) {
      Eigen::VectorXd mass = Eigen::VectorXd::Zero(ns);
      for (int ui = 0; ui < nu; ++ui) {
        const double a = grid.input_trans(ui, uj);
        if (a == 0.0) continue;
        mass += a * p.col(ui);
      }
      for (int xi = 0; xi < ns; ++xi)
        pred(next_idx(xi, uj), uj) += mass(xi);
    }
    for (int xi = 0; xi < ns; ++xi) {
      const double lik = obs_lik(obs.col(t), grid.state_grid(xi));
      require(lik >= 0.0, "grid oracle: negative likelihood");
      pred.row(xi) *= lik;
    }
    const double norm = pred.sum();
    if (norm <= 0.0)
      throw NumericalError("grid oracle: zero posterior mass at step " +
                           std::to_string(t));
    post.log_likelihood += std::log(norm);
    p = pred / norm;
    post.joint.push_back(p);
    post.times.push_back(static_cast<double>(t + 1));
  }
  return post;
}

ObservationSeries observations_from_csv(const std::string& text) {
  ObservationSeries series;
  std::vector<Eigen::VectorXd> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ValidationError("observations: non-numeric cell '" + cell + "'");
      }
    }
    require(cells.size() >= 2, "observations: rows need time plus components");
    if (!rows.empty())
      require(static_cast<int>(cells.size()) - 1 == rows[0].size(),
              "observations: ragged rows");
    series.times.push_back(cells[0]);
    Eigen::VectorXd y(static_cast<int>(cells.size()) - 1);
    for (std::size_t c = 1; c < cells.size(); ++c)
      y(static_cast<int>(c) - 1) = cells[c];
    rows.push_back(y);
  }
  require(!rows.empty(), "observations: empty input");
  for (std::size_t i = 1; i < series.times.size(); ++i)
    require(series.times[i] > series.times[i - 1],
            "observations: times must increase");
  series.values.resize(rows[0].size(), static_cast<int>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    series.values.col(static_cast<int>(i)) = rows[i];
  return series;
}

std::string observations_to_csv(const ObservationSeries& series) {
  std::string out;
  for (int i = 0; i < series.values.cols(); ++i) {
    out += report::format_double(series.times[static_cast<std::size_t>(i)]);
    for (int c = 0; c < series.values.rows(); ++c)
      out += "," + report::format_double(series.values(c, i));
    out.push_back('\n');
  }
  return out;
}

}  // namespace echolab::filtering
