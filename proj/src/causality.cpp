#include "echolab/causality.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <utility>

#include <boost/math/special_functions/digamma.hpp>

namespace echolab::causality {

using nlohmann::json;

namespace {

int mod_pos(int a, int m) { return ((a % m) + m) % m; }

void shuffle_indices(std::vector<int>& idx, rng::Rng& r) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    const int j = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
}

// permute the values of x within each stratum, in place
std::vector<int> strata_permute(const std::vector<int>& x,
                                const std::vector<int>& strata, rng::Rng& r) {
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < static_cast<int>(x.size()); ++i)
    groups[strata[static_cast<std::size_t>(i)]].push_back(i);
  std::vector<int> out = x;
  for (auto& [s, members] : groups) {
    std::vector<int> shuffled = members;
    shuffle_indices(shuffled, r);
    for (std::size_t m = 0; m < members.size(); ++m)
      out[static_cast<std::size_t>(members[m])] =
          x[static_cast<std::size_t>(shuffled[m])];
  }
  return out;
}

double perm_quantile(std::vector<double> stats, double alpha) {
  std::sort(stats.begin(), stats.end());
  const int n = static_cast<int>(stats.size());
  const int idx = std::min(n - 1, static_cast<int>(std::floor((1.0 - alpha) * n)));
  return stats[static_cast<std::size_t>(std::max(0, idx))];
}

double logdet_cov(const Eigen::MatrixXd& C) {
  if (C.rows() == 0) return 0.0;
  const double scale = std::max(C.trace() / C.rows(), 1.0);
  const Eigen::MatrixXd R =
      C + 1e-12 * scale * Eigen::MatrixXd::Identity(C.rows(), C.cols());
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(R);
  require(ldlt.info() == Eigen::Success, "gaussian_cmi: covariance factorization failed");
  return ldlt.vectorD().array().max(1e-300).log().sum();
}

Eigen::MatrixXd weighted_cov(const Eigen::MatrixXd& D, const Eigen::VectorXd& w) {
  const Eigen::VectorXd mean = D * w;
  const Eigen::MatrixXd centered = D.colwise() - mean;
  return centered * w.asDiagonal() * centered.transpose();
}

Eigen::MatrixXd vstack(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() + b.rows(), a.cols() > 0 ? a.cols() : b.cols());
  if (a.rows() > 0) out.topRows(a.rows()) = a;
  if (b.rows() > 0) out.bottomRows(b.rows()) = b;
  return out;
}

// weighted least-squares fit of X on [1; Z], returning fitted values
Eigen::MatrixXd wls_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z,
                        const Eigen::VectorXd& w) {
  const int n = static_cast<int>(X.cols());
  Eigen::MatrixXd D(Z.rows() + 1, n);
  D.row(0).setOnes();
  if (Z.rows() > 0) D.bottomRows(Z.rows()) = Z;
  const Eigen::MatrixXd G = D * w.asDiagonal() * D.transpose() +
                            1e-12 * Eigen::MatrixXd::Identity(D.rows(), D.rows());
  const Eigen::MatrixXd B =
      G.ldlt().solve(D * w.asDiagonal() * X.transpose()).transpose();
  return B * D;
}

std::vector<int> median_split_strata(const Eigen::MatrixXd& Z) {
  const int n = static_cast<int>(Z.cols());
  std::vector<int> strata(static_cast<std::size_t>(n), 0);
  const int dz = std::min<int>(static_cast<int>(Z.rows()), 6);
  for (int d = 0; d < dz; ++d) {
    std::vector<double> col(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = Z(d, i);
    std::nth_element(col.begin(), col.begin() + n / 2, col.end());
    const double med = col[static_cast<std::size_t>(n / 2)];
    for (int i = 0; i < n; ++i)
      strata[static_cast<std::size_t>(i)] |= (Z(d, i) >= med ? 1 : 0) << d;
  }
  return strata;
}

struct CmiBlocks {
  Eigen::MatrixXd X, Y, Z;
  Eigen::VectorXd w;
};

CmiBlocks build_blocks(const ParticleMeasure& mu, int lag, int cond_order) {
  mu.validate();
  require(mu.has_states(), "cmi_test: state windows required");
  require(lag <= -1, "cmi_test: lag must be a negative time");
  require(cond_order >= 0, "cmi_test: negative conditioning order");
  const int k = -lag;
  const int n = mu.size();
  const int lx = mu.particles.front().state.len();
  const int lu = mu.particles.front().input.past.len();
  const int mf = mu.particles.front().input.n_future();
  require(lx > k, "cmi_test: state window does not reach the requested lag");
  require(lu >= k + cond_order,
          "cmi_test: input window too short for the lag plus conditioning order");
  const int dx = mu.particles.front().state.dim();
  const int du = mu.particles.front().input.past.dim();

  // X is the state at time -k, Y the inputs at times -k+1 .. mf (appended
  // future inputs included), Z the cond_order inputs at times -k, -k-1, ...
  CmiBlocks b;
  b.X.resize(dx, n);
  b.Y.resize((k + mf) * du, n);
  b.Z.resize(cond_order * du, n);
  b.w = mu.weights;
  for (int i = 0; i < n; ++i) {
    const auto& p = mu.particles[static_cast<std::size_t>(i)];
    b.X.col(i) = p.state.at_lag(k);
    for (int j = 0; j < k + mf; ++j)
      b.Y.col(i).segment(j * du, du) = p.input.at_time(-k + 1 + j);
    for (int j = 0; j < cond_order; ++j)
      b.Z.col(i).segment(j * du, du) = p.input.past.at_lag(k + j);
  }
  return b;
}

Eigen::MatrixXd permute_cols(const Eigen::MatrixXd& M, const std::vector<int>& idx) {
  Eigen::MatrixXd out(M.rows(), M.cols());
  for (int i = 0; i < M.cols(); ++i) out.col(i) = M.col(idx[static_cast<std::size_t>(i)]);
  return out;
}

bool weights_uniform(const Eigen::VectorXd& w) {
  const double u = 1.0 / w.size();
  return (w.array() - u).abs().maxCoeff() <= 1e-9;
}

// exact discrete CMI with a within-strata permutation threshold
std::pair<double, double> discrete_cmi_with_null(const std::vector<int>& sx,
                                                 const std::vector<int>& sy,
                                                 const std::vector<int>& sz,
                                                 const Eigen::VectorXd& w,
                                                 int n_perm, double alpha,
                                                 rng::Rng& r) {
  const double est = discrete_cmi(sx, sy, sz, w);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(n_perm));
  for (int p = 0; p < n_perm; ++p) {
    const std::vector<int> xp = strata_permute(sx, sz, r);
    stats.push_back(discrete_cmi(xp, sy, sz, w));
  }
  return {est, perm_quantile(std::move(stats), alpha)};
}

}  // namespace

// ---- conditional sampling ----

ConditionalDraw conditional_future_sampler(const InputLawSpec& spec,
                                           const Window& past, int n_future,
                                           std::uint64_t seed) {
  spec.validate();
  require(!past.empty(), "conditional_future_sampler: empty past window");
  require(past.dim() == spec.dim(),
          "conditional_future_sampler: past dimension does not match the law");
  require(n_future >= 1, "conditional_future_sampler: n_future must be positive");

  rng::Rng r(seed);
  ConditionalDraw out;
  out.future.reserve(static_cast<std::size_t>(n_future));

  switch (spec.kind) {
    case InputLawSpec::Kind::iid:
      out.future = spec.sample_path(n_future, 0, r);
      return out;

    case InputLawSpec::Kind::markov_chain: {
      int idx = 0;
      double best = kInf;
      for (int s = 0; s < static_cast<int>(spec.alphabet.size()); ++s) {
        const double d =
            (past.at_lag(0) - spec.alphabet[static_cast<std::size_t>(s)]).norm();
        if (d < best) {
          best = d;
          idx = s;
        }
      }
      for (int t = 0; t < n_future; ++t) {
        idx = r.categorical(spec.transition.row(idx).transpose());
        out.future.push_back(spec.alphabet[static_cast<std::size_t>(idx)]);
      }
      return out;
    }

    case InputLawSpec::Kind::gaussian_ar1: {
      double x = past.scalar_at_lag(0);
      for (int t = 0; t < n_future; ++t) {
        x = spec.ar_coeff * x + spec.ar_noise_sd * r.normal();
        out.future.push_back(Eigen::VectorXd::Constant(1, x));
      }
      return out;
    }

    case InputLawSpec::Kind::periodic: {
      const int p = spec.period();
      std::vector<double> sse(static_cast<std::size_t>(p), 0.0);
      for (int phi = 0; phi < p; ++phi)
        for (int k = 0; k < past.len(); ++k)
          sse[static_cast<std::size_t>(phi)] +=
              (past.at_lag(k) - spec.cycle[static_cast<std::size_t>(mod_pos(phi - k, p))])
                  .squaredNorm();
      const double best = *std::min_element(sse.begin(), sse.end());
      std::vector<int> candidates;
      for (int phi = 0; phi < p; ++phi)
        if (sse[static_cast<std::size_t>(phi)] <= best + 1e-12) candidates.push_back(phi);

      int phase = candidates.front();
      if (candidates.size() > 1) {
        out.phase_ambiguous = true;
        Eigen::VectorXd w(static_cast<int>(candidates.size()));
        for (int c = 0; c < w.size(); ++c)
          w(c) = spec.phase_weights[static_cast<std::size_t>(
              candidates[static_cast<std::size_t>(c)])];
        if (w.sum() <= 0.0) w.setOnes();
        phase = candidates[static_cast<std::size_t>(r.categorical(w))];
      }
      for (int t = 1; t <= n_future; ++t) {
        Eigen::VectorXd v = spec.cycle[static_cast<std::size_t>(mod_pos(phase + t, p))];
        if (spec.cycle_noise_sd > 0.0)
          for (int c = 0; c < v.size(); ++c) v(c) += spec.cycle_noise_sd * r.normal();
        out.future.push_back(std::move(v));
      }
      return out;
    }
  }
  throw ValidationError("conditional_future_sampler: unknown law kind");
}

ConditionalSampler::ConditionalSampler(InputLawSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
}

ConditionalDraw ConditionalSampler::draw(const Window& past, int n_future,
                                         std::uint64_t seed) const {
  return conditional_future_sampler(spec_, past, n_future, seed);
}

// ---- causal extension ----

json CausalExtensionResult::to_json() const {
  return json{{"marginal_dist", marginal_dist},
              {"marginal_hi", marginal_hi},
              {"marginal_warning", marginal_warning},
              {"ambiguous_phases", ambiguous_phases},
              {"particles", measure.size()},
              {"n_future", measure.particles.empty()
                               ? 0
                               : measure.particles.front().input.n_future()}};
}

CausalExtensionResult causal_extension(const ParticleMeasure& mu_minus,
                                       const InputLawSpec& spec, int n_future,
                                       std::uint64_t seed,
                                       const CausalExtensionOptions& opt) {
  mu_minus.validate();
  spec.validate();
  require(n_future >= 1, "causal_extension: n_future must be positive");
  require(mu_minus.particles.front().input.n_future() == 0,
          "causal_extension: particles already carry future inputs");
  require(mu_minus.particles.front().input.past.dim() == spec.dim(),
          "causal_extension: input dimension does not match the law");

  CausalExtensionResult out;

  if (opt.check_marginal) {
    const int n_check = std::min(mu_minus.size(), opt.check_cap);
    ParticleMeasure sub;
    sub.particles.assign(mu_minus.particles.begin(),
                         mu_minus.particles.begin() + n_check);
    for (auto& p : sub.particles) p.state = Window();
    sub.weights = Eigen::VectorXd::Constant(n_check, 1.0 / n_check);
    sub.horizon = mu_minus.horizon;
    const int lu = sub.particles.front().input.past.len();
    const auto fresh = stoch::sample_input_law(spec, lu, 0, n_check,
                                               rng::derive(seed, "marginal-fresh", 0));
    out.marginal_dist = stoch::measure_dist(sub, fresh, opt.metric, false, true);
    const auto env = stoch::two_sample_envelope(
        [&](std::uint64_t sa, std::uint64_t sb) {
          const auto a = stoch::sample_input_law(spec, lu, 0, n_check, sa);
          const auto b = stoch::sample_input_law(spec, lu, 0, n_check, sb);
          return stoch::measure_dist(a, b, opt.metric, false, true);
        },
        opt.check_reps, rng::derive(seed, "marginal-env", 0));
    out.marginal_hi = env.hi;
    out.marginal_warning = out.marginal_dist > env.hi;
    require(!(out.marginal_dist > opt.hard_factor * env.hi &&
              out.marginal_dist > 1e-12),
            "causal_extension: input marginal is inconsistent with the law");
  }

  out.measure = mu_minus;
  out.measure.seed = seed;
  for (int i = 0; i < out.measure.size(); ++i) {
    auto& p = out.measure.particles[static_cast<std::size_t>(i)];
    auto draw = conditional_future_sampler(spec, p.input.past, n_future,
                                           rng::derive(seed, "cond-future",
                                                       static_cast<std::uint64_t>(i)));
    p.input.future = std::move(draw.future);
    if (draw.phase_ambiguous) ++out.ambiguous_phases;
  }
  return out;
}

ParticleMeasure fold_future_into_past(const ParticleMeasure& mu) {
  mu.validate();
  ParticleMeasure out = mu;
  for (auto& p : out.particles) {
    Window w = p.input.past;
    for (const Eigen::VectorXd& f : p.input.future) w = w.appended(f);
    p.input.past = std::move(w);
    p.input.future.clear();
  }
  if (!mu.particles.empty())
    out.horizon = mu.horizon + mu.particles.front().input.n_future();
  return out;
}

// ---- estimator cores ----

std::string to_string(CmiEstimator e) {
  switch (e) {
    case CmiEstimator::discrete: return "discrete";
    case CmiEstimator::gaussian: return "gaussian";
    case CmiEstimator::knn: return "knn";
  }
  throw ValidationError("unknown estimator");
}

CmiEstimator cmi_estimator_from_string(const std::string& s) {
  if (s == "discrete") return CmiEstimator::discrete;
  if (s == "gaussian") return CmiEstimator::gaussian;
  if (s == "knn") return CmiEstimator::knn;
  throw ValidationError("unknown estimator " + s);
}

std::vector<int> symbolize(const Eigen::MatrixXd& data, double tol) {
  require(tol > 0.0, "symbolize: tolerance must be positive");
  std::map<std::vector<long long>, int> table;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.cols()));
  std::vector<long long> key(static_cast<std::size_t>(data.rows()));
  for (int i = 0; i < data.cols(); ++i) {
    for (int d = 0; d < data.rows(); ++d)
      key[static_cast<std::size_t>(d)] = std::llround(data(d, i) / tol);
    const auto [it, inserted] = table.emplace(key, static_cast<int>(table.size()));
    out.push_back(it->second);
  }
  return out;
}

double discrete_cmi(const std::vector<int>& x, const std::vector<int>& y,
                    const std::vector<int>& z, const Eigen::VectorXd& w) {
  const std::size_t n = x.size();
  require(y.size() == n && z.size() == n &&
              static_cast<std::size_t>(w.size()) == n && n > 0,
          "discrete_cmi: mismatched sample arrays");
  std::map<std::tuple<int, int, int>, double> pxyz;
  std::map<std::pair<int, int>, double> pxz, pyz;
  std::map<int, double> pz;
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w(static_cast<int>(i));
    pxyz[{x[i], y[i], z[i]}] += wi;
    pxz[{x[i], z[i]}] += wi;
    pyz[{y[i], z[i]}] += wi;
    pz[z[i]] += wi;
  }
  double cmi = 0.0;
  for (const auto& [key, p] : pxyz) {
    if (p <= 0.0) continue;
    const auto& [xi, yi, zi] = key;
    cmi += p * std::log(p * pz[zi] / (pxz[{xi, zi}] * pyz[{yi, zi}]));
  }
  return cmi;
}

double gaussian_cmi(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                    const Eigen::MatrixXd& Z, const Eigen::VectorXd& w) {
  const int n = static_cast<int>(X.cols());
  require(Y.cols() == n && (Z.rows() == 0 || Z.cols() == n) && w.size() == n && n >= 4,
          "gaussian_cmi: mismatched sample matrices");
  const Eigen::MatrixXd XZ = vstack(X, Z);
  const Eigen::MatrixXd YZ = vstack(Y, Z);
  const Eigen::MatrixXd XYZ = vstack(XZ, Y);
  double ld_z = 0.0;
  if (Z.rows() > 0) ld_z = logdet_cov(weighted_cov(Z, w));
  const double cmi = 0.5 * (logdet_cov(weighted_cov(XZ, w)) +
                            logdet_cov(weighted_cov(YZ, w)) - ld_z -
                            logdet_cov(weighted_cov(XYZ, w)));
  return cmi;
}

double knn_cmi(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
               const Eigen::MatrixXd& Z, int k) {
  const int n = static_cast<int>(X.cols());
  require(Y.cols() == n && (Z.rows() == 0 || Z.cols() == n),
          "knn_cmi: mismatched sample matrices");
  require(k >= 1 && n > k + 1, "knn_cmi: need more samples than neighbors");

  auto standardized = [n](const Eigen::MatrixXd& M) {
    Eigen::MatrixXd out = M;
    for (int d = 0; d < out.rows(); ++d) {
      const double mean = out.row(d).mean();
      out.row(d).array() -= mean;
      const double sd = std::sqrt(out.row(d).squaredNorm() / n);
      if (sd > 0.0) out.row(d) /= sd;
    }
    return out;
  };
  const Eigen::MatrixXd Xs = standardized(X);
  const Eigen::MatrixXd Ys = standardized(Y);
  const Eigen::MatrixXd Zs = Z.rows() > 0 ? standardized(Z) : Z;
  const bool has_z = Zs.rows() > 0;

  auto cheb = [](const Eigen::MatrixXd& M, int i, int j) {
    return (M.col(i) - M.col(j)).cwiseAbs().maxCoeff();
  };

  const double psi_k = boost::math::digamma(static_cast<double>(k));
  double acc = 0.0;
  std::vector<double> joint(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j == i) {
        joint[static_cast<std::size_t>(j)] = kInf;
        continue;
      }
      double d = std::max(cheb(Xs, i, j), cheb(Ys, i, j));
      if (has_z) d = std::max(d, cheb(Zs, i, j));
      joint[static_cast<std::size_t>(j)] = d;
    }
    std::vector<double> sorted = joint;
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
    const double eps = sorted[static_cast<std::size_t>(k - 1)];

    int n_xz = 0, n_yz = 0, n_z = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dz = has_z ? cheb(Zs, i, j) : 0.0;
      if (dz >= eps) continue;
      if (has_z) ++n_z;
      if (std::max(cheb(Xs, i, j), dz) < eps) ++n_xz;
      if (std::max(cheb(Ys, i, j), dz) < eps) ++n_yz;
    }
    if (has_z)
      acc += boost::math::digamma(n_xz + 1.0) + boost::math::digamma(n_yz + 1.0) -
             boost::math::digamma(n_z + 1.0);
    else
      acc += boost::math::digamma(n_xz + 1.0) + boost::math::digamma(n_yz + 1.0);
  }
  if (has_z) return psi_k - acc / n;
  return psi_k + boost::math::digamma(static_cast<double>(n)) - acc / n;
}

// ---- per-lag test and sweep ----

json CmiReport::to_json() const {
  json lag_arr = json::array();
  for (const auto& e : lags)
    lag_arr.push_back(json{{"t", e.lag},
                           {"cmi", e.cmi},
                           {"threshold", e.threshold},
                           {"verdict", e.below ? "below" : "above"}});
  return json{{"lags", std::move(lag_arr)}, {"estimator", estimator},
              {"seed", seed},               {"alpha", alpha},
              {"cond_order", cond_order},   {"causal", causal}};
}

int default_cond_order(const InputLawSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case InputLawSpec::Kind::iid: return 0;
    case InputLawSpec::Kind::markov_chain:
    case InputLawSpec::Kind::gaussian_ar1: return 1;
    case InputLawSpec::Kind::periodic: return std::max(1, spec.period() - 1);
  }
  throw ValidationError("default_cond_order: unknown law kind");
}

CmiEntry cmi_test(const ParticleMeasure& mu, int lag, const CmiOptions& opt) {
  require(opt.alpha > 0.0 && opt.alpha < 1.0, "cmi_test: alpha out of range");
  require(opt.n_permutations >= 20, "cmi_test: too few permutations");
  const CmiBlocks b = build_blocks(mu, lag, opt.cond_order);
  const int n = static_cast<int>(b.X.cols());
  if (opt.estimator != CmiEstimator::discrete)
    require(n >= 500, "cmi_test: continuous estimators need at least 500 samples");

  rng::Rng r(rng::derive(opt.seed, "cmi-perm", static_cast<std::uint64_t>(-lag)));
  double est = 0.0, thr = 0.0;

  switch (opt.estimator) {
    case CmiEstimator::discrete: {
      const auto sx = symbolize(b.X, opt.quantize_tol);
      const auto sy = symbolize(b.Y, opt.quantize_tol);
      const auto sz = b.Z.rows() > 0 ? symbolize(b.Z, opt.quantize_tol)
                                     : std::vector<int>(static_cast<std::size_t>(n), 0);
      std::tie(est, thr) = discrete_cmi_with_null(sx, sy, sz, b.w,
                                                  opt.n_permutations, opt.alpha, r);
      break;
    }
    case CmiEstimator::gaussian: {
      est = gaussian_cmi(b.X, b.Y, b.Z, b.w);
      const Eigen::MatrixXd fit = wls_fit(b.X, b.Z, b.w);
      const Eigen::MatrixXd resid = b.X - fit;
      std::vector<int> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), 0);
      std::vector<double> stats;
      stats.reserve(static_cast<std::size_t>(opt.n_permutations));
      for (int p = 0; p < opt.n_permutations; ++p) {
        shuffle_indices(idx, r);
        const Eigen::MatrixXd xp = fit + permute_cols(resid, idx);
        stats.push_back(gaussian_cmi(xp, b.Y, b.Z, b.w));
      }
      thr = perm_quantile(std::move(stats), opt.alpha);
      break;
    }
    case CmiEstimator::knn: {
      require(weights_uniform(b.w), "cmi_test: knn estimator needs uniform weights");
      est = knn_cmi(b.X, b.Y, b.Z, opt.knn_k);
      const std::vector<int> strata =
          b.Z.rows() > 0 ? median_split_strata(b.Z)
                         : std::vector<int>(static_cast<std::size_t>(n), 0);
      std::vector<int> ident(static_cast<std::size_t>(n));
      std::iota(ident.begin(), ident.end(), 0);
      std::vector<double> stats;
      stats.reserve(static_cast<std::size_t>(opt.n_permutations));
      for (int p = 0; p < opt.n_permutations; ++p) {
        const std::vector<int> perm = strata_permute(ident, strata, r);
        stats.push_back(knn_cmi(permute_cols(b.X, perm), b.Y, b.Z, opt.knn_k));
      }
      thr = perm_quantile(std::move(stats), opt.alpha);
      break;
    }
  }

  CmiEntry entry;
  entry.lag = lag;
  entry.cmi = std::max(est, 0.0);
  entry.threshold = std::max(thr, 0.0);
  entry.below = entry.cmi <= entry.threshold + 1e-12;
  return entry;
}

CmiReport is_causal_report(const ParticleMeasure& mu, const CmiOptions& opt) {
  mu.validate();
  require(mu.has_states(), "is_causal_report: state windows required");
  const int lx = mu.particles.front().state.len();
  const int lu = mu.particles.front().input.past.len();
  const int max_k = std::min(lx - 1, lu - opt.cond_order);
  require(max_k >= 1, "is_causal_report: windows too short to test any lag");

  CmiReport report;
  report.estimator = to_string(opt.estimator);
  report.seed = opt.seed;
  report.alpha = opt.alpha;
  report.cond_order = opt.cond_order;
  CmiOptions per_lag = opt;
  per_lag.alpha = opt.alpha / max_k;
  for (int k = 1; k <= max_k; ++k) {
    report.lags.push_back(cmi_test(mu, -k, per_lag));
    report.causal = report.causal && report.lags.back().below;
  }
  return report;
}

// ---- Markov augmentation ----

std::vector<Trajectory> simulate_trajectories(const sys::SystemInstance& sys,
                                              const InputLawSpec& spec, int len,
                                              int n_traj, std::uint64_t seed,
                                              const Eigen::VectorXd& x0) {
  spec.validate();
  require(len >= 1, "simulate_trajectories: len must be positive");
  require(n_traj >= 1, "simulate_trajectories: n_traj must be positive");
  require(x0.size() == sys.state_dim(), "simulate_trajectories: x0 dimension mismatch");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n_traj));
  for (int i = 0; i < n_traj; ++i) {
    rng::Rng r(rng::derive(seed, "traj", static_cast<std::uint64_t>(i)));
    const auto path = spec.sample_path(len, 0, r);
    Trajectory traj;
    traj.states.resize(sys.state_dim(), len);
    traj.inputs.resize(spec.dim(), len);
    Eigen::VectorXd x = x0;
    for (int t = 0; t < len; ++t) {
      x = sys.f(x, path[static_cast<std::size_t>(t)]);
      traj.states.col(t) = x;
      traj.inputs.col(t) = path[static_cast<std::size_t>(t)];
    }
    out.push_back(std::move(traj));
  }
  return out;
}

namespace {

// bin each coordinate over the pooled columns, mixed-radix symbols
std::vector<std::vector<int>> quantize_series(const std::vector<Eigen::MatrixXd>& series,
                                              int bins, bool gap_edges) {
  const int dim = static_cast<int>(series.front().rows());
  std::vector<std::vector<double>> edges(static_cast<std::size_t>(dim));
  for (int d = 0; d < dim; ++d) {
    std::vector<double> pool;
    for (const auto& M : series)
      for (int t = 0; t < M.cols(); ++t) pool.push_back(M(d, t));
    std::sort(pool.begin(), pool.end());
    auto& e = edges[static_cast<std::size_t>(d)];
    if (gap_edges) {
      // midpoints of the bins-1 widest gaps between consecutive values
      std::vector<std::pair<double, double>> gaps;  // (-width, midpoint)
      for (std::size_t i = 0; i + 1 < pool.size(); ++i)
        if (pool[i + 1] > pool[i])
          gaps.emplace_back(pool[i] - pool[i + 1], 0.5 * (pool[i] + pool[i + 1]));
      std::sort(gaps.begin(), gaps.end());
      const int keep = std::min<int>(bins - 1, static_cast<int>(gaps.size()));
      for (int b = 0; b < keep; ++b) e.push_back(gaps[static_cast<std::size_t>(b)].second);
      std::sort(e.begin(), e.end());
    } else {
      for (int b = 1; b < bins; ++b)
        e.push_back(pool[pool.size() * static_cast<std::size_t>(b) /
                         static_cast<std::size_t>(bins)]);
    }
  }
  std::vector<std::vector<int>> out;
  for (const auto& M : series) {
    std::vector<int> syms(static_cast<std::size_t>(M.cols()));
    for (int t = 0; t < M.cols(); ++t) {
      int code = 0;
      for (int d = 0; d < dim; ++d) {
        const auto& e = edges[static_cast<std::size_t>(d)];
        const int b = static_cast<int>(
            std::upper_bound(e.begin(), e.end(), M(d, t)) - e.begin());
        code = code * bins + b;
      }
      syms[static_cast<std::size_t>(t)] = code;
    }
    out.push_back(std::move(syms));
  }
  return out;
}

struct OrderTest {
  double cmi = 0.0;
  double thr = 0.0;
  bool pass = true;
};

OrderTest markov_order_test(const std::vector<std::vector<int>>& sym_series, int order,
                            int n_syms, int burn_in, int n_perm, double alpha,
                            rng::Rng& r) {
  std::vector<int> sx, sy, sz;
  for (const auto& s : sym_series) {
    const int T = static_cast<int>(s.size());
    for (int t = burn_in + order + 1; t < T; ++t) {
      sx.push_back(s[static_cast<std::size_t>(t)]);
      sy.push_back(s[static_cast<std::size_t>(t - order - 1)]);
      int code = 0;
      for (int j = 1; j <= order; ++j)
        code = code * n_syms + s[static_cast<std::size_t>(t - j)];
      sz.push_back(code);
    }
  }
  require(sx.size() >= 100, "markov_augmentation_test: trajectories too short");
  const Eigen::VectorXd w =
      Eigen::VectorXd::Constant(static_cast<int>(sx.size()),
                                1.0 / static_cast<double>(sx.size()));
  const auto [est, thr] =
      discrete_cmi_with_null(sx, sy, sz, w, n_perm, alpha, r);
  OrderTest out;
  out.cmi = std::max(est, 0.0);
  out.thr = thr;
  out.pass = out.cmi <= thr + 1e-12;
  return out;
}

}  // namespace

json MarkovReport::to_json() const {
  json arr = json::array();
  for (const auto& e : orders)
    arr.push_back(json{{"order", e.order},
                       {"augmented", json{{"cmi", e.cmi_augmented},
                                          {"threshold", e.thr_augmented},
                                          {"verdict", e.pass_augmented ? "below" : "above"}}},
                       {"raw", json{{"cmi", e.cmi_raw},
                                    {"threshold", e.thr_raw},
                                    {"verdict", e.pass_raw ? "below" : "above"}}}});
  return json{{"orders", std::move(arr)}, {"bins", bins}, {"seed", seed}};
}

MarkovReport markov_augmentation_test(const std::vector<Trajectory>& trajs,
                                      int max_order, const MarkovOptions& opt) {
  require(!trajs.empty(), "markov_augmentation_test: no trajectories");
  require(max_order >= 1, "markov_augmentation_test: max_order must be positive");
  require(opt.bins >= 2, "markov_augmentation_test: need at least two bins");
  require(opt.alpha > 0.0 && opt.alpha < 1.0, "markov_augmentation_test: bad alpha");

  std::vector<Eigen::MatrixXd> aug, raw;
  for (const auto& t : trajs) {
    require(t.states.cols() == t.inputs.cols(),
            "markov_augmentation_test: misaligned trajectory");
    Eigen::MatrixXd a(t.states.rows() + t.inputs.rows(), t.states.cols());
    a.topRows(t.states.rows()) = t.states;
    a.bottomRows(t.inputs.rows()) = t.inputs;
    aug.push_back(std::move(a));
    raw.push_back(t.states);
  }
  const auto aug_syms = quantize_series(aug, opt.bins, opt.gap_edges);
  const auto raw_syms = quantize_series(raw, opt.bins, opt.gap_edges);
  int n_aug = 1, n_raw = 1;
  for (int d = 0; d < aug.front().rows(); ++d) n_aug *= opt.bins;
  for (int d = 0; d < raw.front().rows(); ++d) n_raw *= opt.bins;

  MarkovReport report;
  report.bins = opt.bins;
  report.seed = opt.seed;
  for (int m = 1; m <= max_order; ++m) {
    rng::Rng ra(rng::derive(opt.seed, "markov-aug", static_cast<std::uint64_t>(m)));
    rng::Rng rr(rng::derive(opt.seed, "markov-raw", static_cast<std::uint64_t>(m)));
    const OrderTest a = markov_order_test(aug_syms, m, n_aug, opt.burn_in,
                                          opt.n_permutations, opt.alpha, ra);
    const OrderTest x = markov_order_test(raw_syms, m, n_raw, opt.burn_in,
                                          opt.n_permutations, opt.alpha, rr);
    MarkovOrderEntry e;
    e.order = m;
    e.cmi_augmented = a.cmi;
    e.thr_augmented = a.thr;
    e.pass_augmented = a.pass;
    e.cmi_raw = x.cmi;
    e.thr_raw = x.thr;
    e.pass_raw = x.pass;
    report.orders.push_back(e);
  }
  return report;
}

}  // namespace echolab::causality
