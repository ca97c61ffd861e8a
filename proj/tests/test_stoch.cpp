#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "echolab/measure.hpp"
#include "echolab/transport.hpp"

using namespace echolab;
namespace st = echolab::stoch;
namespace pb = echolab::pullback;

namespace {

Eigen::VectorXd v1(double x) { return Eigen::VectorXd::Constant(1, x); }

Eigen::MatrixXd m1(double x) { return Eigen::MatrixXd::Constant(1, 1, x); }

sys::SystemInstance half_gain() { return sys::SystemInstance::linear(m1(0.5), m1(1.0)); }

st::ParticleMeasure scalar_cloud(const std::vector<double>& xs,
                                 const std::vector<double>& ws) {
  st::ParticleMeasure mu;
  for (double x : xs) {
    st::Particle p;
    p.input.past = seq::Window::from_scalars({x});
    mu.particles.push_back(std::move(p));
  }
  mu.weights = Eigen::Map<const Eigen::VectorXd>(ws.data(), static_cast<int>(ws.size()));
  mu.horizon = 1;
  return mu;
}

}  // namespace

TEST_CASE("input law specs validate and round trip through json") {
  const auto dirac = st::InputLawSpec::iid_dirac(v1(1.5));
  const auto uni = st::InputLawSpec::iid_uniform(-Eigen::VectorXd::Ones(2),
                                                 Eigen::VectorXd::Ones(2));
  const auto norm = st::InputLawSpec::iid_normal(Eigen::VectorXd::Zero(1),
                                                 Eigen::VectorXd::Ones(1));
  const auto atoms = st::InputLawSpec::iid_atoms({v1(0.0), v1(1.0)}, {0.25, 0.75});
  Eigen::MatrixXd P(2, 2);
  P << 0.9, 0.1, 0.4, 0.6;
  const auto mk = st::InputLawSpec::markov({v1(0.0), v1(1.0)}, P);
  const auto ar = st::InputLawSpec::ar1(0.9, 1.0);
  const auto per = st::InputLawSpec::periodic_cycle({v1(1.0), v1(-1.0)}, {0.8, 0.2});

  for (const auto& s : {dirac, uni, norm, atoms, mk, ar, per}) {
    const auto j = s.to_json();
    CHECK(st::InputLawSpec::from_json(j).to_json().dump() == j.dump());
  }
  CHECK(dirac.dim() == 1);
  CHECK(uni.dim() == 2);
  CHECK(ar.dim() == 1);
  CHECK(per.period() == 2);

  const auto pi = mk.stationary();
  CHECK(pi[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(pi[1] == doctest::Approx(0.2).epsilon(1e-12));

  CHECK_THROWS_AS(st::InputLawSpec::ar1(1.0, 1.0), ValidationError);
  CHECK_THROWS_AS(st::InputLawSpec::ar1(-1.2, 1.0), ValidationError);
  Eigen::MatrixXd bad(2, 2);
  bad << 0.9, 0.2, 0.4, 0.6;
  CHECK_THROWS_AS(st::InputLawSpec::markov({v1(0.0), v1(1.0)}, bad), ValidationError);
  CHECK_THROWS_AS(st::InputLawSpec::iid_atoms({v1(0.0)}, {0.9}), ValidationError);
  CHECK_THROWS_AS(st::InputLawSpec::iid_atoms({v1(0.0), v1(1.0)}, {0.7, 0.7}),
                  ValidationError);
  CHECK_THROWS_AS(st::InputLawSpec::periodic_cycle({v1(1.0)}, {0.5, 0.5}),
                  ValidationError);
  CHECK_THROWS_AS(st::InputLawSpec::iid_uniform(v1(2.0), v1(1.0)), ValidationError);

  rng::Rng r(1);
  CHECK_THROWS_AS(dirac.sample_path(5, 5, r), ValidationError);
  CHECK_THROWS_AS(dirac.sample_path(0, 0, r), ValidationError);

  nlohmann::json junk = {{"kind", "nope"}};
  CHECK_THROWS_AS(st::InputLawSpec::from_json(junk), ValidationError);
}

TEST_CASE("dirac input law yields identical constant trajectories") {
  const auto spec = st::InputLawSpec::iid_dirac(v1(1.5));
  const auto mu = st::sample_input_law(spec, 7, 3, 10, 42);
  CHECK(mu.size() == 10);
  CHECK(!mu.has_states());
  for (const auto& p : mu.particles) {
    CHECK(p.input.past.len() == 7);
    CHECK(p.input.n_future() == 3);
    for (int k = 0; k < 7; ++k) CHECK(p.input.past.scalar_at_lag(k) == 1.5);
    for (const auto& f : p.input.future) CHECK(f(0) == 1.5);
  }
  for (int i = 0; i < 10; ++i) CHECK(mu.weights(i) == doctest::Approx(0.1));

  const auto again = st::sample_input_law(spec, 7, 3, 10, 42);
  CHECK(again.to_json().dump() == mu.to_json().dump());
}

TEST_CASE("periodic input law mixes the cyclic shifts by their phase weights") {
  const auto spec = st::InputLawSpec::periodic_cycle({v1(2.0), v1(-2.0)}, {0.5, 0.5});
  const auto mu = st::sample_input_law(spec, 6, 2, 64, 7);
  int lead_pos = 0, lead_neg = 0;
  for (const auto& p : mu.particles) {
    for (int k = 0; k + 1 < 6; ++k)
      CHECK(p.input.past.scalar_at_lag(k) == -p.input.past.scalar_at_lag(k + 1));
    CHECK(p.input.at_time(1) == -p.input.at_time(0));
    CHECK(p.input.at_time(2) == p.input.at_time(0));
    (p.input.past.scalar_at_lag(0) > 0 ? lead_pos : lead_neg) += 1;
  }
  CHECK(lead_pos + lead_neg == 64);
  CHECK(lead_pos > 16);
  CHECK(lead_neg > 16);

  const auto pinned =
      st::sample_input_law(st::InputLawSpec::periodic_cycle({v1(2.0), v1(-2.0)}, {1.0, 0.0}),
                           6, 0, 8, 7);
  for (const auto& p : pinned.particles) CHECK(p.input.past.scalar_at_lag(0) == 2.0);
}

TEST_CASE("ar1 input law reproduces its stationary moments") {
  const auto spec = st::InputLawSpec::ar1(0.9, 1.0);
  const auto mu = st::sample_input_law(spec, 200, 0, 10000, 314);
  double num = 0.0, den = 0.0, mean = 0.0;
  long count = 0;
  for (const auto& p : mu.particles) {
    const auto& row = p.input.past.values();
    for (int t = 0; t + 1 < 200; ++t) num += row(0, t) * row(0, t + 1);
    for (int t = 0; t < 200; ++t) {
      den += row(0, t) * row(0, t);
      mean += row(0, t);
      ++count;
    }
  }
  const double rho1 = num / den;
  const double var = den / static_cast<double>(count);
  mean /= static_cast<double>(count);
  CHECK(std::abs(rho1 - 0.9) <= 0.02);
  CHECK(var == doctest::Approx(1.0 / (1.0 - 0.81)).epsilon(0.03));
  CHECK(std::abs(mean) <= 0.05);
}

TEST_CASE("markov input law follows its transition structure") {
  Eigen::MatrixXd P(2, 2);
  P << 0.9, 0.1, 0.4, 0.6;
  const auto spec = st::InputLawSpec::markov({v1(0.0), v1(1.0)}, P);
  const auto mu = st::sample_input_law(spec, 50, 0, 4000, 99);
  double freq1 = 0.0;
  long total = 0;
  long n00 = 0, n01 = 0, n10 = 0, n11 = 0;
  for (const auto& p : mu.particles) {
    const auto& row = p.input.past.values();
    for (int t = 0; t < 50; ++t) {
      freq1 += row(0, t);
      ++total;
    }
    for (int t = 0; t + 1 < 50; ++t) {
      const bool a = row(0, t) > 0.5, b = row(0, t + 1) > 0.5;
      (a ? (b ? n11 : n10) : (b ? n01 : n00)) += 1;
    }
  }
  CHECK(std::abs(freq1 / total - 0.2) <= 0.02);
  CHECK(std::abs(double(n01) / double(n00 + n01) - 0.1) <= 0.03);
  CHECK(std::abs(double(n11) / double(n10 + n11) - 0.6) <= 0.03);

  const auto frozen = st::sample_input_law(
      st::InputLawSpec::markov({v1(3.0), v1(5.0)}, Eigen::MatrixXd::Identity(2, 2)), 20,
      0, 100, 5);
  int seen3 = 0, seen5 = 0;
  for (const auto& p : frozen.particles) {
    const double s = p.input.past.scalar_at_lag(0);
    for (int k = 0; k < 20; ++k) CHECK(p.input.past.scalar_at_lag(k) == s);
    (s < 4.0 ? seen3 : seen5) += 1;
  }
  CHECK(seen3 > 20);
  CHECK(seen5 > 20);
}

TEST_CASE("pushforward of point masses applies the one-step map exactly") {
  const auto sys = half_gain();
  st::ParticleMeasure mu;
  st::Particle p;
  p.state = seq::Window::from_scalars({0.25, 0.5});
  p.input.past = seq::Window::from_scalars({1.0});
  p.input.future = {v1(2.0), v1(-1.0)};
  mu.particles.push_back(p);
  p.state = seq::Window::from_scalars({0.0, -2.0});
  mu.particles.push_back(p);
  mu.weights = Eigen::VectorXd::Constant(2, 0.5);
  mu.horizon = 1;

  const auto out = st::pushforward_phi_star(sys, mu);
  CHECK(out.size() == 2);
  CHECK(out.horizon == 2);
  CHECK(out.particles[0].state.len() == 3);
  CHECK(out.particles[0].state.scalar_at_lag(0) == 0.5 * 0.5 + 2.0);
  CHECK(out.particles[0].state.scalar_at_lag(1) == 0.5);
  CHECK(out.particles[0].state.scalar_at_lag(2) == 0.25);
  CHECK(out.particles[1].state.scalar_at_lag(0) == 0.5 * -2.0 + 2.0);
  CHECK(out.particles[0].input.past.scalar_at_lag(0) == 2.0);
  CHECK(out.particles[0].input.past.scalar_at_lag(1) == 1.0);
  CHECK(out.particles[0].input.n_future() == 1);
  CHECK(out.weights(0) == 0.5);
  CHECK(out.weights(1) == 0.5);

  st::ParticleMeasure zero;
  st::Particle z;
  z.state = seq::Window::constant(1, 2, 0.0);
  z.input.past = seq::Window::from_scalars({0.7});
  z.input.future = {v1(0.7)};
  zero.particles.push_back(z);
  zero.weights = Eigen::VectorXd::Ones(1);
  const auto zout = st::pushforward_phi_star(sys::SystemInstance::kloeden(), zero);
  CHECK(zout.particles[0].state.scalar_at_lag(0) == 0.0);

  st::ParticleMeasure dry = mu;
  for (auto& q : dry.particles) q.input.future.clear();
  CHECK_THROWS_AS(st::pushforward_phi_star(sys, dry), ValidationError);
}

TEST_CASE("pushforward drops diverging particles and renormalizes") {
  const auto sys = sys::SystemInstance::linear(m1(4.0), m1(1.0));
  st::ParticleMeasure mu;
  st::Particle a;
  a.state = seq::Window::from_scalars({1e308});
  a.input.past = seq::Window::from_scalars({0.0});
  a.input.future = {v1(1.0)};
  st::Particle b;
  b.state = seq::Window::from_scalars({0.0});
  b.input.past = seq::Window::from_scalars({0.0});
  b.input.future = {v1(2.0)};
  mu.particles = {a, b};
  mu.weights = Eigen::VectorXd::Constant(2, 0.5);
  const auto out = st::pushforward_phi_star(sys, mu);
  CHECK(out.size() == 1);
  CHECK(out.diverged == 1);
  CHECK(out.weights(0) == 1.0);
  CHECK(out.particles[0].state.scalar_at_lag(0) == 2.0);
}

TEST_CASE("pullback measure particles are genuine solution segments") {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0.4, 0.2, 0.0, 0.3;
  B << 1.0, 0.5;
  const auto sys = sys::SystemInstance::linear(A, B);
  const auto spec = st::InputLawSpec::ar1(0.5, 1.0);
  pb::PullbackConfig cfg;
  cfg.horizon = 40;
  cfg.seed = 9;
  const auto mu = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, 200, 3);
  CHECK(mu.size() == 200);
  CHECK(mu.diverged == 0);
  CHECK(mu.particles[0].state.len() == cfg.stored_len());
  CHECK(mu.particles[0].state.dim() == 2);
  CHECK(mu.particles[0].input.past.len() == 40);
  CHECK(mu.particles[0].input.n_future() == 3);
  CHECK(std::abs(mu.weights.sum() - 1.0) <= 1e-12);

  const auto chk = st::check_stochastic_solution(sys, mu, 1e-10);
  CHECK(chk.is_solution);
  CHECK(chk.max_residual <= 1e-12);

  const auto again = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, 200, 3);
  CHECK(again.to_json().dump() == mu.to_json().dump());
}

TEST_CASE("linear pullback matches closed-form stationary moments") {
  st::StateInitLaw zero_init;
  zero_init.kind = st::StateInitLaw::Kind::dirac;

  // scalar: variance of sum 0.5^k u_{-k} is 1/(1-0.25)
  {
    const auto sys = half_gain();
    const auto spec =
        st::InputLawSpec::iid_normal(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1));
    pb::PullbackConfig cfg;
    cfg.horizon = 40;
    cfg.seed = 17;
    zero_init.value = Eigen::VectorXd::Zero(1);
    const auto mu = st::pullback_measure(sys, spec, cfg, zero_init, 10000);
    double mean = 0.0, ss = 0.0;
    for (const auto& p : mu.particles) mean += p.state.scalar_at_lag(0);
    mean /= mu.size();
    for (const auto& p : mu.particles) {
      const double d = p.state.scalar_at_lag(0) - mean;
      ss += d * d;
    }
    const double var = ss / (mu.size() - 1);
    const double truth = 4.0 / 3.0;
    CHECK(std::abs(mean) <= 3.0 * std::sqrt(truth / mu.size()));
    CHECK(std::abs(var - truth) <= 3.0 * truth * std::sqrt(2.0 / (mu.size() - 1)));
  }

  // matrix: covariance is the series sum A^k B B' A'^k
  {
    Eigen::MatrixXd A(2, 2);
    A << 0.4, 0.2, 0.0, 0.3;
    const Eigen::MatrixXd B = Eigen::MatrixXd::Identity(2, 2);
    const auto sys = sys::SystemInstance::linear(A, B);
    const auto spec =
        st::InputLawSpec::iid_normal(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2));
    pb::PullbackConfig cfg;
    cfg.horizon = 40;
    cfg.seed = 18;
    zero_init.value = Eigen::VectorXd::Zero(2);
    const auto mu = st::pullback_measure(sys, spec, cfg, zero_init, 10000);
    const int N = mu.size();
    Eigen::MatrixXd X(2, N);
    for (int i = 0; i < N; ++i) X.col(i) = mu.particles[static_cast<std::size_t>(i)].state.at_lag(0);
    const Eigen::VectorXd xbar = X.rowwise().mean();
    const Eigen::MatrixXd C =
        (X.colwise() - xbar) * (X.colwise() - xbar).transpose() / (N - 1);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(2, 2);
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(2, 2);
    for (int k = 0; k < 80; ++k) {
      S += M * B * B.transpose() * M.transpose();
      M = A * M;
    }
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(xbar(i)) <= 3.0 * std::sqrt(S(i, i) / N));
      for (int j = 0; j < 2; ++j) {
        const double se = std::sqrt((S(i, i) * S(j, j) + S(i, j) * S(i, j)) / (N - 1));
        CHECK(std::abs(C(i, j) - S(i, j)) <= 3.0 * se);
      }
    }
  }
}

TEST_CASE("kloeden pullback collapses below threshold and splits above") {
  const auto sys = sys::SystemInstance::kloeden();
  pb::PullbackConfig cfg;
  cfg.horizon = 80;
  cfg.seed = 23;

  const auto calm = st::pullback_measure(sys, st::InputLawSpec::iid_dirac(v1(0.5)), cfg,
                                         st::StateInitLaw{}, 100);
  for (const auto& p : calm.particles)
    CHECK(std::abs(p.state.scalar_at_lag(0)) <= 1e-10);
  CHECK(st::check_stochastic_solution(sys, calm, 1e-10).is_solution);

  st::StateInitLaw wide;
  wide.box = {{-3.0, 3.0}};
  pb::PullbackConfig cfg2 = cfg;
  cfg2.horizon = 60;
  const auto split = st::pullback_measure(sys, st::InputLawSpec::iid_dirac(v1(1.5)),
                                          cfg2, wide, 200);
  int n_neg = 0, n_zero = 0, n_pos = 0;
  for (const auto& p : split.particles) {
    const double x = p.state.scalar_at_lag(0);
    const double d_neg = std::abs(x + 0.5), d_zero = std::abs(x), d_pos = std::abs(x - 0.5);
    const double best = std::min({d_neg, d_zero, d_pos});
    CHECK(best <= 1e-6);
    (d_neg == best ? n_neg : d_zero == best ? n_zero : n_pos) += 1;
  }
  CHECK(n_neg > 0);
  CHECK(n_zero >= 1);
  CHECK(n_pos > 0);
  CHECK(n_neg + n_zero + n_pos == 200);
  MESSAGE("basin masses (init-law artifacts): ", n_neg / 200.0, " ", n_zero / 200.0, " ",
          n_pos / 200.0);
}

TEST_CASE("measure distances reproduce atom transport examples") {
  const st::MeasureMetric m;
  auto d0 = scalar_cloud({0.0}, {1.0});
  auto d1 = scalar_cloud({1.0}, {1.0});
  CHECK(st::measure_dist(d0, d1, m, false, true) == doctest::Approx(1.0).epsilon(1e-14));

  auto u01 = scalar_cloud({0.0, 1.0}, {0.5, 0.5});
  auto u12 = scalar_cloud({1.0, 2.0}, {0.5, 0.5});
  CHECK(st::measure_dist(u01, u12, m, false, true) ==
        doctest::Approx(1.0).epsilon(1e-14));

  auto self = scalar_cloud({0.3, -1.2, 4.0}, {0.2, 0.5, 0.3});
  CHECK(st::measure_dist(self, self, m, false, true) <= 1e-14);
  st::MeasureMetric m2 = m;
  m2.order = 2.0;
  CHECK(st::measure_dist(self, self, m2, false, true) <= 1e-12);

  // dimension mismatch
  st::ParticleMeasure two;
  st::Particle p;
  p.input.past = seq::Window(2, 1);
  p.input.past.values().setZero();
  two.particles.push_back(p);
  two.weights = Eigen::VectorXd::Ones(1);
  CHECK_THROWS_AS(st::measure_dist(d0, two, m, false, true), ValidationError);

  // beyond the cap without geometric weights there is no fallback
  st::MeasureMetric tiny = m;
  tiny.exact_cap = 1;
  tiny.weights = seq::WeightSeq::product();
  CHECK_THROWS_AS(st::measure_dist(u01, u12, tiny, false, true), ValidationError);

  st::MeasureMetric bad = m;
  bad.order = 0.5;
  CHECK_THROWS_AS(st::measure_dist(u01, u12, bad, false, true), ValidationError);
  CHECK_THROWS_AS(st::measure_dist(u01, u12, m, false, false), ValidationError);
}

TEST_CASE("exact cloud distance matches the scalar closed form and brute force") {
  rng::Rng r(2024);
  const st::MeasureMetric m;

  // random weights against the quantile closed form, scalar one-entry windows
  for (int trial = 0; trial < 200; ++trial) {
    const int na = 1 + r.uniform_int(8), nb = 1 + r.uniform_int(8);
    std::vector<double> xs, ys, wa, wb;
    for (int i = 0; i < na; ++i) xs.push_back(r.uniform(-3.0, 3.0));
    for (int i = 0; i < nb; ++i) ys.push_back(r.uniform(-3.0, 3.0));
    for (int i = 0; i < na; ++i) wa.push_back(0.1 + r.uniform01());
    for (int i = 0; i < nb; ++i) wb.push_back(0.1 + r.uniform01());
    double sa = 0.0, sb = 0.0;
    for (double w : wa) sa += w;
    for (double w : wb) sb += w;
    for (double& w : wa) w /= sa;
    for (double& w : wb) w /= sb;
    // drop the normalization deficit into the first weight
    double ca = 0.0, cb = 0.0;
    for (double w : wa) ca += w;
    for (double w : wb) cb += w;
    wa[0] += 1.0 - ca;
    wb[0] += 1.0 - cb;

    auto mu = scalar_cloud(xs, wa);
    auto nu = scalar_cloud(ys, wb);
    st::MeasureMetric mm = m;
    mm.order = trial % 2 == 0 ? 1.0 : 2.0;
    const double lhs = st::measure_dist(mu, nu, mm, false, true);
    const double rhs = transport::wasserstein_1d(
        xs, wa, ys, wb, mm.order);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }

  // uniform six-atom clouds of length-2 windows against permutation search
  rng::Rng r2(77);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 6;
    std::vector<seq::Window> aw, bw;
    for (int i = 0; i < n; ++i) {
      aw.push_back(seq::Window::from_scalars({r2.uniform(-2.0, 2.0), r2.uniform(-2.0, 2.0)}));
      bw.push_back(seq::Window::from_scalars({r2.uniform(-2.0, 2.0), r2.uniform(-2.0, 2.0)}));
    }
    st::ParticleMeasure mu, nu;
    for (int i = 0; i < n; ++i) {
      st::Particle pa, pb2;
      pa.input.past = aw[static_cast<std::size_t>(i)];
      pb2.input.past = bw[static_cast<std::size_t>(i)];
      mu.particles.push_back(pa);
      nu.particles.push_back(pb2);
    }
    mu.weights = nu.weights = Eigen::VectorXd::Constant(n, 1.0 / n);
    const double solver = st::measure_dist(mu, nu, m, false, true);

    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        g(i, j) = seq::dist(aw[static_cast<std::size_t>(i)],
                            bw[static_cast<std::size_t>(j)], m.weights, m.metric_p);
    std::vector<int> perm = {0, 1, 2, 3, 4, 5};
    double best = kInf;
    do {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += g(i, perm[static_cast<std::size_t>(i)]);
      best = std::min(best, c / n);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(solver == doctest::Approx(best).epsilon(1e-10));
  }
}

TEST_CASE("non-solutions are flagged with the exact defect") {
  const auto sys = half_gain();
  st::ParticleMeasure mu;
  st::Particle p;
  p.state = seq::Window::from_scalars({0.0, 1.0});
  p.input.past = seq::Window::from_scalars({0.0, 0.0});
  mu.particles.push_back(p);
  mu.weights = Eigen::VectorXd::Ones(1);

  const auto chk = st::check_stochastic_solution(sys, mu, 1e-10);
  CHECK(!chk.is_solution);
  CHECK(chk.max_residual == 1.0);
  CHECK(st::fixedpoint_residual(sys, mu, st::MeasureMetric{}) ==
        doctest::Approx(1.0).epsilon(1e-14));

  st::Particle q;
  q.state = seq::Window::from_scalars({0.0, 0.0});
  q.input.past = seq::Window::from_scalars({0.0, 0.0});
  st::ParticleMeasure ok;
  ok.particles.push_back(q);
  ok.weights = Eigen::VectorXd::Ones(1);
  CHECK(st::check_stochastic_solution(sys, ok, 0.0).is_solution);
  CHECK(st::fixedpoint_residual(sys, ok, st::MeasureMetric{}) <= 1e-14);
}

TEST_CASE("a law-level fixed point that is not a pathwise solution") {
  const auto sys = sys::SystemInstance::linear(m1(1.0), m1(0.0));
  const auto mu = st::product_counterexample(400, 6, 77);
  const st::MeasureMetric m;

  const auto chk = st::check_stochastic_solution(sys, mu, 1e-10);
  CHECK(!chk.is_solution);
  CHECK(chk.max_residual > 0.5);

  const double res = st::fixedpoint_residual(sys, mu, m);
  const auto env = st::two_sample_envelope(
      [&](std::uint64_t sa, std::uint64_t sb) {
        const auto a = st::product_counterexample(400, 5, sa);
        const auto b = st::product_counterexample(400, 5, sb);
        return st::measure_dist(a, b, m, true, true);
      },
      6, 123);
  MESSAGE("product counterexample: residual ", res, " envelope hi ", env.hi);
  CHECK(res <= env.hi);

  // genuine solutions sit at the fixed point exactly
  pb::PullbackConfig cfg;
  cfg.horizon = 30;
  cfg.seed = 4;
  const auto sol = st::pullback_measure(half_gain(),
                                        st::InputLawSpec::iid_uniform(v1(-1.0), v1(1.0)),
                                        cfg, st::StateInitLaw{}, 150);
  CHECK(st::fixedpoint_residual(half_gain(), sol, m) <= 1e-12);
}

TEST_CASE("solution map sampling agrees with the measure pullback") {
  const auto sys = half_gain();
  const auto spec = st::InputLawSpec::iid_uniform(v1(-1.0), v1(1.0));
  pb::PullbackConfig cfg;
  cfg.horizon = 40;
  cfg.ensemble = 12;
  cfg.seed = 3;

  const auto sol = st::pushforward_solution_map(sys, spec, cfg, 400);
  CHECK(sol.size() == 400);
  CHECK(st::check_stochastic_solution(sys, sol, 1e-10).is_solution);

  const auto pull = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, 400);
  const double d = st::measure_dist(pull, sol, st::MeasureMetric{}, true, true);
  MESSAGE("pullback vs solution map at N=400: ", d);
  CHECK(d < 5.0 / std::sqrt(400.0));

  const auto point = st::pushforward_solution_map(
      sys, st::InputLawSpec::iid_dirac(v1(0.8)), cfg, 3);
  for (const auto& p : point.particles) {
    CHECK(p.state.scalar_at_lag(0) == doctest::Approx(1.6).epsilon(1e-9));
    CHECK(p.state.values() == point.particles[0].state.values());
  }
}

TEST_CASE("solution map contracts kloeden below threshold and aborts above") {
  const auto sys = sys::SystemInstance::kloeden();
  pb::PullbackConfig cfg;
  cfg.horizon = 160;
  cfg.ensemble = 8;
  cfg.seed = 11;
  const auto calm = st::pushforward_solution_map(
      sys, st::InputLawSpec::iid_uniform(v1(0.2), v1(0.8)), cfg, 50);
  for (const auto& p : calm.particles)
    CHECK(p.state.values().cwiseAbs().maxCoeff() < 1e-8);

  pb::PullbackConfig cfg2;
  cfg2.horizon = 60;
  cfg2.ensemble = 16;
  cfg2.seed = 12;
  CHECK_THROWS_AS(st::pushforward_solution_map(
                      sys, st::InputLawSpec::iid_uniform(v1(1.1), v1(1.9)), cfg2, 10),
                  ValidationError);
}

TEST_CASE("periodicity distances certify the minimal period") {
  const auto sys = half_gain();
  const auto spec = st::InputLawSpec::periodic_cycle({v1(1.0), v1(-1.0)}, {0.8, 0.2});
  pb::PullbackConfig cfg;
  cfg.horizon = 40;
  cfg.seed = 6;
  st::StateInitLaw zero_init;
  zero_init.kind = st::StateInitLaw::Kind::dirac;
  zero_init.value = Eigen::VectorXd::Zero(1);
  const auto mu = st::pullback_measure(sys, spec, cfg, zero_init, 500);
  const st::MeasureMetric m;

  CHECK(st::periodicity_check(mu, 0, m).distance == 0.0);

  int lead_pos = 0;
  for (const auto& p : mu.particles)
    if (p.input.past.scalar_at_lag(0) > 0) ++lead_pos;
  const double a = lead_pos / 500.0;

  const auto rep1 = st::periodicity_check(mu, 1, m);
  const auto rep2 = st::periodicity_check(mu, 2, m);
  MESSAGE("periodicity distances: k=1 ", rep1.distance, " k=2 ", rep2.distance);
  CHECK(rep2.distance <= 1e-9);
  const double expected = std::abs(2.0 * a - 1.0) * (4.0 / 3.0 + 2.0);
  CHECK(std::abs(rep1.distance - expected) <= 1e-6);
  CHECK(rep2.divisor_distances.at(1) == doctest::Approx(rep1.distance).epsilon(1e-12));

  // a constant-input solution is 1-periodic
  pb::PullbackConfig kcfg;
  kcfg.horizon = 80;
  kcfg.seed = 2;
  const auto still = st::pullback_measure(sys::SystemInstance::kloeden(),
                                          st::InputLawSpec::iid_dirac(v1(0.5)), kcfg,
                                          st::StateInitLaw{}, 60);
  CHECK(st::periodicity_check(still, 1, m).distance <= 1e-9);

  CHECK_THROWS_AS(st::periodicity_check(mu, 40, m), ValidationError);
}

TEST_CASE("fading memory of the law assignment shows the linear gain") {
  const auto sys = half_gain();
  const auto base =
      st::InputLawSpec::iid_normal(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1));
  auto shifted = [](double delta) {
    return st::InputLawSpec::iid_normal(Eigen::VectorXd::Constant(1, delta),
                                        Eigen::VectorXd::Ones(1));
  };
  pb::PullbackConfig cfg;
  cfg.horizon = 40;
  cfg.seed = 21;
  const st::MeasureMetric m;
  const auto rep =
      st::stoch_fmp_probe(sys, base, {base, shifted(0.2), shifted(0.05)}, cfg, m, 200);
  REQUIRE(rep.table.size() == 3);
  CHECK(rep.table[0].input_dist <= 1e-14);
  CHECK(rep.table[0].solution_dist <= 1e-14);
  CHECK(rep.table[0].ratio == 0.0);
  CHECK(rep.table[1].input_dist == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(rep.table[1].ratio == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(rep.table[1].pair_dist == doctest::Approx(3.0 * 0.2).epsilon(1e-9));
  CHECK(rep.table[2].input_dist == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(rep.table[2].ratio == doctest::Approx(2.0).epsilon(1e-9));

  const auto kbase = st::InputLawSpec::iid_uniform(v1(1.1), v1(1.9));
  const auto kpert = st::InputLawSpec::iid_uniform(v1(1.15), v1(1.95));
  pb::PullbackConfig kcfg;
  kcfg.horizon = 60;
  kcfg.seed = 22;
  const auto krep = st::stoch_fmp_probe(sys::SystemInstance::kloeden(), kbase, {kpert},
                                        kcfg, m, 150);
  CHECK(krep.table[0].input_dist == doctest::Approx(0.05).epsilon(1e-9));
  CHECK(std::isfinite(krep.table[0].ratio));
  CHECK(krep.table[0].ratio > 0.01);
  MESSAGE("kloeden law response ratio: ", krep.table[0].ratio);
}

TEST_CASE("pullback input marginals match fresh law samples") {
  const auto spec = st::InputLawSpec::ar1(0.6, 0.8);
  const auto sys = half_gain();
  pb::PullbackConfig cfg;
  cfg.horizon = 16;
  cfg.seed = 31;
  st::StateInitLaw zero_init;
  zero_init.kind = st::StateInitLaw::Kind::dirac;
  zero_init.value = Eigen::VectorXd::Zero(1);
  const st::MeasureMetric m;

  const auto mu = st::pullback_measure(sys, spec, cfg, zero_init, 1000);
  const auto fresh = st::sample_input_law(spec, 16, 0, 1000, 555);
  const double d_main = st::measure_dist(mu, fresh, m, false, true);

  const auto env = st::two_sample_envelope(
      [&](std::uint64_t sa, std::uint64_t sb) {
        const auto x = st::sample_input_law(spec, 16, 0, 1000, sa);
        const auto y = st::sample_input_law(spec, 16, 0, 1000, sb);
        return st::measure_dist(x, y, m, false, true);
      },
      3, 808);
  MESSAGE("marginal preservation: distance ", d_main, " envelope hi ", env.hi);
  CHECK(d_main <= env.hi);
}

TEST_CASE("pullback and solution-map laws converge at the sampling rate") {
  const auto sys = half_gain();
  const auto spec = st::InputLawSpec::iid_uniform(v1(-1.0), v1(1.0));
  pb::PullbackConfig cfg;
  cfg.horizon = 30;
  cfg.ensemble = 8;
  cfg.seed = 5;

  st::MeasureMetric sliced;
  sliced.exact_cap = 1;  // force the projection route at every size
  sliced.sliced_projections = 128;
  sliced.sliced_seed = 7;

  const std::vector<int> sizes = {100, 1000, 10000};
  std::vector<double> ds;
  for (int n : sizes) {
    const auto pull = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, n);
    const auto sol = st::pushforward_solution_map(sys, spec, cfg, n);
    ds.push_back(st::measure_dist(pull, sol, sliced, true, true));
  }
  MESSAGE("sliced distances at N=100,1000,10000: ", ds[0], " ", ds[1], " ", ds[2]);
  CHECK(ds[1] < ds[0]);
  CHECK(ds[2] < ds[1]);

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double x = std::log(static_cast<double>(sizes[i]));
    const double y = std::log(ds[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n3 = 3.0;
  const double slope = (sxy - sx * sy / n3) / (sxx - sx * sx / n3);
  MESSAGE("empirical rate exponent: ", slope);
  CHECK(slope > -0.75);
  CHECK(slope < -0.25);

  // the exact metric agrees on the direction at desk scale
  const st::MeasureMetric exact;
  const auto p100 = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, 100);
  const auto s100 = st::pushforward_solution_map(sys, spec, cfg, 100);
  const auto p1k = st::pullback_measure(sys, spec, cfg, st::StateInitLaw{}, 1000);
  const auto s1k = st::pushforward_solution_map(sys, spec, cfg, 1000);
  const double e100 = st::measure_dist(p100, s100, exact, true, true);
  const double e1k = st::measure_dist(p1k, s1k, exact, true, true);
  MESSAGE("exact distances at N=100, 1000: ", e100, " ", e1k);
  CHECK(e1k < e100);
}

TEST_CASE("particle measures serialize to csv and json") {
  st::ParticleMeasure mu;
  st::Particle p;
  p.state = seq::Window::from_scalars({2.0, 3.0});
  p.input.past = seq::Window::from_scalars({7.0});
  mu.particles.push_back(p);
  mu.weights = Eigen::VectorXd::Ones(1);
  mu.horizon = 1;
  CHECK(mu.to_csv() == "1,2,3,7\n");

  p.input.future = {v1(4.0)};
  mu.particles[0] = p;
  const auto j = mu.to_json();
  const auto back = st::ParticleMeasure::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
  CHECK(back.particles[0].input.future[0](0) == 4.0);

  // input-only measures have a null state slot
  const auto inputs = st::sample_input_law(st::InputLawSpec::iid_dirac(v1(1.0)), 3, 0, 2, 1);
  const auto rj = inputs.to_json();
  CHECK(rj["particles"][0]["state"].is_null());
  CHECK(st::ParticleMeasure::from_json(rj).to_json().dump() == rj.dump());

  nlohmann::json broken = j;
  broken["weights"][0] = 0.5;
  CHECK_THROWS_AS(st::ParticleMeasure::from_json(broken), ValidationError);
}

TEST_CASE("measure validation rejects malformed clouds") {
  st::ParticleMeasure mu;
  CHECK_THROWS_AS(mu.validate(), ValidationError);

  st::Particle p;
  p.input.past = seq::Window::from_scalars({1.0});
  mu.particles.push_back(p);
  mu.weights = Eigen::VectorXd::Constant(1, 0.9);
  CHECK_THROWS_AS(mu.validate(), ValidationError);
  mu.weights = Eigen::VectorXd::Ones(1);
  CHECK_NOTHROW(mu.validate());

  st::Particle ragged;
  ragged.input.past = seq::Window::from_scalars({1.0, 2.0});
  mu.particles.push_back(ragged);
  mu.weights = Eigen::VectorXd::Constant(2, 0.5);
  CHECK_THROWS_AS(mu.validate(), ValidationError);

  // ten thousand uniform weights still sum to 1 within 1e-12
  const auto big = st::sample_input_law(st::InputLawSpec::iid_dirac(v1(0.0)), 2, 0,
                                        10000, 3);
  CHECK(std::abs(big.weights.sum() - 1.0) <= 1e-12);
}

TEST_CASE("the envelope helper summarizes repeated draws") {
  int call = 0;
  const auto env = st::two_sample_envelope(
      [&](std::uint64_t, std::uint64_t) { return static_cast<double>(++call); }, 4, 0);
  CHECK(env.reps == 4);
  CHECK(env.mean == doctest::Approx(2.5));
  CHECK(env.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(env.hi == doctest::Approx(2.5 + 3.0 * std::sqrt(5.0 / 3.0)));
  CHECK(env.max_seen == 4.0);
  CHECK_THROWS_AS(st::two_sample_envelope([](std::uint64_t, std::uint64_t) { return 0.0; },
                                          1, 0),
                  ValidationError);
}
