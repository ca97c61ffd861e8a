#include "doctest.h"

#include "echolab/system.hpp"

#include <cmath>
#include <vector>

using namespace echolab;
using seq::Window;
using sys::SystemInstance;

namespace {

Eigen::MatrixXd mat1(double a) {
  Eigen::MatrixXd m(1, 1);
  m << a;
  return m;
}

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

seq::WindowWithFuture with_future(const Window& past,
                                  const std::vector<double>& future) {
  seq::WindowWithFuture out;
  out.past = past;
  for (double f : future) out.future.push_back(vec1(f));
  return out;
}

}  // namespace

TEST_CASE("state map evaluation") {
  SystemInstance k = SystemInstance::kloeden();
  CHECK(k.f(vec1(0.5), vec1(1.5))(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(k.f(vec1(0.0), vec1(-4.7))(0) == 0.0);
  CHECK(k.f(vec1(0.0), vec1(123.0))(0) == 0.0);

  SystemInstance nilpotent = SystemInstance::linear(mat1(0.0), mat1(1.0));
  CHECK(nilpotent.f(vec1(3.0), vec1(7.0))(0) == 7.0);

  CHECK_THROWS_AS(k.f(Eigen::VectorXd::Zero(2), vec1(1.0)), ValidationError);
  CHECK_THROWS_AS(k.f(vec1(std::nan("")), vec1(1.0)), NumericalError);
}

TEST_CASE("readout evaluation") {
  SystemInstance ident = SystemInstance::kloeden();
  CHECK(ident.h(vec1(0.25))(0) == 0.25);
  CHECK(ident.readout_dim() == 1);

  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(2, 1);
  Eigen::MatrixXd W(1, 2);
  W << 1.0, 0.0;
  sys::Readout ro;
  ro.kind = sys::Readout::Kind::linear;
  ro.W = W;
  SystemInstance projected(sys::LinearMap{A, B}, ro);
  Eigen::VectorXd x(2);
  x << 1.0, 5.0;
  CHECK(projected.h(x)(0) == 1.0);
  CHECK(projected.readout_dim() == 1);

  ro.W = Eigen::MatrixXd::Zero(1, 2);
  SystemInstance zeroed(sys::LinearMap{A, B}, ro);
  CHECK(zeroed.h(x)(0) == 0.0);
}

TEST_CASE("leaky tanh map") {
  sys::LeakyTanhMap m;
  m.A = mat1(0.8);
  m.B = mat1(0.3);
  m.alpha = 0.25;
  m.bias = vec1(0.1);
  SystemInstance esn(m, sys::Readout{});
  double x = 0.4, u = -0.2;
  double expect = 0.75 * x + 0.25 * std::tanh(0.8 * x + 0.3 * u + 0.1);
  CHECK(esn.f(vec1(x), vec1(u))(0) == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("composite map reduces to its parts") {
  sys::CompositeMap cm;
  cm.A = mat1(0.5);
  cm.B = mat1(1.0);
  cm.bias = vec1(0.0);
  cm.leak = 1.0;
  SystemInstance plain(cm, sys::Readout{});
  SystemInstance lin = SystemInstance::linear(mat1(0.5), mat1(1.0));
  CHECK(plain.f(vec1(0.7), vec1(-0.3))(0) ==
        doctest::Approx(lin.f(vec1(0.7), vec1(-0.3))(0)).epsilon(1e-15));

  cm.layers.push_back({sys::CompositeMap::Layer::Kind::tanh, {}, {}});
  cm.leak = 0.25;
  SystemInstance esn_like(cm, sys::Readout{});
  sys::LeakyTanhMap ref;
  ref.A = mat1(0.5);
  ref.B = mat1(1.0);
  ref.alpha = 0.25;
  ref.bias = vec1(0.0);
  SystemInstance esn(ref, sys::Readout{});
  CHECK(esn_like.f(vec1(0.7), vec1(-0.3))(0) ==
        doctest::Approx(esn.f(vec1(0.7), vec1(-0.3))(0)).epsilon(1e-15));
}

TEST_CASE("kloeden fixed points for constant input in (1,2)") {
  SystemInstance k = SystemInstance::kloeden();
  for (double uplus : {1.2, 1.5, 1.9}) {
    double branch = uplus - 1.0;
    for (double xfix : {0.0, branch, -branch}) {
      CHECK(std::abs(k.f(vec1(xfix), vec1(uplus))(0) - xfix) < 1e-12);
    }
    // bisection sweep: sign changes of f(x,u+) - x happen only at the three
    // known roots
    int roots = 0;
    double prev_g = k.f(vec1(-3.0), vec1(uplus))(0) + 3.0;
    for (int i = 1; i <= 6000; ++i) {
      double x = -3.0 + 6.0 * i / 6000.0;
      double g = k.f(vec1(x), vec1(uplus))(0) - x;
      if ((prev_g < 0.0 && g > 0.0) || (prev_g > 0.0 && g < 0.0) || g == 0.0) {
        double lo = x - 6.0 / 6000.0, hi = x;
        for (int it = 0; it < 80; ++it) {
          double mid = 0.5 * (lo + hi);
          double gm = k.f(vec1(mid), vec1(uplus))(0) - mid;
          if ((gm < 0.0) == (prev_g < 0.0))
            lo = mid;
          else
            hi = mid;
        }
        double root = 0.5 * (lo + hi);
        bool known = std::abs(root) < 1e-9 || std::abs(root - branch) < 1e-9 ||
                     std::abs(root + branch) < 1e-9;
        CHECK(known);
        ++roots;
      }
      prev_g = g;
    }
    CHECK(roots == 3);
  }
}

TEST_CASE("linear state map is affine in the state") {
  rng::Rng r(7);
  // dyadic entries keep every product and sum exact in double precision
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0.25, -0.125, 0.5, 0.375;
  B << 1.0, -0.5;
  SystemInstance lin = SystemInstance::linear(A, B);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(2), xp(2), u(1);
    for (int i = 0; i < 2; ++i) {
      x(i) = static_cast<double>(r.uniform_int(33)) * 0.125 - 2.0;
      xp(i) = static_cast<double>(r.uniform_int(33)) * 0.125 - 2.0;
    }
    u(0) = static_cast<double>(r.uniform_int(33)) * 0.125 - 2.0;
    Eigen::VectorXd lhs = lin.f(x + xp, u) - lin.f(xp, u);
    CHECK((lhs - A * x).norm() == 0.0);
  }
  // general real entries: affine up to rounding
  Eigen::MatrixXd Ar(2, 2);
  Ar << 0.3, -0.1, 0.2, 0.4;
  SystemInstance lr = SystemInstance::linear(Ar, B);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(2), xp(2), u(1);
    for (int i = 0; i < 2; ++i) {
      x(i) = r.uniform(-3.0, 3.0);
      xp(i) = r.uniform(-3.0, 3.0);
    }
    u(0) = r.uniform(-3.0, 3.0);
    Eigen::VectorXd lhs = lr.f(x + xp, u) - lr.f(xp, u);
    CHECK((lhs - Ar * x).norm() < 1e-13);
  }
}

TEST_CASE("phi_step grows the state window and consumes an input") {
  SystemInstance k = SystemInstance::kloeden();
  Window state = Window::from_scalars({0.0});
  seq::WindowWithFuture input = with_future(Window::from_scalars({0.7}), {1.5});
  auto [new_state, new_input] = sys::phi_step(k, state, input);
  CHECK(new_state.len() == 2);
  CHECK(new_state.scalar_at_lag(1) == 0.0);
  CHECK(new_state.scalar_at_lag(0) == 0.0);
  CHECK(new_input.past.len() == 2);
  CHECK(new_input.past.scalar_at_lag(0) == 1.5);
  CHECK(new_input.n_future() == 0);

  SystemInstance lin = SystemInstance::linear(mat1(0.5), mat1(1.0));
  Window s0 = Window::from_scalars({0.0});
  auto [s1, in1] = sys::phi_step(lin, s0, with_future(Window::from_scalars({0.0}), {1.0}));
  CHECK(s1.len() == 2);
  CHECK(s1.scalar_at_lag(0) == 1.0);

  CHECK_THROWS_AS(sys::phi_step(k, state, with_future(Window::from_scalars({0.7}), {})),
                  ValidationError);
}

TEST_CASE("phi_step then drop_right recovers the previous state") {
  rng::Rng r(13);
  SystemInstance lin = SystemInstance::linear(mat1(0.6), mat1(0.9));
  Window state = Window::from_scalars({r.uniform(-1.0, 1.0), r.uniform(-1.0, 1.0)});
  seq::WindowWithFuture input =
      with_future(Window::from_scalars({0.1, 0.2}), {0.5, -0.5, 0.25});
  for (int t = 0; t < 3; ++t) {
    auto [new_state, new_input] = sys::phi_step(lin, state, input);
    Window back = seq::drop_right(new_state, 1);
    CHECK(back.values() == state.values());
    double expect = lin.f(state.at_lag(0), input.future[0])(0);
    CHECK(new_state.scalar_at_lag(0) == expect);
    state = new_state;
    input = new_input;
  }
}

TEST_CASE("extended map fixes true solutions") {
  SystemInstance lin = SystemInstance::linear(mat1(0.5), mat1(1.0));
  // x_t = 0.5 x_{t-1} + u_t along a concrete input path
  Window u = Window::from_scalars({1.0, -0.5, 2.0, 0.0});
  double x = 0.3;
  std::vector<double> xs;
  std::vector<double> pres;
  pres.push_back(x);
  for (int k = u.len() - 1; k >= 0; --k) {
    x = 0.5 * x + u.scalar_at_lag(k);
    xs.push_back(x);
  }
  Window x_w = Window::from_scalars(xs);
  Window fixed = sys::eval_F(lin, x_w, u, vec1(pres[0]));
  CHECK(fixed.len() == x_w.len());
  CHECK((fixed.values() - x_w.values()).cwiseAbs().maxCoeff() < 1e-14);

  Window dropped = sys::eval_F(lin, x_w, u);
  CHECK(dropped.len() == x_w.len() - 1);
  CHECK((dropped.values() - x_w.values().rightCols(3)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("extended map copies inputs when A is zero") {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2, 2);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(2, 2);
  SystemInstance lin = SystemInstance::linear(A, B);
  rng::Rng r(5);
  Window u(2, 5);
  for (int c = 0; c < 5; ++c)
    for (int d = 0; d < 2; ++d) u.values()(d, c) = r.uniform(-1.0, 1.0);
  Window x(2, 5);
  Window out = sys::eval_F(lin, x, u, Eigen::VectorXd::Zero(2).eval());
  CHECK(out.values() == u.values());
}

TEST_CASE("extended map on kloeden zero state stays zero") {
  SystemInstance k = SystemInstance::kloeden();
  Window zeros(1, 6);
  Window u = Window::constant(1, 6, 1.5);
  Window out = sys::eval_F(k, zeros, u, vec1(0.0));
  CHECK(out.values().isZero(0.0));
}

TEST_CASE("readout distinguishing check") {
  SystemInstance ident = SystemInstance::kloeden();
  Window u = Window::constant(1, 4, 1.5);
  sys::SolutionPair pair{Window::constant(1, 4, 0.5), Window::constant(1, 4, -0.5), u};
  sys::DistinguishReport rep = sys::distinguishes_check(ident, {pair});
  CHECK(rep.violations.empty());
  CHECK_FALSE(rep.kernel_condition.has_value());

  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
  Eigen::MatrixXd B(2, 1);
  B << 1.0, 0.0;
  Eigen::MatrixXd W(1, 2);
  W << 1.0, 0.0;
  sys::Readout ro;
  ro.kind = sys::Readout::Kind::linear;
  ro.W = W;
  SystemInstance projected(sys::LinearMap{A, B}, ro);
  sys::DistinguishReport lin_rep = sys::distinguishes_check(projected, {});
  REQUIRE(lin_rep.kernel_condition.has_value());
  CHECK(*lin_rep.kernel_condition == true);

  // rotation mixes ker(W) = span{e2} into the observed coordinate
  Eigen::MatrixXd R(2, 2);
  double th = 0.4;
  R << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  SystemInstance rotated(sys::LinearMap{R, B}, ro);
  sys::DistinguishReport rot_rep = sys::distinguishes_check(rotated, {});
  REQUIRE(rot_rep.kernel_condition.has_value());
  CHECK(*rot_rep.kernel_condition == false);

  // windows that agree under h at lag 1 but split at lag 0 get flagged
  Window x1(2, 2), x2(2, 2);
  x1.values() << 0.0, 1.0, 5.0, 0.0;
  x2.values() << 0.0, 2.0, -5.0, 0.0;
  Window shared(1, 2);
  sys::DistinguishReport flagged =
      sys::distinguishes_check(rotated, {sys::SolutionPair{x1, x2, shared}});
  CHECK(flagged.violations.size() == 1);
  CHECK(flagged.violations[0] == std::pair<int, int>(0, 0));

  // mismatched inputs are rejected
  sys::SolutionPair bad{x1, x2, shared};
  bad.x2 = Window(2, 3);
  CHECK_THROWS_AS(sys::distinguishes_check(rotated, {bad}), ValidationError);
}

TEST_CASE("system json round trip") {
  sys::LeakyTanhMap m;
  m.A = mat1(0.8);
  m.B = mat1(0.3);
  m.alpha = 0.5;
  m.bias = vec1(-0.2);
  sys::Readout ro;
  ro.kind = sys::Readout::Kind::linear;
  ro.W = mat1(2.0);
  SystemInstance esn(m, ro);
  SystemInstance back = SystemInstance::from_json(esn.to_json());
  CHECK(back.f(vec1(0.3), vec1(0.1)) == esn.f(vec1(0.3), vec1(0.1)));
  CHECK(back.h(vec1(0.3)) == esn.h(vec1(0.3)));

  SystemInstance k = SystemInstance::kloeden();
  SystemInstance kback = SystemInstance::from_json(k.to_json());
  CHECK(kback.f(vec1(0.5), vec1(1.5))(0) == doctest::Approx(0.5));
}
