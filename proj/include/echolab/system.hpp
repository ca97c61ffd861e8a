// Concrete state-space systems: state map f, readout h, the one-step
// extension phi and the entrywise extended map F.
#pragma once

#include <optional>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "echolab/window.hpp"

namespace echolab::sys {

using seq::Window;
using seq::WindowWithFuture;

struct LinearMap {
  Eigen::MatrixXd A;  // n x n
  Eigen::MatrixXd B;  // n x d
};

struct LeakyTanhMap {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  double alpha = 1.0;  // leak in (0,1]
  Eigen::VectorXd bias;
};

// f(x,u) = u*x / (1+|x|), scalar
struct KloedenMap {};

// user-configurable composition: z = A x + B u + bias, then a layer stack of
// componentwise tanh / affine maps, then optional leak blending with x
struct CompositeMap {
  struct Layer {
    enum class Kind { tanh, affine };
    Kind kind = Kind::tanh;
    Eigen::MatrixXd M;  // affine only
    Eigen::VectorXd c;  // affine only
  };
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::VectorXd bias;
  std::vector<Layer> layers;
  double leak = 1.0;  // 1 = no blending
};

struct Readout {
  enum class Kind { identity, linear };
  Kind kind = Kind::identity;
  Eigen::MatrixXd W;  // m x n, linear only
};

class SystemInstance {
 public:
  using StateMap = std::variant<LinearMap, LeakyTanhMap, KloedenMap, CompositeMap>;

  SystemInstance(StateMap f, Readout h);

  static SystemInstance linear(Eigen::MatrixXd A, Eigen::MatrixXd B);
  static SystemInstance kloeden();

  int state_dim() const { return n_; }
  int input_dim() const { return d_; }
  int readout_dim() const { return m_; }

  const StateMap& state_map() const { return f_; }
  const Readout& readout() const { return h_; }
  bool is_linear() const { return std::holds_alternative<LinearMap>(f_); }
  const LinearMap* linear_map() const { return std::get_if<LinearMap>(&f_); }

  // x_t = f(x_{t-1}, u_t); throws NumericalError on non-finite values
  Eigen::VectorXd f(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& u) const;

  Eigen::VectorXd h(const Eigen::Ref<const Eigen::VectorXd>& x) const;

  nlohmann::json to_json() const;
  static SystemInstance from_json(const nlohmann::json& j);

 private:
  StateMap f_;
  Readout h_;
  int n_, d_, m_;
};

// phi(x,u): state window grows by f(x_0, u_1); the input's first future entry
// becomes the new input time 0
std::pair<Window, WindowWithFuture> phi_step(const SystemInstance& sys,
                                             const Window& state,
                                             const WindowWithFuture& input);

// entrywise extended map: output_t = f(x_{t-1}, u_t). With a prepad state the
// output covers the full window; without it the first slot is dropped.
Window eval_F(const SystemInstance& sys, const Window& x_w, const Window& u_w,
              const std::optional<Eigen::VectorXd>& prepad = std::nullopt);

struct SolutionPair {
  Window x1;
  Window x2;
  Window input;
};

struct DistinguishReport {
  // (pair index, lag k) where h(x at lag k+1) matched but h(x at lag k) did not
  std::vector<std::pair<int, int>> violations;
  // linear readouts only: A ker(W) contained in ker(W)
  std::optional<bool> kernel_condition;
};

DistinguishReport distinguishes_check(const SystemInstance& sys,
                                      const std::vector<SolutionPair>& pairs,
                                      double tol = 1e-9);

}  // namespace echolab::sys
