#include "echolab/system.hpp"

#include <cmath>

namespace echolab::sys {
namespace {

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* name) {
  require(j.is_array() && !j.empty(), std::string(name) + ": expected row-major nested arrays");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    require(static_cast<int>(row.size()) == cols,
            std::string(name) + ": ragged matrix rows");
    for (int c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* name) {
  require(j.is_array(), std::string(name) + ": expected array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

struct Dims {
  int n, d;
};

Dims dims_of(const SystemInstance::StateMap& f) {
  if (const auto* lin = std::get_if<LinearMap>(&f)) {
    require(lin->A.rows() == lin->A.cols(), "linear: A must be square");
    require(lin->B.rows() == lin->A.rows(), "linear: B row count must match A");
    return {static_cast<int>(lin->A.rows()), static_cast<int>(lin->B.cols())};
  }
  if (const auto* esn = std::get_if<LeakyTanhMap>(&f)) {
    require(esn->A.rows() == esn->A.cols(), "leaky_tanh_esn: A must be square");
    require(esn->B.rows() == esn->A.rows(), "leaky_tanh_esn: B row count must match A");
    require(esn->alpha > 0.0 && esn->alpha <= 1.0,
            "leaky_tanh_esn: leak must be in (0,1]");
    require(esn->bias.size() == esn->A.rows(), "leaky_tanh_esn: bias dim mismatch");
    return {static_cast<int>(esn->A.rows()), static_cast<int>(esn->B.cols())};
  }
  if (std::holds_alternative<KloedenMap>(f)) return {1, 1};
  const auto& comp = std::get<CompositeMap>(f);
  require(comp.A.rows() == comp.A.cols(), "composite: A must be square");
  require(comp.B.rows() == comp.A.rows(), "composite: B row count must match A");
  require(comp.bias.size() == comp.A.rows(), "composite: bias dim mismatch");
  require(comp.leak > 0.0 && comp.leak <= 1.0, "composite: leak must be in (0,1]");
  Eigen::Index width = comp.A.rows();
  for (const auto& layer : comp.layers) {
    if (layer.kind == CompositeMap::Layer::Kind::affine) {
      require(layer.M.cols() == width, "composite: affine layer width mismatch");
      require(layer.c.size() == layer.M.rows(), "composite: affine offset mismatch");
      width = layer.M.rows();
    }
  }
  require(width == comp.A.rows(),
          "composite: layer stack must end at the state dimension");
  return {static_cast<int>(comp.A.rows()), static_cast<int>(comp.B.cols())};
}

}  // namespace

SystemInstance::SystemInstance(StateMap f, Readout h)
    : f_(std::move(f)), h_(std::move(h)) {
  const Dims dims = dims_of(f_);
  n_ = dims.n;
  d_ = dims.d;
  if (h_.kind == Readout::Kind::identity) {
    m_ = n_;
  } else {
    require(h_.W.cols() == n_, "readout: W column count must match state dim");
    m_ = static_cast<int>(h_.W.rows());
  }
}

SystemInstance SystemInstance::linear(Eigen::MatrixXd A, Eigen::MatrixXd B) {
  return SystemInstance(LinearMap{std::move(A), std::move(B)}, Readout{});
}

SystemInstance SystemInstance::kloeden() {
  return SystemInstance(KloedenMap{}, Readout{});
}

Eigen::VectorXd SystemInstance::f(const Eigen::Ref<const Eigen::VectorXd>& x,
                                  const Eigen::Ref<const Eigen::VectorXd>& u) const {
  require(static_cast<int>(x.size()) == n_, "eval_f: state dim mismatch");
  require(static_cast<int>(u.size()) == d_, "eval_f: input dim mismatch");
  if (!all_finite(x) || !all_finite(u))
    throw NumericalError("eval_f: non-finite state or input");
  Eigen::VectorXd out;
  if (const auto* lin = std::get_if<LinearMap>(&f_)) {
    out = lin->A * x + lin->B * u;
  } else if (const auto* esn = std::get_if<LeakyTanhMap>(&f_)) {
    out = (1.0 - esn->alpha) * x +
          esn->alpha * (esn->A * x + esn->B * u + esn->bias).array().tanh().matrix();
  } else if (std::holds_alternative<KloedenMap>(f_)) {
    out = Eigen::VectorXd::Constant(1, u[0] * x[0] / (1.0 + std::abs(x[0])));
  } else {
    const auto& comp = std::get<CompositeMap>(f_);
    Eigen::VectorXd z = comp.A * x + comp.B * u + comp.bias;
    for (const auto& layer : comp.layers) {
      if (layer.kind == CompositeMap::Layer::Kind::tanh)
        z = z.array().tanh().matrix();
      else
        z = layer.M * z + layer.c;
    }
    out = comp.leak < 1.0 ? ((1.0 - comp.leak) * x + comp.leak * z).eval() : z;
  }
  if (!all_finite(out)) throw NumericalError("eval_f: non-finite result");
  return out;
}

Eigen::VectorXd SystemInstance::h(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  require(static_cast<int>(x.size()) == n_, "eval_h: state dim mismatch");
  if (h_.kind == Readout::Kind::identity) return x;
  return h_.W * x;
}

nlohmann::json SystemInstance::to_json() const {
  nlohmann::json state;
  if (const auto* lin = std::get_if<LinearMap>(&f_)) {
    state = {{"kind", "linear"}, {"A", matrix_to_json(lin->A)}, {"B", matrix_to_json(lin->B)}};
  } else if (const auto* esn = std::get_if<LeakyTanhMap>(&f_)) {
    state = {{"kind", "leaky_tanh_esn"},
             {"A", matrix_to_json(esn->A)},
             {"B", matrix_to_json(esn->B)},
             {"leak", esn->alpha},
             {"bias", vector_to_json(esn->bias)}};
  } else if (std::holds_alternative<KloedenMap>(f_)) {
    state = {{"kind", "kloeden"}};
  } else {
    const auto& comp = std::get<CompositeMap>(f_);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : comp.layers) {
      if (layer.kind == CompositeMap::Layer::Kind::tanh)
        layers.push_back({{"kind", "tanh"}});
      else
        layers.push_back({{"kind", "affine"},
                          {"M", matrix_to_json(layer.M)},
                          {"c", vector_to_json(layer.c)}});
    }
    state = {{"kind", "composite"},
             {"A", matrix_to_json(comp.A)},
             {"B", matrix_to_json(comp.B)},
             {"bias", vector_to_json(comp.bias)},
             {"layers", std::move(layers)},
             {"leak", comp.leak}};
  }
  nlohmann::json readout;
  if (h_.kind == Readout::Kind::identity)
    readout = {{"kind", "identity"}};
  else
    readout = {{"kind", "linear"}, {"W", matrix_to_json(h_.W)}};
  return {{"state_map", std::move(state)}, {"readout", std::move(readout)}};
}

SystemInstance SystemInstance::from_json(const nlohmann::json& j) {
  require(j.contains("state_map"), "system: missing state_map");
  const auto& sm = j.at("state_map");
  const std::string kind = sm.value("kind", "");
  StateMap f;
  if (kind == "linear") {
    f = LinearMap{matrix_from_json(sm.at("A"), "state_map.A"),
                  matrix_from_json(sm.at("B"), "state_map.B")};
  } else if (kind == "leaky_tanh_esn") {
    LeakyTanhMap esn;
    esn.A = matrix_from_json(sm.at("A"), "state_map.A");
    esn.B = matrix_from_json(sm.at("B"), "state_map.B");
    esn.alpha = sm.value("leak", 1.0);
    esn.bias = sm.contains("bias") ? vector_from_json(sm.at("bias"), "state_map.bias")
                                   : Eigen::VectorXd::Zero(esn.A.rows()).eval();
    f = std::move(esn);
  } else if (kind == "kloeden") {
    f = KloedenMap{};
  } else if (kind == "composite") {
    CompositeMap comp;
    comp.A = matrix_from_json(sm.at("A"), "state_map.A");
    comp.B = matrix_from_json(sm.at("B"), "state_map.B");
    comp.bias = sm.contains("bias") ? vector_from_json(sm.at("bias"), "state_map.bias")
                                    : Eigen::VectorXd::Zero(comp.A.rows()).eval();
    comp.leak = sm.value("leak", 1.0);
    if (sm.contains("layers")) {
      for (const auto& lj : sm.at("layers")) {
        CompositeMap::Layer layer;
        const std::string lk = lj.value("kind", "");
        if (lk == "tanh") {
          layer.kind = CompositeMap::Layer::Kind::tanh;
        } else if (lk == "affine") {
          layer.kind = CompositeMap::Layer::Kind::affine;
          layer.M = matrix_from_json(lj.at("M"), "layer.M");
          layer.c = vector_from_json(lj.at("c"), "layer.c");
        } else {
          throw ValidationError("system: unknown composite layer kind '" + lk + "'");
        }
        comp.layers.push_back(std::move(layer));
      }
    }
    f = std::move(comp);
  } else {
    throw ValidationError("system: unknown state_map kind '" + kind + "'");
  }
  Readout h;
  if (j.contains("readout")) {
    const auto& rj = j.at("readout");
    const std::string rk = rj.value("kind", "identity");
    if (rk == "identity") {
      h.kind = Readout::Kind::identity;
    } else if (rk == "linear") {
      h.kind = Readout::Kind::linear;
      h.W = matrix_from_json(rj.at("W"), "readout.W");
    } else {
      throw ValidationError("system: unknown readout kind '" + rk + "'");
    }
  }
  return SystemInstance(std::move(f), std::move(h));
}

std::pair<Window, WindowWithFuture> phi_step(const SystemInstance& sys,
                                             const Window& state,
                                             const WindowWithFuture& input) {
  require(input.n_future() >= 1, "phi_step: exhausted future inputs");
  const Eigen::VectorXd u1 = input.future.front();
  Window new_state = state.appended(sys.f(state.at_lag(0), u1));
  WindowWithFuture new_input;
  new_input.past = input.past.appended(u1);
  new_input.future.assign(input.future.begin() + 1, input.future.end());
  return {std::move(new_state), std::move(new_input)};
}

Window eval_F(const SystemInstance& sys, const Window& x_w, const Window& u_w,
              const std::optional<Eigen::VectorXd>& prepad) {
  require(x_w.len() == u_w.len(), "eval_F: window length mismatch");
  const int L = x_w.len();
  if (prepad) {
    Window out(x_w.dim(), L);
    Eigen::VectorXd prev = *prepad;
    for (int i = 0; i < L; ++i) {
      out.values().col(i) = sys.f(prev, u_w.values().col(i));
      prev = x_w.values().col(i);
    }
    return out;
  }
  require(L >= 2, "eval_F: need len >= 2 when no prepad state is given");
  Window out(x_w.dim(), L - 1);
  for (int i = 1; i < L; ++i)
    out.values().col(i - 1) = sys.f(x_w.values().col(i - 1), u_w.values().col(i));
  return out;
}

DistinguishReport distinguishes_check(const SystemInstance& sys,
                                      const std::vector<SolutionPair>& pairs,
                                      double tol) {
  DistinguishReport report;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& pair = pairs[p];
    require(pair.x1.same_shape(pair.x2), "distinguishes_check: state shape mismatch");
    require(pair.x1.len() == pair.input.len(),
            "distinguishes_check: input/state length mismatch");
    // the check is h(x_{t-1}) = h(x'_{t-1}) => h(x_t) = h(x'_t), swept over t
    for (int k = 0; k + 1 < pair.x1.len(); ++k) {
      const double prev_gap =
          (sys.h(pair.x1.at_lag(k + 1)) - sys.h(pair.x2.at_lag(k + 1))).norm();
      const double cur_gap =
          (sys.h(pair.x1.at_lag(k)) - sys.h(pair.x2.at_lag(k))).norm();
      if (prev_gap <= tol && cur_gap > tol)
        report.violations.emplace_back(static_cast<int>(p), k);
    }
  }
  if (sys.readout().kind == Readout::Kind::linear && sys.is_linear()) {
    const Eigen::MatrixXd& W = sys.readout().W;
    const Eigen::MatrixXd& A = sys.linear_map()->A;
    // kernel basis from the SVD's trailing right singular vectors
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(W, Eigen::ComputeFullV);
    const double smax = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    const double cut = std::max(smax, 1.0) * 1e-12;
    bool holds = true;
    for (Eigen::Index i = 0; i < svd.matrixV().cols(); ++i) {
      const bool in_kernel = i >= svd.singularValues().size() ||
                             svd.singularValues()(i) <= cut;
      if (!in_kernel) continue;
      const Eigen::VectorXd v = svd.matrixV().col(i);
      if ((W * (A * v)).norm() > 1e-9 * std::max(1.0, (A * v).norm())) holds = false;
    }
    report.kernel_condition = holds;
  }
  return report;
}

}  // namespace echolab::sys
