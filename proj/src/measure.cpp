#include "echolab/measure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "echolab/transport.hpp"

namespace echolab::stoch {

namespace {

using nlohmann::json;

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vec_from_json(const json& a) {
  require(a.is_array(), "expected a JSON array of numbers");
  Eigen::VectorXd v(static_cast<int>(a.size()));
  for (int i = 0; i < v.size(); ++i) v(i) = a[static_cast<std::size_t>(i)].get<double>();
  return v;
}

std::vector<double> probs_from_json(const json& a) {
  require(a.is_array(), "expected a JSON array of probabilities");
  std::vector<double> p;
  p.reserve(a.size());
  for (const auto& x : a) p.push_back(x.get<double>());
  return p;
}

void check_probs(const std::vector<double>& p, const char* what) {
  require(!p.empty(), std::string(what) + ": empty probability vector");
  double s = 0.0;
  for (double x : p) {
    require(std::isfinite(x) && x >= 0.0, std::string(what) + ": negative probability");
    s += x;
  }
  require(std::abs(s - 1.0) <= 1e-9, std::string(what) + ": probabilities must sum to 1");
}

// drops the accumulated rounding deficit into the largest weight so the
// reported sum is 1 to machine precision regardless of particle count
Eigen::VectorXd normalized_weights(Eigen::VectorXd w) {
  const double s = w.sum();
  require(std::isfinite(s) && s > 0.0, "weights: nonpositive total");
  w /= s;
  int imax = 0;
  w.maxCoeff(&imax);
  w(imax) += 1.0 - w.sum();
  return w;
}

double kahan_sum(const Eigen::VectorXd& w) {
  double s = 0.0, c = 0.0;
  for (int i = 0; i < w.size(); ++i) {
    const double y = w(i) - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

Eigen::VectorXd categorical_probs(const std::vector<double>& p) {
  return Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<int>(p.size()));
}

int mod_pos(int a, int m) { return ((a % m) + m) % m; }

}  // namespace

// ---- ParticleMeasure ----

bool ParticleMeasure::has_states() const {
  return !particles.empty() && !particles.front().state.empty();
}

void ParticleMeasure::validate() const {
  require(!particles.empty(), "ParticleMeasure: no particles");
  require(weights.size() == size(), "ParticleMeasure: weight count mismatch");
  require(all_finite(weights), "ParticleMeasure: non-finite weight");
  require((weights.array() >= 0.0).all(), "ParticleMeasure: negative weight");
  require(std::abs(kahan_sum(weights) - 1.0) <= 1e-12,
          "ParticleMeasure: weights must sum to 1");
  const Particle& p0 = particles.front();
  require(!p0.state.empty() || !p0.input.past.empty(),
          "ParticleMeasure: particles carry neither states nor inputs");
  for (const Particle& p : particles) {
    require(p.state.same_shape(p0.state), "ParticleMeasure: ragged state windows");
    require(p.input.past.same_shape(p0.input.past),
            "ParticleMeasure: ragged input windows");
    require(p.input.n_future() == p0.input.n_future(),
            "ParticleMeasure: ragged input futures");
    require(all_finite(p.state.values()), "ParticleMeasure: non-finite state entry");
    require(all_finite(p.input.past.values()),
            "ParticleMeasure: non-finite input entry");
    for (const Eigen::VectorXd& fv : p.input.future)
      require(all_finite(fv), "ParticleMeasure: non-finite future input entry");
  }
}

json ParticleMeasure::to_json() const {
  json j;
  j["horizon"] = horizon;
  j["seed"] = seed;
  j["diverged"] = diverged;
  json w = json::array();
  for (int i = 0; i < weights.size(); ++i) w.push_back(weights(i));
  j["weights"] = w;
  json ps = json::array();
  for (const Particle& p : particles) {
    json pj;
    pj["state"] = p.state.empty() ? json() : seq::to_json(p.state);
    pj["input"] = seq::to_json(p.input.past);
    json fut = json::array();
    for (const Eigen::VectorXd& fv : p.input.future) fut.push_back(vec_to_json(fv));
    pj["future"] = fut;
    ps.push_back(std::move(pj));
  }
  j["particles"] = std::move(ps);
  return j;
}

ParticleMeasure ParticleMeasure::from_json(const json& j) {
  ParticleMeasure mu;
  mu.horizon = j.at("horizon").get<int>();
  mu.seed = j.at("seed").get<std::uint64_t>();
  mu.diverged = j.value("diverged", 0);
  const json& w = j.at("weights");
  mu.weights.resize(static_cast<int>(w.size()));
  for (int i = 0; i < mu.weights.size(); ++i)
    mu.weights(i) = w[static_cast<std::size_t>(i)].get<double>();
  for (const json& pj : j.at("particles")) {
    Particle p;
    if (!pj.at("state").is_null()) p.state = seq::window_from_json(pj.at("state"));
    p.input.past = seq::window_from_json(pj.at("input"));
    for (const json& fv : pj.at("future")) p.input.future.push_back(vec_from_json(fv));
    mu.particles.push_back(std::move(p));
  }
  mu.validate();
  return mu;
}

std::string ParticleMeasure::to_csv() const {
  validate();
  std::ostringstream out;
  for (int i = 0; i < size(); ++i) {
    const Particle& p = particles[static_cast<std::size_t>(i)];
    out << fmt17(weights(i));
    const auto emit = [&](const Window& w) {
      for (int t = 0; t < w.len(); ++t)
        for (int c = 0; c < w.dim(); ++c) out << ',' << fmt17(w.values()(c, t));
    };
    emit(p.state);
    emit(p.input.past);
    out << '\n';
  }
  return out.str();
}

// ---- InputLawSpec ----

int InputLawSpec::dim() const {
  switch (kind) {
    case Kind::iid:
      switch (base) {
        case Base::dirac:
        case Base::normal:
          return static_cast<int>(value.size());
        case Base::uniform:
          return static_cast<int>(lo.size());
        case Base::atoms:
          return atom_values.empty() ? 0 : static_cast<int>(atom_values.front().size());
      }
      return 0;
    case Kind::markov_chain:
      return alphabet.empty() ? 0 : static_cast<int>(alphabet.front().size());
    case Kind::gaussian_ar1:
      return 1;
    case Kind::periodic:
      return cycle.empty() ? 0 : static_cast<int>(cycle.front().size());
  }
  return 0;
}

void InputLawSpec::validate() const {
  switch (kind) {
    case Kind::iid:
      switch (base) {
        case Base::dirac:
          require(value.size() >= 1 && all_finite(value), "iid dirac: bad value");
          return;
        case Base::uniform:
          require(lo.size() >= 1 && lo.size() == hi.size(), "iid uniform: bad bounds");
          require(all_finite(lo) && all_finite(hi), "iid uniform: non-finite bounds");
          require((lo.array() <= hi.array()).all(), "iid uniform: lo must not exceed hi");
          return;
        case Base::normal:
          require(value.size() >= 1 && value.size() == sd.size(),
                  "iid normal: mean/sd size mismatch");
          require(all_finite(value) && all_finite(sd), "iid normal: non-finite parameter");
          require((sd.array() >= 0.0).all(), "iid normal: negative sd");
          return;
        case Base::atoms: {
          require(!atom_values.empty(), "iid atoms: no atoms");
          const auto d = atom_values.front().size();
          for (const auto& a : atom_values)
            require(a.size() == d && all_finite(a), "iid atoms: ragged or non-finite atom");
          require(atom_probs.size() == atom_values.size(),
                  "iid atoms: probability count mismatch");
          check_probs(atom_probs, "iid atoms");
          return;
        }
      }
      return;
    case Kind::markov_chain: {
      require(!alphabet.empty(), "markov_chain: empty alphabet");
      const auto d = alphabet.front().size();
      for (const auto& a : alphabet)
        require(a.size() == d && all_finite(a), "markov_chain: ragged or non-finite symbol");
      const int n = static_cast<int>(alphabet.size());
      require(transition.rows() == n && transition.cols() == n,
              "markov_chain: transition matrix shape mismatch");
      require(all_finite(transition), "markov_chain: non-finite transition entry");
      require((transition.array() >= 0.0).all(), "markov_chain: negative transition entry");
      for (int i = 0; i < n; ++i)
        require(std::abs(transition.row(i).sum() - 1.0) <= 1e-9,
                "markov_chain: transition rows must sum to 1");
      if (!init_probs.empty()) {
        require(static_cast<int>(init_probs.size()) == n,
                "markov_chain: init length mismatch");
        check_probs(init_probs, "markov_chain init");
      }
      return;
    }
    case Kind::gaussian_ar1:
      require(std::isfinite(ar_coeff) && std::abs(ar_coeff) < 1.0,
              "gaussian_ar1: |coefficient| must be < 1");
      require(std::isfinite(ar_noise_sd) && ar_noise_sd >= 0.0,
              "gaussian_ar1: negative noise sd");
      return;
    case Kind::periodic: {
      require(!cycle.empty(), "periodic: empty cycle");
      const auto d = cycle.front().size();
      for (const auto& c : cycle)
        require(c.size() == d && all_finite(c), "periodic: ragged or non-finite cycle entry");
      require(phase_weights.size() == cycle.size(), "periodic: phase weight count mismatch");
      check_probs(phase_weights, "periodic phases");
      require(std::isfinite(cycle_noise_sd) && cycle_noise_sd >= 0.0,
              "periodic: negative noise sd");
      return;
    }
  }
}

std::vector<double> InputLawSpec::stationary() const {
  require(kind == Kind::markov_chain, "stationary: markov_chain laws only");
  validate();
  const int n = static_cast<int>(alphabet.size());
  Eigen::VectorXd pi = Eigen::VectorXd::Constant(n, 1.0 / n);
  for (int it = 0; it < 50000; ++it) {
    // damped update kills period-2 oscillation; fixed points are unchanged
    Eigen::VectorXd next = 0.5 * pi + 0.5 * (transition.transpose() * pi);
    next /= next.sum();
    const double delta = (next - pi).lpNorm<1>();
    pi = next;
    if (delta < 1e-15) break;
  }
  return std::vector<double>(pi.data(), pi.data() + n);
}

std::vector<Eigen::VectorXd> InputLawSpec::sample_path(int total_len, int anchor_pos,
                                                       rng::Rng& r) const {
  validate();
  require(total_len >= 1, "sample_path: total_len must be positive");
  require(anchor_pos >= 0 && anchor_pos < total_len, "sample_path: anchor out of range");
  std::vector<Eigen::VectorXd> path;
  path.reserve(static_cast<std::size_t>(total_len));
  switch (kind) {
    case Kind::iid:
      for (int t = 0; t < total_len; ++t) {
        switch (base) {
          case Base::dirac:
            path.push_back(value);
            break;
          case Base::uniform: {
            Eigen::VectorXd v(lo.size());
            for (int c = 0; c < v.size(); ++c)
              v(c) = lo(c) + (hi(c) - lo(c)) * r.uniform01();
            path.push_back(std::move(v));
            break;
          }
          case Base::normal: {
            Eigen::VectorXd v(value.size());
            for (int c = 0; c < v.size(); ++c) v(c) = value(c) + sd(c) * r.normal();
            path.push_back(std::move(v));
            break;
          }
          case Base::atoms:
            path.push_back(atom_values[static_cast<std::size_t>(
                r.categorical(categorical_probs(atom_probs)))]);
            break;
        }
      }
      return path;
    case Kind::markov_chain: {
      const std::vector<double> init = init_probs.empty() ? stationary() : init_probs;
      int idx = r.categorical(categorical_probs(init));
      path.push_back(alphabet[static_cast<std::size_t>(idx)]);
      for (int t = 1; t < total_len; ++t) {
        idx = r.categorical(transition.row(idx).transpose());
        path.push_back(alphabet[static_cast<std::size_t>(idx)]);
      }
      return path;
    }
    case Kind::gaussian_ar1: {
      const double stat_sd =
          ar_noise_sd / std::sqrt(1.0 - ar_coeff * ar_coeff);
      double x = stat_sd > 0.0 ? stat_sd * r.normal() : 0.0;
      for (int t = 0; t < total_len; ++t) {
        if (t > 0) x = ar_coeff * x + ar_noise_sd * r.normal();
        path.push_back(Eigen::VectorXd::Constant(1, x));
      }
      return path;
    }
    case Kind::periodic: {
      const int k = period();
      const int phase = r.categorical(categorical_probs(phase_weights));
      for (int q = 0; q < total_len; ++q) {
        Eigen::VectorXd v = cycle[static_cast<std::size_t>(
            mod_pos(phase + (q - anchor_pos), k))];
        if (cycle_noise_sd > 0.0)
          for (int c = 0; c < v.size(); ++c) v(c) += cycle_noise_sd * r.normal();
        path.push_back(std::move(v));
      }
      return path;
    }
  }
  throw ValidationError("sample_path: unknown law kind");
}

json InputLawSpec::to_json() const {
  validate();
  json j;
  switch (kind) {
    case Kind::iid: {
      j["kind"] = "iid";
      switch (base) {
        case Base::dirac:
          j["base"] = "dirac";
          j["value"] = vec_to_json(value);
          break;
        case Base::uniform:
          j["base"] = "uniform";
          j["lo"] = vec_to_json(lo);
          j["hi"] = vec_to_json(hi);
          break;
        case Base::normal:
          j["base"] = "normal";
          j["mean"] = vec_to_json(value);
          j["sd"] = vec_to_json(sd);
          break;
        case Base::atoms: {
          j["base"] = "atoms";
          json vals = json::array();
          for (const auto& a : atom_values) vals.push_back(vec_to_json(a));
          j["values"] = std::move(vals);
          j["probs"] = atom_probs;
          break;
        }
      }
      return j;
    }
    case Kind::markov_chain: {
      j["kind"] = "markov_chain";
      json al = json::array();
      for (const auto& a : alphabet) al.push_back(vec_to_json(a));
      j["alphabet"] = std::move(al);
      json tr = json::array();
      for (int i = 0; i < transition.rows(); ++i)
        tr.push_back(vec_to_json(transition.row(i).transpose()));
      j["transition"] = std::move(tr);
      if (!init_probs.empty()) j["init"] = init_probs;
      return j;
    }
    case Kind::gaussian_ar1:
      j["kind"] = "gaussian_ar1";
      j["a"] = ar_coeff;
      j["noise_sd"] = ar_noise_sd;
      return j;
    case Kind::periodic: {
      j["kind"] = "periodic";
      json cy = json::array();
      for (const auto& c : cycle) cy.push_back(vec_to_json(c));
      j["cycle"] = std::move(cy);
      j["phase_weights"] = phase_weights;
      if (cycle_noise_sd > 0.0) j["noise_sd"] = cycle_noise_sd;
      return j;
    }
  }
  throw ValidationError("InputLawSpec: unknown kind");
}

InputLawSpec InputLawSpec::from_json(const json& j) {
  InputLawSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "iid") {
    s.kind = Kind::iid;
    const std::string base = j.at("base").get<std::string>();
    if (base == "dirac") {
      s.base = Base::dirac;
      s.value = vec_from_json(j.at("value"));
    } else if (base == "uniform") {
      s.base = Base::uniform;
      s.lo = vec_from_json(j.at("lo"));
      s.hi = vec_from_json(j.at("hi"));
    } else if (base == "normal") {
      s.base = Base::normal;
      s.value = vec_from_json(j.at("mean"));
      s.sd = vec_from_json(j.at("sd"));
    } else if (base == "atoms") {
      s.base = Base::atoms;
      for (const json& a : j.at("values")) s.atom_values.push_back(vec_from_json(a));
      s.atom_probs = probs_from_json(j.at("probs"));
    } else {
      throw ValidationError("InputLawSpec: unknown iid base " + base);
    }
  } else if (kind == "markov_chain") {
    s.kind = Kind::markov_chain;
    for (const json& a : j.at("alphabet")) s.alphabet.push_back(vec_from_json(a));
    const json& tr = j.at("transition");
    const int n = static_cast<int>(tr.size());
    s.transition.resize(n, n);
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd row = vec_from_json(tr[static_cast<std::size_t>(i)]);
      require(row.size() == n, "InputLawSpec: ragged transition matrix");
      s.transition.row(i) = row.transpose();
    }
    if (j.contains("init")) s.init_probs = probs_from_json(j.at("init"));
  } else if (kind == "gaussian_ar1") {
    s.kind = Kind::gaussian_ar1;
    s.ar_coeff = j.at("a").get<double>();
    s.ar_noise_sd = j.at("noise_sd").get<double>();
  } else if (kind == "periodic") {
    s.kind = Kind::periodic;
    for (const json& c : j.at("cycle")) s.cycle.push_back(vec_from_json(c));
    s.phase_weights = probs_from_json(j.at("phase_weights"));
    s.cycle_noise_sd = j.value("noise_sd", 0.0);
  } else {
    throw ValidationError("InputLawSpec: unknown kind " + kind);
  }
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::iid_dirac(const Eigen::VectorXd& v) {
  InputLawSpec s;
  s.kind = Kind::iid;
  s.base = Base::dirac;
  s.value = v;
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::iid_uniform(const Eigen::VectorXd& lo,
                                       const Eigen::VectorXd& hi) {
  InputLawSpec s;
  s.kind = Kind::iid;
  s.base = Base::uniform;
  s.lo = lo;
  s.hi = hi;
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::iid_normal(const Eigen::VectorXd& mean,
                                      const Eigen::VectorXd& sd) {
  InputLawSpec s;
  s.kind = Kind::iid;
  s.base = Base::normal;
  s.value = mean;
  s.sd = sd;
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::iid_atoms(std::vector<Eigen::VectorXd> values,
                                     std::vector<double> probs) {
  InputLawSpec s;
  s.kind = Kind::iid;
  s.base = Base::atoms;
  s.atom_values = std::move(values);
  s.atom_probs = std::move(probs);
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::markov(std::vector<Eigen::VectorXd> alphabet,
                                  Eigen::MatrixXd transition, std::vector<double> init) {
  InputLawSpec s;
  s.kind = Kind::markov_chain;
  s.alphabet = std::move(alphabet);
  s.transition = std::move(transition);
  s.init_probs = std::move(init);
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::ar1(double a, double noise_sd) {
  InputLawSpec s;
  s.kind = Kind::gaussian_ar1;
  s.ar_coeff = a;
  s.ar_noise_sd = noise_sd;
  s.validate();
  return s;
}

InputLawSpec InputLawSpec::periodic_cycle(std::vector<Eigen::VectorXd> cycle,
                                          std::vector<double> phase_weights,
                                          double noise_sd) {
  InputLawSpec s;
  s.kind = Kind::periodic;
  s.cycle = std::move(cycle);
  s.phase_weights = std::move(phase_weights);
  s.cycle_noise_sd = noise_sd;
  s.validate();
  return s;
}

// ---- sampling and pullback ----

ParticleMeasure sample_input_law(const InputLawSpec& spec, int len, int n_future,
                                 int N, std::uint64_t seed) {
  spec.validate();
  require(len >= 1, "sample_input_law: len must be positive");
  require(n_future >= 0, "sample_input_law: negative n_future");
  require(N >= 1, "sample_input_law: need at least one particle");
  ParticleMeasure mu;
  mu.horizon = len;
  mu.seed = seed;
  mu.particles.reserve(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    rng::Rng r(rng::derive(seed, "particle", static_cast<std::uint64_t>(i)));
    const auto path = spec.sample_path(len + n_future, len - 1, r);
    Particle p;
    p.input.past = seq::Window::from_columns(
        std::vector<Eigen::VectorXd>(path.begin(), path.begin() + len));
    p.input.future.assign(path.begin() + len, path.end());
    mu.particles.push_back(std::move(p));
  }
  mu.weights = normalized_weights(Eigen::VectorXd::Ones(N));
  mu.validate();
  return mu;
}

ParticleMeasure pushforward_phi_star(const SystemInstance& sys,
                                     const ParticleMeasure& mu) {
  mu.validate();
  require(mu.has_states(), "pushforward_phi_star: measure has no state windows");
  require(mu.particles.front().input.n_future() >= 1,
          "pushforward_phi_star: particles carry no future inputs");
  ParticleMeasure out;
  out.horizon = mu.horizon + 1;
  out.seed = mu.seed;
  out.diverged = mu.diverged;
  std::vector<double> kept;
  for (int i = 0; i < mu.size(); ++i) {
    const Particle& p = mu.particles[static_cast<std::size_t>(i)];
    try {
      auto [state, input] = sys::phi_step(sys, p.state, p.input);
      out.particles.push_back(Particle{std::move(state), std::move(input)});
      kept.push_back(mu.weights(i));
    } catch (const NumericalError&) {
      ++out.diverged;
    }
  }
  require(!out.particles.empty(), "pushforward_phi_star: every particle diverged");
  out.weights = normalized_weights(
      Eigen::Map<const Eigen::VectorXd>(kept.data(), static_cast<int>(kept.size())));
  out.validate();
  return out;
}

json StateInitLaw::to_json() const {
  json j;
  switch (kind) {
    case Kind::uniform_box: {
      j["kind"] = "uniform_box";
      json b = json::array();
      for (const auto& [lo, hi] : box) b.push_back(json::array({lo, hi}));
      j["box"] = std::move(b);
      return j;
    }
    case Kind::dirac:
      j["kind"] = "dirac";
      j["value"] = vec_to_json(value);
      return j;
    case Kind::normal:
      j["kind"] = "normal";
      j["mean"] = vec_to_json(value);
      j["sd"] = sd;
      return j;
  }
  throw ValidationError("StateInitLaw: unknown kind");
}

StateInitLaw StateInitLaw::from_json(const json& j) {
  StateInitLaw law;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "uniform_box") {
    law.kind = Kind::uniform_box;
    if (j.contains("box"))
      for (const json& b : j.at("box"))
        law.box.emplace_back(b.at(0).get<double>(), b.at(1).get<double>());
  } else if (kind == "dirac") {
    law.kind = Kind::dirac;
    law.value = vec_from_json(j.at("value"));
  } else if (kind == "normal") {
    law.kind = Kind::normal;
    law.value = vec_from_json(j.at("mean"));
    law.sd = j.at("sd").get<double>();
  } else {
    throw ValidationError("StateInitLaw: unknown kind " + kind);
  }
  return law;
}

namespace {

// uniform_box is handled by the caller with the low-discrepancy ensemble grid
Eigen::VectorXd draw_init_state(const StateInitLaw& law,
                                const pullback::PullbackConfig& cfg, int state_dim,
                                rng::Rng& r) {
  (void)cfg;
  switch (law.kind) {
    case StateInitLaw::Kind::uniform_box:
      throw ValidationError("StateInitLaw: uniform_box handled upstream");
    case StateInitLaw::Kind::dirac:
      require(static_cast<int>(law.value.size()) == state_dim,
              "StateInitLaw: value dimension mismatch");
      require(all_finite(law.value), "StateInitLaw: non-finite value");
      return law.value;
    case StateInitLaw::Kind::normal: {
      require(static_cast<int>(law.value.size()) == state_dim,
              "StateInitLaw: mean dimension mismatch");
      require(all_finite(law.value) && std::isfinite(law.sd) && law.sd >= 0.0,
              "StateInitLaw: bad normal parameters");
      Eigen::VectorXd x(state_dim);
      for (int c = 0; c < state_dim; ++c) x(c) = law.value(c) + law.sd * r.normal();
      return x;
    }
  }
  throw ValidationError("StateInitLaw: unknown kind");
}

}  // namespace

ParticleMeasure pullback_measure(const SystemInstance& sys, const InputLawSpec& spec,
                                 const pullback::PullbackConfig& cfg,
                                 const StateInitLaw& init, int N, int n_future) {
  spec.validate();
  cfg.validate(sys.state_dim());
  require(N >= 1, "pullback_measure: need at least one particle");
  require(n_future >= 0, "pullback_measure: negative n_future");
  require(spec.dim() == sys.input_dim(), "pullback_measure: input dimension mismatch");

  const int K = cfg.stored_len();
  ParticleMeasure mu;
  mu.horizon = cfg.horizon;
  mu.seed = cfg.seed;
  // uniform_box initial states come from the deterministic low-discrepancy
  // grid (corners, then Halton from the box midpoint): a stratified stand-in
  // for the uniform law that keeps measure-zero basin boundaries represented
  std::vector<Eigen::VectorXd> grid;
  if (init.kind == StateInitLaw::Kind::uniform_box) {
    pullback::PullbackConfig icfg = cfg;
    icfg.ensemble = N;
    if (!init.box.empty()) icfg.init_box = init.box;
    grid = pullback::init_ensemble(icfg, sys.state_dim());
  }
  std::vector<Eigen::VectorXd> states;
  states.reserve(static_cast<std::size_t>(cfg.horizon + 1));
  for (int i = 0; i < N; ++i) {
    rng::Rng r_in(rng::derive(cfg.seed, "measure-input", static_cast<std::uint64_t>(i)));
    rng::Rng r_x0(rng::derive(cfg.seed, "measure-init", static_cast<std::uint64_t>(i)));
    const auto path = spec.sample_path(cfg.horizon + n_future, cfg.horizon - 1, r_in);
    states.clear();
    try {
      Eigen::VectorXd x = grid.empty()
                              ? draw_init_state(init, cfg, sys.state_dim(), r_x0)
                              : grid[static_cast<std::size_t>(i)];
      states.push_back(x);
      for (int s = 0; s < cfg.horizon; ++s) {
        x = sys.f(x, path[static_cast<std::size_t>(s)]);
        states.push_back(x);
      }
    } catch (const NumericalError&) {
      ++mu.diverged;
      continue;
    }
    Particle p;
    p.state = seq::Window::from_columns(
        std::vector<Eigen::VectorXd>(states.end() - K, states.end()));
    p.input.past = seq::Window::from_columns(
        std::vector<Eigen::VectorXd>(path.begin(), path.begin() + cfg.horizon));
    p.input.future.assign(path.begin() + cfg.horizon, path.end());
    mu.particles.push_back(std::move(p));
  }
  require(!mu.particles.empty(), "pullback_measure: every particle diverged");
  mu.weights = normalized_weights(Eigen::VectorXd::Ones(mu.size()));
  mu.validate();
  return mu;
}

// ---- measure comparison ----

namespace {

struct CloudView {
  std::vector<Window> states;  // truncated copies, empty when unused
  std::vector<Window> inputs;
};

CloudView truncate_cloud(const ParticleMeasure& mu, int sl, int il, bool use_states,
                         bool use_inputs) {
  CloudView v;
  const std::size_t n = mu.particles.size();
  if (use_states) {
    v.states.reserve(n);
    for (const Particle& p : mu.particles)
      v.states.push_back(seq::truncate_left(p.state, sl));
  }
  if (use_inputs) {
    v.inputs.reserve(n);
    for (const Particle& p : mu.particles)
      v.inputs.push_back(seq::truncate_left(p.input.past, il));
  }
  return v;
}

// flattened embedding whose Euclidean metric is the weighted l2 window metric
Eigen::MatrixXd embed_cloud(const CloudView& v, int n, double rate) {
  const int sdim = v.states.empty() ? 0 : v.states.front().dim();
  const int slen = v.states.empty() ? 0 : v.states.front().len();
  const int idim = v.inputs.empty() ? 0 : v.inputs.front().dim();
  const int ilen = v.inputs.empty() ? 0 : v.inputs.front().len();
  Eigen::MatrixXd X(slen * sdim + ilen * idim, n);
  for (int j = 0; j < n; ++j) {
    int row = 0;
    double wk = 1.0;
    for (int k = 0; k < slen; ++k, wk *= rate) {
      X.col(j).segment(row, sdim) = wk * v.states[static_cast<std::size_t>(j)].at_lag(k);
      row += sdim;
    }
    wk = 1.0;
    for (int k = 0; k < ilen; ++k, wk *= rate) {
      X.col(j).segment(row, idim) = wk * v.inputs[static_cast<std::size_t>(j)].at_lag(k);
      row += idim;
    }
  }
  return X;
}

}  // namespace

double measure_dist(const ParticleMeasure& a, const ParticleMeasure& b,
                    const MeasureMetric& metric, bool use_states, bool use_inputs) {
  a.validate();
  b.validate();
  require(use_states || use_inputs, "measure_dist: nothing selected to compare");
  require(metric.order >= 1.0 && std::isfinite(metric.order),
          "measure_dist: order must be finite and >= 1");
  if (use_states)
    require(a.has_states() && b.has_states(),
            "measure_dist: state comparison needs state windows on both sides");
  if (use_inputs)
    require(!a.particles.front().input.past.empty() &&
                !b.particles.front().input.past.empty(),
            "measure_dist: input comparison needs input windows on both sides");

  int sl = 0, il = 0;
  if (use_states) {
    require(a.particles.front().state.dim() == b.particles.front().state.dim(),
            "measure_dist: state dimension mismatch");
    sl = std::min(a.particles.front().state.len(), b.particles.front().state.len());
  }
  if (use_inputs) {
    require(a.particles.front().input.past.dim() ==
                b.particles.front().input.past.dim(),
            "measure_dist: input dimension mismatch");
    il = std::min(a.particles.front().input.past.len(),
                  b.particles.front().input.past.len());
  }

  const CloudView va = truncate_cloud(a, sl, il, use_states, use_inputs);
  const CloudView vb = truncate_cloud(b, sl, il, use_states, use_inputs);
  const int na = a.size(), nb = b.size();

  const std::size_t pairs =
      static_cast<std::size_t>(na) * static_cast<std::size_t>(nb);
  if (pairs <= metric.exact_cap) {
    Eigen::MatrixXd ground(na, nb);
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < nb; ++j) {
        double d = 0.0;
        if (use_states)
          d += seq::dist(va.states[static_cast<std::size_t>(i)],
                         vb.states[static_cast<std::size_t>(j)], metric.weights,
                         metric.metric_p);
        if (use_inputs)
          d += seq::dist(va.inputs[static_cast<std::size_t>(i)],
                         vb.inputs[static_cast<std::size_t>(j)], metric.weights,
                         metric.metric_p);
        ground(i, j) = d;
      }
    return transport::wasserstein_cost(ground, a.weights, b.weights, metric.order);
  }

  require(metric.weights.kind == seq::WeightSeq::Kind::geometric,
          "measure_dist: sliced approximation needs geometric weights");
  const Eigen::MatrixXd xa = embed_cloud(va, na, metric.weights.rate);
  const Eigen::MatrixXd xb = embed_cloud(vb, nb, metric.weights.rate);
  return transport::sliced_wasserstein(xa, a.weights, xb, b.weights, metric.order,
                                       metric.sliced_projections, metric.sliced_seed);
}

// ---- solution diagnostics ----

SolutionCheck check_stochastic_solution(const SystemInstance& sys,
                                        const ParticleMeasure& mu, double tol) {
  mu.validate();
  require(mu.has_states(), "check_stochastic_solution: no state windows");
  const int K = mu.particles.front().state.len();
  require(K >= 2, "check_stochastic_solution: state windows too short");
  require(mu.particles.front().input.past.len() >= K - 1,
          "check_stochastic_solution: input windows too short");
  require(std::isfinite(tol) && tol >= 0.0, "check_stochastic_solution: bad tol");
  SolutionCheck out;
  for (const Particle& p : mu.particles) {
    for (int k = 0; k + 1 < K; ++k) {
      double res;
      try {
        res = (p.state.at_lag(k) -
               sys.f(p.state.at_lag(k + 1), p.input.past.at_lag(k)))
                  .norm();
      } catch (const NumericalError&) {
        res = kInf;
      }
      out.max_residual = std::max(out.max_residual, res);
    }
  }
  out.is_solution = out.max_residual <= tol;
  return out;
}

double fixedpoint_residual(const SystemInstance& sys, const ParticleMeasure& mu,
                           const MeasureMetric& metric) {
  mu.validate();
  require(mu.has_states(), "fixedpoint_residual: no state windows");
  require(!mu.particles.front().input.past.empty(),
          "fixedpoint_residual: no input windows");
  // both clouds live on the longest window the one-step image can cover
  const int K = std::min(mu.particles.front().state.len(),
                         mu.particles.front().input.past.len());
  require(K >= 2, "fixedpoint_residual: windows too short for a one-step image");

  ParticleMeasure image, ident;
  image.weights = ident.weights = mu.weights;
  image.seed = ident.seed = mu.seed;
  image.horizon = ident.horizon = K - 1;
  for (const Particle& p : mu.particles) {
    const Window u_short = seq::truncate_left(p.input.past, K - 1);
    Particle fp;
    fp.state = sys::eval_F(sys, seq::truncate_left(p.state, K),
                           seq::truncate_left(p.input.past, K));
    fp.input.past = u_short;
    image.particles.push_back(std::move(fp));
    Particle ip;
    ip.state = seq::truncate_left(p.state, K - 1);
    ip.input.past = u_short;
    ident.particles.push_back(std::move(ip));
  }
  return measure_dist(image, ident, metric, true, true);
}

ParticleMeasure pushforward_solution_map(const SystemInstance& sys,
                                         const InputLawSpec& spec,
                                         const pullback::PullbackConfig& cfg, int N,
                                         int n_future) {
  spec.validate();
  cfg.validate(sys.state_dim());
  require(N >= 1, "pushforward_solution_map: need at least one sample");
  require(n_future >= 0, "pushforward_solution_map: negative n_future");
  require(spec.dim() == sys.input_dim(),
          "pushforward_solution_map: input dimension mismatch");
  ParticleMeasure mu;
  mu.horizon = cfg.horizon;
  mu.seed = cfg.seed;
  for (int i = 0; i < N; ++i) {
    rng::Rng r(rng::derive(cfg.seed, "solution-input", static_cast<std::uint64_t>(i)));
    const auto path = spec.sample_path(cfg.horizon + n_future, cfg.horizon - 1, r);
    Particle p;
    p.input.past = seq::Window::from_columns(
        std::vector<Eigen::VectorXd>(path.begin(), path.begin() + cfg.horizon));
    p.input.future.assign(path.begin() + cfg.horizon, path.end());
    const pullback::SolutionFiber fiber =
        pullback::solution_fibers(sys, p.input.past, cfg);
    if (!(fiber.resolved && fiber.diverged == 0 &&
          fiber.representatives.size() == 1))
      throw ValidationError(
          "pushforward_solution_map: unique-solution check failed on sampled input " +
          std::to_string(i));
    p.state = fiber.representatives.front();
    mu.particles.push_back(std::move(p));
  }
  mu.weights = normalized_weights(Eigen::VectorXd::Ones(N));
  mu.validate();
  return mu;
}

// ---- periodicity and fading memory ----

namespace {

ParticleMeasure shifted_measure(const ParticleMeasure& mu, int k) {
  ParticleMeasure out;
  out.weights = mu.weights;
  out.seed = mu.seed;
  out.horizon = mu.horizon - k;
  out.diverged = mu.diverged;
  for (const Particle& p : mu.particles) {
    Particle q;
    if (!p.state.empty()) q.state = seq::drop_right(p.state, k);
    if (!p.input.past.empty()) q.input.past = seq::drop_right(p.input.past, k);
    out.particles.push_back(std::move(q));
  }
  return out;
}

}  // namespace

PeriodicityReport periodicity_check(const ParticleMeasure& mu, int k,
                                    const MeasureMetric& metric) {
  mu.validate();
  require(k >= 0, "periodicity_check: negative shift");
  PeriodicityReport rep;
  if (k == 0) return rep;
  const bool st = mu.has_states();
  const bool in = !mu.particles.front().input.past.empty();
  if (st)
    require(mu.particles.front().state.len() > k,
            "periodicity_check: shift exceeds state window");
  if (in)
    require(mu.particles.front().input.past.len() > k,
            "periodicity_check: shift exceeds input window");
  rep.distance = measure_dist(shifted_measure(mu, k), mu, metric, st, in);
  for (int d = 1; d < k; ++d)
    if (k % d == 0)
      rep.divisor_distances[d] = measure_dist(shifted_measure(mu, d), mu, metric, st, in);
  return rep;
}

StochFmpReport stoch_fmp_probe(const SystemInstance& sys, const InputLawSpec& base,
                               const std::vector<InputLawSpec>& perturbed,
                               const pullback::PullbackConfig& cfg,
                               const MeasureMetric& metric, int N) {
  const StateInitLaw init{};
  const ParticleMeasure mu0 = pullback_measure(sys, base, cfg, init, N);
  StochFmpReport rep;
  for (const InputLawSpec& spec : perturbed) {
    const ParticleMeasure mu1 = pullback_measure(sys, spec, cfg, init, N);
    StochFmpEntry e;
    e.input_dist = measure_dist(mu0, mu1, metric, false, true);
    e.solution_dist = measure_dist(mu0, mu1, metric, true, false);
    e.pair_dist = measure_dist(mu0, mu1, metric, true, true);
    if (e.input_dist > 0.0)
      e.ratio = e.solution_dist / e.input_dist;
    else
      e.ratio = e.solution_dist == 0.0 ? 0.0 : kInf;
    rep.table.push_back(e);
  }
  return rep;
}

ParticleMeasure product_counterexample(int N, int len, std::uint64_t seed) {
  require(N >= 1 && len >= 2, "product_counterexample: need N >= 1, len >= 2");
  ParticleMeasure mu;
  mu.horizon = len;
  mu.seed = seed;
  for (int i = 0; i < N; ++i) {
    rng::Rng r(rng::derive(seed, "product", static_cast<std::uint64_t>(i)));
    Particle p;
    p.state = Window(1, len);
    p.input.past = Window(1, len);
    for (int t = 0; t < len; ++t) p.state.values()(0, t) = r.normal();
    for (int t = 0; t < len; ++t) p.input.past.values()(0, t) = r.normal();
    mu.particles.push_back(std::move(p));
  }
  mu.weights = normalized_weights(Eigen::VectorXd::Ones(N));
  mu.validate();
  return mu;
}

Envelope two_sample_envelope(
    const std::function<double(std::uint64_t, std::uint64_t)>& dist_between_draws,
    int reps, std::uint64_t seed) {
  require(reps >= 2, "two_sample_envelope: need at least two repetitions");
  Envelope env;
  env.reps = reps;
  std::vector<double> ds;
  ds.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const double d =
        dist_between_draws(rng::derive(seed, "env-a", static_cast<std::uint64_t>(r)),
                           rng::derive(seed, "env-b", static_cast<std::uint64_t>(r)));
    require(std::isfinite(d) && d >= 0.0, "two_sample_envelope: bad distance");
    ds.push_back(d);
    env.max_seen = std::max(env.max_seen, d);
  }
  for (double d : ds) env.mean += d;
  env.mean /= reps;
  double ss = 0.0;
  for (double d : ds) ss += (d - env.mean) * (d - env.mean);
  env.sd = std::sqrt(ss / (reps - 1));
  env.hi = env.mean + 3.0 * env.sd;
  return env;
}

}  // namespace echolab::stoch
