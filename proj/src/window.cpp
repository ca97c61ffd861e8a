#include "echolab/window.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "echolab/report.hpp"

namespace echolab::seq {

Window::Window(int dim, int len) {
  require(dim >= 1, "Window: dim must be >= 1");
  require(len >= 1, "Window: len must be >= 1");
  v_ = Eigen::MatrixXd::Zero(dim, len);
}

Window Window::constant(int dim, int len, double value) {
  Window w(dim, len);
  w.v_.setConstant(value);
  return w;
}

Window Window::from_scalars(const std::vector<double>& oldest_to_newest) {
  require(!oldest_to_newest.empty(), "Window: need at least one entry");
  Window w(1, static_cast<int>(oldest_to_newest.size()));
  for (std::size_t i = 0; i < oldest_to_newest.size(); ++i)
    w.v_(0, static_cast<Eigen::Index>(i)) = oldest_to_newest[i];
  return w;
}

Window Window::from_columns(const std::vector<Eigen::VectorXd>& cols) {
  require(!cols.empty(), "Window: need at least one entry");
  const int dim = static_cast<int>(cols.front().size());
  Window w(dim, static_cast<int>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) {
    require(static_cast<int>(cols[i].size()) == dim,
            "Window: inconsistent vector dimensions");
    w.v_.col(static_cast<Eigen::Index>(i)) = cols[i];
  }
  return w;
}

Eigen::VectorXd Window::at_lag(int k) const {
  require(k >= 0 && k < len(), "Window: lag out of range");
  return v_.col(len() - 1 - k);
}

double Window::scalar_at_lag(int k) const {
  require(dim() == 1, "Window: scalar access on non-scalar window");
  require(k >= 0 && k < len(), "Window: lag out of range");
  return v_(0, len() - 1 - k);
}

void Window::set_at_lag(int k, const Eigen::Ref<const Eigen::VectorXd>& v) {
  require(k >= 0 && k < len(), "Window: lag out of range");
  require(static_cast<int>(v.size()) == dim(), "Window: dimension mismatch");
  v_.col(len() - 1 - k) = v;
}

Window Window::appended(const Eigen::Ref<const Eigen::VectorXd>& v) const {
  require(static_cast<int>(v.size()) == dim(), "Window: dimension mismatch");
  Window out(dim(), len() + 1);
  out.v_.leftCols(len()) = v_;
  out.v_.col(len()) = v;
  return out;
}

Window shift_append(const Window& w, const Eigen::Ref<const Eigen::VectorXd>& v) {
  require(static_cast<int>(v.size()) == w.dim(),
          "shift_append: dimension mismatch");
  Window out = w;
  const int L = w.len();
  if (L > 1) out.values().leftCols(L - 1) = w.values().rightCols(L - 1);
  out.values().col(L - 1) = v;
  return out;
}

Window drop_right(const Window& w, int k) {
  require(k >= 0, "drop_right: k must be nonnegative");
  require(k < w.len(), "drop_right: k must be smaller than len");
  if (k == 0) return w;
  Window out(w.dim(), w.len() - k);
  out.values() = w.values().leftCols(w.len() - k);
  return out;
}

Window truncate_left(const Window& w, int new_len) {
  require(new_len >= 1 && new_len <= w.len(), "truncate_left: bad length");
  if (new_len == w.len()) return w;
  Window out(w.dim(), new_len);
  out.values() = w.values().rightCols(new_len);
  return out;
}

Window concat_n(const Window& w_prime, const Window& w, int n, int output_len) {
  require(w_prime.dim() == w.dim(), "concat_n: dimension mismatch");
  require(n >= 0, "concat_n: n must be nonnegative");
  require(n + 1 <= w.len(), "concat_n: n+1 exceeds w.len");
  const int out_len = output_len < 0 ? w.len() : output_len;
  require(out_len >= n + 1, "concat_n: output_len must cover the n+1 kept entries");
  const int from_prime = out_len - n - 1;
  require(from_prime <= w_prime.len(),
          "concat_n: w_prime too short for requested output length");
  Window out(w.dim(), out_len);
  if (from_prime > 0)
    out.values().leftCols(from_prime) = w_prime.values().rightCols(from_prime);
  out.values().rightCols(n + 1) = w.values().rightCols(n + 1);
  return out;
}

WeightSeq WeightSeq::geometric(double rate) {
  require(rate > 0.0 && rate < 1.0, "WeightSeq: geometric rate must be in (0,1)");
  WeightSeq w;
  w.kind = Kind::geometric;
  w.rate = rate;
  return w;
}

WeightSeq WeightSeq::product() {
  WeightSeq w;
  w.kind = Kind::product;
  w.rate = 0.5;
  return w;
}

nlohmann::json WeightSeq::to_json() const {
  if (kind == Kind::product) return {{"kind", "product"}};
  return {{"kind", "geometric"}, {"rate", rate}};
}

WeightSeq WeightSeq::from_json(const nlohmann::json& j) {
  const std::string kind = j.value("kind", "geometric");
  if (kind == "product") return product();
  if (kind == "geometric") return geometric(j.value("rate", 0.5));
  throw ValidationError("WeightSeq: unknown kind '" + kind + "'");
}

double dist(const Window& w1, const Window& w2, const WeightSeq& weights,
            double p) {
  require(w1.same_shape(w2), "dist: shape mismatch");
  const int L = w1.len();
  const auto delta_at = [&](int k) {
    return (w1.values().col(L - 1 - k) - w2.values().col(L - 1 - k)).norm();
  };
  if (weights.kind == WeightSeq::Kind::product) {
    double acc = 0.0;
    double wk = 1.0;
    for (int k = 0; k < L; ++k, wk *= 0.5)
      acc += wk * std::min(1.0, delta_at(k));
    return acc;
  }
  require(p >= 1.0, "dist: p must be in [1, inf]");
  if (p == kInf) {
    double best = 0.0;
    double wk = 1.0;
    for (int k = 0; k < L; ++k, wk *= weights.rate)
      best = std::max(best, wk * delta_at(k));
    return best;
  }
  double acc = 0.0;
  double wk = 1.0;
  for (int k = 0; k < L; ++k, wk *= weights.rate)
    acc += std::pow(wk * delta_at(k), p);
  return std::pow(acc, 1.0 / p);
}

Eigen::VectorXd WindowWithFuture::at_time(int t) const {
  if (t <= 0) return past.at_lag(-t);
  require(t <= n_future(), "WindowWithFuture: future index out of range");
  return future[static_cast<std::size_t>(t - 1)];
}

WindowWithFuture extend_right(const Window& u, const ExtendPolicy& policy,
                              int n_future) {
  require(n_future >= 0, "extend_right: n_future must be nonnegative");
  WindowWithFuture out;
  out.past = u;
  out.future.reserve(static_cast<std::size_t>(n_future));
  switch (policy.kind) {
    case ExtendPolicy::Kind::repeat_last: {
      const Eigen::VectorXd last = u.at_lag(0);
      for (int i = 0; i < n_future; ++i) out.future.push_back(last);
      break;
    }
    case ExtendPolicy::Kind::zeros: {
      for (int i = 0; i < n_future; ++i)
        out.future.push_back(Eigen::VectorXd::Zero(u.dim()));
      break;
    }
    case ExtendPolicy::Kind::sampler: {
      require(static_cast<bool>(policy.sampler),
              "extend_right: sampler policy without sampler function");
      rng::Rng gen(rng::derive(policy.seed, "extend_right"));
      Window grown = u;
      for (int i = 0; i < n_future; ++i) {
        Eigen::VectorXd v = policy.sampler(grown, gen);
        require(static_cast<int>(v.size()) == u.dim(),
                "extend_right: sampler returned wrong dimension");
        out.future.push_back(v);
        grown = grown.appended(v);
      }
      break;
    }
  }
  return out;
}

std::string to_csv(const Window& w) {
  std::string out;
  for (int i = 0; i < w.len(); ++i) {
    for (int c = 0; c < w.dim(); ++c) {
      if (c) out.push_back(',');
      std::string cell = report::format_double(w.values()(c, i));
      out += cell;
    }
    out.push_back('\n');
  }
  return out;
}

Window window_from_csv(const std::string& text) {
  std::vector<Eigen::VectorXd> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(std::stod(cell));
    Eigen::VectorXd v(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c)
      v[static_cast<Eigen::Index>(c)] = cells[c];
    rows.push_back(std::move(v));
  }
  require(!rows.empty(), "window_from_csv: no rows");
  return Window::from_columns(rows);
}

nlohmann::json to_json(const Window& w) {
  nlohmann::json values = nlohmann::json::array();
  for (int i = 0; i < w.len(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < w.dim(); ++c) row.push_back(w.values()(c, i));
    values.push_back(std::move(row));
  }
  return {{"dim", w.dim()}, {"values", std::move(values)}};
}

Window window_from_json(const nlohmann::json& j) {
  require(j.contains("dim") && j.contains("values"),
          "window_from_json: need {dim, values}");
  const int dim = j.at("dim").get<int>();
  std::vector<Eigen::VectorXd> cols;
  for (const auto& row : j.at("values")) {
    require(static_cast<int>(row.size()) == dim,
            "window_from_json: row length != dim");
    Eigen::VectorXd v(dim);
    for (int c = 0; c < dim; ++c) v[c] = row.at(static_cast<std::size_t>(c)).get<double>();
    cols.push_back(std::move(v));
  }
  require(!cols.empty(), "window_from_json: empty values");
  return Window::from_columns(cols);
}

}  // namespace echolab::seq
