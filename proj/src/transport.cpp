#include "echolab/transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>

namespace echolab::transport {

namespace {

// transportation simplex state: the basis is a spanning tree on the bipartite
// graph of supply rows (nodes 0..n-1) and demand columns (nodes n..n+m-1)
struct Simplex {
  int n, m, nodes;
  const Eigen::MatrixXd& C;
  double tol;

  std::vector<int> arc_i, arc_j;
  std::vector<double> arc_flow;
  std::vector<char> arc_alive;
  std::vector<std::vector<int>> adj;  // node -> arc ids
  std::vector<char> basic;            // flat i*m+j -> in basis
  std::vector<double> u, v;

  // scratch reused across pivots
  std::vector<char> seen;
  std::vector<int> stack, parent, parent_arc;

  explicit Simplex(const Eigen::MatrixXd& cost)
      : n(static_cast<int>(cost.rows())),
        m(static_cast<int>(cost.cols())),
        nodes(n + m),
        C(cost),
        tol(1e-12 * (1.0 + cost.cwiseAbs().maxCoeff())),
        adj(static_cast<std::size_t>(n + m)),
        basic(static_cast<std::size_t>(n) * static_cast<std::size_t>(m), 0),
        u(static_cast<std::size_t>(n)),
        v(static_cast<std::size_t>(m)),
        seen(static_cast<std::size_t>(n + m)),
        parent(static_cast<std::size_t>(n + m)),
        parent_arc(static_cast<std::size_t>(n + m)) {}

  int add_arc(int i, int j, double f) {
    int id = static_cast<int>(arc_i.size());
    arc_i.push_back(i);
    arc_j.push_back(j);
    arc_flow.push_back(f);
    arc_alive.push_back(1);
    adj[static_cast<std::size_t>(i)].push_back(id);
    adj[static_cast<std::size_t>(n + j)].push_back(id);
    basic[static_cast<std::size_t>(i) * m + j] = 1;
    return id;
  }

  void remove_arc(int id) {
    arc_alive[static_cast<std::size_t>(id)] = 0;
    basic[static_cast<std::size_t>(arc_i[static_cast<std::size_t>(id)]) * m +
          arc_j[static_cast<std::size_t>(id)]] = 0;
    for (int node : {arc_i[static_cast<std::size_t>(id)],
                     n + arc_j[static_cast<std::size_t>(id)]}) {
      auto& list = adj[static_cast<std::size_t>(node)];
      list.erase(std::find(list.begin(), list.end(), id));
    }
  }

  int other_end(int arc, int node) const {
    int a = arc_i[static_cast<std::size_t>(arc)];
    int b = n + arc_j[static_cast<std::size_t>(arc)];
    return node == a ? b : a;
  }

  void compute_duals() {
    std::fill(seen.begin(), seen.end(), 0);
    stack.assign(1, 0);
    seen[0] = 1;
    u[0] = 0.0;
    while (!stack.empty()) {
      int node = stack.back();
      stack.pop_back();
      for (int arc : adj[static_cast<std::size_t>(node)]) {
        int next = other_end(arc, node);
        if (seen[static_cast<std::size_t>(next)]) continue;
        seen[static_cast<std::size_t>(next)] = 1;
        int i = arc_i[static_cast<std::size_t>(arc)];
        int j = arc_j[static_cast<std::size_t>(arc)];
        if (next >= n)
          v[static_cast<std::size_t>(j)] = C(i, j) - u[static_cast<std::size_t>(i)];
        else
          u[static_cast<std::size_t>(i)] = C(i, j) - v[static_cast<std::size_t>(j)];
        stack.push_back(next);
      }
    }
  }

  // tree path between two nodes as a list of arc ids
  std::vector<int> tree_path(int from, int to) {
    std::fill(seen.begin(), seen.end(), 0);
    std::fill(parent_arc.begin(), parent_arc.end(), -1);
    stack.assign(1, from);
    seen[static_cast<std::size_t>(from)] = 1;
    while (!stack.empty()) {
      int node = stack.back();
      stack.pop_back();
      if (node == to) break;
      for (int arc : adj[static_cast<std::size_t>(node)]) {
        int next = other_end(arc, node);
        if (seen[static_cast<std::size_t>(next)]) continue;
        seen[static_cast<std::size_t>(next)] = 1;
        parent[static_cast<std::size_t>(next)] = node;
        parent_arc[static_cast<std::size_t>(next)] = arc;
        stack.push_back(next);
      }
    }
    std::vector<int> path;
    for (int node = to; node != from; node = parent[static_cast<std::size_t>(node)]) {
      require(parent_arc[static_cast<std::size_t>(node)] >= 0,
              "transport basis is not connected");
      path.push_back(parent_arc[static_cast<std::size_t>(node)]);
    }
    std::reverse(path.begin(), path.end());
    return path;
  }
};

}  // namespace

TransportPlan solve_transport(const Eigen::MatrixXd& cost,
                              const Eigen::VectorXd& supply,
                              const Eigen::VectorXd& demand, bool want_plan) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  require(n >= 1 && m >= 1, "transport needs nonempty marginals");
  require(supply.size() == n && demand.size() == m,
          "marginal sizes must match the cost matrix");
  require(all_finite(cost), "cost matrix must be finite");
  require(supply.minCoeff() >= 0.0 && demand.minCoeff() >= 0.0,
          "marginals must be nonnegative");
  const double total_a = supply.sum();
  const double total_b = demand.sum();
  require(total_a > 0.0, "supply must have positive mass");
  require(std::abs(total_a - total_b) <= 1e-9 * std::max(1.0, total_a),
          "supply and demand totals differ");

  Eigen::VectorXd a = supply;
  Eigen::VectorXd b = demand * (total_a / total_b);

  Simplex s(cost);

  // northwest-corner initial basis
  {
    Eigen::VectorXd ra = a, rb = b;
    int i = 0, j = 0;
    const double zero_tol = 1e-15 * std::max(1.0, total_a);
    while (true) {
      double f = std::min(ra(i), rb(j));
      s.add_arc(i, j, f);
      ra(i) -= f;
      rb(j) -= f;
      if (i == n - 1 && j == m - 1) break;
      bool row_done = ra(i) <= zero_tol;
      if (row_done) {
        if (i < n - 1)
          ++i;
        else
          ++j;
      } else {
        if (j < m - 1)
          ++j;
        else
          ++i;
      }
    }
  }

  const std::size_t total_cells = static_cast<std::size_t>(n) * m;
  const long max_pivots = 400L * (n + m) + 2000;
  const long stall_limit = 40L * (n + m) + 200;
  long pivots = 0, stalled = 0;
  bool bland = false;

  Eigen::Map<Eigen::VectorXd> umap(s.u.data(), n);
  Eigen::Map<Eigen::VectorXd> vmap(s.v.data(), m);
  Eigen::MatrixXd reduced(n, m);

  // candidate list: a full vectorized scan harvests the most negative arcs,
  // then pivots re-price only the shortlist until it goes stale
  std::vector<std::size_t> candidates;
  const std::size_t cand_cap = std::max<std::size_t>(64, 4u * (n + m));

  auto full_scan = [&]() {
    reduced = cost;
    reduced.colwise() -= umap;
    reduced.rowwise() -= vmap.transpose();
    candidates.clear();
    const double* data = reduced.data();  // column-major
    double cut = -s.tol;
    for (std::size_t flat = 0; flat < total_cells; ++flat) {
      if (data[flat] < cut) candidates.push_back(flat);
    }
    if (candidates.size() > cand_cap) {
      std::nth_element(candidates.begin(), candidates.begin() + cand_cap,
                       candidates.end(), [&](std::size_t a, std::size_t b) {
                         return data[a] < data[b];
                       });
      candidates.resize(cand_cap);
    }
  };

  while (true) {
    s.compute_duals();

    // entering arc search: most negative reduced cost (basic arcs sit at
    // zero reduced cost up to fp noise, below tol either way)
    int enter_i = -1, enter_j = -1;
    if (!bland) {
      for (int attempt = 0; attempt < 2 && enter_i < 0; ++attempt) {
        double best = -s.tol;
        std::size_t best_flat = 0;
        std::size_t keep = 0;
        for (std::size_t flat : candidates) {
          int j = static_cast<int>(flat / n);  // column-major flat index
          int i = static_cast<int>(flat % n);
          double r = cost(i, j) - s.u[static_cast<std::size_t>(i)] -
                     s.v[static_cast<std::size_t>(j)];
          if (r < -s.tol) candidates[keep++] = flat;
          if (r < best) {
            best = r;
            best_flat = flat;
          }
        }
        candidates.resize(keep);
        if (best < -s.tol) {
          enter_j = static_cast<int>(best_flat / n);
          enter_i = static_cast<int>(best_flat % n);
        } else if (attempt == 0) {
          full_scan();
        }
      }
    } else {
      for (std::size_t flat = 0; flat < total_cells && enter_i < 0; ++flat) {
        if (s.basic[flat]) continue;
        int i = static_cast<int>(flat / m);
        int j = static_cast<int>(flat % m);
        double r = cost(i, j) - s.u[static_cast<std::size_t>(i)] -
                   s.v[static_cast<std::size_t>(j)];
        if (r < -s.tol) {
          enter_i = i;
          enter_j = j;
        }
      }
    }
    if (enter_i < 0) break;  // optimal

    // cycle: entering arc + tree path from its column node to its row node
    std::vector<int> path = s.tree_path(s.n + enter_j, enter_i);
    double theta = kInf;
    int leave = -1;
    for (std::size_t t = 0; t < path.size(); t += 2) {
      int arc = path[t];
      double f = s.arc_flow[static_cast<std::size_t>(arc)];
      auto key = std::make_pair(s.arc_i[static_cast<std::size_t>(arc)],
                                s.arc_j[static_cast<std::size_t>(arc)]);
      if (leave < 0 || f < theta ||
          (f == theta &&
           key < std::make_pair(s.arc_i[static_cast<std::size_t>(leave)],
                                s.arc_j[static_cast<std::size_t>(leave)]))) {
        theta = f;
        leave = arc;
      }
    }
    require(leave >= 0, "transport pivot found no leaving arc");

    for (std::size_t t = 0; t < path.size(); ++t) {
      double sign = (t % 2 == 0) ? -1.0 : 1.0;
      s.arc_flow[static_cast<std::size_t>(path[t])] += sign * theta;
    }
    s.remove_arc(leave);
    s.add_arc(enter_i, enter_j, theta);

    ++pivots;
    stalled = theta > 0.0 ? 0 : stalled + 1;
    if (stalled > stall_limit) bland = true;
    if (pivots > max_pivots)
      throw NumericalError("transport solver exceeded its pivot budget");
  }

  TransportPlan plan;
  plan.pivots = static_cast<int>(pivots);
  double total_cost = 0.0;
  for (std::size_t id = 0; id < s.arc_i.size(); ++id) {
    if (!s.arc_alive[id]) continue;
    double f = std::max(0.0, s.arc_flow[id]);
    total_cost += cost(s.arc_i[id], s.arc_j[id]) * f;
  }
  plan.cost = total_cost;
  if (want_plan) {
    plan.flows = Eigen::MatrixXd::Zero(n, m);
    for (std::size_t id = 0; id < s.arc_i.size(); ++id) {
      if (!s.arc_alive[id]) continue;
      plan.flows(s.arc_i[id], s.arc_j[id]) = std::max(0.0, s.arc_flow[id]);
    }
  }
  return plan;
}

double wasserstein_cost(const Eigen::MatrixXd& ground, const Eigen::VectorXd& wx,
                        const Eigen::VectorXd& wy, double p) {
  require(p >= 1.0 && std::isfinite(p), "transport order must be finite and >= 1");
  require(ground.minCoeff() >= 0.0, "ground distances must be nonnegative");
  Eigen::MatrixXd c = ground;
  if (p == 1.0) {
    // already the cost
  } else if (p == 2.0) {
    c = ground.array().square();
  } else {
    c = ground.array().pow(p);
  }
  TransportPlan plan = solve_transport(c, wx, wy);
  return std::pow(std::max(0.0, plan.cost), 1.0 / p);
}

double wasserstein_1d(std::vector<double> xs, std::vector<double> wx,
                      std::vector<double> ys, std::vector<double> wy, double p) {
  require(p >= 1.0 && std::isfinite(p), "transport order must be finite and >= 1");
  require(xs.size() == wx.size() && ys.size() == wy.size(),
          "atoms and weights must pair up");
  require(!xs.empty() && !ys.empty(), "transport needs nonempty marginals");

  auto prepare = [](std::vector<double>& v, std::vector<double>& w) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> sv, sw;
    double total = 0.0;
    for (std::size_t i : order) {
      require(w[i] >= 0.0, "weights must be nonnegative");
      if (w[i] <= 0.0) continue;
      sv.push_back(v[i]);
      sw.push_back(w[i]);
      total += w[i];
    }
    require(total > 0.0, "weights must have positive mass");
    for (double& wi : sw) wi /= total;
    v = std::move(sv);
    w = std::move(sw);
  };
  prepare(xs, wx);
  prepare(ys, wy);

  double acc = 0.0;
  std::size_t ia = 0, ib = 0;
  double ra = wx[0], rb = wy[0];
  while (ia < xs.size() && ib < ys.size()) {
    double take = std::min(ra, rb);
    double d = std::abs(xs[ia] - ys[ib]);
    acc += take * (p == 1.0 ? d : p == 2.0 ? d * d : std::pow(d, p));
    ra -= take;
    rb -= take;
    if (ra <= 1e-17) {
      ++ia;
      if (ia < xs.size()) ra = wx[ia];
    }
    if (rb <= 1e-17) {
      ++ib;
      if (ib < ys.size()) rb = wy[ib];
    }
  }
  return std::pow(acc, 1.0 / p);
}

double wasserstein_points(const Eigen::MatrixXd& xs, const Eigen::VectorXd& wx,
                          const Eigen::MatrixXd& ys, const Eigen::VectorXd& wy,
                          double p, std::size_t exact_pair_cap) {
  require(xs.rows() == ys.rows(), "point clouds must share one dimension");
  require(xs.cols() == wx.size() && ys.cols() == wy.size(),
          "points and weights must pair up");
  const std::size_t nm =
      static_cast<std::size_t>(xs.cols()) * static_cast<std::size_t>(ys.cols());
  if (xs.rows() == 1) {
    std::vector<double> xv(xs.data(), xs.data() + xs.cols());
    std::vector<double> yv(ys.data(), ys.data() + ys.cols());
    std::vector<double> xw(wx.data(), wx.data() + wx.size());
    std::vector<double> yw(wy.data(), wy.data() + wy.size());
    return wasserstein_1d(std::move(xv), std::move(xw), std::move(yv),
                          std::move(yw), p);
  }
  require(nm <= exact_pair_cap,
          "cloud pair too large for exact transport; use the sliced mode");
  Eigen::MatrixXd ground(xs.cols(), ys.cols());
  for (int i = 0; i < xs.cols(); ++i)
    for (int j = 0; j < ys.cols(); ++j)
      ground(i, j) = (xs.col(i) - ys.col(j)).norm();
  return wasserstein_cost(ground, wx, wy, p);
}

double sliced_wasserstein(const Eigen::MatrixXd& xs, const Eigen::VectorXd& wx,
                          const Eigen::MatrixXd& ys, const Eigen::VectorXd& wy,
                          double p, int n_projections, std::uint64_t seed) {
  require(xs.rows() == ys.rows(), "point clouds must share one dimension");
  require(n_projections >= 1, "need at least one projection");
  require(p >= 1.0 && std::isfinite(p), "transport order must be finite and >= 1");
  const int dim = static_cast<int>(xs.rows());
  std::vector<double> xw(wx.data(), wx.data() + wx.size());
  std::vector<double> yw(wy.data(), wy.data() + wy.size());
  rng::Rng r(rng::derive(seed, "sliced", 0));
  double acc = 0.0;
  for (int k = 0; k < n_projections; ++k) {
    Eigen::VectorXd theta(dim);
    double norm = 0.0;
    while (norm < 1e-12) {
      for (int d = 0; d < dim; ++d) theta(d) = r.normal();
      norm = theta.norm();
    }
    theta /= norm;
    Eigen::VectorXd px = xs.transpose() * theta;
    Eigen::VectorXd py = ys.transpose() * theta;
    double w = wasserstein_1d(
        std::vector<double>(px.data(), px.data() + px.size()), xw,
        std::vector<double>(py.data(), py.data() + py.size()), yw, p);
    acc += p == 1.0 ? w : p == 2.0 ? w * w : std::pow(w, p);
  }
  return std::pow(acc / n_projections, 1.0 / p);
}

}  // namespace echolab::transport
