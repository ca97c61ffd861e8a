// Discrete optimal transport: exact solver for weighted atom clouds plus the
// 1-D quantile closed form and a sliced approximation for large clouds.
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "echolab/common.hpp"

namespace echolab::transport {

struct TransportPlan {
  double cost = 0.0;      // sum_ij c_ij f_ij at the optimum
  Eigen::MatrixXd flows;  // n x m, only filled when requested
  int pivots = 0;
};

// Exact minimum-cost transport between supply and demand (both summing to the
// same total) under the given cost matrix. Network-simplex on the bipartite
// graph; deterministic pivoting.
TransportPlan solve_transport(const Eigen::MatrixXd& cost,
                              const Eigen::VectorXd& supply,
                              const Eigen::VectorXd& demand,
                              bool want_plan = false);

// W_p for a precomputed ground-distance matrix: (min sum d_ij^p f_ij)^(1/p).
double wasserstein_cost(const Eigen::MatrixXd& ground, const Eigen::VectorXd& wx,
                        const Eigen::VectorXd& wy, double p);

// W_p between scalar atom lists, closed form via quantile matching.
double wasserstein_1d(std::vector<double> xs, std::vector<double> wx,
                      std::vector<double> ys, std::vector<double> wy, double p);

// W_p between weighted point clouds (points are columns) under the Euclidean
// ground metric. Scalar clouds use the quantile form; otherwise the exact
// solver runs when n*m <= exact_pair_cap and throws past the cap.
double wasserstein_points(const Eigen::MatrixXd& xs, const Eigen::VectorXd& wx,
                          const Eigen::MatrixXd& ys, const Eigen::VectorXd& wy,
                          double p, std::size_t exact_pair_cap = 1000000);

// Monte-Carlo sliced approximation: average of 1-D W_p^p over seeded random
// projections, then the p-th root.
double sliced_wasserstein(const Eigen::MatrixXd& xs, const Eigen::VectorXd& wx,
                          const Eigen::MatrixXd& ys, const Eigen::VectorXd& wy,
                          double p, int n_projections, std::uint64_t seed);

}  // namespace echolab::transport
