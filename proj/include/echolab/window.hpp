// Finite windows over left-infinite sequences: the basic data type every
// solver works on, together with shift/concatenation operators and the
// weighted metrics used for clustering and transport.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "echolab/common.hpp"

namespace echolab::seq {

// A window holds vectors for times -len+1, ..., 0. Column `len-1` of the
// backing matrix is time 0 (the most recent entry); column 0 is the oldest.
class Window {
 public:
  Window() = default;
  Window(int dim, int len);

  static Window constant(int dim, int len, double value);
  static Window from_scalars(const std::vector<double>& oldest_to_newest);
  static Window from_columns(const std::vector<Eigen::VectorXd>& oldest_to_newest);

  int dim() const { return static_cast<int>(v_.rows()); }
  int len() const { return static_cast<int>(v_.cols()); }
  bool empty() const { return v_.cols() == 0; }

  // entry at time -k; k = 0 is the newest entry
  Eigen::VectorXd at_lag(int k) const;
  double scalar_at_lag(int k) const;
  void set_at_lag(int k, const Eigen::Ref<const Eigen::VectorXd>& v);

  const Eigen::MatrixXd& values() const { return v_; }
  Eigen::MatrixXd& values() { return v_; }

  // grown copy with v appended at time 0 (old entries shift one step into
  // the past; nothing is dropped)
  Window appended(const Eigen::Ref<const Eigen::VectorXd>& v) const;

  bool same_shape(const Window& o) const {
    return dim() == o.dim() && len() == o.len();
  }

 private:
  Eigen::MatrixXd v_;  // dim x len
};

// append-with-drop: same length, oldest entry discarded
Window shift_append(const Window& w, const Eigen::Ref<const Eigen::VectorXd>& v);

// discard the k most recent entries (k-fold left shift of the time origin)
Window drop_right(const Window& w, int k);

// keep only the new_len most recent entries
Window truncate_left(const Window& w, int new_len);

// splice: last (output_len - n - 1) entries of w_prime, then the last n+1
// entries of w. output_len < 0 means "use w.len()".
Window concat_n(const Window& w_prime, const Window& w, int n, int output_len = -1);

struct WeightSeq {
  enum class Kind { geometric, product };
  Kind kind = Kind::geometric;
  double rate = 0.5;  // geometric decay per step into the past

  static WeightSeq geometric(double rate);
  static WeightSeq product();

  nlohmann::json to_json() const;
  static WeightSeq from_json(const nlohmann::json& j);
};

// Weighted distance between equal-shape windows. For the geometric kind this
// is the weighted l^p norm of per-time Euclidean deviations, with weight
// rate^k at lag k (p = kInf gives max_k rate^k |delta_k|). The product kind
// realizes the product topology: sum_k 2^-k min(1, |delta_k|), ignoring p.
double dist(const Window& w1, const Window& w2, const WeightSeq& weights,
            double p = kInf);

// window plus finitely many future entries; future[0] is time +1
struct WindowWithFuture {
  Window past;
  std::vector<Eigen::VectorXd> future;

  int n_future() const { return static_cast<int>(future.size()); }
  // value at signed time t: t <= 0 reads the past window, t > 0 the future
  Eigen::VectorXd at_time(int t) const;
};

struct ExtendPolicy {
  enum class Kind { repeat_last, zeros, sampler };
  Kind kind = Kind::repeat_last;
  std::uint64_t seed = 0;
  // sampler kind: called once per future step, in time order; sees the past
  // extended with the steps generated so far
  std::function<Eigen::VectorXd(const Window& past_so_far, rng::Rng&)> sampler;
};

WindowWithFuture extend_right(const Window& u, const ExtendPolicy& policy,
                              int n_future);

// ---- serialization ----
// CSV: one row per time index, oldest first; columns are vector components.
std::string to_csv(const Window& w);
Window window_from_csv(const std::string& text);

nlohmann::json to_json(const Window& w);          // {dim, values:[[...]]}
Window window_from_json(const nlohmann::json& j);

}  // namespace echolab::seq
