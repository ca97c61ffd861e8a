// Shared plumbing: error taxonomy, seeded RNG streams, numeric guards.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace echolab {

inline constexpr const char* kToolVersion = "0.2.0";

// Thrown on malformed configs, shape mismatches, violated preconditions.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown on numerical failure: divergence, unresolved clustering, singular
// innovation covariance, particle collapse. The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& v) {
  return v.allFinite();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

namespace rng {

// splitmix64: the mixing function used both as a PRNG seeder and for
// deriving independent child seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Seed splitting scheme (documented contract): every stream of randomness is
// identified by (master seed, stream label, index). Children are obtained by
// mixing label hash and index into the master via splitmix64, so
//   derive(seed, "input", i)  !=  derive(seed, "init", i)
// and streams never overlap for distinct (label, index) pairs.
inline std::uint64_t derive(std::uint64_t seed, std::string_view label,
                            std::uint64_t index = 0) {
  std::uint64_t s = seed ^ fnv1a(label);
  std::uint64_t a = splitmix64(s);
  s ^= index * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL;
  std::uint64_t b = splitmix64(s);
  return a ^ (b + 0x9e3779b97f4a7c15ULL);
}

// Deterministic generator with hand-rolled distributions so that results are
// identical across platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(seed ^ 0x2545f4914f6cdd1dULL) {
    // warm up so that low-entropy seeds (0, 1, ...) decorrelate
    for (int i = 0; i < 4; ++i) splitmix64(s_);
  }

  std::uint64_t next_u64() { return splitmix64(s_); }

  // uniform on [0,1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform on (0,1], safe for log()
  double uniform01_open0() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; consumes exactly two uniforms per pair, caches the second.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = uniform01_open0();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // unbiased integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValidationError("uniform_int: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // index sampled from a normalized weight vector (linear scan; desk scale)
  int categorical(const Eigen::Ref<const Eigen::VectorXd>& w) {
    const double u = uniform01() * w.sum();
    double acc = 0.0;
    for (int i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return i;
    }
    return static_cast<int>(w.size()) - 1;
  }

 private:
  std::uint64_t s_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace rng
}  // namespace echolab
