#pragma once

// Shared plumbing: error taxonomy, deterministic RNG streams, summary
// statistics, log-domain scalar helpers and a tiny index-parallel loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rd {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes: usage/shape/io -> 2,
// numerical -> 3, non-convergence -> 4.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

class ShapeError : public UsageError {
 public:
  explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

class IoError : public UsageError {
 public:
  explicit IoError(const std::string& msg) : UsageError(msg) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 underneath; normals via Box-Muller so the
// byte stream is identical across standard libraries. Streams are derived
// by hashing (seed, stream) which gives O(1) random access into a source's
// sample sequence.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // Warm up once so that small seeds do not map to small first outputs.
    (void)splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed;
    (void)splitmix64(s);
    s ^= 0xA5A5A5A55A5A5A5AULL + stream;
    (void)splitmix64(s);
    return s;
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Scalar log-domain helpers.
// ---------------------------------------------------------------------------

inline double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double logsumexp(const std::vector<double>& v) {
  if (v.empty()) throw ShapeError("logsumexp: empty input");
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;  // all -inf stays -inf; +inf propagates
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double logmeanexp(const std::vector<double>& v) {
  return logsumexp(v) - std::log(static_cast<double>(v.size()));
}

// ---------------------------------------------------------------------------
// Sample-mean statistics and large-sample confidence intervals.
// ---------------------------------------------------------------------------

struct MeanStats {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, n-1 denominator
  double se = 0.0;
  std::size_t n = 0;
};

inline MeanStats mean_stats(const std::vector<double>& xs) {
  MeanStats s;
  s.n = xs.size();
  if (s.n == 0) throw ShapeError("mean_stats: empty sample");
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) /
           static_cast<double>(s.n);
  if (s.n > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(acc / static_cast<double>(s.n - 1));
    s.se = s.sd / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

struct ConfInterval {
  double lo = 0.0;
  double hi = 0.0;
  double half_width() const { return 0.5 * (hi - lo); }
};

// Two-sided normal interval, default 95% (z = 1.96).
inline ConfInterval normal_ci(const MeanStats& s, double z = 1.96) {
  return {s.mean - z * s.se, s.mean + z * s.se};
}

// One-sided lower confidence bound, default 90% (z = 1.282).
inline double lower_conf_bound(const MeanStats& s, double z = 1.282) {
  return s.mean - z * s.se;
}

// ---------------------------------------------------------------------------
// Index-parallel loop. Work items are independent; results must be written
// to per-index slots so that the outcome does not depend on the number of
// worker threads.
// ---------------------------------------------------------------------------

template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  std::exception_ptr first_error = nullptr;
  std::mutex mu;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w]() {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace rd
