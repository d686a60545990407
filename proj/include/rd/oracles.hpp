#pragma once

// Reference solvers used to verify both estimators: Blahut-Arimoto for
// discrete sources, reverse water-filling for diagonal Gaussians, the
// analytic standard-Gaussian intercept, and a histogram discretizer for
// low-dimensional continuous sources. All solvers are pure functions.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rd/common.hpp"
#include "rd/sources.hpp"
#include "rd/tensor.hpp"

namespace rd::oracle {

struct RDPoint {
  double distortion = 0.0;
  double rate_nats = 0.0;
  std::optional<double> lambda;
  std::optional<ConfInterval> rate_ci;
  std::optional<ConfInterval> distortion_ci;
  std::optional<double> rate_sd;
  std::optional<double> distortion_sd;
  bool converged = true;

  double rate_bits() const { return rate_nats / std::log(2.0); }
};

struct DiscreteChannel {
  Tensor conditional;             // |X| x |Xhat| row-stochastic Q(xhat|x)
  std::vector<double> marginal;   // length |Xhat| simplex

  void validate(double tol = 1e-12) const {
    for (std::size_t i = 0; i < conditional.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < conditional.cols(); ++j) {
        double q = conditional.at(i, j);
        if (q < 0.0) throw NumericalError("DiscreteChannel: negative entry");
        s += q;
      }
      if (std::abs(s - 1.0) > tol)
        throw NumericalError("DiscreteChannel: row " + std::to_string(i) +
                             " sums to " + std::to_string(s));
    }
    double s = 0.0;
    for (double q : marginal) {
      if (q < 0.0) throw NumericalError("DiscreteChannel: negative marginal");
      s += q;
    }
    if (std::abs(s - 1.0) > tol)
      throw NumericalError("DiscreteChannel: marginal sums to " +
                           std::to_string(s));
  }
};

struct BaResult {
  RDPoint point;
  DiscreteChannel channel;
  std::size_t iterations = 0;
  double lagrangian = 0.0;
};

// Blahut-Arimoto coordinate descent at fixed slope lambda.
//
// Alternates q(xhat) <- sum_x p(x) Q(xhat|x) and
// Q(xhat|x) proportional to q(xhat) exp(-lambda rho(x, xhat)) until the
// Lagrangian decreases by less than tol. The Lagrangian is checked to be
// non-increasing on every sweep. Non-convergence is not an error: the best
// point is returned with converged = false.
inline BaResult ba_solve(const std::vector<double>& pmf,
                         const std::vector<std::vector<double>>& support,
                         const std::vector<std::vector<double>>& reproduction,
                         src::Metric metric, double lambda, double tol = 1e-9,
                         std::size_t max_iter = 20000) {
  if (lambda < 0.0) throw UsageError("ba_solve: lambda must be >= 0");
  if (pmf.size() != support.size() || pmf.empty())
    throw UsageError("ba_solve: pmf/support size mismatch");
  if (reproduction.empty())
    throw UsageError("ba_solve: empty reproduction alphabet");
  double total = 0.0;
  for (double p : pmf) {
    if (p < 0.0) throw UsageError("ba_solve: negative pmf entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw UsageError("ba_solve: pmf must sum to 1 within 1e-12");

  const std::size_t nx = support.size();
  const std::size_t ny = reproduction.size();
  const std::size_t dim = support.front().size();

  // Distortion matrix; the alphabets stay small enough to precompute.
  Tensor rho = Tensor::zeros({nx, ny});
  for (std::size_t i = 0; i < nx; ++i) {
    if (support[i].size() != dim)
      throw UsageError("ba_solve: ragged support");
    for (std::size_t j = 0; j < ny; ++j) {
      if (reproduction[j].size() != dim)
        throw UsageError("ba_solve: reproduction dimension mismatch");
      rho.at(i, j) = src::distortion(metric, support[i].data(),
                                     reproduction[j].data(), dim);
    }
  }

  // Uniform initialization keeps every KL term finite.
  std::vector<double> log_q(ny, -std::log(static_cast<double>(ny)));

  double rate = 0.0, dist = 0.0;
  double lagr_prev = std::numeric_limits<double>::infinity();
  double lagr = lagr_prev;
  bool converged = false;
  std::size_t it = 0;

  // One sweep: Q(xhat|x) proportional to q(xhat) exp(-lambda rho), then
  // q <- marginal of Q. Rate and distortion are evaluated at the fresh
  // (Q, q) pair; with ln Q_ij = l_ij - lse_i the rate decomposes as
  // sum p_i Q_ij (l_ij - lse_i) - sum_j q_j ln q_j, avoiding per-entry logs.
  // 0 log(0/q) is treated as 0 throughout.
  std::vector<double> logits(ny), qrow(ny), q_new(ny);
  auto sweep = [&](bool keep_channel, Tensor* channel) {
    std::fill(q_new.begin(), q_new.end(), 0.0);
    double cross = 0.0;  // sum_ij p_i Q_ij (l_ij - lse_i)
    dist = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < ny; ++j) {
        logits[j] = log_q[j] - lambda * rho.at(i, j);
        mx = std::max(mx, logits[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < ny; ++j) {
        qrow[j] = std::exp(logits[j] - mx);
        s += qrow[j];
      }
      double lse = mx + std::log(s);
      double pi = pmf[i];
      for (std::size_t j = 0; j < ny; ++j) {
        double qij = qrow[j] / s;
        if (keep_channel) channel->at(i, j) = qij;
        if (pi == 0.0 || qij == 0.0) continue;
        q_new[j] += pi * qij;
        cross += pi * qij * (logits[j] - lse);
        dist += pi * qij * rho.at(i, j);
      }
    }
    double ent = 0.0;
    for (std::size_t j = 0; j < ny; ++j) {
      log_q[j] = q_new[j] > 0.0 ? std::log(q_new[j])
                                : -std::numeric_limits<double>::infinity();
      if (q_new[j] > 0.0) ent += q_new[j] * log_q[j];
    }
    rate = std::max(0.0, cross - ent);
  };

  for (it = 1; it <= max_iter; ++it) {
    sweep(false, nullptr);
    lagr = rate + lambda * dist;
    if (lagr > lagr_prev + 1e-9)
      throw NumericalError("ba_solve: Lagrangian increased at iteration " +
                           std::to_string(it));
    if (lagr_prev - lagr < tol) {
      converged = true;
      break;
    }
    lagr_prev = lagr;
  }

  BaResult res;
  res.channel.conditional = Tensor::zeros({nx, ny});
  sweep(true, &res.channel.conditional);  // final pass also yields the channel
  lagr = rate + lambda * dist;
  res.point.distortion = dist;
  res.point.rate_nats = rate;
  res.point.lambda = lambda;
  res.point.converged = converged;
  res.iterations = std::min(it, max_iter);
  res.lagrangian = lagr;
  res.channel.marginal.resize(ny);
  for (std::size_t j = 0; j < ny; ++j)
    res.channel.marginal[j] = std::exp(log_q[j]);
  return res;
}

// Rate in nats of a diagonal Gaussian at total distortion budget D. Finds
// the water level theta with sum_i min(theta, var_i) = D by bisection, then
// returns sum_i 0.5 log(var_i / min(theta, var_i)).
inline double reverse_waterfill(const std::vector<double>& variances,
                                double D) {
  if (variances.empty())
    throw UsageError("reverse_waterfill: empty variance list");
  for (double v : variances)
    if (!(v > 0.0))
      throw UsageError("reverse_waterfill: variances must be positive");
  if (D <= 0.0)
    throw UsageError(
        "reverse_waterfill: D must be > 0 (rate diverges for a continuous "
        "source)");
  double total = 0.0, vmax = 0.0;
  for (double v : variances) {
    total += v;
    vmax = std::max(vmax, v);
  }
  if (D >= total) return 0.0;

  auto filled = [&](double theta) {
    double s = 0.0;
    for (double v : variances) s += std::min(theta, v);
    return s;
  };
  double lo = 0.0, hi = vmax;
  for (int iter = 0; iter < 200; ++iter) {
    double mid = 0.5 * (lo + hi);
    if (filled(mid) < D)
      lo = mid;
    else
      hi = mid;
  }
  double theta = 0.5 * (lo + hi);
  double rate = 0.0;
  for (double v : variances) rate += 0.5 * std::log(v / std::min(theta, v));
  return std::max(0.0, rate);
}

// Water-filled (distortion, rate) point of a diagonal Gaussian at total-
// distortion slope lambda: theta = 1/(2 lambda).
inline RDPoint gaussian_point_at_slope(const std::vector<double>& variances,
                                       double lambda) {
  if (!(lambda > 0.0))
    throw UsageError("gaussian_point_at_slope: lambda must be > 0");
  double theta = 1.0 / (2.0 * lambda);
  RDPoint p;
  p.lambda = lambda;
  for (double v : variances) {
    p.distortion += std::min(theta, v);
    p.rate_nats += 0.5 * std::log(v / std::min(theta, v));
  }
  return p;
}

// R-axis intercept F_n(lambda) of the standard Gaussian in n dimensions,
// in nats. lambda is the slope against per-dimension mean squared
// distortion, the convention under which F_n(n/2) = n/2; for a slope
// against total squared error multiply lambda by n first. Decomposes as
// F_n(lambda) = n F_1(lambda / n).
inline double gaussian_intercept(std::size_t n, double lambda) {
  if (n == 0) throw UsageError("gaussian_intercept: n must be >= 1");
  if (!(lambda > 0.0))
    throw UsageError("gaussian_intercept: lambda must be > 0");
  double t = lambda / static_cast<double>(n);
  double f1 = t <= 0.5 ? t : 0.5 * std::log(2.0 * t) + 0.5;
  return static_cast<double>(n) * f1;
}

// ---------------------------------------------------------------------------
// Histogram discretizer for sources of dimension <= 2.
// ---------------------------------------------------------------------------

struct GridSpec {
  std::vector<double> lo, hi;       // per-dimension bounds
  std::vector<std::size_t> bins;    // per-dimension bin counts
  std::size_t samples = 1000000;

  std::size_t cells() const {
    std::size_t c = 1;
    for (std::size_t b : bins) c *= b;
    return c;
  }
};

// Uniform-grid histogram of `spec.samples` draws; out-of-range draws are
// dropped and the pmf renormalized over counted cells. Support points are
// the cell centers.
inline src::Source discretize(const src::Source& source, const GridSpec& spec,
                              std::uint64_t out_seed = 1) {
  std::size_t n = source.dim();
  if (n > 2) throw UsageError("discretize: source dimension must be <= 2");
  if (spec.lo.size() != n || spec.hi.size() != n || spec.bins.size() != n)
    throw UsageError("discretize: grid spec dimension mismatch");
  for (std::size_t d = 0; d < n; ++d) {
    if (!(spec.hi[d] > spec.lo[d]))
      throw UsageError("discretize: need hi > lo in every dimension");
    if (spec.bins[d] == 0) throw UsageError("discretize: zero bins");
  }
  if (spec.cells() > 1000000)
    throw UsageError("discretize: grid too large (" +
                     std::to_string(spec.cells()) + " cells > 1e6)");

  std::vector<std::uint64_t> counts(spec.cells(), 0);
  std::uint64_t kept = 0;
  const std::size_t chunk = 65536;
  std::uint64_t drawn = 0;
  while (drawn < spec.samples) {
    std::size_t take =
        static_cast<std::size_t>(std::min<std::uint64_t>(chunk, spec.samples - drawn));
    src::SampleBatch batch = source.sample_at(drawn, take);
    drawn += take;
    for (std::size_t r = 0; r < take; ++r) {
      const double* x = batch.data.row_ptr(r);
      std::size_t cell = 0;
      bool in = true;
      for (std::size_t d = 0; d < n; ++d) {
        double w = (spec.hi[d] - spec.lo[d]) / static_cast<double>(spec.bins[d]);
        double f = (x[d] - spec.lo[d]) / w;
        if (f < 0.0 || f >= static_cast<double>(spec.bins[d])) {
          in = false;
          break;
        }
        cell = cell * spec.bins[d] + static_cast<std::size_t>(f);
      }
      if (in) {
        ++counts[cell];
        ++kept;
      }
    }
  }
  if (kept == 0) throw NumericalError("discretize: no samples fell inside the grid");

  std::vector<std::vector<double>> support;
  std::vector<double> pmf;
  support.reserve(spec.cells());
  pmf.reserve(spec.cells());
  for (std::size_t cell = 0; cell < spec.cells(); ++cell) {
    if (counts[cell] == 0) continue;
    std::vector<double> center(n);
    std::size_t rem = cell;
    for (std::size_t d = n; d-- > 0;) {
      std::size_t idx = rem % spec.bins[d];
      rem /= spec.bins[d];
      double w = (spec.hi[d] - spec.lo[d]) / static_cast<double>(spec.bins[d]);
      center[d] = spec.lo[d] + (static_cast<double>(idx) + 0.5) * w;
    }
    support.push_back(std::move(center));
    pmf.push_back(static_cast<double>(counts[cell]) /
                  static_cast<double>(kept));
  }
  // Compensate accumulated rounding so the pmf sums to 1 within 1e-12.
  double s = 0.0;
  for (double p : pmf) s += p;
  for (double& p : pmf) p /= s;
  return src::Source::discrete_tabular(std::move(support), std::move(pmf),
                                       out_seed);
}

// Binary entropy in nats; the analytic binary R(D) under Hamming distortion
// is H(p) - H(D) for D <= min(p, 1-p).
inline double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
}

inline double binary_rd(double p, double D) {
  double dmax = std::min(p, 1.0 - p);
  if (D >= dmax) return 0.0;
  return binary_entropy(p) - binary_entropy(D);
}

// Sweeps lambda by bisection until the BA point hits a target distortion
// (BA distortion is non-increasing in lambda).
inline BaResult ba_solve_at_distortion(
    const std::vector<double>& pmf,
    const std::vector<std::vector<double>>& support,
    const std::vector<std::vector<double>>& reproduction, src::Metric metric,
    double target_D, double tol = 1e-9, std::size_t max_iter = 20000,
    double d_tol = 1e-6) {
  double lo = 0.0, hi = 1.0;
  BaResult res = ba_solve(pmf, support, reproduction, metric, hi, tol, max_iter);
  while (res.point.distortion > target_D && hi < 1e8) {
    hi *= 2.0;
    res = ba_solve(pmf, support, reproduction, metric, hi, tol, max_iter);
  }
  for (int it = 0; it < 100; ++it) {
    double mid = 0.5 * (lo + hi);
    res = ba_solve(pmf, support, reproduction, metric, mid, tol, max_iter);
    if (std::abs(res.point.distortion - target_D) < d_tol) return res;
    if (res.point.distortion > target_D)
      lo = mid;
    else
      hi = mid;
  }
  return res;
}

}  // namespace rd::oracle
