#pragma once

// Dual lower-bound estimator. Trains log u_theta by stochastic gradient
// ascent on the linearized objective, estimating the sup-partition function
// per draw by global mode search over the k-component Gaussian-mixture
// objective gamma_k. Everything involving C_k and alpha is carried in the
// log domain; squared-error distortion is required for the mixture
// structure.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rd/common.hpp"
#include "rd/diffcore.hpp"
#include "rd/sources.hpp"
#include "rd/tensor.hpp"

namespace rd::lb {

// ---------------------------------------------------------------------------
// Hill climbing on log gamma_k
// ---------------------------------------------------------------------------

struct HillClimbParams {
  // Initial step is 1/(2 lambda), the kernel variance, so behavior is
  // invariant to the lambda scale. Halve on non-improvement, accept on
  // improvement, stop when step * |grad| < tol.
  double tol = 1e-9;
  std::size_t max_iter = 500;
};

enum class CkMode { Full, TopT };

struct CkEstimate {
  double log_value = 0.0;      // log C_k at the best terminal point
  std::vector<double> argmax;  // xhat*
  std::size_t starts_used = 0;
  bool converged = true;  // every climb terminated by the gradient test
};

namespace detail {

// log gamma_k(xhat) = logsumexp_i(-lambda |x_i - xhat|^2 - log u(x_i)) - log k
// for sample matrix X [k x n] and precomputed log-u values at the samples.
inline double log_gamma_at(const Tensor& X, const std::vector<double>& log_u,
                           double lambda, const double* xhat,
                           std::vector<double>& scratch) {
  std::size_t k = X.rows(), n = X.cols();
  scratch.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double* xi = X.row_ptr(i);
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double diff = xi[j] - xhat[j];
      d += diff * diff;
    }
    scratch[i] = -lambda * d - log_u[i];
  }
  return logsumexp(scratch) - std::log(static_cast<double>(k));
}

// Gradient of log gamma_k in xhat: sum_i w_i * 2 lambda (x_i - xhat) with
// softmax weights w. Returns the value; writes the gradient.
inline double log_gamma_grad(const Tensor& X, const std::vector<double>& log_u,
                             double lambda, const double* xhat, double* grad,
                             std::vector<double>& scratch) {
  std::size_t k = X.rows(), n = X.cols();
  double lg = log_gamma_at(X, log_u, lambda, xhat, scratch);
  double logk = std::log(static_cast<double>(k));
  for (std::size_t j = 0; j < n; ++j) grad[j] = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double w = std::exp(scratch[i] - logk - lg);  // softmax weight
    const double* xi = X.row_ptr(i);
    for (std::size_t j = 0; j < n; ++j)
      grad[j] += w * 2.0 * lambda * (xi[j] - xhat[j]);
  }
  return lg;
}

struct ClimbResult {
  double log_value;
  std::vector<double> point;
  bool converged;
};

inline ClimbResult hill_climb(const Tensor& X, const std::vector<double>& log_u,
                              double lambda, const double* start,
                              const HillClimbParams& hc) {
  std::size_t n = X.cols();
  std::vector<double> x(start, start + n), grad(n), trial(n), scratch;
  double step = 1.0 / (2.0 * lambda);
  double value = log_gamma_grad(X, log_u, lambda, x.data(), grad.data(), scratch);
  bool converged = false;
  for (std::size_t it = 0; it < hc.max_iter; ++it) {
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    if (step * gnorm < hc.tol) {
      converged = true;
      break;
    }
    for (std::size_t j = 0; j < n; ++j) trial[j] = x[j] + step * grad[j];
    double tv = log_gamma_at(X, log_u, lambda, trial.data(), scratch);
    if (tv > value) {
      x = trial;
      value = log_gamma_grad(X, log_u, lambda, x.data(), grad.data(), scratch);
    } else {
      step *= 0.5;
    }
  }
  return {value, std::move(x), converged};
}

// Scores log gamma_k at every centroid in one pass via the Gram matrix.
inline std::vector<double> centroid_scores(const Tensor& X,
                                           const std::vector<double>& log_u,
                                           double lambda) {
  std::size_t k = X.rows(), n = X.cols();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      M(X.data.data(), static_cast<Eigen::Index>(k),
        static_cast<Eigen::Index>(n));
  Eigen::MatrixXd gram = M * M.transpose();
  std::vector<double> scores(k);
  std::vector<double> args(k);
  double logk = std::log(static_cast<double>(k));
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < k; ++i) {
      double sq = gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) +
                  gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) -
                  2.0 * gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      args[i] = -lambda * std::max(0.0, sq) - log_u[i];
    }
    scores[j] = logsumexp(args) - logk;
  }
  return scores;
}

}  // namespace detail

// Global mode search over gamma_k: hill-climbs from every centroid (Full)
// or from the top_t highest-scoring centroids (TopT), returning the best
// terminal value. Ties go to the first-found mode in centroid index order.
inline CkEstimate compute_ck_core(const Tensor& X,
                                  const std::vector<double>& log_u,
                                  double lambda, CkMode mode,
                                  std::size_t top_t, const HillClimbParams& hc,
                                  int jobs = 1) {
  std::size_t k = X.rows();
  if (k == 0) throw UsageError("compute_ck: k must be >= 1");
  if (log_u.size() != k)
    throw ShapeError("compute_ck: log_u size does not match sample count");
  if (!(lambda > 0.0)) throw UsageError("compute_ck: lambda must be > 0");

  std::vector<std::size_t> starts;
  if (mode == CkMode::Full || top_t >= k) {
    starts.resize(k);
    for (std::size_t i = 0; i < k; ++i) starts[i] = i;
  } else {
    std::vector<double> scores = detail::centroid_scores(X, log_u, lambda);
    starts.resize(k);
    for (std::size_t i = 0; i < k; ++i) starts[i] = i;
    std::partial_sort(starts.begin(), starts.begin() + top_t, starts.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (scores[a] != scores[b]) return scores[a] > scores[b];
                        return a < b;
                      });
    starts.resize(top_t);
  }

  std::vector<detail::ClimbResult> results(starts.size());
  parallel_for(starts.size(), jobs, [&](std::size_t s) {
    results[s] = detail::hill_climb(X, log_u, lambda, X.row_ptr(starts[s]), hc);
  });

  CkEstimate est;
  est.starts_used = starts.size();
  est.log_value = -std::numeric_limits<double>::infinity();
  bool any_finite = false;
  for (const auto& r : results) {
    est.converged = est.converged && r.converged;
    if (!std::isfinite(r.log_value)) continue;
    any_finite = true;
    if (r.log_value > est.log_value) {
      est.log_value = r.log_value;
      est.argmax = r.point;
    }
  }
  if (!any_finite)
    throw NumericalError("compute_ck: every hill climb produced a non-finite "
                         "objective");
  return est;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct AlphaTracker {
  double log_alpha = 0.0;
  double new_weight = 0.8;  // alpha <- 0.2 alpha + 0.8 E, in the log domain
  bool initialized = false;

  void observe(double log_estimate) {
    if (!initialized) {
      log_alpha = log_estimate;
      initialized = true;
      return;
    }
    log_alpha = logaddexp(std::log1p(-new_weight) + log_alpha,
                          std::log(new_weight) + log_estimate);
  }
};

struct LowerBoundConfig {
  double lambda = 1.0;
  std::size_t k = 1024;
  std::size_t m = 2;       // C_k draws per gradient step
  std::size_t top_t = 10;  // climbs per draw during training
  std::vector<std::size_t> hidden;  // log-u MLP hidden widths
  diff::Act act = diff::Act::Selu;
  std::size_t steps = 3000;
  double lr = 1e-4;
  std::uint64_t seed = 1;
  std::size_t m_eval = 30;  // full-mode draws for the reported intercept
  HillClimbParams hc;
  double alpha_new_weight = 0.8;
  double convergence_rtol = 1e-3;
  std::size_t convergence_window = 500;

  void validate() const {
    if (!(lambda > 0.0)) throw UsageError("lower bound: lambda must be > 0");
    if (k < 2) throw UsageError("lower bound: k must be >= 2");
    if (m < 1) throw UsageError("lower bound: m must be >= 1");
    if (top_t < 1) throw UsageError("lower bound: top_t must be >= 1");
    if (steps == 0) throw UsageError("lower bound: steps must be >= 1");
  }
};

struct LowerBoundModel {
  LowerBoundConfig cfg;
  std::size_t input_dim = 0;
  diff::MLPSpec logu;  // x -> scalar log u(x)
  diff::ParamStore params;
  AlphaTracker alpha;

  // log u at each sample row, via the frozen parameters.
  std::vector<double> log_u_at(const Tensor& X) const {
    Tensor out = diff::mlp_eval(logu, params, "logu", X);
    return out.data;
  }
};

inline LowerBoundModel make_lower_model(std::size_t input_dim,
                                        const LowerBoundConfig& cfg) {
  cfg.validate();
  LowerBoundModel model;
  model.cfg = cfg;
  model.input_dim = input_dim;
  model.alpha.new_weight = cfg.alpha_new_weight;
  std::vector<std::size_t> w;
  w.push_back(input_dim);
  for (std::size_t h : cfg.hidden) w.push_back(h);
  w.push_back(1);
  model.logu.widths = std::move(w);
  model.logu.hidden = cfg.act;
  model.logu.output = diff::OutAct::Linear;
  Rng rng(Rng::derive(cfg.seed, 0x6c75696e));
  diff::init_mlp_params(model.params, "logu", model.logu, rng);
  return model;
}

// ---------------------------------------------------------------------------
// Tape-side objective pieces
// ---------------------------------------------------------------------------

// Scalar node for log gamma_k(xhat), differentiable in theta and, when xhat
// is a leaf, in xhat as well. Used directly by tests; the trainer goes
// through lower_objective.
inline diff::Var log_gamma_k(diff::Tape& tape, const LowerBoundModel& model,
                             const diff::TapeParams& tp, const Tensor& X,
                             diff::Var xhat) {
  std::size_t k = X.rows();
  if (k == 0) throw UsageError("log_gamma_k: k must be >= 1");
  if (tape.val(xhat).numel() != X.cols())
    throw ShapeError("log_gamma_k: xhat dimension mismatch");
  diff::Var xs = tape.constant(X);
  diff::Var diffm = tape.add_rowvec(xs, tape.neg(xhat));
  diff::Var sq = tape.mul_scalar(tape.row_sum(tape.square(diffm)), -model.cfg.lambda);
  diff::Var lu = tape.reshape(
      diff::mlp_forward(tape, model.logu, tp, "logu", xs), {k});
  diff::Var args = tape.sub(sq, lu);
  return tape.add_scalar(tape.logsumexp(args),
                         -std::log(static_cast<double>(k)));
}

struct CkComputation {
  CkEstimate estimate;
  // gamma_k at the frozen argmax; gradients flow to theta only, per the
  // envelope treatment of the inner maximization.
  std::optional<diff::Var> node;
};

inline CkComputation compute_ck(const LowerBoundModel& model, const Tensor& batch,
                                CkMode mode, diff::Tape* tape = nullptr,
                                const diff::TapeParams* tp = nullptr,
                                int jobs = 1) {
  std::vector<double> log_u = model.log_u_at(batch);
  CkComputation out;
  out.estimate = compute_ck_core(batch, log_u, model.cfg.lambda, mode,
                                 model.cfg.top_t, model.cfg.hc, jobs);
  if (tape != nullptr) {
    if (tp == nullptr)
      throw UsageError("compute_ck: tape given without bound parameters");
    diff::Var xhat = tape->constant(Tensor::row(out.estimate.argmax));
    out.node = log_gamma_k(*tape, model, *tp, batch, xhat);
  }
  return out;
}

struct LowerObjective {
  diff::Var node;              // the linearized objective, to be ascended
  double log_mean_ck = 0.0;    // logmeanexp of the m draws (value only)
  double log_alpha_used = 0.0;
  std::vector<double> log_ck;  // per-draw log C_k values
};

// Linearized objective over m batches of k samples:
//   mean over all m*k samples of -log u  -  (mean C_k)/alpha - log alpha + 1
// with the C_k average taken with logsumexp and the ratio as
// exp(log mean C_k - log alpha). Seeds alpha with the first mean C_k; the
// EMA update itself happens after the caller's gradient step.
inline LowerObjective lower_objective(diff::Tape& tape, LowerBoundModel& model,
                                      const diff::TapeParams& tp,
                                      const std::vector<Tensor>& batches,
                                      int jobs = 1) {
  if (batches.empty()) throw UsageError("lower_objective: need m >= 1 batches");
  std::size_t m = batches.size();
  std::size_t k = batches.front().rows();

  // Climbs run on frozen parameters, independently per draw.
  std::vector<CkEstimate> draws(m);
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> log_u = model.log_u_at(batches[j]);
    draws[j] = compute_ck_core(batches[j], log_u, model.cfg.lambda,
                               CkMode::TopT, model.cfg.top_t, model.cfg.hc,
                               jobs);
  }

  // One stacked forward pass over all m*k rows.
  Tensor stacked = Tensor::zeros({m * k, batches.front().cols()});
  for (std::size_t j = 0; j < m; ++j) {
    if (batches[j].rows() != k || batches[j].cols() != batches.front().cols())
      throw ShapeError("lower_objective: ragged batches");
    std::copy(batches[j].data.begin(), batches[j].data.end(),
              stacked.data.begin() + j * k * stacked.cols());
  }
  diff::Var xs = tape.constant(stacked);
  diff::Var lu_all = tape.reshape(
      diff::mlp_forward(tape, model.logu, tp, "logu", xs), {m * k});
  diff::Var term_logu = tape.neg(tape.mean_all(lu_all));

  std::vector<diff::Var> log_ck_nodes;
  LowerObjective out;
  double logk = std::log(static_cast<double>(k));
  for (std::size_t j = 0; j < m; ++j) {
    diff::Var lu_j = tape.slice_rows(lu_all, j * k, (j + 1) * k);
    Tensor consts = Tensor::zeros({k});
    const Tensor& X = batches[j];
    for (std::size_t i = 0; i < k; ++i) {
      double d = 0.0;
      for (std::size_t c = 0; c < X.cols(); ++c) {
        double diff = X.at(i, c) - draws[j].argmax[c];
        d += diff * diff;
      }
      consts.data[i] = -model.cfg.lambda * d;
    }
    diff::Var args = tape.sub(tape.constant(consts), lu_j);
    diff::Var log_ck = tape.add_scalar(tape.logsumexp(args), -logk);
    out.log_ck.push_back(tape.scalar_val(log_ck));
    log_ck_nodes.push_back(log_ck);
  }

  diff::Var log_mean_ck = tape.add_scalar(
      tape.logsumexp(tape.stack_scalars(log_ck_nodes)),
      -std::log(static_cast<double>(m)));
  out.log_mean_ck = tape.scalar_val(log_mean_ck);

  if (!model.alpha.initialized) model.alpha.observe(out.log_mean_ck);
  double log_alpha = model.alpha.log_alpha;
  out.log_alpha_used = log_alpha;

  diff::Var ratio = tape.exp_(tape.add_scalar(log_mean_ck, -log_alpha));
  out.node = tape.add_scalar(tape.sub(term_logu, ratio), 1.0 - log_alpha);

  double v = tape.scalar_val(out.node);
  if (!std::isfinite(v)) {
    if (!std::isfinite(tape.scalar_val(term_logu)))
      throw NumericalError("lower_objective: non-finite -log u term");
    if (!std::isfinite(tape.scalar_val(ratio)))
      throw NumericalError("lower_objective: non-finite C_k/alpha term");
    throw NumericalError("lower_objective: non-finite objective");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training and reporting
// ---------------------------------------------------------------------------

struct IntervalEstimate {
  double mean = 0.0;
  double sd = 0.0;
  double lcb = 0.0;  // 90% one-sided lower confidence bound
  std::size_t samples = 0;
};

struct LbTrainResult {
  LowerBoundModel model;
  std::vector<std::pair<std::size_t, double>> trace;  // (step, objective)
  bool converged = false;
  std::optional<std::size_t> diverged_step;
  IntervalEstimate intercept;
  std::vector<double> eval_log_ck;  // per-draw log C_k at final evaluation
  std::size_t cap_warnings = 0;     // steps with objective above log k
};

// Final intercept evaluation with full-mode C_k over fresh draws, reported
// as the 90% lower confidence bound of the xi samples. alpha is fixed to a
// separately estimated mean C_k, as in the variability recipe.
inline IntervalEstimate evaluate_intercept(const LowerBoundModel& model,
                                           const src::Source& source,
                                           std::size_t m_eval,
                                           std::uint64_t seed,
                                           std::vector<double>* log_ck_out,
                                           int jobs = 1) {
  if (m_eval < 2)
    throw UsageError("evaluate_intercept: m_eval must be >= 2");
  std::size_t k = model.cfg.k;
  src::Source s = source.with_seed(Rng::derive(seed, 0x6c626576));

  auto draw_ck = [&](std::size_t count, std::vector<double>& log_ck,
                     std::vector<double>& mean_log_u) {
    log_ck.resize(count);
    mean_log_u.resize(count);
    for (std::size_t j = 0; j < count; ++j) {
      src::SampleBatch b = s.sample(k);
      std::vector<double> lu = model.log_u_at(b.data);
      CkEstimate est = compute_ck_core(b.data, lu, model.cfg.lambda,
                                       CkMode::Full, model.cfg.top_t,
                                       model.cfg.hc, jobs);
      log_ck[j] = est.log_value;
      double acc = 0.0;
      for (double v : lu) acc += v;
      mean_log_u[j] = acc / static_cast<double>(k);
    }
  };

  // Separate draws pin the expansion point alpha.
  std::vector<double> alpha_log_ck, alpha_mean_lu;
  draw_ck(m_eval, alpha_log_ck, alpha_mean_lu);
  double log_alpha = logmeanexp(alpha_log_ck);

  std::vector<double> log_ck, mean_lu;
  draw_ck(m_eval, log_ck, mean_lu);
  std::vector<double> xi(m_eval);
  for (std::size_t j = 0; j < m_eval; ++j)
    xi[j] = -mean_lu[j] - std::exp(log_ck[j] - log_alpha) - log_alpha + 1.0;

  MeanStats st = mean_stats(xi);
  if (log_ck_out) *log_ck_out = log_ck;
  return {st.mean, st.sd, lower_conf_bound(st), m_eval};
}

inline LbTrainResult train_lower_bound(const src::Source& source,
                                       const LowerBoundConfig& cfg,
                                       int jobs = 1) {
  cfg.validate();
  LbTrainResult res{make_lower_model(source.dim(), cfg), {}, false, {}, {}, {}, 0};
  LowerBoundModel& model = res.model;
  src::Source stream = source.with_seed(Rng::derive(cfg.seed, 0x64617461));
  diff::AdamConfig adam;
  adam.lr = cfg.lr;
  double logk = std::log(static_cast<double>(cfg.k));
  res.trace.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> batches;
    batches.reserve(cfg.m);
    for (std::size_t j = 0; j < cfg.m; ++j)
      batches.push_back(stream.sample(cfg.k).data);

    diff::Tape tape;
    diff::TapeParams tp = diff::TapeParams::bind(tape, model.params);
    LowerObjective obj;
    try {
      obj = lower_objective(tape, model, tp, batches, jobs);
    } catch (const NumericalError&) {
      res.diverged_step = step;
      break;
    }
    double value = tape.scalar_val(obj.node);
    res.trace.push_back({step, value});
    if (value > logk + 1e-6) ++res.cap_warnings;

    // Gradient ascent: minimize the negated objective.
    diff::Var loss = tape.neg(obj.node);
    tape.backward(loss);
    model.params.adam_step(tp.gradients(tape), adam);
    model.alpha.observe(obj.log_mean_ck);
  }

  if (!res.diverged_step && !res.trace.empty()) {
    std::size_t n = res.trace.size();
    std::size_t w = std::min(cfg.convergence_window, n / 2);
    if (w >= 1) {
      auto window_mean = [&](std::size_t lo, std::size_t hi) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += res.trace[i].second;
        return acc / static_cast<double>(hi - lo);
      };
      double recent = window_mean(n - w, n);
      double previous = window_mean(n - 2 * w, n - w);
      res.converged =
          std::abs(recent - previous) / std::max(1.0, std::abs(recent)) <
          cfg.convergence_rtol;
    }
  }

  if (!res.diverged_step)
    res.intercept = evaluate_intercept(model, source, cfg.m_eval,
                                       Rng::derive(cfg.seed, 0x6576),
                                       &res.eval_log_ck, jobs);
  return res;
}

// ---------------------------------------------------------------------------
// Lower envelope
// ---------------------------------------------------------------------------

struct EnvelopeLine {
  double lambda = 0.0;
  double intercept = 0.0;
};

// R_L(D) = max(0, max_i(-lambda_i D + intercept_i)).
inline double envelope_value(const std::vector<EnvelopeLine>& lines, double D) {
  if (lines.empty()) throw UsageError("envelope: need at least one line");
  if (D < 0.0) throw UsageError("envelope: D must be >= 0");
  double best = 0.0;
  for (const auto& l : lines) {
    if (l.lambda < 0.0) throw UsageError("envelope: lambda must be >= 0");
    best = std::max(best, -l.lambda * D + l.intercept);
  }
  return best;
}

// ---------------------------------------------------------------------------
// C_k estimator diagnostics
// ---------------------------------------------------------------------------

struct CkTableRow {
  std::size_t k = 0;
  double mean_ck = 0.0;
  double se = 0.0;
  std::size_t trials = 0;
};

// Monte Carlo E[C_k] for each k with a caller-supplied log-u function;
// the bias of the estimator should decrease monotonically in k.
inline std::vector<CkTableRow> ck_monotonicity_check(
    const std::function<double(const double*, std::size_t)>& log_u,
    const src::Source& source, const std::vector<std::size_t>& ks,
    std::size_t trials, double lambda, const HillClimbParams& hc = {},
    int jobs = 1) {
  if (ks.empty()) throw UsageError("ck_monotonicity_check: empty k list");
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (ks[i] <= ks[i - 1])
      throw UsageError("ck_monotonicity_check: k list must be increasing");
  std::vector<CkTableRow> table;
  std::uint64_t cursor = 0;
  src::Source s = source;
  for (std::size_t k : ks) {
    std::vector<double> values(trials);
    parallel_for(trials, jobs, [&](std::size_t t) {
      src::SampleBatch b = s.sample_at(cursor + t * k, k);
      std::vector<double> lu(k);
      for (std::size_t i = 0; i < k; ++i)
        lu[i] = log_u(b.data.row_ptr(i), b.data.cols());
      CkEstimate est =
          compute_ck_core(b.data, lu, lambda, CkMode::Full, 0, hc, 1);
      values[t] = std::exp(est.log_value);
    });
    cursor += trials * k;
    MeanStats st = mean_stats(values);
    table.push_back({k, st.mean, st.se, trials});
  }
  return table;
}

}  // namespace rd::lb
