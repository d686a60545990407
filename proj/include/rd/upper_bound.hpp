#pragma once

// Variational upper-bound estimator. Trains an encoder q(z|x), a latent
// prior q(z) (factorized Gaussian or affine-coupling flow) and optionally a
// decoder by SGD on the Lagrangian rate + lambda * distortion, then reports
// an (distortion, rate) point with large-sample confidence intervals from
// per-example rate/distortion samples.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rd/common.hpp"
#include "rd/diffcore.hpp"
#include "rd/oracles.hpp"
#include "rd/sources.hpp"
#include "rd/tensor.hpp"

namespace rd::ub {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kFlowScaleCap = 4.0;  // coupling log-scales live in (-cap, cap)

enum class PriorKind { FactorizedGaussian, CouplingFlow };
enum class DecoderKind { Identity, Mlp };

inline const char* prior_name(PriorKind p) {
  return p == PriorKind::FactorizedGaussian ? "gaussian" : "flow";
}
inline const char* decoder_name(DecoderKind d) {
  return d == DecoderKind::Identity ? "identity" : "mlp";
}

struct UpperBoundConfig {
  double lambda = 1.0;
  std::size_t latent_dim = 1;
  PriorKind prior = PriorKind::FactorizedGaussian;
  DecoderKind decoder = DecoderKind::Identity;
  std::vector<std::size_t> encoder_hidden;  // empty: single affine layer
  std::vector<std::size_t> decoder_hidden;  // empty: single affine layer
  diff::Act encoder_act = diff::Act::Softplus;
  diff::Act decoder_act = diff::Act::Softplus;
  std::size_t flow_layers = 4;
  std::size_t flow_hidden = 32;
  std::size_t batch_size = 256;
  std::size_t steps = 50000;
  double lr = 1e-4;
  std::uint64_t seed = 1;
  std::size_t m_eval = 1000;
  double logvar_min = -20.0;
  double logvar_max = 10.0;
  // Converged when the trailing-window mean loss moves by less than this
  // relative amount against the preceding window.
  double convergence_rtol = 1e-3;
  std::size_t convergence_window = 5000;

  void validate() const {
    if (!(lambda > 0.0)) throw UsageError("upper bound: lambda must be > 0");
    if (latent_dim == 0) throw UsageError("upper bound: latent dim must be >= 1");
    if (batch_size == 0 || steps == 0)
      throw UsageError("upper bound: batch size and steps must be >= 1");
    if (prior == PriorKind::CouplingFlow && latent_dim < 2)
      throw UsageError("upper bound: coupling flow prior needs latent dim >= 2");
  }
};

struct UpperBoundModel {
  UpperBoundConfig cfg;
  std::size_t input_dim = 0;
  diff::MLPSpec encoder;                 // x -> [mean, raw_sd] (2m outputs)
  diff::MLPSpec decoder;                 // z -> xhat (Mlp only)
  std::vector<diff::MLPSpec> flow_nets;  // one conditioner per coupling layer
  diff::ParamStore params;
};

namespace detail {

inline std::vector<std::size_t> widths(std::size_t in,
                                       const std::vector<std::size_t>& hidden,
                                       std::size_t out) {
  std::vector<std::size_t> w;
  w.push_back(in);
  for (std::size_t h : hidden) w.push_back(h);
  w.push_back(out);
  return w;
}

// Coupling layer split: even layers condition on the first half and
// transform the second, odd layers swap roles.
inline void coupling_split(std::size_t m, std::size_t layer, std::size_t& a0,
                           std::size_t& a1, std::size_t& b0, std::size_t& b1) {
  std::size_t half = (m + 1) / 2;
  if (layer % 2 == 0) {
    a0 = 0, a1 = half, b0 = half, b1 = m;
  } else {
    a0 = half, a1 = m, b0 = 0, b1 = half;
  }
}

}  // namespace detail

inline UpperBoundModel make_upper_model(std::size_t input_dim,
                                        const UpperBoundConfig& cfg) {
  cfg.validate();
  if (cfg.decoder == DecoderKind::Identity && cfg.latent_dim != input_dim)
    throw UsageError("upper bound: identity decoder requires latent dim == n");
  UpperBoundModel model;
  model.cfg = cfg;
  model.input_dim = input_dim;
  Rng rng(Rng::derive(cfg.seed, 0x696e6974));

  model.encoder.widths =
      detail::widths(input_dim, cfg.encoder_hidden, 2 * cfg.latent_dim);
  model.encoder.hidden = cfg.encoder_act;
  model.encoder.output = diff::OutAct::Linear;
  diff::init_mlp_params(model.params, "enc", model.encoder, rng);

  if (cfg.decoder == DecoderKind::Mlp) {
    model.decoder.widths =
        detail::widths(cfg.latent_dim, cfg.decoder_hidden, input_dim);
    model.decoder.hidden = cfg.decoder_act;
    model.decoder.output = diff::OutAct::Linear;
    diff::init_mlp_params(model.params, "dec", model.decoder, rng);
  }

  if (cfg.prior == PriorKind::FactorizedGaussian) {
    model.params.insert("prior.mean", Tensor::zeros({cfg.latent_dim}));
    model.params.insert("prior.logvar", Tensor::zeros({cfg.latent_dim}));
  } else {
    for (std::size_t l = 0; l < cfg.flow_layers; ++l) {
      std::size_t a0, a1, b0, b1;
      detail::coupling_split(cfg.latent_dim, l, a0, a1, b0, b1);
      diff::MLPSpec net;
      net.widths = detail::widths(a1 - a0, {cfg.flow_hidden, cfg.flow_hidden},
                                  2 * (b1 - b0));
      net.hidden = diff::Act::Softplus;
      net.output = diff::OutAct::Linear;
      model.flow_nets.push_back(net);
      diff::init_mlp_params(model.params, "flow" + std::to_string(l), net, rng);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Tape-side pieces
// ---------------------------------------------------------------------------

namespace detail {

struct Posterior {
  diff::Var mean;    // [B,m]
  diff::Var logvar;  // [B,m], clamped
  diff::Var z;       // [B,m], reparameterized sample
};

// Encoder head: first m outputs are the mean, softplus of the last m gives
// the standard deviation; log-variance is clamped to keep exp() tame.
inline Posterior encode(diff::Tape& tape, const UpperBoundModel& model,
                        const diff::TapeParams& tp, diff::Var x,
                        const Tensor& eps) {
  std::size_t m = model.cfg.latent_dim;
  diff::Var head = diff::mlp_forward(tape, model.encoder, tp, "enc", x);
  Posterior p;
  p.mean = tape.slice_cols(head, 0, m);
  diff::Var sd = tape.softplus(tape.slice_cols(head, m, 2 * m));
  p.logvar = tape.clamp(tape.mul_scalar(tape.log_(tape.add_scalar(sd, 1e-12)), 2.0),
                        model.cfg.logvar_min, model.cfg.logvar_max);
  diff::Var noise = tape.constant(eps);
  p.z = tape.add(p.mean,
                 tape.mul(tape.exp_(tape.mul_scalar(p.logvar, 0.5)), noise));
  return p;
}

// Per-example KL(q(z|x) || prior) in closed form for factorized Gaussians:
// 0.5 sum_j [lv0 - lv + exp(lv - lv0) + (mu - mu0)^2 exp(-lv0) - 1].
inline diff::Var gaussian_kl_rows(diff::Tape& tape, const Posterior& post,
                                  diff::Var prior_mean, diff::Var prior_logvar) {
  diff::Var neg_lv0 = tape.neg(prior_logvar);
  diff::Var dmu = tape.add_rowvec(post.mean, tape.neg(prior_mean));
  diff::Var term_ratio = tape.exp_(tape.add_rowvec(post.logvar, neg_lv0));
  diff::Var term_mu = tape.mul_rowvec(tape.square(dmu), tape.exp_(neg_lv0));
  diff::Var lv0_minus_lv = tape.add_rowvec(tape.neg(post.logvar), prior_logvar);
  diff::Var inner = tape.add(tape.add(lv0_minus_lv, term_ratio), term_mu);
  return tape.mul_scalar(tape.row_sum(tape.add_scalar(inner, -1.0)), 0.5);
}

// Per-example log q(z|x) for the reparameterized z.
inline diff::Var gaussian_logpdf_rows(diff::Tape& tape, diff::Var z,
                                      const Posterior& post) {
  std::size_t m = tape.val(z).cols();
  diff::Var centered = tape.sub(z, post.mean);
  diff::Var scaled =
      tape.mul(centered, tape.exp_(tape.mul_scalar(post.logvar, -0.5)));
  diff::Var quad = tape.row_sum(tape.square(scaled));
  diff::Var lvsum = tape.row_sum(post.logvar);
  diff::Var rows = tape.mul_scalar(
      tape.add_scalar(tape.add(quad, lvsum),
                      static_cast<double>(m) * kLog2Pi),
      -0.5);
  return rows;  // [B]
}

// Per-example log density of the coupling-flow prior. Normalizing
// direction: each layer maps the transformed half b to (b - t(a)) exp(-s(a))
// and contributes -sum(s) to the log-determinant.
inline diff::Var flow_logdensity_rows(diff::Tape& tape,
                                      const UpperBoundModel& model,
                                      const diff::TapeParams& tp, diff::Var z) {
  std::size_t m = model.cfg.latent_dim;
  std::size_t batch = tape.val(z).rows();
  diff::Var w = z;
  diff::Var logdet = tape.constant(Tensor::zeros({batch}));
  for (std::size_t l = 0; l < model.cfg.flow_layers; ++l) {
    std::size_t a0, a1, b0, b1;
    detail::coupling_split(m, l, a0, a1, b0, b1);
    diff::Var a = tape.slice_cols(w, a0, a1);
    diff::Var b = tape.slice_cols(w, b0, b1);
    diff::Var head = diff::mlp_forward(tape, model.flow_nets[l], tp,
                                       "flow" + std::to_string(l), a);
    std::size_t tb = b1 - b0;
    diff::Var shift = tape.slice_cols(head, 0, tb);
    diff::Var raw = tape.slice_cols(head, tb, 2 * tb);
    diff::Var s = tape.mul_scalar(
        tape.tanh_(tape.mul_scalar(raw, 1.0 / kFlowScaleCap)), kFlowScaleCap);
    diff::Var bprime = tape.mul(tape.sub(b, shift), tape.exp_(tape.neg(s)));
    logdet = tape.add(logdet, tape.neg(tape.row_sum(s)));
    w = (a0 == 0) ? tape.concat_cols(a, bprime) : tape.concat_cols(bprime, a);
  }
  diff::Var base = tape.mul_scalar(
      tape.add_scalar(tape.row_sum(tape.square(w)),
                      static_cast<double>(m) * kLog2Pi),
      -0.5);
  return tape.add(base, logdet);
}

inline diff::Var decode(diff::Tape& tape, const UpperBoundModel& model,
                        const diff::TapeParams& tp, diff::Var z) {
  if (model.cfg.decoder == DecoderKind::Identity) return z;
  return diff::mlp_forward(tape, model.decoder, tp, "dec", z);
}

}  // namespace detail

struct NelboTerms {
  diff::Var rate;        // scalar node, batch-mean rate term
  diff::Var distortion;  // scalar node, batch-mean distortion term
  diff::Var loss;        // rate + lambda * distortion
};

// Builds the training objective on the tape. `eps` is the [B,m] standard
// normal draw for the reparameterized latent sample; passing it explicitly
// keeps the objective a deterministic function of (params, batch, eps).
inline NelboTerms nelbo(diff::Tape& tape, const UpperBoundModel& model,
                        const diff::TapeParams& tp, const Tensor& batch,
                        const Tensor& eps) {
  if (batch.rank() != 2 || batch.cols() != model.input_dim)
    throw ShapeError("nelbo: batch shape " + batch.shape_str() +
                     " does not match encoder input width " +
                     std::to_string(model.input_dim));
  if (eps.rank() != 2 || eps.rows() != batch.rows() ||
      eps.cols() != model.cfg.latent_dim)
    throw ShapeError("nelbo: eps shape mismatch");

  diff::Var x = tape.constant(batch);
  detail::Posterior post = detail::encode(tape, model, tp, x, eps);

  diff::Var rate_rows;
  if (model.cfg.prior == PriorKind::FactorizedGaussian) {
    rate_rows = detail::gaussian_kl_rows(tape, post, tp.at("prior.mean"),
                                         tp.at("prior.logvar"));
  } else {
    diff::Var lq_post = detail::gaussian_logpdf_rows(tape, post.z, post);
    diff::Var lq_prior = detail::flow_logdensity_rows(tape, model, tp, post.z);
    rate_rows = tape.sub(lq_post, lq_prior);
  }
  diff::Var rate = tape.mean_all(rate_rows);

  diff::Var xhat = detail::decode(tape, model, tp, post.z);
  diff::Var dist = tape.mean_all(tape.row_sum(tape.square(tape.sub(x, xhat))));
  diff::Var loss = tape.add(rate, tape.mul_scalar(dist, model.cfg.lambda));

  double rv = tape.scalar_val(rate);
  double dv = tape.scalar_val(dist);
  if (!std::isfinite(rv))
    throw NumericalError("nelbo: non-finite rate term (" + std::to_string(rv) +
                         ")");
  if (!std::isfinite(dv))
    throw NumericalError("nelbo: non-finite distortion term (" +
                         std::to_string(dv) + ")");
  return {rate, dist, loss};
}

// ---------------------------------------------------------------------------
// Frozen-parameter evaluation (no tape); used for reporting.
// ---------------------------------------------------------------------------

struct RateDistortionSamples {
  std::vector<double> rate;        // log q(z|x) - log q(z) per example
  std::vector<double> distortion;  // rho(x, omega(z)) per example
};

namespace detail {

struct EvalPosterior {
  Tensor mean, logvar, z;
};

inline EvalPosterior encode_eval(const UpperBoundModel& model,
                                 const Tensor& batch, const Tensor& eps) {
  std::size_t m = model.cfg.latent_dim;
  Tensor head = diff::mlp_eval(model.encoder, model.params, "enc", batch);
  EvalPosterior p;
  p.mean = Tensor::zeros({batch.rows(), m});
  p.logvar = Tensor::zeros({batch.rows(), m});
  p.z = Tensor::zeros({batch.rows(), m});
  for (std::size_t i = 0; i < batch.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) {
      p.mean.at(i, j) = head.at(i, j);
      double sd = diff::detail::softplus_val(head.at(i, m + j));
      double lv = 2.0 * std::log(sd + 1e-12);
      lv = std::min(model.cfg.logvar_max, std::max(model.cfg.logvar_min, lv));
      p.logvar.at(i, j) = lv;
      p.z.at(i, j) = p.mean.at(i, j) + std::exp(0.5 * lv) * eps.at(i, j);
    }
  return p;
}

inline std::vector<double> flow_logdensity_eval(const UpperBoundModel& model,
                                                const Tensor& z) {
  std::size_t m = model.cfg.latent_dim;
  Tensor w = z;
  std::vector<double> logdet(z.rows(), 0.0);
  for (std::size_t l = 0; l < model.cfg.flow_layers; ++l) {
    std::size_t a0, a1, b0, b1;
    coupling_split(m, l, a0, a1, b0, b1);
    Tensor a = Tensor::zeros({w.rows(), a1 - a0});
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = a0; j < a1; ++j) a.at(i, j - a0) = w.at(i, j);
    Tensor head = diff::mlp_eval(model.flow_nets[l], model.params,
                                 "flow" + std::to_string(l), a);
    std::size_t tb = b1 - b0;
    Tensor wn = w;
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < tb; ++j) {
        double shift = head.at(i, j);
        double s = kFlowScaleCap * std::tanh(head.at(i, tb + j) / kFlowScaleCap);
        wn.at(i, b0 + j) = (w.at(i, b0 + j) - shift) * std::exp(-s);
        logdet[i] -= s;
      }
    w = std::move(wn);
  }
  std::vector<double> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double quad = 0.0;
    for (std::size_t j = 0; j < m; ++j) quad += w.at(i, j) * w.at(i, j);
    out[i] = -0.5 * (quad + static_cast<double>(m) * kLog2Pi) + logdet[i];
  }
  return out;
}

inline Tensor decode_eval(const UpperBoundModel& model, const Tensor& z) {
  if (model.cfg.decoder == DecoderKind::Identity) return z;
  return diff::mlp_eval(model.decoder, model.params, "dec", z);
}

}  // namespace detail

// Per-example rate and distortion random variables at frozen parameters,
// with the rate always in its sampled form log q(z|x) - log q(z).
inline RateDistortionSamples draw_rd_samples(const UpperBoundModel& model,
                                             const Tensor& batch, Rng& rng) {
  std::size_t m = model.cfg.latent_dim;
  Tensor eps = Tensor::zeros({batch.rows(), m});
  for (double& e : eps.data) e = rng.normal();
  detail::EvalPosterior post = detail::encode_eval(model, batch, eps);

  std::vector<double> lq_prior;
  if (model.cfg.prior == PriorKind::CouplingFlow) {
    lq_prior = detail::flow_logdensity_eval(model, post.z);
  } else {
    const Tensor& mu0 = model.params.at("prior.mean");
    const Tensor& lv0 = model.params.at("prior.logvar");
    lq_prior.resize(batch.rows());
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        double d = post.z.at(i, j) - mu0.data[j];
        acc += lv0.data[j] + d * d * std::exp(-lv0.data[j]) + kLog2Pi;
      }
      lq_prior[i] = -0.5 * acc;
    }
  }

  RateDistortionSamples out;
  out.rate.resize(batch.rows());
  out.distortion.resize(batch.rows());
  Tensor xhat = detail::decode_eval(model, post.z);
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    double lq_post = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double d = post.z.at(i, j) - post.mean.at(i, j);
      lq_post += post.logvar.at(i, j) +
                 d * d * std::exp(-post.logvar.at(i, j)) + kLog2Pi;
    }
    lq_post *= -0.5;
    out.rate[i] = lq_post - lq_prior[i];
    out.distortion[i] = src::distortion(src::Metric::SquaredError,
                                        batch.row_ptr(i), xhat.row_ptr(i),
                                        model.input_dim);
  }
  return out;
}

// Draws m_eval (x, z) pairs and reports sample means with two-sided 95%
// normal confidence intervals for both coordinates.
inline oracle::RDPoint evaluate_rd_point(const UpperBoundModel& model,
                                         const src::Source& source,
                                         std::size_t m_eval,
                                         std::uint64_t seed) {
  if (m_eval < 30)
    throw UsageError("evaluate_rd_point: m_eval must be >= 30 for the "
                     "large-sample intervals");
  src::Source s = source.with_seed(Rng::derive(seed, 0x6576616c));
  src::SampleBatch batch = s.sample(m_eval);
  Rng rng(Rng::derive(seed, 0x657073));
  RateDistortionSamples rds = draw_rd_samples(model, batch.data, rng);

  MeanStats r = mean_stats(rds.rate);
  MeanStats d = mean_stats(rds.distortion);
  oracle::RDPoint p;
  p.rate_nats = r.mean;
  p.distortion = d.mean;
  p.lambda = model.cfg.lambda;
  p.rate_ci = normal_ci(r);
  p.distortion_ci = normal_ci(d);
  p.rate_sd = r.sd;
  p.distortion_sd = d.sd;
  return p;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TraceRow {
  std::size_t step;
  double rate, distortion, loss;
};

struct UbTrainResult {
  UpperBoundModel model;
  std::vector<TraceRow> trace;
  bool converged = false;
  std::optional<std::size_t> diverged_step;
};

// Runs `steps` Adam updates on fresh batches. Divergence (non-finite loss)
// stops training and is reported through `diverged_step`; the loss trace up
// to that point is still returned.
inline UbTrainResult train_upper_bound(const src::Source& source,
                                       const UpperBoundConfig& cfg) {
  cfg.validate();
  UbTrainResult res{make_upper_model(source.dim(), cfg), {}, false, {}};
  UpperBoundModel& model = res.model;
  src::Source stream = source.with_seed(Rng::derive(cfg.seed, 0x64617461));
  Rng noise(Rng::derive(cfg.seed, 0x6e6f697365));
  diff::AdamConfig adam;
  adam.lr = cfg.lr;
  res.trace.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    src::SampleBatch batch = stream.sample(cfg.batch_size);
    Tensor eps = Tensor::zeros({cfg.batch_size, cfg.latent_dim});
    for (double& e : eps.data) e = noise.normal();

    diff::Tape tape;
    diff::TapeParams tp = diff::TapeParams::bind(tape, model.params);
    NelboTerms terms;
    try {
      terms = nelbo(tape, model, tp, batch.data, eps);
    } catch (const NumericalError&) {
      res.diverged_step = step;
      break;
    }
    double loss = tape.scalar_val(terms.loss);
    res.trace.push_back({step, tape.scalar_val(terms.rate),
                         tape.scalar_val(terms.distortion), loss});
    if (!std::isfinite(loss)) {
      res.diverged_step = step;
      break;
    }
    tape.backward(terms.loss);
    model.params.adam_step(tp.gradients(tape), adam);
  }

  if (!res.diverged_step) {
    std::size_t n = res.trace.size();
    std::size_t w = std::min(cfg.convergence_window, n / 2);
    if (w >= 1) {
      auto window_mean = [&](std::size_t lo, std::size_t hi) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += res.trace[i].loss;
        return s / static_cast<double>(hi - lo);
      };
      double recent = window_mean(n - w, n);
      double previous = window_mean(n - 2 * w, n - w);
      res.converged = std::abs(recent - previous) /
                          std::max(1.0, std::abs(recent)) <
                      cfg.convergence_rtol;
    }
  }
  return res;
}

struct SweepEntry {
  double lambda = 0.0;
  std::optional<oracle::RDPoint> point;
  bool converged = false;
  std::string error;
};

// Independent trainings per lambda; per-lambda failures are recorded and the
// sweep continues. Entries come back sorted by achieved distortion.
inline std::vector<SweepEntry> sweep_upper(const src::Source& source,
                                           const std::vector<double>& lambdas,
                                           const UpperBoundConfig& base,
                                           int jobs = 1) {
  if (lambdas.empty()) throw UsageError("sweep_upper: empty lambda list");
  for (double l : lambdas)
    if (!(l > 0.0)) throw UsageError("sweep_upper: lambdas must be > 0");
  std::vector<SweepEntry> entries(lambdas.size());
  parallel_for(lambdas.size(), jobs, [&](std::size_t i) {
    UpperBoundConfig cfg = base;
    cfg.lambda = lambdas[i];
    cfg.seed = Rng::derive(base.seed, 1000 + i);
    SweepEntry& e = entries[i];
    e.lambda = lambdas[i];
    try {
      UbTrainResult r = train_upper_bound(source, cfg);
      if (r.diverged_step)
        throw NumericalError("diverged at step " +
                             std::to_string(*r.diverged_step));
      e.converged = r.converged;
      e.point = evaluate_rd_point(r.model, source, cfg.m_eval,
                                  Rng::derive(cfg.seed, 0x7074));
    } catch (const std::exception& ex) {
      e.error = ex.what();
    }
  });
  std::sort(entries.begin(), entries.end(),
            [](const SweepEntry& a, const SweepEntry& b) {
              double da = a.point ? a.point->distortion : 1e300;
              double db = b.point ? b.point->distortion : 1e300;
              return da < db;
            });
  return entries;
}

}  // namespace rd::ub
