#pragma once

// Command-line surface: source generation, oracle curves, both trainers,
// sandwich assembly and estimator diagnostics. Every command writes a
// manifest naming the exact config and seed; single-threaded runs are
// bit-reproducible from the manifest.
//
// Exit codes: 0 success, 2 usage error, 3 numerical failure,
// 4 non-convergence.

#include <CLI11.hpp>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rd/common.hpp"
#include "rd/lower_bound.hpp"
#include "rd/manifest.hpp"
#include "rd/oracles.hpp"
#include "rd/specparse.hpp"
#include "rd/sources.hpp"
#include "rd/upper_bound.hpp"

namespace rd::cli {

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw UsageError("bad number '" + cell + "' in list '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("empty list '" + s + "'");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (double d : parse_double_list(s)) {
    if (d < 0 || d != std::floor(d))
      throw UsageError("expected nonnegative integers in '" + s + "'");
    out.push_back(static_cast<std::size_t>(d));
  }
  return out;
}

enum class Family { Gaussian, Banana, Discrete, Samples };

inline Family family_of(const src::Source& s) {
  switch (s.kind()) {
    case src::SourceKind::DiagonalGaussian:
    case src::SourceKind::StandardGaussian:
      return Family::Gaussian;
    case src::SourceKind::Banana2D:
    case src::SourceKind::LinearLift:
      return Family::Banana;
    case src::SourceKind::DiscreteTabular:
      return Family::Discrete;
    case src::SourceKind::FileSamples:
      return Family::Samples;
  }
  return Family::Samples;
}

inline std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("RD_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError("RD_SEED is not an integer: '" + std::string(env) + "'");
    }
  }
  return flag_seed;
}

// Shared per-command options.
struct CommonOpts {
  std::string out_dir = "rd_out";
  std::uint64_t seed = 1;
  int jobs = 1;
  bool per_dim = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--out", out_dir, "Output directory");
    cmd->add_option("--seed", seed,
                    "Base seed (env RD_SEED overrides when set)");
    cmd->add_option("--jobs", jobs,
                    "Worker threads; results are identical for any value");
    cmd->add_flag("--per-dim", per_dim,
                  "Scale printed rate/distortion summaries by 1/n");
  }
};

struct UbFlags {
  std::size_t latent_dim = 0;  // 0: source dimension
  std::string prior = "auto";
  std::string decoder = "auto";
  std::string encoder_hidden, decoder_hidden;
  std::size_t flow_layers = 4, flow_hidden = 32;
  std::size_t batch = 256;
  std::size_t steps = 0;  // 0: family default
  double lr = 1e-4;
  std::size_t m_eval = 1000;

  void attach(CLI::App* cmd, const std::string& prefix = "") {
    auto p = [&](const std::string& name) { return "--" + prefix + name; };
    cmd->add_option(p("latent-dim"), latent_dim,
                    "Latent dimension (default: source dimension)");
    cmd->add_option(p("prior"), prior, "auto|gaussian|flow");
    cmd->add_option(p("decoder"), decoder, "auto|identity|mlp");
    cmd->add_option(p("encoder-hidden"), encoder_hidden,
                    "Comma list of hidden widths (default per source family)");
    cmd->add_option(p("decoder-hidden"), decoder_hidden,
                    "Comma list of hidden widths (default per source family)");
    cmd->add_option(p("flow-layers"), flow_layers, "Coupling layers");
    cmd->add_option(p("flow-hidden"), flow_hidden, "Coupling net hidden width");
    cmd->add_option(p("batch"), batch, "Batch size");
    cmd->add_option(p("steps"), steps, "Adam steps (default per family)");
    cmd->add_option(p("lr"), lr, "Adam learning rate");
    cmd->add_option(p("m-eval"), m_eval, "Evaluation sample count");
  }

  ub::UpperBoundConfig build(const src::Source& source, double lambda,
                             std::uint64_t seed) const {
    Family fam = family_of(source);
    std::size_t n = source.dim();
    ub::UpperBoundConfig cfg;
    cfg.lambda = lambda;
    cfg.latent_dim = latent_dim == 0 ? n : latent_dim;
    cfg.seed = seed;
    cfg.batch_size = batch;
    cfg.lr = lr;
    cfg.m_eval = m_eval;
    cfg.flow_layers = flow_layers;
    cfg.flow_hidden = flow_hidden;
    cfg.steps = steps != 0 ? steps : (fam == Family::Gaussian ? 30000 : 50000);

    if (prior == "gaussian")
      cfg.prior = ub::PriorKind::FactorizedGaussian;
    else if (prior == "flow")
      cfg.prior = ub::PriorKind::CouplingFlow;
    else if (prior == "auto")
      cfg.prior = fam == Family::Banana ? ub::PriorKind::CouplingFlow
                                        : ub::PriorKind::FactorizedGaussian;
    else
      throw UsageError("--prior must be auto|gaussian|flow");

    if (decoder == "identity")
      cfg.decoder = ub::DecoderKind::Identity;
    else if (decoder == "mlp")
      cfg.decoder = ub::DecoderKind::Mlp;
    else if (decoder == "auto")
      cfg.decoder = (cfg.latent_dim == n && fam != Family::Banana)
                        ? ub::DecoderKind::Identity
                        : ub::DecoderKind::Mlp;
    else
      throw UsageError("--decoder must be auto|identity|mlp");

    std::size_t fam_hidden = std::min<std::size_t>(100 * n, 2000);
    if (!encoder_hidden.empty())
      cfg.encoder_hidden = parse_size_list(encoder_hidden);
    else if (fam == Family::Banana)
      cfg.encoder_hidden = {fam_hidden, fam_hidden};
    if (!decoder_hidden.empty())
      cfg.decoder_hidden = parse_size_list(decoder_hidden);
    else if (cfg.decoder == ub::DecoderKind::Mlp) {
      if (fam == Family::Banana)
        cfg.decoder_hidden = {fam_hidden, fam_hidden};
      else
        cfg.decoder_hidden = {n};  // one hidden layer of n units
    }
    if (fam != Family::Banana && cfg.decoder == ub::DecoderKind::Mlp)
      cfg.decoder_act = diff::Act::LeakyRelu;
    return cfg;
  }

  manifest::json describe(const ub::UpperBoundConfig& cfg) const {
    return manifest::json{
        {"lambda", cfg.lambda},
        {"latent_dim", cfg.latent_dim},
        {"prior", ub::prior_name(cfg.prior)},
        {"decoder", ub::decoder_name(cfg.decoder)},
        {"encoder_hidden", cfg.encoder_hidden},
        {"decoder_hidden", cfg.decoder_hidden},
        {"flow_layers", cfg.flow_layers},
        {"flow_hidden", cfg.flow_hidden},
        {"batch_size", cfg.batch_size},
        {"steps", cfg.steps},
        {"lr", cfg.lr},
        {"m_eval", cfg.m_eval},
        {"seed", cfg.seed}};
  }
};

struct LbFlags {
  std::size_t k = 0;  // 0: family default
  std::size_t m = 2;
  std::size_t top_t = 10;
  std::string hidden;
  std::size_t steps = 0;
  double lr = 1e-4;
  std::size_t m_eval = 30;

  void attach(CLI::App* cmd, const std::string& prefix = "") {
    auto p = [&](const std::string& name) { return "--" + prefix + name; };
    cmd->add_option(p("k"), k, "Samples per C_k draw (default per family)");
    cmd->add_option(p("m"), m, "C_k draws per gradient step");
    cmd->add_option(p("top-t"), top_t, "Hill-climb starts during training");
    cmd->add_option(p("hidden"), hidden,
                    "Comma list of log-u hidden widths (default per family)");
    cmd->add_option(p("steps"), steps, "Ascent steps (default per family)");
    cmd->add_option(p("lr"), lr, "Adam learning rate");
    cmd->add_option(p("m-eval"), m_eval, "Full-mode draws for the intercept");
  }

  lb::LowerBoundConfig build(const src::Source& source, double lambda,
                             std::uint64_t seed) const {
    Family fam = family_of(source);
    std::size_t n = source.dim();
    lb::LowerBoundConfig cfg;
    cfg.lambda = lambda;
    cfg.seed = seed;
    cfg.m = m;
    cfg.top_t = top_t;
    cfg.lr = lr;
    cfg.m_eval = m_eval;
    cfg.k = k != 0 ? k : (fam == Family::Banana ? 2048 : 1024);
    cfg.steps = steps != 0 ? steps : 3000;
    if (!hidden.empty()) {
      cfg.hidden = parse_size_list(hidden);
    } else if (fam == Family::Banana) {
      std::size_t h = std::min<std::size_t>(100 * n, 1000);
      cfg.hidden = {h, h, h};
    } else {
      cfg.hidden = {20 * n, 20 * n};
    }
    return cfg;
  }

  manifest::json describe(const lb::LowerBoundConfig& cfg) const {
    return manifest::json{{"lambda", cfg.lambda}, {"k", cfg.k},
                          {"m", cfg.m},           {"top_t", cfg.top_t},
                          {"hidden", cfg.hidden}, {"steps", cfg.steps},
                          {"lr", cfg.lr},         {"m_eval", cfg.m_eval},
                          {"seed", cfg.seed}};
  }
};

inline void print_point(const std::string& label, const oracle::RDPoint& p,
                        std::size_t n, bool per_dim) {
  double scale = per_dim ? 1.0 / static_cast<double>(n) : 1.0;
  std::cout << label << ": D=" << p.distortion * scale
            << " R=" << p.rate_nats * scale << " nats ("
            << p.rate_bits() * scale << " bits)"
            << (per_dim ? " [per dimension]" : "") << "\n";
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

struct OracleArgs {
  CommonOpts common;
  std::string source_spec;
  std::string lambdas;
  std::string ds;
  double target_d = -1.0;
  std::string metric;  // empty: hamming for tabular sources, else squared
  double grid_lo = -8.0, grid_hi = 8.0;
  std::size_t grid_bins = 0;
  std::size_t grid_samples = 1000000;
  double tol = 1e-9;
  std::size_t max_iter = 20000;
};

inline int cmd_oracle(const OracleArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  manifest::ensure_dir(a.common.out_dir);
  Family fam = family_of(source);
  bool continuous_low_dim =
      (fam == Family::Gaussian || fam == Family::Banana) && source.dim() <= 2;

  std::vector<oracle::RDPoint> points;
  std::string method;

  if (fam == Family::Gaussian && a.grid_bins == 0) {
    method = "reverse-waterfill";
    const auto& vars = source.variances();
    if (!a.ds.empty()) {
      for (double d : parse_double_list(a.ds)) {
        oracle::RDPoint p;
        p.distortion = d;
        p.rate_nats = oracle::reverse_waterfill(vars, d);
        points.push_back(p);
      }
    } else if (!a.lambdas.empty()) {
      for (double l : parse_double_list(a.lambdas))
        points.push_back(oracle::gaussian_point_at_slope(vars, l));
    } else {
      throw UsageError("oracle: Gaussian sources need --D or --lambdas");
    }
  } else if (fam == Family::Discrete ||
             (continuous_low_dim && a.grid_bins > 0)) {
    src::Source tab = source;
    src::Metric metric = src::Metric::SquaredError;
    if (fam == Family::Discrete) {
      method = "blahut-arimoto";
      metric = src::Metric::Hamming;
    } else {
      method = "discretize+blahut-arimoto";
      oracle::GridSpec grid;
      grid.lo.assign(source.dim(), a.grid_lo);
      grid.hi.assign(source.dim(), a.grid_hi);
      grid.bins.assign(source.dim(), a.grid_bins);
      grid.samples = a.grid_samples;
      tab = oracle::discretize(source, grid, seed);
    }
    if (a.metric == "hamming")
      metric = src::Metric::Hamming;
    else if (a.metric == "squared-error")
      metric = src::Metric::SquaredError;
    else if (!a.metric.empty())
      throw UsageError("oracle: --metric must be hamming or squared-error");
    const auto& support = tab.support();
    const auto& pmf = tab.pmf();
    // Reproduction alphabet defaults to the source support.
    std::vector<std::vector<double>> repro = support;
    if (a.target_d >= 0.0) {
      points.push_back(oracle::ba_solve_at_distortion(pmf, support, repro,
                                                      metric, a.target_d,
                                                      a.tol, a.max_iter)
                           .point);
    } else if (!a.lambdas.empty()) {
      for (double l : parse_double_list(a.lambdas))
        points.push_back(
            oracle::ba_solve(pmf, support, repro, metric, l, a.tol, a.max_iter)
                .point);
    } else {
      throw UsageError("oracle: discrete sources need --lambdas or --target-D");
    }
  } else {
    throw UsageError(
        "oracle: no solver for this source. Valid pairings: diagonal "
        "Gaussians -> reverse water-filling (--D/--lambdas); "
        "bernoulli/tabular -> Blahut-Arimoto (--lambdas/--target-D); "
        "continuous sources of dimension <= 2 -> discretize+BA (set "
        "--grid-bins)");
  }

  std::string curve_path = manifest::join_path(a.common.out_dir, "curve.csv");
  manifest::write_curve_csv(curve_path, points);
  manifest::json man{
      {"format", manifest::kManifestFormat},
      {"command", "oracle"},
      {"source", a.source_spec},
      {"seed", seed},
      {"method", method},
      {"config",
       {{"lambdas", a.lambdas},
        {"Ds", a.ds},
        {"target_D", a.target_d},
        {"grid_lo", a.grid_lo},
        {"grid_hi", a.grid_hi},
        {"grid_bins", a.grid_bins},
        {"grid_samples", a.grid_samples},
        {"tol", a.tol},
        {"max_iter", a.max_iter}}},
      {"curve_csv", curve_path}};
  manifest::json pts = manifest::json::array();
  for (const auto& p : points) pts.push_back(manifest::rdpoint_json(p));
  man["points"] = pts;
  manifest::write_json(manifest::join_path(a.common.out_dir, "manifest.json"),
                       man);
  for (const auto& p : points)
    print_point("oracle", p, source.dim(), a.common.per_dim);
  return 0;
}

// ---------------------------------------------------------------------------
// gen-source
// ---------------------------------------------------------------------------

struct GenArgs {
  CommonOpts common;
  std::string source_spec;
  std::size_t count = 1000;
  std::string format = "csv";
  std::string output;
};

inline int cmd_gen_source(const GenArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  manifest::ensure_dir(a.common.out_dir);
  src::SampleBatch batch = source.sample(a.count);
  std::string name = a.output;
  if (name.empty()) name = a.format == "rds" ? "samples.rds" : "samples.csv";
  std::string path = manifest::join_path(a.common.out_dir, name);
  if (a.format == "csv")
    src::write_csv(path, batch.data);
  else if (a.format == "rds")
    src::write_rds(path, batch.data);
  else
    throw UsageError("gen-source: --format must be csv or rds");
  manifest::write_json(
      manifest::join_path(a.common.out_dir, "manifest.json"),
      manifest::json{{"format", manifest::kManifestFormat},
                     {"command", "gen-source"},
                     {"source", a.source_spec},
                     {"seed", seed},
                     {"config", {{"count", a.count}, {"format", a.format}}},
                     {"samples", path},
                     {"first_index", batch.first_index}});
  std::cout << "wrote " << a.count << " samples to " << path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-ub
// ---------------------------------------------------------------------------

struct TrainUbArgs {
  CommonOpts common;
  std::string source_spec;
  double lambda = 1.0;
  UbFlags flags;
};

inline int cmd_train_ub(const TrainUbArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  ub::UpperBoundConfig cfg = a.flags.build(source, a.lambda, seed);
  manifest::ensure_dir(a.common.out_dir);

  ub::UbTrainResult res = ub::train_upper_bound(source, cfg);
  std::string trace_path = manifest::join_path(a.common.out_dir, "trace.csv");
  manifest::write_ub_trace_csv(trace_path, res.trace);

  manifest::json man{{"format", manifest::kManifestFormat},
                     {"command", "train-ub"},
                     {"source", a.source_spec},
                     {"seed", seed},
                     {"config", a.flags.describe(cfg)},
                     {"loss_trace", trace_path},
                     {"converged", res.converged}};

  if (res.diverged_step) {
    man["diverged_step"] = *res.diverged_step;
    manifest::write_json(
        manifest::join_path(a.common.out_dir, "manifest.json"), man);
    std::cerr << "train-ub: loss became non-finite at step "
              << *res.diverged_step << "\n";
    return 3;
  }

  std::string ckpt_path = manifest::join_path(a.common.out_dir, "model.json");
  diff::save_params(res.model.params, ckpt_path);
  oracle::RDPoint point = ub::evaluate_rd_point(res.model, source, cfg.m_eval,
                                                Rng::derive(seed, 0x7074));
  man["checkpoint"] = ckpt_path;
  man["point"] = manifest::rdpoint_json(point);
  manifest::write_json(manifest::join_path(a.common.out_dir, "manifest.json"),
                       man);
  print_point("upper bound", point, source.dim(), a.common.per_dim);
  if (!res.converged) {
    std::cerr << "train-ub: loss not converged within " << cfg.steps
              << " steps\n";
    return 4;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train-lb
// ---------------------------------------------------------------------------

struct TrainLbArgs {
  CommonOpts common;
  std::string source_spec;
  double lambda = 1.0;
  LbFlags flags;
};

inline int cmd_train_lb(const TrainLbArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  lb::LowerBoundConfig cfg = a.flags.build(source, a.lambda, seed);
  manifest::ensure_dir(a.common.out_dir);

  lb::LbTrainResult res = lb::train_lower_bound(source, cfg, a.common.jobs);
  std::string trace_path = manifest::join_path(a.common.out_dir, "trace.csv");
  manifest::write_lb_trace_csv(trace_path, res.trace);

  manifest::json man{{"format", manifest::kManifestFormat},
                     {"command", "train-lb"},
                     {"source", a.source_spec},
                     {"seed", seed},
                     {"config", a.flags.describe(cfg)},
                     {"objective_trace", trace_path},
                     {"converged", res.converged},
                     {"cap_warnings", res.cap_warnings}};

  if (res.diverged_step) {
    man["diverged_step"] = *res.diverged_step;
    manifest::write_json(
        manifest::join_path(a.common.out_dir, "manifest.json"), man);
    std::cerr << "train-lb: objective became non-finite at step "
              << *res.diverged_step << "\n";
    return 3;
  }

  std::string ck_path = manifest::join_path(a.common.out_dir, "log_ck.csv");
  manifest::write_log_ck_csv(ck_path, res.eval_log_ck);
  std::string ckpt_path = manifest::join_path(a.common.out_dir, "model.json");
  diff::save_params(res.model.params, ckpt_path);
  man["checkpoint"] = ckpt_path;
  man["log_ck_values"] = ck_path;
  man["intercept"] = manifest::intercept_json(res.intercept);
  man["logu_widths"] = res.model.logu.widths;
  manifest::write_json(manifest::join_path(a.common.out_dir, "manifest.json"),
                       man);

  double scale = a.common.per_dim ? 1.0 / static_cast<double>(source.dim()) : 1.0;
  std::cout << "lower bound intercept: mean=" << res.intercept.mean * scale
            << " lcb=" << res.intercept.lcb * scale << " nats"
            << (a.common.per_dim ? " [per dimension]" : "") << " (lambda="
            << cfg.lambda << ", k=" << cfg.k << ")\n";
  if (!res.converged) {
    std::cerr << "train-lb: objective not converged within " << cfg.steps
              << " steps\n";
    return 4;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sandwich
// ---------------------------------------------------------------------------

struct SandwichArgs {
  CommonOpts common;
  std::string source_spec;
  std::string lambdas;
  std::size_t grid_points = 100;
  UbFlags ub_flags;
  LbFlags lb_flags;
};

inline int cmd_sandwich(const SandwichArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  std::vector<double> lambdas = parse_double_list(a.lambdas);
  manifest::ensure_dir(a.common.out_dir);

  struct Job {
    ub::SweepEntry upper;
    std::optional<lb::EnvelopeLine> line;
    lb::IntervalEstimate intercept;
    std::string lb_error;
  };
  std::vector<Job> jobs(lambdas.size());

  parallel_for(lambdas.size(), a.common.jobs, [&](std::size_t i) {
    Job& job = jobs[i];
    double l = lambdas[i];
    job.upper.lambda = l;
    try {
      ub::UpperBoundConfig cfg =
          a.ub_flags.build(source, l, Rng::derive(seed, 100 + i));
      ub::UbTrainResult r = ub::train_upper_bound(source, cfg);
      if (r.diverged_step)
        throw NumericalError("upper diverged at step " +
                             std::to_string(*r.diverged_step));
      job.upper.converged = r.converged;
      job.upper.point = ub::evaluate_rd_point(
          r.model, source, cfg.m_eval, Rng::derive(cfg.seed, 0x7074));
    } catch (const std::exception& ex) {
      job.upper.error = ex.what();
    }
    try {
      lb::LowerBoundConfig cfg =
          a.lb_flags.build(source, l, Rng::derive(seed, 200 + i));
      lb::LbTrainResult r = lb::train_lower_bound(source, cfg, 1);
      if (r.diverged_step)
        throw NumericalError("lower diverged at step " +
                             std::to_string(*r.diverged_step));
      job.intercept = r.intercept;
      job.line = lb::EnvelopeLine{l, r.intercept.lcb};
    } catch (const std::exception& ex) {
      job.lb_error = ex.what();
    }
  });

  std::vector<oracle::RDPoint> upper_points;
  std::vector<lb::EnvelopeLine> lines;
  manifest::json upper_json = manifest::json::array();
  manifest::json lower_json = manifest::json::array();
  std::vector<std::string> warnings;
  for (const Job& job : jobs) {
    manifest::json u{{"lambda", job.upper.lambda}};
    if (job.upper.point) {
      upper_points.push_back(*job.upper.point);
      u["point"] = manifest::rdpoint_json(*job.upper.point);
      u["converged"] = job.upper.converged;
    } else {
      u["error"] = job.upper.error;
      warnings.push_back("upper bound failed at lambda=" +
                         std::to_string(job.upper.lambda) + ": " +
                         job.upper.error);
    }
    upper_json.push_back(u);
    manifest::json l{{"lambda", job.upper.lambda}};
    if (job.line) {
      lines.push_back(*job.line);
      l["intercept"] = manifest::intercept_json(job.intercept);
    } else {
      l["error"] = job.lb_error;
      warnings.push_back("lower bound failed at lambda=" +
                         std::to_string(job.upper.lambda) + ": " +
                         job.lb_error);
    }
    lower_json.push_back(l);
  }
  std::sort(upper_points.begin(), upper_points.end(),
            [](const oracle::RDPoint& x, const oracle::RDPoint& y) {
              return x.distortion < y.distortion;
            });

  // Gap table on a shared distortion grid spanning the upper points.
  manifest::json gap_json = manifest::json::array();
  double mean_gap_nats = 0.0;
  std::size_t gap_rows = 0;
  std::string gap_path = manifest::join_path(a.common.out_dir, "gap.csv");
  {
    manifest::CsvWriter w(gap_path, {"D", "R_upper_nats", "R_lower_nats",
                                     "gap_nats", "gap_bits"});
    if (upper_points.empty() || lines.empty()) {
      warnings.push_back("empty overlap: gap table not populated");
    } else {
      double dmin = upper_points.front().distortion;
      double dmax = upper_points.back().distortion;
      std::size_t npts = upper_points.size() == 1 ? 1 : a.grid_points;
      auto upper_at = [&](double d) {
        // Linear interpolation between the sorted bound points; chords of a
        // convex frontier stay above the curve.
        if (d <= upper_points.front().distortion)
          return upper_points.front().rate_nats;
        if (d >= upper_points.back().distortion)
          return upper_points.back().rate_nats;
        for (std::size_t i = 1; i < upper_points.size(); ++i) {
          if (d <= upper_points[i].distortion) {
            double d0 = upper_points[i - 1].distortion;
            double d1 = upper_points[i].distortion;
            double r0 = upper_points[i - 1].rate_nats;
            double r1 = upper_points[i].rate_nats;
            double t = d1 > d0 ? (d - d0) / (d1 - d0) : 0.0;
            return r0 + t * (r1 - r0);
          }
        }
        return upper_points.back().rate_nats;
      };
      for (std::size_t g = 0; g < npts; ++g) {
        double d = npts == 1 ? dmin
                             : dmin + (dmax - dmin) * static_cast<double>(g) /
                                          static_cast<double>(npts - 1);
        double ru = upper_at(d);
        double rl = lb::envelope_value(lines, d);
        double gap = ru - rl;
        w.row({d, ru, rl, gap, gap / std::log(2.0)});
        gap_json.push_back(manifest::json{{"D", d},
                                          {"R_upper_nats", ru},
                                          {"R_lower_nats", rl},
                                          {"gap_nats", gap}});
        mean_gap_nats += gap;
        ++gap_rows;
      }
      if (gap_rows > 0) mean_gap_nats /= static_cast<double>(gap_rows);
    }
  }

  manifest::json man{{"format", manifest::kManifestFormat},
                     {"command", "sandwich"},
                     {"source", a.source_spec},
                     {"seed", seed},
                     {"config",
                      {{"lambdas", lambdas},
                       {"grid_points", a.grid_points},
                       {"jobs", a.common.jobs},
                       {"ub", a.ub_flags.describe(a.ub_flags.build(
                                  source, lambdas.front(), seed))},
                       {"lb", a.lb_flags.describe(a.lb_flags.build(
                                  source, lambdas.front(), seed))}}},
                     {"upper", upper_json},
                     {"lower", lower_json},
                     {"gap_table", gap_json},
                     {"gap_csv", gap_path},
                     {"warnings", warnings}};
  if (gap_rows > 0) {
    man["mean_gap_nats"] = mean_gap_nats;
    man["mean_gap_bits"] = mean_gap_nats / std::log(2.0);
  }
  manifest::write_json(manifest::join_path(a.common.out_dir, "report.json"),
                       man);
  for (const auto& wmsg : warnings) std::cerr << "warning: " << wmsg << "\n";
  if (gap_rows > 0)
    std::cout << "sandwich mean gap: " << mean_gap_nats << " nats ("
              << mean_gap_nats / std::log(2.0) << " bits) over " << gap_rows
              << " grid points\n";
  return 0;
}

// ---------------------------------------------------------------------------
// diag-ck
// ---------------------------------------------------------------------------

struct DiagCkArgs {
  CommonOpts common;
  std::string source_spec;
  double lambda = 1.0;
  std::string ks = "1,2,4,8";
  std::size_t trials = 200;
  std::string logu_manifest;
};

inline int cmd_diag_ck(const DiagCkArgs& a) {
  std::uint64_t seed = effective_seed(a.common.seed);
  src::Source source = spec::parse_source(a.source_spec, seed);
  manifest::ensure_dir(a.common.out_dir);
  std::vector<std::size_t> ks = parse_size_list(a.ks);

  std::function<double(const double*, std::size_t)> log_u =
      [](const double*, std::size_t) { return 0.0; };
  diff::ParamStore params;
  diff::MLPSpec logu_spec;
  if (!a.logu_manifest.empty()) {
    manifest::json man = manifest::read_json(a.logu_manifest);
    params = diff::load_params(man.at("checkpoint").get<std::string>());
    logu_spec.widths = man.at("logu_widths").get<std::vector<std::size_t>>();
    logu_spec.hidden = diff::Act::Selu;
    logu_spec.output = diff::OutAct::Linear;
    log_u = [&params, &logu_spec](const double* x, std::size_t n) {
      Tensor row({1, n}, std::vector<double>(x, x + n));
      return diff::mlp_eval(logu_spec, params, "logu", row).data[0];
    };
  }

  std::vector<lb::CkTableRow> table = lb::ck_monotonicity_check(
      log_u, source, ks, a.trials, a.lambda, {}, a.common.jobs);

  std::string csv_path = manifest::join_path(a.common.out_dir, "ck_table.csv");
  manifest::CsvWriter w(csv_path, {"k", "mean_ck", "se", "trials"});
  manifest::json rows = manifest::json::array();
  for (const auto& r : table) {
    w.row({static_cast<double>(r.k), r.mean_ck, r.se,
           static_cast<double>(r.trials)});
    rows.push_back(manifest::json{{"k", r.k},
                                  {"mean_ck", r.mean_ck},
                                  {"se", r.se},
                                  {"trials", r.trials}});
    std::cout << "k=" << r.k << " mean C_k=" << r.mean_ck << " (se=" << r.se
              << ")\n";
  }
  manifest::write_json(
      manifest::join_path(a.common.out_dir, "manifest.json"),
      manifest::json{{"format", manifest::kManifestFormat},
                     {"command", "diag-ck"},
                     {"source", a.source_spec},
                     {"seed", seed},
                     {"config",
                      {{"lambda", a.lambda},
                       {"ks", ks},
                       {"trials", a.trials},
                       {"logu_manifest", a.logu_manifest}}},
                     {"table", rows},
                     {"table_csv", csv_path}});
  return 0;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

struct StatsArgs {
  CommonOpts common;
  std::string input;
  std::string column;
  std::string mode = "two-sided";  // or "lower"
};

inline int cmd_stats(const StatsArgs& a) {
  std::ifstream is(a.input);
  if (!is) throw IoError("stats: cannot open '" + a.input + "'");
  std::string header;
  if (!std::getline(is, header))
    throw IoError("stats: empty file '" + a.input + "'");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
  }
  std::size_t idx = cols.size();
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (cols[i] == a.column) idx = i;
  if (idx == cols.size())
    throw UsageError("stats: column '" + a.column + "' not found in header");
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t i = 0;
    while (std::getline(ss, cell, ',')) {
      if (i == idx) {
        try {
          values.push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw IoError("stats: bad number at " + a.input + ":" +
                        std::to_string(lineno));
        }
      }
      ++i;
    }
  }
  if (values.empty()) throw UsageError("stats: no rows in '" + a.input + "'");
  MeanStats st = mean_stats(values);
  manifest::json out{{"n", st.n},
                     {"mean", st.mean},
                     {"sd", st.sd},
                     {"se", st.se},
                     {"column", a.column}};
  if (a.mode == "lower") {
    out["lcb90"] = lower_conf_bound(st);
  } else if (a.mode == "two-sided") {
    ConfInterval ci = normal_ci(st);
    out["ci95"] = {ci.lo, ci.hi};
  } else {
    throw UsageError("stats: --mode must be two-sided or lower");
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry point. Returns the process exit code.
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"Sandwich bounds on the rate-distortion function of an "
               "unknown source from i.i.d. samples"};
  app.require_subcommand(1);

  detail::GenArgs gen;
  CLI::App* cgen = app.add_subcommand("gen-source", "Write samples to a file");
  gen.common.attach(cgen);
  cgen->add_option("--source", gen.source_spec, "Source spec, kind:key=val,...")
      ->required();
  cgen->add_option("--count", gen.count, "Number of samples");
  cgen->add_option("--format", gen.format, "csv|rds");
  cgen->add_option("--output", gen.output, "Output file name");

  detail::OracleArgs orc;
  CLI::App* corc = app.add_subcommand("oracle", "Exact reference R(D) curves");
  orc.common.attach(corc);
  corc->add_option("--source", orc.source_spec, "Source spec")->required();
  corc->add_option("--lambdas", orc.lambdas, "Comma list of slopes");
  corc->add_option("--D", orc.ds, "Comma list of distortions (Gaussian only)");
  corc->add_option("--target-D", orc.target_d,
                   "Sweep lambda to hit this distortion (discrete only)");
  corc->add_option("--metric", orc.metric,
                   "hamming|squared-error (default: hamming for tabular "
                   "sources, squared-error otherwise)");
  corc->add_option("--grid-lo", orc.grid_lo, "Discretization lower bound");
  corc->add_option("--grid-hi", orc.grid_hi, "Discretization upper bound");
  corc->add_option("--grid-bins", orc.grid_bins,
                   "Bins per dimension (enables discretize+BA)");
  corc->add_option("--grid-samples", orc.grid_samples, "Histogram sample count");
  corc->add_option("--tol", orc.tol, "BA convergence tolerance");
  corc->add_option("--max-iter", orc.max_iter, "BA iteration cap");

  detail::TrainUbArgs tub;
  CLI::App* ctub = app.add_subcommand("train-ub", "Train the upper bound");
  tub.common.attach(ctub);
  ctub->add_option("--source", tub.source_spec, "Source spec")->required();
  ctub->add_option("--lambda", tub.lambda, "Slope")->required();
  tub.flags.attach(ctub);

  detail::TrainLbArgs tlb;
  CLI::App* ctlb = app.add_subcommand("train-lb", "Train the lower bound");
  tlb.common.attach(ctlb);
  ctlb->add_option("--source", tlb.source_spec, "Source spec")->required();
  ctlb->add_option("--lambda", tlb.lambda, "Slope")->required();
  tlb.flags.attach(ctlb);

  detail::SandwichArgs sw;
  CLI::App* csw = app.add_subcommand(
      "sandwich", "Both bounds plus the per-distortion gap table");
  sw.common.attach(csw);
  csw->add_option("--source", sw.source_spec, "Source spec")->required();
  csw->add_option("--lambdas", sw.lambdas, "Comma list of slopes")->required();
  csw->add_option("--grid-points", sw.grid_points, "Gap table grid size");
  sw.ub_flags.attach(csw, "ub-");
  sw.lb_flags.attach(csw, "lb-");

  detail::DiagCkArgs dck;
  CLI::App* cdck = app.add_subcommand(
      "diag-ck", "Monte Carlo table of the sup-partition estimator C_k");
  dck.common.attach(cdck);
  cdck->add_option("--source", dck.source_spec, "Source spec")->required();
  cdck->add_option("--lambda", dck.lambda, "Slope")->required();
  cdck->add_option("--ks", dck.ks, "Comma list of increasing k values");
  cdck->add_option("--trials", dck.trials, "Trials per k");
  cdck->add_option("--logu-manifest", dck.logu_manifest,
                   "train-lb manifest whose log-u model to evaluate (default "
                   "u == 1)");

  detail::StatsArgs sts;
  CLI::App* csts = app.add_subcommand(
      "stats", "Sample-mean summary with large-sample intervals");
  sts.common.attach(csts);
  csts->add_option("--input", sts.input, "CSV file with a header row")
      ->required();
  csts->add_option("--column", sts.column, "Column name")->required();
  csts->add_option("--mode", sts.mode, "two-sided|lower");

  std::vector<const char*> argv;
  argv.push_back("rdsandwich");
  for (const auto& s : args) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (cgen->parsed()) return detail::cmd_gen_source(gen);
    if (corc->parsed()) return detail::cmd_oracle(orc);
    if (ctub->parsed()) return detail::cmd_train_ub(tub);
    if (ctlb->parsed()) return detail::cmd_train_lb(tlb);
    if (csw->parsed()) return detail::cmd_sandwich(sw);
    if (cdck->parsed()) return detail::cmd_diag_ck(dck);
    if (csts->parsed()) return detail::cmd_stats(sts);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace rd::cli
