#pragma once

// Run manifests and plot-ready CSV artifacts. Every output file names the
// exact config and seed that produced it; rates are emitted in nats with an
// extra bits column.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rd/common.hpp"
#include "rd/lower_bound.hpp"
#include "rd/oracles.hpp"
#include "rd/upper_bound.hpp"

namespace rd::manifest {

using nlohmann::json;

inline constexpr const char* kManifestFormat = "rd-manifest-v1";

inline void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("write_json: cannot open '" + path + "'");
  os << j.dump(2) << "\n";
}

inline json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_json: cannot open '" + path + "'");
  json j;
  is >> j;
  return j;
}

inline json rdpoint_json(const oracle::RDPoint& p) {
  json j;
  j["distortion"] = p.distortion;
  j["rate_nats"] = p.rate_nats;
  j["rate_bits"] = p.rate_bits();
  if (p.lambda) j["lambda"] = *p.lambda;
  if (p.rate_sd) j["rate_sd"] = *p.rate_sd;
  if (p.distortion_sd) j["distortion_sd"] = *p.distortion_sd;
  if (p.rate_ci) j["rate_ci"] = {p.rate_ci->lo, p.rate_ci->hi};
  if (p.distortion_ci)
    j["distortion_ci"] = {p.distortion_ci->lo, p.distortion_ci->hi};
  j["converged"] = p.converged;
  return j;
}

inline json intercept_json(const lb::IntervalEstimate& e) {
  return json{{"mean", e.mean},
              {"sd", e.sd},
              {"lcb", e.lcb},
              {"samples", e.samples}};
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns)
      : os_(path) {
    if (!os_) throw IoError("CsvWriter: cannot open '" + path + "'");
    os_.precision(17);
    for (std::size_t i = 0; i < columns.size(); ++i)
      os_ << (i ? "," : "") << columns[i];
    os_ << "\n";
    width_ = columns.size();
  }

  void row(const std::vector<double>& values) {
    if (values.size() != width_)
      throw ShapeError("CsvWriter: row width mismatch");
    for (std::size_t i = 0; i < values.size(); ++i)
      os_ << (i ? "," : "") << values[i];
    os_ << "\n";
  }

 private:
  std::ofstream os_;
  std::size_t width_ = 0;
};

inline void write_curve_csv(const std::string& path,
                            const std::vector<oracle::RDPoint>& points) {
  CsvWriter w(path, {"lambda", "D", "R_nats", "R_bits", "converged"});
  for (const auto& p : points)
    w.row({p.lambda.value_or(0.0), p.distortion, p.rate_nats, p.rate_bits(),
           p.converged ? 1.0 : 0.0});
}

inline void write_ub_trace_csv(const std::string& path,
                               const std::vector<ub::TraceRow>& trace) {
  CsvWriter w(path, {"step", "rate_term", "distortion_term", "loss"});
  for (const auto& r : trace)
    w.row({static_cast<double>(r.step), r.rate, r.distortion, r.loss});
}

inline void write_lb_trace_csv(
    const std::string& path,
    const std::vector<std::pair<std::size_t, double>>& trace) {
  CsvWriter w(path, {"step", "objective_nats"});
  for (const auto& [step, v] : trace) w.row({static_cast<double>(step), v});
}

inline void write_log_ck_csv(const std::string& path,
                             const std::vector<double>& log_ck) {
  CsvWriter w(path, {"draw", "log_ck"});
  for (std::size_t i = 0; i < log_ck.size(); ++i)
    w.row({static_cast<double>(i), log_ck[i]});
}

inline void write_envelope_csv(const std::string& path,
                               const std::vector<lb::EnvelopeLine>& lines,
                               const std::vector<double>& grid) {
  CsvWriter w(path, {"D", "R_L_nats", "R_L_bits"});
  for (double d : grid) {
    double r = lb::envelope_value(lines, d);
    w.row({d, r, r / std::log(2.0)});
  }
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "'");
}

}  // namespace rd::manifest
