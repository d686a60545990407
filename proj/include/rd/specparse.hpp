#pragma once

// Parser for the one-line source spec mini-language used by the CLI and
// recorded verbatim in run manifests:
//
//   kind:key=val,key=val,...
//
// Kinds: std-gaussian, gaussian, rand-gaussian, banana, banana-lift,
// bernoulli, tabular, file. Errors carry the character position.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rd/common.hpp"
#include "rd/sources.hpp"

namespace rd::spec {

namespace detail {

[[noreturn]] inline void fail(const std::string& text, std::size_t pos,
                              const std::string& what) {
  throw UsageError("source spec '" + text + "': " + what + " at position " +
                   std::to_string(pos));
}

struct KeyValues {
  std::string kind;
  std::map<std::string, std::string> values;
  std::map<std::string, std::size_t> positions;
};

inline KeyValues tokenize(const std::string& text) {
  KeyValues kv;
  std::size_t colon = text.find(':');
  kv.kind = text.substr(0, colon);
  if (kv.kind.empty()) fail(text, 0, "missing source kind");
  if (colon == std::string::npos) return kv;
  std::size_t pos = colon + 1;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    std::size_t end = comma == std::string::npos ? text.size() : comma;
    std::size_t eq = text.find('=', pos);
    if (eq == std::string::npos || eq >= end)
      fail(text, pos, "expected key=value");
    std::string key = text.substr(pos, eq - pos);
    std::string val = text.substr(eq + 1, end - eq - 1);
    if (key.empty()) fail(text, pos, "empty key");
    if (val.empty()) fail(text, eq + 1, "empty value");
    if (kv.values.count(key)) fail(text, pos, "duplicate key '" + key + "'");
    kv.values[key] = val;
    kv.positions[key] = pos;
    pos = end + 1;
  }
  return kv;
}

inline double to_double(const std::string& text, const KeyValues& kv,
                        const std::string& key) {
  const std::string& v = kv.values.at(key);
  std::size_t consumed = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &consumed);
  } catch (const std::exception&) {
    fail(text, kv.positions.at(key), "bad number '" + v + "'");
  }
  if (consumed != v.size())
    fail(text, kv.positions.at(key), "bad number '" + v + "'");
  return d;
}

inline std::uint64_t to_u64(const std::string& text, const KeyValues& kv,
                            const std::string& key) {
  const std::string& v = kv.values.at(key);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    fail(text, kv.positions.at(key), "bad integer '" + v + "'");
  }
}

inline std::size_t to_size(const std::string& text, const KeyValues& kv,
                           const std::string& key) {
  return static_cast<std::size_t>(to_u64(text, kv, key));
}

// "a;b;c" -> vector of doubles.
inline std::vector<double> to_list(const std::string& text, const KeyValues& kv,
                                   const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(kv.values.at(key));
  std::string cell;
  while (std::getline(ss, cell, ';')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      fail(text, kv.positions.at(key), "bad list entry '" + cell + "'");
    }
  }
  if (out.empty()) fail(text, kv.positions.at(key), "empty list");
  return out;
}

inline void require(const std::string& text, const KeyValues& kv,
                    const std::string& key) {
  if (!kv.values.count(key))
    fail(text, text.size(), "missing required key '" + key + "'");
}

inline void allow_only(const std::string& text, const KeyValues& kv,
                       std::initializer_list<const char*> keys) {
  for (const auto& [key, _] : kv.values) {
    bool ok = false;
    for (const char* k : keys)
      if (key == k) ok = true;
    if (!ok)
      fail(text, kv.positions.at(key), "unknown key '" + key + "'");
  }
}

}  // namespace detail

constexpr std::uint64_t kDefaultLiftSeed = 9001;  // lift matrix is part of the spec

inline src::Source parse_source(const std::string& text, std::uint64_t seed) {
  using namespace detail;
  KeyValues kv = tokenize(text);

  if (kv.kind == "std-gaussian") {
    allow_only(text, kv, {"n"});
    require(text, kv, "n");
    return src::Source::standard_gaussian(to_size(text, kv, "n"), seed);
  }
  if (kv.kind == "gaussian") {
    allow_only(text, kv, {"n", "var", "mean", "vars", "means"});
    require(text, kv, "n");
    std::size_t n = to_size(text, kv, "n");
    std::vector<double> vars(n, 1.0), means(n, 0.0);
    if (kv.values.count("var")) vars.assign(n, to_double(text, kv, "var"));
    if (kv.values.count("mean")) means.assign(n, to_double(text, kv, "mean"));
    if (kv.values.count("vars")) {
      vars = to_list(text, kv, "vars");
      if (vars.size() != n) fail(text, kv.positions.at("vars"), "vars length != n");
    }
    if (kv.values.count("means")) {
      means = to_list(text, kv, "means");
      if (means.size() != n)
        fail(text, kv.positions.at("means"), "means length != n");
    }
    return src::Source::diagonal_gaussian(std::move(means), std::move(vars),
                                          seed);
  }
  if (kv.kind == "rand-gaussian") {
    allow_only(text, kv, {"n", "params-seed"});
    require(text, kv, "n");
    std::uint64_t pseed =
        kv.values.count("params-seed") ? to_u64(text, kv, "params-seed") : seed;
    src::Source s = src::random_gaussian_source(to_size(text, kv, "n"), pseed);
    s.reseed(seed);
    return s;
  }
  if (kv.kind == "banana") {
    allow_only(text, kv, {"b", "sigma"});
    double b = kv.values.count("b") ? to_double(text, kv, "b") : 0.5;
    double sigma = kv.values.count("sigma") ? to_double(text, kv, "sigma") : 2.0;
    return src::Source::banana2d(b, sigma, seed);
  }
  if (kv.kind == "banana-lift") {
    allow_only(text, kv, {"n", "b", "sigma", "lift-seed"});
    require(text, kv, "n");
    std::size_t n = to_size(text, kv, "n");
    double b = kv.values.count("b") ? to_double(text, kv, "b") : 0.5;
    double sigma = kv.values.count("sigma") ? to_double(text, kv, "sigma") : 2.0;
    std::uint64_t lseed = kv.values.count("lift-seed")
                              ? to_u64(text, kv, "lift-seed")
                              : kDefaultLiftSeed;
    src::Source inner =
        src::Source::banana2d(b, sigma, Rng::derive(seed, 0x696e));
    return src::Source::linear_lift(std::move(inner),
                                    src::random_lift_matrix(n, 2, lseed), seed);
  }
  if (kv.kind == "bernoulli") {
    allow_only(text, kv, {"p"});
    require(text, kv, "p");
    return src::Source::bernoulli(to_double(text, kv, "p"), seed);
  }
  if (kv.kind == "tabular") {
    allow_only(text, kv, {"points", "pmf"});
    require(text, kv, "points");
    require(text, kv, "pmf");
    std::vector<double> pts = to_list(text, kv, "points");
    std::vector<double> pmf = to_list(text, kv, "pmf");
    if (pts.size() != pmf.size())
      fail(text, kv.positions.at("pmf"), "points/pmf length mismatch");
    std::vector<std::vector<double>> support;
    for (double p : pts) support.push_back({p});
    return src::Source::discrete_tabular(std::move(support), std::move(pmf),
                                         seed);
  }
  if (kv.kind == "file") {
    allow_only(text, kv, {"path", "n", "format", "header"});
    require(text, kv, "path");
    const std::string& path = kv.values.at("path");
    std::string format = kv.values.count("format") ? kv.values.at("format") : "";
    if (format.empty()) {
      format = path.size() >= 4 && path.substr(path.size() - 4) == ".rds"
                   ? "rds"
                   : "csv";
    }
    if (format == "rds") return src::Source::from_rds(path, seed);
    if (format != "csv")
      fail(text, kv.positions.at("format"), "format must be csv or rds");
    require(text, kv, "n");
    bool header =
        kv.values.count("header") && kv.values.at("header") != "0";
    return src::Source::from_csv(path, to_size(text, kv, "n"), header, seed);
  }
  fail(text, 0, "unknown source kind '" + kv.kind + "'");
}

}  // namespace rd::spec
