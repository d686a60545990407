#pragma once

// Shared helpers for the test suites: central finite differences against
// tape gradients, quadrature, and small statistics utilities. Everything
// here is test-only and independent of the implementation paths it checks.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rd/diffcore.hpp"
#include "rd/tensor.hpp"

namespace rdtest {

// Max relative error between the tape gradient and central finite
// differences of `loss_value` over every entry of every parameter.
// `loss_value` must be a deterministic function of the store.
inline double max_grad_rel_error(
    rd::diff::ParamStore& store,
    const std::function<double(const rd::diff::ParamStore&)>& loss_value,
    const std::map<std::string, rd::Tensor>& grads, double h = 1e-5) {
  double worst = 0.0;
  for (auto& [name, p] : store.all_mut()) {
    const rd::Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double keep = p.data[i];
      p.data[i] = keep + h;
      double up = loss_value(store);
      p.data[i] = keep - h;
      double dn = loss_value(store);
      p.data[i] = keep;
      double fd = (up - dn) / (2.0 * h);
      double ad = g.data[i];
      double denom = std::max({1e-6, std::abs(fd), std::abs(ad)});
      worst = std::max(worst, std::abs(fd - ad) / denom);
    }
  }
  return worst;
}

// Simpson quadrature of f over [a, b] with n panels (n even).
inline double simpson(const std::function<double(double)>& f, double a,
                      double b, int n = 20000) {
  double h = (b - a) / n;
  double acc = f(a) + f(b);
  for (int i = 1; i < n; ++i) acc += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

inline double gaussian_pdf(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) /
         std::sqrt(2.0 * 3.14159265358979323846 * var);
}

}  // namespace rdtest
