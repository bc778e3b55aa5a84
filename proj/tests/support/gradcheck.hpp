#pragma once

// Central finite-difference checks for Network<double> gradients, shared by
// the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "pastille/neural.hpp"

namespace gradcheck {

using DNet = pastille::Network<double>;
using pastille::LayerKind;

// Pattern of active ReLU units; a finite difference is only meaningful when
// the perturbation leaves it unchanged.
inline std::vector<bool> relu_pattern(const DNet& net, std::span<const double> x) {
  DNet::Workspace ws;
  net.forward(x, ws);
  std::vector<bool> p;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    if (net.layers()[l].kind != LayerKind::relu) continue;
    const auto& in = l == 0 ? std::vector<double>(x.begin(), x.end()) : ws.act[l - 1];
    for (double v : in) p.push_back(v > 0);
  }
  return p;
}

inline double half_sq_loss(const DNet& net, std::span<const double> x, std::span<const double> y) {
  DNet::Workspace ws;
  auto out = net.forward(x, ws);
  double s = 0;
  for (std::size_t k = 0; k < out.size(); ++k) s += 0.5 * (out[k] - y[k]) * (out[k] - y[k]);
  return s;
}

inline bool grads_close(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  return diff <= 1e-4 * std::max(std::abs(analytic), std::abs(numeric)) || diff < 1e-9;
}

struct GradCheck {
  int checked = 0;
  int failed = 0;
  int skipped = 0;
};

inline GradCheck check_gradients(DNet net, std::mt19937_64& rng, int input_samples) {
  std::uniform_real_distribution<double> U(0, 1);
  std::vector<double> x(net.input_shape().size());
  for (auto& v : x) v = U(rng);
  std::vector<double> y(net.output_shape().size());
  for (auto& v : y) v = U(rng);

  DNet::Workspace ws;
  auto out = net.forward(x, ws);
  std::vector<double> dout(out.size());
  for (std::size_t k = 0; k < out.size(); ++k) dout[k] = out[k] - y[k];
  std::vector<double> dp(net.param_count(), 0.0), dx(x.size());
  net.backward(x, ws, dout, dp, dx);

  GradCheck r;
  const double eps = 1e-3;
  const auto base = relu_pattern(net, x);
  auto p = net.params();
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double keep = p[k];
    p[k] = keep + eps;
    const double lp = half_sq_loss(net, x, y);
    const bool same_p = relu_pattern(net, x) == base;
    p[k] = keep - eps;
    const double lm = half_sq_loss(net, x, y);
    const bool same_m = relu_pattern(net, x) == base;
    p[k] = keep;
    if (!same_p || !same_m) {
      ++r.skipped;
      continue;
    }
    ++r.checked;
    if (!grads_close(dp[k], (lp - lm) / (2 * eps))) ++r.failed;
  }
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  int inputs = 0;
  for (int tries = 0; inputs < input_samples && tries < 50 * input_samples; ++tries) {
    const std::size_t k = pick(rng);
    const double keep = x[k];
    x[k] = keep + eps;
    const double lp = half_sq_loss(net, x, y);
    const bool same_p = relu_pattern(net, x) == base;
    x[k] = keep - eps;
    const double lm = half_sq_loss(net, x, y);
    const bool same_m = relu_pattern(net, x) == base;
    x[k] = keep;
    if (!same_p || !same_m) {
      ++r.skipped;
      continue;  // resample another coordinate
    }
    ++inputs;
    ++r.checked;
    if (!grads_close(dx[k], (lp - lm) / (2 * eps))) ++r.failed;
  }
  return r;
}

// Small nets (a few hundred parameters) covering every layer kind.
inline DNet tiny_1d() {
  return DNet({12, 1, 3}, {{LayerKind::conv1d, 3, 2},
                           {LayerKind::relu},
                           {LayerKind::avgpool1d, 2},
                           {LayerKind::conv1d, 3, 2},
                           {LayerKind::relu},
                           {LayerKind::dense, 0, 3},
                           {LayerKind::relu},
                           {LayerKind::dense, 0, 2},
                           {LayerKind::relu}});
}

inline DNet tiny_2d() {
  return DNet({8, 7, 2}, {{LayerKind::conv2d, 3, 2},
                          {LayerKind::relu},
                          {LayerKind::avgpool2d, 2},
                          {LayerKind::dense, 0, 3},
                          {LayerKind::relu},
                          {LayerKind::dense, 0, 2},
                          {LayerKind::relu}});
}

}  // namespace gradcheck
