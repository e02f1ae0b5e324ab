#pragma once

// Central finite-difference oracle for gradient tests. Independent of the
// backward implementations: it only calls forward functions.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "eegdg/tensor.hpp"

namespace eegdg::testing {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / (||analytic|| + ||numeric||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

inline std::vector<double> numeric_gradient(const LossFn& fn, std::vector<Tensor> inputs,
                                            std::size_t which, double h = 1e-5) {
  std::vector<double> out(inputs[which].numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto d = inputs[which].mutable_data();
    const double orig = d[i];
    d[i] = orig + h;
    double plus;
    double minus;
    {
      NoGradGuard guard;
      plus = fn(inputs).item();
    }
    d[i] = orig - h;
    {
      NoGradGuard guard;
      minus = fn(inputs).item();
    }
    d[i] = orig;
    out[i] = (plus - minus) / (2.0 * h);
  }
  return out;
}

// Checks every input that requires grad; returns the worst relative error.
inline GradCheckResult gradcheck(const LossFn& fn, std::vector<Tensor> inputs, double h = 1e-5) {
  for (Tensor& t : inputs) t.zero_grad();
  Tensor loss = fn(inputs);
  loss.backward();
  GradCheckResult worst;
  for (std::size_t w = 0; w < inputs.size(); ++w) {
    if (!inputs[w].requires_grad()) continue;
    std::vector<double> analytic(inputs[w].numel(), 0.0);
    if (inputs[w].has_grad()) {
      auto g = inputs[w].grad();
      analytic.assign(g.begin(), g.end());
    }
    const std::vector<double> numeric = numeric_gradient(fn, inputs, w, h);
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    diff = std::sqrt(diff);
    na = std::sqrt(na);
    nn = std::sqrt(nn);
    const double denom = na + nn;
    const double rel = denom > 0.0 ? diff / denom : 0.0;
    if (rel >= worst.rel_error) worst = {rel, na, nn};
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace eegdg::testing
