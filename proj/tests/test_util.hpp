// Shared test helpers: central finite-difference gradient oracle and small
// tensor builders. The oracle is independent of the autograd backward path it
// is used to check.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "solarchip/autograd.hpp"
#include "solarchip/rng.hpp"
#include "solarchip/tensor.hpp"

namespace test_util {

using solarchip::Rng;
using solarchip::Tensor;
using solarchip::Var;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int i = 0; i < t.numel(); ++i) t[static_cast<std::size_t>(i)] = rng.uniform(-scale, scale);
  return t;
}

// Central-difference derivative of f with respect to every element of the
// given parameters. f must re-run the full forward pass on each call.
inline std::vector<std::vector<double>> numeric_grads(
    const std::vector<Var>& params, const std::function<double()>& f, double h = 1e-5) {
  std::vector<std::vector<double>> grads;
  for (const auto& p : params) {
    std::vector<double> g(static_cast<std::size_t>(p->value.numel()));
    for (int i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[static_cast<std::size_t>(i)];
      const double step = h * std::max(1.0, std::abs(saved));
      p->value[static_cast<std::size_t>(i)] = saved + step;
      const double fp = f();
      p->value[static_cast<std::size_t>(i)] = saved - step;
      const double fm = f();
      p->value[static_cast<std::size_t>(i)] = saved;
      g[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Runs backward on the graph produced by `forward` and compares every
// analytic gradient against the central-difference oracle. Returns the
// maximum relative error observed.
inline double max_grad_rel_err(const std::vector<Var>& params,
                               const std::function<Var()>& forward, double h = 1e-5) {
  solarchip::zero_grad(params);
  Var loss = forward();
  solarchip::backward(loss);
  auto numeric = numeric_grads(params, [&] { return forward()->value[0]; }, h);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor& g = params[p]->grad.empty() ? Tensor(params[p]->value.shape())
                                              : params[p]->grad;
    for (int i = 0; i < params[p]->value.numel(); ++i) {
      const double analytic = params[p]->grad.empty() ? 0.0 : g[static_cast<std::size_t>(i)];
      worst = std::max(worst, rel_err(analytic, numeric[p][static_cast<std::size_t>(i)]));
    }
  }
  return worst;
}

}  // namespace test_util
