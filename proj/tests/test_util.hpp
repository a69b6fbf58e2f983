#pragma once

// Shared helpers for the unit suites: random matrices and an independent
// central-difference oracle that works on raw matrices, not on the engine's
// grad_check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "laser/autodiff.hpp"

namespace laser::testing {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

template <typename T = double>
Matrix<T> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c,
                        double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix<T> m(r, c);
  for (auto& v : m.data) v = static_cast<T>(dist(rng));
  return m;
}

// Reduces an arbitrary-shaped output to a scalar with fixed random weights
// so every output coordinate contributes to the probed gradient.
struct ProbeResult {
  double max_rel_error = 0.0;
};

using OpFn = std::function<Tensor<double>(Graph<double>&,
                                          const std::vector<Tensor<double>>&)>;

inline ProbeResult probe_gradients(const OpFn& op,
                                   std::vector<Matrix<double>> inputs,
                                   std::mt19937_64& rng, double step = 1e-5) {
  Matrix<double> weights;
  auto evaluate = [&](const std::vector<Matrix<double>>& in,
                      std::vector<Matrix<double>>* grads) {
    Graph<double> g;
    std::vector<Tensor<double>> vars;
    for (const auto& m : in) vars.push_back(g.variable(m));
    auto out = op(g, vars);
    if (weights.empty()) weights = random_matrix(rng, out.rows(), out.cols());
    auto loss = ad::sum_all(ad::mul(out, g.constant(weights)));
    if (grads != nullptr) {
      g.backward(loss);
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return loss.item();
  };

  std::vector<Matrix<double>> analytic;
  evaluate(inputs, &analytic);

  ProbeResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].data.size(); ++k) {
      auto plus = inputs;
      auto minus = inputs;
      plus[i].data[k] += step;
      minus[i].data[k] -= step;
      const double numeric =
          (evaluate(plus, nullptr) - evaluate(minus, nullptr)) / (2 * step);
      const double a = analytic[i].data[k];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      result.max_rel_error =
          std::max(result.max_rel_error, std::abs(a - numeric) / denom);
    }
  }
  return result;
}

}  // namespace laser::testing
