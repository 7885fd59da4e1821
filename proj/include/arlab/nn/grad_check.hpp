#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "arlab/nn/graph.hpp"

namespace arlab::nn {

// Builds a scalar loss from parameter leaves registered in `graph`.
using LossBuilder = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked_entries = 0;
};

// Compares reverse-mode gradients against central differences for every
// parameter entry: |a - c| / (|a| + |c| + 1e-12), maximized.
inline GradCheckResult grad_check(const LossBuilder& build, std::vector<Tensor>& params,
                                  double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-3)) {
    throw std::invalid_argument("grad_check epsilon must lie in (0, 1e-3]");
  }
  auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads_out) {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(g.parameter(p));
    if (!with_grad) g.set_grad_enabled(false);
    Var loss = build(g, leaves);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("grad_check: non-finite loss");
    if (grads_out) {
      g.backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor* gr = g.grad(leaves[i]);
        grads_out->push_back(gr ? *gr : Tensor(params[i].shape(), 0.0));
      }
    }
    return value;
  };

  std::vector<Tensor> analytic;
  evaluate(true, &analytic);

  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double saved = params[i][j];
      params[i][j] = saved + epsilon;
      const double up = evaluate(false, nullptr);
      params[i][j] = saved - epsilon;
      const double down = evaluate(false, nullptr);
      params[i][j] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[i][j];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.checked_entries;
    }
  }
  return result;
}

}  // namespace arlab::nn
