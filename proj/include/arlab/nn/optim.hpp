#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "arlab/nn/tensor.hpp"

namespace arlab::nn {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

// One AdamW update with decoupled weight decay. A null gradient counts as
// zero. `decay` (optional) selects which parameters receive weight decay.
inline void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                           OptimizerState& state, std::span<const std::uint8_t> decay = {}) {
  if (params.size() != grads.size()) throw ShapeError("optimizer_step: params/grads count differ");
  if (!decay.empty() && decay.size() != params.size()) {
    throw ShapeError("optimizer_step: decay mask length mismatch");
  }
  if (state.first_moment.empty()) {
    for (const Tensor* p : params) {
      state.first_moment.emplace_back(p->shape(), 0.0);
      state.second_moment.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("optimizer_step: state tracks a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(state.first_moment[i]) ||
        (grads[i] && !grads[i]->same_shape(*params[i]))) {
      throw ShapeError("optimizer_step: shape mismatch for parameter " + std::to_string(i));
    }
  }

  const AdamWConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    const double wd = (decay.empty() || decay[i]) ? c.weight_decay : 0.0;
    const double* g = grads[i] ? grads[i]->data() : nullptr;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g ? g[j] : 0.0;
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.epsilon);
      p[j] -= c.learning_rate * (update + wd * p[j]);
    }
  }
}

}  // namespace arlab::nn
