#pragma once

#include <cmath>
#include <vector>

#include "burstiq/numerics/tensor.hpp"

namespace burstiq::numerics {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // first/second moment per parameter
  std::uint64_t step = 0;

  static AdamState init(const std::vector<Tensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), T(0));
      s.v.emplace_back(p.size(), T(0));
    }
    return s;
  }
};

// One bias-corrected Adam update. Parameters without a populated gradient are
// treated as having zero gradient. Moments are carried in the parameter
// precision; the update itself is evaluated in double.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  state.step++;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.m[p].size() != params[p].size())
      throw ShapeError("adam_step: parameter " + std::to_string(p) + " has " +
                       std::to_string(params[p].size()) + " values but state has " +
                       std::to_string(state.m[p].size()));
    auto& values = params[p].raw_values();
    const bool has_grad = params[p].has_grad();
    const std::vector<T>* grad = has_grad ? &params[p].grad() : nullptr;
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? static_cast<double>((*grad)[i]) : 0.0;
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) -
                                 cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

}  // namespace burstiq::numerics
