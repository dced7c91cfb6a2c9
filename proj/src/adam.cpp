#include "idforget/adam.hpp"

#include <cmath>

#include "idforget/errors.hpp"

namespace idf {

AdamState make_adam_state(const ParamSet& params) {
  AdamState state;
  state.m = params.filled(0.0);
  state.v = params.filled(0.0);
  return state;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  require_same_layout(params, grads, "adam_step grads");
  require_same_layout(params, state.m, "adam_step state");
  for (const auto& [name, g] : grads) require_finite(g, "gradient '" + name + "'");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace idf
