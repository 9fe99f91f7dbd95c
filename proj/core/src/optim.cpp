#include "jdnet/optim.hpp"

#include <cmath>

namespace jdnet {

AdamState AdamState::for_parameters(const TensorList<float>& params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.tensor.shape());
    state.v.emplace_back(p.tensor.shape());
  }
  return state;
}

void adam_step(const TensorList<float>& params, AdamState& state, double lr) {
  detail::require(state.m.size() == params.size() && state.v.size() == params.size(),
                  "adam_step: optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    detail::require(state.m[i].shape() == p.tensor.shape(), "adam_step: moment shape mismatch for " + p.name);
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
  }

  state.step += 1;
  const double t = state.step;
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> w = params[i].tensor;
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const bool has = w.has_grad();
    auto g = w.grad();
    auto data = w.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      const double mk = state.beta1 * m[k] + (1 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1 - state.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + state.epsilon);
      data[k] = static_cast<float>(data[k] - update);
    }
  }
}

}  // namespace jdnet
