#include "tlvm/optim.h"

#include <cmath>
#include <string>

#include "tlvm/error.h"

namespace tlvm {

void adam_step(std::span<const Tensor> params, std::span<const std::span<const double>> grads,
               AdamState& state, const AdamConfig& config) {
  if (grads.size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adam_step: " + std::to_string(params.size()) +
                                               " params but " + std::to_string(grads.size()) +
                                               " gradients");
  }
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].numel(), 0.0);
      state.slots[i].v.assign(params[i].numel(), 0.0);
    }
  }
  if (state.slots.size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adam_step: state holds " +
                                               std::to_string(state.slots.size()) +
                                               " slots for " + std::to_string(params.size()) +
                                               " params");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    AdamState::Slot& slot = state.slots[i];
    const std::size_t n = params[i].numel();
    if (grads[i].size() != n || slot.m.size() != n || slot.v.size() != n) {
      throw Error(ErrorCode::kShapeMismatch,
                  "adam_step: parameter " + std::to_string(i) + " of shape " +
                      shape_string(params[i].shape()) + " with gradient of " +
                      std::to_string(grads[i].size()) + " and moments of " +
                      std::to_string(slot.m.size()) + " elements");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    AdamState::Slot& slot = state.slots[i];
    ++slot.step;
    const double t = static_cast<double>(slot.step);
    const double bias1 = 1.0 - std::pow(config.beta1, t);
    const double bias2 = 1.0 - std::pow(config.beta2, t);
    auto p = params[i].mutable_data();
    const auto g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      slot.m[j] = config.beta1 * slot.m[j] + (1.0 - config.beta1) * g[j];
      slot.v[j] = config.beta2 * slot.v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double m_hat = slot.m[j] / bias1;
      const double v_hat = slot.v[j] / bias2;
      p[j] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
      p[j] -= config.lr * config.weight_decay * p[j];
    }
  }
}

}  // namespace tlvm
