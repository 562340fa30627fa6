#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tlvm/tensor.h"

namespace tlvm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First/second moment buffers, one pair per parameter in the order the
// parameters are passed to adam_step. Step counts are per parameter so that a
// parameter skipped in some steps still gets the right bias correction.
struct AdamState {
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
  };
  std::vector<Slot> slots;
};

// One bias-corrected Adam update per parameter, followed by decoupled weight
// decay p -= lr * weight_decay * p. Empty state is sized on first use.
void adam_step(std::span<const Tensor> params, std::span<const std::span<const double>> grads,
               AdamState& state, const AdamConfig& config);

}  // namespace tlvm
