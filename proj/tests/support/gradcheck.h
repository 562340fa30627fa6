#pragma once

// Central finite-difference oracle. Independent of every backward rule: it
// only evaluates the forward function with recording disabled.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tlvm/tensor.h"

namespace tlvm::testing {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a magnitude floor: |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// f builds a scalar from `inputs` using tlvm ops. Every input gets a fresh
// gradient from a taped run, then each element (or `max_elements` sampled
// elements per input) is compared against (f(x+h) - f(x-h)) / 2h.
inline GradcheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 const std::vector<Tensor>& inputs, double h = 1e-5,
                                 std::size_t max_elements = 0, std::uint64_t seed = 0) {
  for (const Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f(inputs);
    tape.backward(loss);
  }
  GradcheckResult result;
  std::mt19937_64 rng(seed);
  for (const Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> indices(t.numel());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (max_elements != 0 && indices.size() > max_elements) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(max_elements);
    }
    auto values = t.mutable_data();
    for (std::size_t i : indices) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = f(inputs).item();
      values[i] = saved - h;
      const double minus = f(inputs).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace tlvm::testing
