#pragma once

#include <cstdint>

#include "squads/params.hpp"

namespace squads::nn {

struct AdamConfig {
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

// Bias-corrected first-order optimizer state. Moment shapes mirror the
// parameters; the step counter is monotone.
struct AdamState {
  AdamConfig cfg;
  ParameterSet m;
  ParameterSet v;
  std::int64_t step{0};

  static AdamState init(const ParameterSet& params, const AdamConfig& cfg);
};

struct AdamResult {
  ParameterSet params;
  AdamState state;
};

// Functional update: inputs are untouched, fresh values are returned.
// Non-finite gradients reject the whole update and raise, naming the
// offending parameter.
AdamResult adam_step(const ParameterSet& params, const std::map<std::string, Tensor>& grads,
                     const AdamState& state);

}  // namespace squads::nn
