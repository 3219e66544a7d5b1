#pragma once

#include <functional>
#include <vector>

#include "squads/graph.hpp"
#include "squads/params.hpp"

namespace squads::nn {

// A program builds a tape from parameters and inputs and returns its output
// nodes; outputs[0] is the designated scalar loss.
using GraphProgram =
    std::function<std::vector<Value>(Graph&, const ParameterSet&, const std::vector<Tensor>&)>;

struct EvalResult {
  std::vector<Tensor> outputs;
  std::map<std::string, Tensor> grads;
};

// Forward evaluation plus exact reverse-mode gradients of outputs[0].
EvalResult evaluate_with_gradients(const ParameterSet& params, const GraphProgram& program,
                                   const std::vector<Tensor>& inputs);

// Max over parameter entries of the relative error between analytic and
// central-difference gradients. Perturbed evaluations replay the reference
// build's stop-gradient values, which is the semantics under which the
// straight-through path is differentiable. Near-zero denominators fall back
// to absolute error (threshold 1e-12).
double finite_diff_check(const ParameterSet& params, const GraphProgram& program,
                         const std::vector<Tensor>& inputs, double eps);

}  // namespace squads::nn
