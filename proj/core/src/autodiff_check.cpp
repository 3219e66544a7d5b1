#include "squads/autodiff_check.hpp"

#include <cmath>

#include "squads/errors.hpp"

namespace squads::nn {

EvalResult evaluate_with_gradients(const ParameterSet& params, const GraphProgram& program,
                                   const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Value> outs = program(g, params, inputs);
  if (outs.empty()) throw StructuralError("program produced no outputs");
  g.backward(outs[0]);
  EvalResult res;
  for (Value v : outs) res.outputs.push_back(g.value(v));
  res.grads = g.param_grads();
  // Parameters never touched by the program still get zero gradients.
  for (const auto& [name, t] : params) {
    if (!res.grads.count(name)) res.grads.emplace(name, Tensor::zeros(t.shape));
  }
  return res;
}

double finite_diff_check(const ParameterSet& params, const GraphProgram& program,
                         const std::vector<Tensor>& inputs, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw StructuralError("finite_diff_check: eps must be in (0, 1e-3]");

  Graph ref;
  std::vector<Value> outs = program(ref, params, inputs);
  if (outs.empty()) throw StructuralError("program produced no outputs");
  ref.backward(outs[0]);
  std::map<std::string, Tensor> analytic = ref.param_grads();
  std::vector<Tensor> sg = ref.stop_gradient_values();

  auto loss_at = [&](const ParameterSet& p) -> double {
    Graph g;
    g.replay_stop_gradients(&sg);
    std::vector<Value> o = program(g, p, inputs);
    return g.value(o[0])[0];
  };

  // Central differences carry rounding noise of about |f| * ulp / eps;
  // denominators below that floor cannot support a relative comparison and
  // fall back to absolute error.
  double f0 = std::abs(ref.value(outs[0])[0]);
  double floor = std::max(1e-12, f0 * 2.5e-15 / eps);

  double max_rel = 0.0;
  for (const auto& [name, t] : params) {
    const Tensor* ga = analytic.count(name) ? &analytic.at(name) : nullptr;
    for (int i = 0; i < t.size(); ++i) {
      ParameterSet p = params;
      p.at(name)[i] = t[i] + eps;
      double up = loss_at(p);
      p.at(name)[i] = t[i] - eps;
      double dn = loss_at(p);
      double numeric = (up - dn) / (2.0 * eps);
      double a = ga ? (*ga)[i] : 0.0;
      double denom = std::max(std::abs(a), std::abs(numeric));
      double err = denom < floor ? std::abs(a - numeric) : std::abs(a - numeric) / denom;
      max_rel = std::max(max_rel, err);
    }
  }
  return max_rel;
}

}  // namespace squads::nn
