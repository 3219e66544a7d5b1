#include "squads/adam.hpp"

#include <cmath>

#include "squads/errors.hpp"

namespace squads::nn {

AdamState AdamState::init(const ParameterSet& params, const AdamConfig& cfg) {
  AdamState st;
  st.cfg = cfg;
  for (const auto& [name, t] : params) {
    st.m.insert(name, Tensor::zeros(t.shape));
    st.v.insert(name, Tensor::zeros(t.shape));
  }
  return st;
}

AdamResult adam_step(const ParameterSet& params, const std::map<std::string, Tensor>& grads,
                     const AdamState& state) {
  for (const auto& [name, t] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw StructuralError("adam_step: missing gradient for '" + name + "'");
    if (it->second.shape != t.shape) {
      throw StructuralError("adam_step: gradient shape mismatch for '" + name + "'");
    }
    if (!it->second.all_finite()) {
      throw NumericError("adam_step: non-finite gradient for '" + name + "', update rejected");
    }
  }

  AdamResult out{params, state};
  out.state.step = state.step + 1;
  const AdamConfig& c = state.cfg;
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(out.state.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(out.state.step));
  for (auto& [name, p] : out.params) {
    const Tensor& g = grads.at(name);
    Tensor& m = out.state.m.at(name);
    Tensor& v = out.state.v.at(name);
    for (int i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
  return out;
}

}  // namespace squads::nn
