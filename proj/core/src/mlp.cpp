#include "squads/mlp.hpp"

#include "squads/errors.hpp"

namespace squads::nn {

Value Binder::operator()(const std::string& name) {
  for (const ParameterSet* s : sets_) {
    if (s->contains(name)) return g_->param(name, s->at(name));
  }
  throw StructuralError("binder: parameter '" + name + "' not found in any attached set");
}

bool Binder::has(const std::string& name) const {
  for (const ParameterSet* s : sets_) {
    if (s->contains(name)) return true;
  }
  return false;
}

ParameterSet init_mlp(const MlpSpec& spec, std::mt19937_64& rng, const std::string& role) {
  if (spec.widths.size() < 2) throw StructuralError("mlp needs at least input and output widths");
  ParameterSet ps(role);
  for (size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    int in = spec.widths[l];
    int out = spec.widths[l + 1];
    ps.insert(spec.prefix + "/W" + std::to_string(l), init_uniform_fan_in({out, in}, in, rng));
    ps.insert(spec.prefix + "/b" + std::to_string(l), init_uniform_fan_in({out}, in, rng));
  }
  return ps;
}

Value mlp_forward(Binder& b, const MlpSpec& spec, Value x) {
  Graph& g = b.graph();
  Value h = x;
  size_t layers = spec.widths.size() - 1;
  for (size_t l = 0; l < layers; ++l) {
    Value w = b(spec.prefix + "/W" + std::to_string(l));
    Value bias = b(spec.prefix + "/b" + std::to_string(l));
    h = g.affine(w, bias, h);
    if (l + 1 < layers) {
      h = spec.act == Activation::kTanh ? g.tanh_act(h) : g.relu(h);
    }
  }
  return h;
}

Value mlp_forward(Binder& b, const MlpSpec& spec, const std::vector<double>& x) {
  return mlp_forward(b, spec, b.graph().input(Tensor::vec(x)));
}

}  // namespace squads::nn
