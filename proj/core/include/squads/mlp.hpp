#pragma once

#include <random>
#include <string>
#include <vector>

#include "squads/graph.hpp"
#include "squads/params.hpp"

namespace squads::nn {

// Binds one or more ParameterSets to a graph; parameter nodes are memoized
// by name on first use.
class Binder {
 public:
  explicit Binder(Graph& g) : g_(&g) {}
  Binder(Graph& g, std::initializer_list<const ParameterSet*> sets) : g_(&g) {
    for (const ParameterSet* s : sets) attach(s);
  }

  void attach(const ParameterSet* set) { sets_.push_back(set); }
  Graph& graph() { return *g_; }

  Value operator()(const std::string& name);
  bool has(const std::string& name) const;

 private:
  Graph* g_;
  std::vector<const ParameterSet*> sets_;
};

enum class Activation { kTanh, kRelu };

// Fully connected stack: widths = {in, hidden..., out}. Hidden layers get
// the activation, the output layer is linear. Tensor names are
// "<prefix>/W<i>" and "<prefix>/b<i>".
struct MlpSpec {
  std::string prefix;
  std::vector<int> widths;
  Activation act{Activation::kTanh};
};

ParameterSet init_mlp(const MlpSpec& spec, std::mt19937_64& rng, const std::string& role = "");

Value mlp_forward(Binder& b, const MlpSpec& spec, Value x);

// Convenience: forward on raw input data.
Value mlp_forward(Binder& b, const MlpSpec& spec, const std::vector<double>& x);

}  // namespace squads::nn
