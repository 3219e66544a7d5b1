#include "squads/params.hpp"

#include <cmath>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::nn {

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StructuralError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StructuralError("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterSet::insert(const std::string& name, Tensor t) {
  if (contains(name)) throw StructuralError("duplicate parameter '" + name + "'");
  entries_.emplace(name, std::move(t));
}

int ParameterSet::scalar_count() const {
  int n = 0;
  for (const auto& [k, v] : entries_) n += v.size();
  return n;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [k, v] : other) insert(k, v);
}

bool ParameterSet::same_values(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = begin();
  auto b = other.begin();
  for (; a != end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (a->second.shape != b->second.shape) return false;
    if (a->second.data != b->second.data) return false;
  }
  return true;
}

Tensor init_uniform_fan_in(const Shape& shape, int fan_in, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = uniform_real(rng, -bound, bound);
  return t;
}

}  // namespace squads::nn
