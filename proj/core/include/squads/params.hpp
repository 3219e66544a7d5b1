#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "squads/tensor.hpp"

namespace squads::nn {

// Ordered (lexicographic by name) map of named tensors. Each set carries a
// role tag naming which learned function it parameterizes.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::string role) : role_(std::move(role)) {}

  const std::string& role() const { return role_; }
  void set_role(std::string role) { role_ = std::move(role); }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void insert(const std::string& name, Tensor t);

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int scalar_count() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names() const;

  // Merge entries of another set (names must not collide).
  void merge(const ParameterSet& other);

  bool same_values(const ParameterSet& other) const;

 private:
  std::string role_;
  std::map<std::string, Tensor> entries_;
};

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Tensor init_uniform_fan_in(const Shape& shape, int fan_in, std::mt19937_64& rng);

}  // namespace squads::nn
