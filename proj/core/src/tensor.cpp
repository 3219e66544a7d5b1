#include "squads/tensor.hpp"

#include <cmath>
#include <sstream>

#include "squads/errors.hpp"

namespace squads::nn {

int shape_size(const Shape& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  for (int e : shape) {
    if (e <= 0) throw StructuralError("tensor extent must be positive, got shape " + shape_str(shape));
  }
  if (shape_size(shape) != static_cast<int>(data.size())) {
    throw StructuralError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::zeros(const Shape& s) {
  return Tensor(s, std::vector<double>(static_cast<size_t>(shape_size(s)), 0.0));
}

Tensor Tensor::full(const Shape& s, double v) {
  return Tensor(s, std::vector<double>(static_cast<size_t>(shape_size(s)), v));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::vec(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

int Tensor::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() == 1) return 1;
  throw StructuralError("rows() on tensor of rank " + std::to_string(rank()));
}

int Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  throw StructuralError("cols() on tensor of rank " + std::to_string(rank()));
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace squads::nn
