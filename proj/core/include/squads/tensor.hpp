#pragma once

#include <string>
#include <vector>

namespace squads::nn {

using Shape = std::vector<int>;

// Dense row-major tensor of 64-bit reals. Rank 0 (scalar), 1 and 2 are the
// only ranks the toolkit needs.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);

  int size() const { return static_cast<int>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const;
  int cols() const;

  double& operator[](int i) { return data[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data[static_cast<size_t>(i)]; }
  double& at2(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at2(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

int shape_size(const Shape& s);
std::string shape_str(const Shape& s);

}  // namespace squads::nn
