#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "squads/tensor.hpp"

namespace squads::nn {

// Reverse-mode autodiff on an eagerly evaluated tape. Node values are
// computed at construction time so that value-dependent decisions (nearest
// codes, sampled actions) can be made while the graph is being built; the
// decisions themselves are constants of the tape.
//
// stop_gradient is a first-class primitive. For finite differencing, a graph
// can be rebuilt with every stop_gradient output frozen at the values
// recorded on a reference build; this is the semantics under which analytic
// gradients (including the straight-through path) match central differences.

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kParam,
  kAffine,
  kTanh,
  kRelu,
  kExp,
  kSoftmax,
  kLogSoftmax,
  kSum,
  kMean,
  kSquaredNorm,
  kConcat,
  kStackRows,
  kSlice,
  kRow,
  kPick,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMinimum,
  kClamp,
  kAttention,
  kStopGradient,
};

const char* op_name(Op op);

struct Value {
  int id{-1};
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  Value input(Tensor v);
  Value constant(Tensor v);
  Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }
  Value constant_vec(std::vector<double> v) { return constant(Tensor::vec(std::move(v))); }
  // Registers (or returns the already registered node of) a named parameter.
  Value param(const std::string& name, const Tensor& v);

  // Elementwise / activations.
  Value tanh_act(Value x);
  Value relu(Value x);
  Value exp_of(Value x);
  Value softmax(Value x);
  Value log_softmax(Value x);
  Value stop_gradient(Value x);
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value minimum(Value a, Value b);
  Value scale(Value x, double c);
  Value add_scalar(Value x, double c);
  Value clamp(Value x, double lo, double hi);

  // Reductions to scalars.
  Value sum(Value x);
  Value mean(Value x);
  Value squared_norm(Value x);

  // Structure.
  // y = W x + b with W:[out,in], b:[out], x:[in].
  Value affine(Value w, Value b, Value x);
  Value concat(const std::vector<Value>& xs);
  // Stacks equal-length vectors into a matrix [m, w].
  Value stack_rows(const std::vector<Value>& rows);
  Value slice(Value x, int offset, int len);
  // Row r of a matrix [k, w] -> vector [w]; gradient scatters into the row.
  Value row(Value m, int r);
  // Element i of a vector -> scalar.
  Value pick(Value x, int index);
  // Scaled dot-product attention, single block: query [dk], keys [m, dk],
  // values [m, dv] -> [dv]. Optional additive mask over the m scores.
  Value attention(Value query, Value keys, Value values, Value mask = Value{});

  // Execution.
  const Tensor& value(Value v) const;
  void backward(Value scalar_loss);
  // Gradient of the loss w.r.t. node v; zero tensor if v is not tracked.
  Tensor grad(Value v) const;
  // Gradients per registered parameter name (zeros where unused). Valid
  // after backward().
  std::map<std::string, Tensor> param_grads() const;

  // stop_gradient freezing for finite differences: values recorded from a
  // reference build are replayed, in construction order, on the next build.
  std::vector<Tensor> stop_gradient_values() const;
  void replay_stop_gradients(const std::vector<Tensor>* recorded);

  int node_count() const { return static_cast<int>(nodes_.size()); }
  void reserve(size_t) {}  // deque storage needs no pre-allocation

 private:
  struct Node {
    Op op;
    int a{-1}, b{-1}, c{-1}, d{-1};  // input node ids
    std::vector<int> list;           // for concat / stack_rows
    Tensor val;
    Tensor grd;
    bool needs_grad{false};
    bool has_grad{false};
    int i0{0}, i1{0};
    double d0{0.0}, d1{0.0};
    std::string name;  // param name
  };

  int push(Node n);
  const Node& node(Value v) const;
  void require(bool cond, const std::string& msg) const;
  void check_finite(const Node& n, int id) const;
  void accumulate(int id, const double* g, int len);
  void backprop_node(int id);

  // Deque: growing the tape never invalidates node references.
  std::deque<Node> nodes_;
  std::map<std::string, int> param_ids_;
  const std::vector<Tensor>* sg_replay_{nullptr};
  size_t sg_replay_next_{0};
  bool ran_backward_{false};
};

}  // namespace squads::nn
