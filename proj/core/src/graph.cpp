#include "squads/graph.hpp"

#include <cmath>

#include "squads/errors.hpp"

namespace squads::nn {

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kAffine: return "affine";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSquaredNorm: return "squared_norm";
    case Op::kConcat: return "concat";
    case Op::kStackRows: return "stack_rows";
    case Op::kSlice: return "slice";
    case Op::kRow: return "row";
    case Op::kPick: return "pick";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMinimum: return "minimum";
    case Op::kClamp: return "clamp";
    case Op::kAttention: return "attention";
    case Op::kStopGradient: return "stop_gradient";
  }
  return "?";
}

void Graph::require(bool cond, const std::string& msg) const {
  if (!cond) throw StructuralError(msg);
}

void Graph::check_finite(const Node& n, int id) const {
  if (!n.val.all_finite()) {
    throw NumericError(std::string("non-finite value from op '") + op_name(n.op) + "' at node " +
                       std::to_string(id));
  }
}

int Graph::push(Node n) {
  int id = static_cast<int>(nodes_.size());
  check_finite(n, id);
  nodes_.push_back(std::move(n));
  return id;
}

const Graph::Node& Graph::node(Value v) const {
  require(v.valid() && v.id < static_cast<int>(nodes_.size()),
          "invalid graph value handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Value Graph::input(Tensor v) {
  Node n;
  n.op = Op::kInput;
  n.val = std::move(v);
  return Value{push(std::move(n))};
}

Value Graph::constant(Tensor v) {
  Node n;
  n.op = Op::kConstant;
  n.val = std::move(v);
  return Value{push(std::move(n))};
}

Value Graph::param(const std::string& name, const Tensor& v) {
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) return Value{it->second};
  Node n;
  n.op = Op::kParam;
  n.val = v;
  n.needs_grad = true;
  n.name = name;
  int id = push(std::move(n));
  param_ids_.emplace(name, id);
  return Value{id};
}

Value Graph::tanh_act(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kTanh;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.val = nx.val;
  for (double& v : n.val.data) v = std::tanh(v);
  return Value{push(std::move(n))};
}

Value Graph::relu(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kRelu;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.val = nx.val;
  for (double& v : n.val.data) v = v > 0.0 ? v : 0.0;
  return Value{push(std::move(n))};
}

Value Graph::exp_of(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kExp;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.val = nx.val;
  for (double& v : n.val.data) v = std::exp(v);
  return Value{push(std::move(n))};
}

namespace {
void softmax_inplace(std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double z = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    z += x;
  }
  for (double& x : v) x /= z;
}
}  // namespace

Value Graph::softmax(Value x) {
  const Node& nx = node(x);
  require(nx.val.rank() == 1, "softmax expects a vector");
  Node n;
  n.op = Op::kSoftmax;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.val = nx.val;
  softmax_inplace(n.val.data);
  return Value{push(std::move(n))};
}

Value Graph::log_softmax(Value x) {
  const Node& nx = node(x);
  require(nx.val.rank() == 1, "log_softmax expects a vector");
  Node n;
  n.op = Op::kLogSoftmax;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.val = nx.val;
  double mx = n.val.data[0];
  for (double v : n.val.data) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : n.val.data) z += std::exp(v - mx);
  double lse = mx + std::log(z);
  for (double& v : n.val.data) v -= lse;
  return Value{push(std::move(n))};
}

Value Graph::stop_gradient(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kStopGradient;
  n.a = x.id;
  n.needs_grad = false;
  if (sg_replay_ != nullptr) {
    require(sg_replay_next_ < sg_replay_->size(),
            "stop_gradient replay exhausted: graph structure diverged from the reference build");
    const Tensor& rec = (*sg_replay_)[sg_replay_next_++];
    require(rec.shape == nx.val.shape, "stop_gradient replay shape mismatch");
    n.val = rec;
  } else {
    n.val = nx.val;
  }
  return Value{push(std::move(n))};
}

Value Graph::add(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.val.same_shape(nb.val), std::string("add: shape mismatch ") +
                                         shape_str(na.val.shape) + " vs " + shape_str(nb.val.shape));
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.val = na.val;
  for (int i = 0; i < n.val.size(); ++i) n.val[i] += nb.val[i];
  return Value{push(std::move(n))};
}

Value Graph::sub(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.val.same_shape(nb.val), std::string("sub: shape mismatch ") +
                                         shape_str(na.val.shape) + " vs " + shape_str(nb.val.shape));
  Node n;
  n.op = Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.val = na.val;
  for (int i = 0; i < n.val.size(); ++i) n.val[i] -= nb.val[i];
  return Value{push(std::move(n))};
}

Value Graph::mul(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.val.same_shape(nb.val), std::string("mul: shape mismatch ") +
                                         shape_str(na.val.shape) + " vs " + shape_str(nb.val.shape));
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.val = na.val;
  for (int i = 0; i < n.val.size(); ++i) n.val[i] *= nb.val[i];
  return Value{push(std::move(n))};
}

Value Graph::minimum(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.val.same_shape(nb.val), "minimum: shape mismatch");
  Node n;
  n.op = Op::kMinimum;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.val = na.val;
  for (int i = 0; i < n.val.size(); ++i) n.val[i] = std::min(na.val[i], nb.val[i]);
  return Value{push(std::move(n))};
}

Value Graph::scale(Value x, double c) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kScale;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.d0 = c;
  n.val = nx.val;
  for (double& v : n.val.data) v *= c;
  return Value{push(std::move(n))};
}

Value Graph::add_scalar(Value x, double c) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kAddScalar;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.d0 = c;
  n.val = nx.val;
  for (double& v : n.val.data) v += c;
  return Value{push(std::move(n))};
}

Value Graph::clamp(Value x, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  const Node& nx = node(x);
  Node n;
  n.op = Op::kClamp;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.d0 = lo;
  n.d1 = hi;
  n.val = nx.val;
  for (double& v : n.val.data) v = std::min(std::max(v, lo), hi);
  return Value{push(std::move(n))};
}

Value Graph::sum(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kSum;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  double s = 0.0;
  for (double v : nx.val.data) s += v;
  n.val = Tensor::scalar(s);
  return Value{push(std::move(n))};
}

Value Graph::mean(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kMean;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  double s = 0.0;
  for (double v : nx.val.data) s += v;
  n.val = Tensor::scalar(s / nx.val.size());
  return Value{push(std::move(n))};
}

Value Graph::squared_norm(Value x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::kSquaredNorm;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  double s = 0.0;
  for (double v : nx.val.data) s += v * v;
  n.val = Tensor::scalar(s);
  return Value{push(std::move(n))};
}

Value Graph::affine(Value w, Value b, Value x) {
  const Node& nw = node(w);
  const Node& nb = node(b);
  const Node& nx = node(x);
  require(nw.val.rank() == 2, "affine: W must be rank 2, got " + shape_str(nw.val.shape));
  require(nb.val.rank() == 1 && nx.val.rank() == 1, "affine: b and x must be vectors");
  int out = nw.val.shape[0];
  int in = nw.val.shape[1];
  require(nb.val.shape[0] == out,
          "affine: bias length " + std::to_string(nb.val.shape[0]) + " != rows " + std::to_string(out));
  require(nx.val.shape[0] == in,
          "affine: input length " + std::to_string(nx.val.shape[0]) + " != cols " + std::to_string(in));
  Node n;
  n.op = Op::kAffine;
  n.a = w.id;
  n.b = b.id;
  n.c = x.id;
  n.needs_grad = nw.needs_grad || nb.needs_grad || nx.needs_grad;
  n.val = Tensor::zeros({out});
  const double* W = nw.val.data.data();
  const double* X = nx.val.data.data();
  for (int o = 0; o < out; ++o) {
    double acc = nb.val[o];
    const double* wrow = W + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wrow[i] * X[i];
    n.val[o] = acc;
  }
  return Value{push(std::move(n))};
}

Value Graph::concat(const std::vector<Value>& xs) {
  require(!xs.empty(), "concat: empty input list");
  Node n;
  n.op = Op::kConcat;
  int total = 0;
  for (Value v : xs) {
    const Node& nv = node(v);
    require(nv.val.rank() <= 1, "concat expects scalars or vectors");
    n.needs_grad = n.needs_grad || nv.needs_grad;
    total += nv.val.size();
    n.list.push_back(v.id);
  }
  n.val = Tensor::zeros({total});
  int off = 0;
  for (Value v : xs) {
    const Node& nv = node(v);
    for (int i = 0; i < nv.val.size(); ++i) n.val[off + i] = nv.val[i];
    off += nv.val.size();
  }
  return Value{push(std::move(n))};
}

Value Graph::stack_rows(const std::vector<Value>& rows) {
  require(!rows.empty(), "stack_rows: empty input list");
  int w = node(rows[0]).val.size();
  Node n;
  n.op = Op::kStackRows;
  for (Value v : rows) {
    const Node& nv = node(v);
    require(nv.val.rank() == 1 && nv.val.size() == w, "stack_rows: rows must be equal-length vectors");
    n.needs_grad = n.needs_grad || nv.needs_grad;
    n.list.push_back(v.id);
  }
  int m = static_cast<int>(rows.size());
  n.val = Tensor::zeros({m, w});
  for (int r = 0; r < m; ++r) {
    const Node& nv = node(rows[static_cast<size_t>(r)]);
    for (int i = 0; i < w; ++i) n.val.at2(r, i) = nv.val[i];
  }
  return Value{push(std::move(n))};
}

Value Graph::slice(Value x, int offset, int len) {
  const Node& nx = node(x);
  require(nx.val.rank() == 1, "slice expects a vector");
  require(offset >= 0 && len >= 1 && offset + len <= nx.val.size(),
          "slice out of range: [" + std::to_string(offset) + "," + std::to_string(offset + len) +
              ") of " + std::to_string(nx.val.size()));
  Node n;
  n.op = Op::kSlice;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.i0 = offset;
  n.i1 = len;
  n.val = Tensor::zeros({len});
  for (int i = 0; i < len; ++i) n.val[i] = nx.val[offset + i];
  return Value{push(std::move(n))};
}

Value Graph::row(Value m, int r) {
  const Node& nm = node(m);
  require(nm.val.rank() == 2, "row expects a matrix");
  require(r >= 0 && r < nm.val.shape[0], "row index out of range");
  int w = nm.val.shape[1];
  Node n;
  n.op = Op::kRow;
  n.a = m.id;
  n.needs_grad = nm.needs_grad;
  n.i0 = r;
  n.val = Tensor::zeros({w});
  for (int i = 0; i < w; ++i) n.val[i] = nm.val.at2(r, i);
  return Value{push(std::move(n))};
}

Value Graph::pick(Value x, int index) {
  const Node& nx = node(x);
  require(nx.val.rank() == 1, "pick expects a vector");
  require(index >= 0 && index < nx.val.size(), "pick index out of range");
  Node n;
  n.op = Op::kPick;
  n.a = x.id;
  n.needs_grad = nx.needs_grad;
  n.i0 = index;
  n.val = Tensor::scalar(nx.val[index]);
  return Value{push(std::move(n))};
}

Value Graph::attention(Value query, Value keys, Value values, Value mask) {
  const Node& nq = node(query);
  const Node& nk = node(keys);
  const Node& nv = node(values);
  require(nq.val.rank() == 1 && nk.val.rank() == 2 && nv.val.rank() == 2,
          "attention expects q:[dk], K:[m,dk], V:[m,dv]");
  int dk = nq.val.size();
  int m = nk.val.shape[0];
  require(nk.val.shape[1] == dk, "attention: key width != query width");
  require(nv.val.shape[0] == m, "attention: value rows != key rows");
  if (mask.valid()) {
    const Node& nm = node(mask);
    require(nm.val.rank() == 1 && nm.val.size() == m, "attention: mask length != m");
  }
  int dv = nv.val.shape[1];
  Node n;
  n.op = Op::kAttention;
  n.a = query.id;
  n.b = keys.id;
  n.c = values.id;
  n.d = mask.valid() ? mask.id : -1;
  n.needs_grad = nq.needs_grad || nk.needs_grad || nv.needs_grad ||
                 (mask.valid() && node(mask).needs_grad);
  std::vector<double> scores(static_cast<size_t>(m), 0.0);
  double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int d = 0; d < dk; ++d) s += nq.val[d] * nk.val.at2(i, d);
    scores[static_cast<size_t>(i)] = s * inv;
    if (mask.valid()) scores[static_cast<size_t>(i)] += node(mask).val[i];
  }
  softmax_inplace(scores);
  n.val = Tensor::zeros({dv});
  for (int i = 0; i < m; ++i) {
    double w = scores[static_cast<size_t>(i)];
    for (int v = 0; v < dv; ++v) n.val[v] += w * nv.val.at2(i, v);
  }
  return Value{push(std::move(n))};
}

const Tensor& Graph::value(Value v) const { return node(v).val; }

void Graph::accumulate(int id, const double* g, int len) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grd = Tensor::zeros(n.val.shape);
    n.has_grad = true;
  }
  for (int i = 0; i < len; ++i) n.grd[i] += g[i];
}

void Graph::backprop_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad || !n.needs_grad) return;
  const Tensor& g = n.grd;
  auto in = [&](int nid) -> const Node& { return nodes_[static_cast<size_t>(nid)]; };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
    case Op::kParam:
    case Op::kStopGradient:
      return;
    case Op::kTanh: {
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) {
        double y = n.val.data[i];
        gx[i] = g.data[i] * (1.0 - y * y);
      }
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kRelu: {
      const Node& nx = in(n.a);
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = nx.val.data[i] > 0.0 ? g.data[i] : 0.0;
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kExp: {
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = g.data[i] * n.val.data[i];
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kSoftmax: {
      double dot = 0.0;
      for (size_t i = 0; i < g.data.size(); ++i) dot += g.data[i] * n.val.data[i];
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = n.val.data[i] * (g.data[i] - dot);
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kLogSoftmax: {
      double gsum = 0.0;
      for (double v : g.data) gsum += v;
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = g.data[i] - std::exp(n.val.data[i]) * gsum;
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kSum: {
      const Node& nx = in(n.a);
      std::vector<double> gx(nx.val.data.size(), g.data[0]);
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kMean: {
      const Node& nx = in(n.a);
      std::vector<double> gx(nx.val.data.size(), g.data[0] / static_cast<double>(nx.val.size()));
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kSquaredNorm: {
      const Node& nx = in(n.a);
      std::vector<double> gx(nx.val.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = 2.0 * g.data[0] * nx.val.data[i];
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kConcat: {
      int off = 0;
      for (int nid : n.list) {
        int len = in(nid).val.size();
        accumulate(nid, g.data.data() + off, len);
        off += len;
      }
      return;
    }
    case Op::kStackRows: {
      int w = n.val.shape[1];
      for (size_t r = 0; r < n.list.size(); ++r) {
        accumulate(n.list[r], g.data.data() + r * static_cast<size_t>(w), w);
      }
      return;
    }
    case Op::kSlice: {
      const Node& nx = in(n.a);
      std::vector<double> gx(nx.val.data.size(), 0.0);
      for (int i = 0; i < n.i1; ++i) gx[static_cast<size_t>(n.i0 + i)] = g.data[static_cast<size_t>(i)];
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kRow: {
      const Node& nx = in(n.a);
      int w = nx.val.shape[1];
      std::vector<double> gx(nx.val.data.size(), 0.0);
      for (int i = 0; i < w; ++i) gx[static_cast<size_t>(n.i0) * w + i] = g.data[static_cast<size_t>(i)];
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kPick: {
      const Node& nx = in(n.a);
      std::vector<double> gx(nx.val.data.size(), 0.0);
      gx[static_cast<size_t>(n.i0)] = g.data[0];
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kAdd: {
      accumulate(n.a, g.data.data(), g.size());
      accumulate(n.b, g.data.data(), g.size());
      return;
    }
    case Op::kSub: {
      accumulate(n.a, g.data.data(), g.size());
      std::vector<double> gb(g.data.size());
      for (size_t i = 0; i < gb.size(); ++i) gb[i] = -g.data[i];
      accumulate(n.b, gb.data(), static_cast<int>(gb.size()));
      return;
    }
    case Op::kMul: {
      const Node& na = in(n.a);
      const Node& nb = in(n.b);
      std::vector<double> ga(g.data.size()), gb(g.data.size());
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga[i] = g.data[i] * nb.val.data[i];
        gb[i] = g.data[i] * na.val.data[i];
      }
      accumulate(n.a, ga.data(), static_cast<int>(ga.size()));
      accumulate(n.b, gb.data(), static_cast<int>(gb.size()));
      return;
    }
    case Op::kMinimum: {
      const Node& na = in(n.a);
      const Node& nb = in(n.b);
      std::vector<double> ga(g.data.size(), 0.0), gb(g.data.size(), 0.0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        if (na.val.data[i] <= nb.val.data[i]) {
          ga[i] = g.data[i];
        } else {
          gb[i] = g.data[i];
        }
      }
      accumulate(n.a, ga.data(), static_cast<int>(ga.size()));
      accumulate(n.b, gb.data(), static_cast<int>(gb.size()));
      return;
    }
    case Op::kScale: {
      std::vector<double> gx(g.data.size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = g.data[i] * n.d0;
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kAddScalar: {
      accumulate(n.a, g.data.data(), g.size());
      return;
    }
    case Op::kClamp: {
      const Node& nx = in(n.a);
      std::vector<double> gx(g.data.size(), 0.0);
      for (size_t i = 0; i < gx.size(); ++i) {
        double x = nx.val.data[i];
        if (x >= n.d0 && x <= n.d1) gx[i] = g.data[i];
      }
      accumulate(n.a, gx.data(), static_cast<int>(gx.size()));
      return;
    }
    case Op::kAffine: {
      const Node& nw = in(n.a);
      const Node& nb = in(n.b);
      const Node& nx = in(n.c);
      int out = nw.val.shape[0];
      int cin = nw.val.shape[1];
      if (nx.needs_grad) {
        std::vector<double> gx(static_cast<size_t>(cin), 0.0);
        for (int o = 0; o < out; ++o) {
          double go = g.data[static_cast<size_t>(o)];
          const double* wrow = nw.val.data.data() + static_cast<size_t>(o) * cin;
          for (int i = 0; i < cin; ++i) gx[static_cast<size_t>(i)] += wrow[i] * go;
        }
        accumulate(n.c, gx.data(), cin);
      }
      if (nw.needs_grad) {
        std::vector<double> gw(static_cast<size_t>(out) * cin);
        for (int o = 0; o < out; ++o) {
          double go = g.data[static_cast<size_t>(o)];
          for (int i = 0; i < cin; ++i) gw[static_cast<size_t>(o) * cin + i] = go * nx.val[i];
        }
        accumulate(n.a, gw.data(), out * cin);
      }
      if (nb.needs_grad) accumulate(n.b, g.data.data(), out);
      return;
    }
    case Op::kAttention: {
      const Node& nq = in(n.a);
      const Node& nk = in(n.b);
      const Node& nv = in(n.c);
      int dk = nq.val.size();
      int m = nk.val.shape[0];
      int dv = nv.val.shape[1];
      double inv = 1.0 / std::sqrt(static_cast<double>(dk));
      std::vector<double> w(static_cast<size_t>(m), 0.0);
      for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int d = 0; d < dk; ++d) s += nq.val[d] * nk.val.at2(i, d);
        w[static_cast<size_t>(i)] = s * inv;
        if (n.d >= 0) w[static_cast<size_t>(i)] += in(n.d).val[i];
      }
      softmax_inplace(w);
      std::vector<double> gw(static_cast<size_t>(m), 0.0);
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int v = 0; v < dv; ++v) acc += g.data[static_cast<size_t>(v)] * nv.val.at2(i, v);
        gw[static_cast<size_t>(i)] = acc;
      }
      if (nv.needs_grad) {
        std::vector<double> gv(static_cast<size_t>(m) * dv);
        for (int i = 0; i < m; ++i) {
          for (int v = 0; v < dv; ++v) gv[static_cast<size_t>(i) * dv + v] = w[static_cast<size_t>(i)] * g.data[static_cast<size_t>(v)];
        }
        accumulate(n.c, gv.data(), m * dv);
      }
      double dot = 0.0;
      for (int i = 0; i < m; ++i) dot += w[static_cast<size_t>(i)] * gw[static_cast<size_t>(i)];
      std::vector<double> gs(static_cast<size_t>(m));
      for (int i = 0; i < m; ++i) gs[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] * (gw[static_cast<size_t>(i)] - dot);
      if (nq.needs_grad) {
        std::vector<double> gq(static_cast<size_t>(dk), 0.0);
        for (int i = 0; i < m; ++i) {
          for (int d = 0; d < dk; ++d) gq[static_cast<size_t>(d)] += gs[static_cast<size_t>(i)] * nk.val.at2(i, d) * inv;
        }
        accumulate(n.a, gq.data(), dk);
      }
      if (nk.needs_grad) {
        std::vector<double> gk(static_cast<size_t>(m) * dk);
        for (int i = 0; i < m; ++i) {
          for (int d = 0; d < dk; ++d) gk[static_cast<size_t>(i) * dk + d] = gs[static_cast<size_t>(i)] * nq.val[d] * inv;
        }
        accumulate(n.b, gk.data(), m * dk);
      }
      if (n.d >= 0 && in(n.d).needs_grad) accumulate(n.d, gs.data(), m);
      return;
    }
  }
}

void Graph::backward(Value scalar_loss) {
  const Node& loss = node(scalar_loss);
  require(loss.val.size() == 1, "backward expects a scalar loss, got shape " + shape_str(loss.val.shape));
  ran_backward_ = true;
  if (!loss.needs_grad) return;  // no parameters reachable
  double seed = 1.0;
  accumulate(scalar_loss.id, &seed, 1);
  for (int id = scalar_loss.id; id >= 0; --id) backprop_node(id);
}

Tensor Graph::grad(Value v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grd;
  return Tensor::zeros(n.val.shape);
}

std::map<std::string, Tensor> Graph::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : param_ids_) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    out.emplace(name, n.has_grad ? n.grd : Tensor::zeros(n.val.shape));
  }
  return out;
}

std::vector<Tensor> Graph::stop_gradient_values() const {
  std::vector<Tensor> out;
  for (const Node& n : nodes_) {
    if (n.op == Op::kStopGradient) out.push_back(n.val);
  }
  return out;
}

void Graph::replay_stop_gradients(const std::vector<Tensor>* recorded) {
  sg_replay_ = recorded;
  sg_replay_next_ = 0;
}

}  // namespace squads::nn
