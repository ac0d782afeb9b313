#pragma once

// Reverse-mode automatic differentiation over a fixed set of dense
// primitives.
//
// A graph is built once (shapes are inferred and checked at construction),
// then evaluated with forward() as often as needed; backward() returns the
// gradient of a scalar node with respect to every trainable leaf. Frozen
// leaves take part in the forward pass but never receive a gradient entry.
//
// Row-oriented primitives (softmax, layer_norm, l2_normalize, mean_pool)
// treat the last dimension as the feature axis and everything before it as
// rows. Values are stored as Scalar; every reduction accumulates in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpatch/tensor.hpp"

namespace mpatch {

enum class OpKind {
  Parameter,
  Input,
  MatMul,
  Add,
  Scale,
  Gelu,
  Tanh,
  Sigmoid,
  LayerNorm,
  MeanPool,
  Softmax,
  L2Normalize,
  MseLoss,
  SoftmaxCrossEntropy,
  BinaryCrossEntropy,
  Concat,
  Slice,
};

inline const char* to_string(OpKind op) {
  switch (op) {
    case OpKind::Parameter: return "parameter";
    case OpKind::Input: return "input";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Gelu: return "gelu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::MeanPool: return "mean_pool";
    case OpKind::Softmax: return "softmax";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::MseLoss: return "mse_loss";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::BinaryCrossEntropy: return "binary_cross_entropy";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
  }
  return "?";
}

struct Var {
  std::size_t id = 0;
};

inline constexpr double kLayerNormEps = 1e-5;

namespace kernels {

// C[M,N] (+)= A[M,K] * B[K,N], all row-major, double accumulation. Each
// output element sums its products in ascending k, whatever the blocking.
template <class S, std::size_t R, std::size_t J>
inline void gemm_tile(std::size_t n, std::size_t k, const S* a, const S* b, S* c,
                      std::size_t i, std::size_t j, bool accumulate) {
  double acc[R][J] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const S* brow = b + p * n + j;
    double bv[J];
    for (std::size_t q = 0; q < J; ++q) bv[q] = static_cast<double>(brow[q]);
    for (std::size_t r = 0; r < R; ++r) {
      const double av = static_cast<double>(a[(i + r) * k + p]);
      for (std::size_t q = 0; q < J; ++q) acc[r][q] += av * bv[q];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    S* crow = c + (i + r) * n + j;
    for (std::size_t q = 0; q < J; ++q) {
      crow[q] = accumulate ? static_cast<S>(static_cast<double>(crow[q]) + acc[r][q])
                           : static_cast<S>(acc[r][q]);
    }
  }
}

template <class S>
void gemm(std::size_t m, std::size_t n, std::size_t k, const S* a, const S* b,
          S* c, bool accumulate) {
  constexpr std::size_t R = 4, J = 16;
  const std::size_t m_main = m - m % R, n_main = n - n % J;
  for (std::size_t i = 0; i < m_main; i += R) {
    for (std::size_t j = 0; j < n_main; j += J) {
      gemm_tile<S, R, J>(n, k, a, b, c, i, j, accumulate);
    }
    for (std::size_t j = n_main; j < n; ++j) {
      for (std::size_t r = 0; r < R; ++r) gemm_tile<S, 1, 1>(n, k, a, b, c, i + r, j, accumulate);
    }
  }
  for (std::size_t i = m_main; i < m; ++i) {
    for (std::size_t j = 0; j < n_main; j += J) {
      gemm_tile<S, 1, J>(n, k, a, b, c, i, j, accumulate);
    }
    for (std::size_t j = n_main; j < n; ++j) gemm_tile<S, 1, 1>(n, k, a, b, c, i, j, accumulate);
  }
}

template <class S>
void transpose(std::size_t rows, std::size_t cols, const S* in, S* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  }
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace kernels

template <class Scalar>
class BasicGraph {
 public:
  using Array = std::vector<Scalar>;

  struct Node {
    OpKind op = OpKind::Input;
    std::string name;
    std::vector<std::size_t> inputs;
    Shape shape;
    Array value;
    Array grad;
    Array saved;  // per-op forward state reused by backward
    bool trainable = false;
    bool needs_grad = false;
    bool transpose_b = false;
    std::size_t batch = 1;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t group = 1;
    double factor = 1.0;
    std::vector<double> weights;  // mean_pool row weights
    std::size_t zero_rows = 0;    // l2_normalize degenerate rows
  };

  BasicGraph() = default;

  // ---- leaves -------------------------------------------------------------

  Var parameter(const std::string& name, const Tensor& value, bool trainable) {
    if (param_index_.count(name)) {
      throw Error(ErrorKind::InvalidArgument,
                  "duplicate parameter name '" + name + "'");
    }
    Node node;
    node.op = OpKind::Parameter;
    node.name = name;
    node.shape = value.shape();
    node.value.assign(value.data().begin(), value.data().end());
    node.trainable = trainable;
    node.needs_grad = trainable;
    const Var v = push(std::move(node));
    param_index_[name] = v.id;
    return v;
  }

  Var input(const std::string& name, Shape shape) {
    if (input_index_.count(name)) {
      throw Error(ErrorKind::InvalidArgument,
                  "duplicate input name '" + name + "'");
    }
    Node node;
    node.op = OpKind::Input;
    node.name = name;
    node.shape = std::move(shape);
    const Var v = push(std::move(node));
    input_index_[name] = v.id;
    return v;
  }

  // An input bound once at construction.
  Var constant(const std::string& name, const Tensor& value) {
    const Var v = input(name, value.shape());
    bind(name, value);
    return v;
  }

  // ---- primitives ---------------------------------------------------------

  // Block-diagonal matmul: a is `batch` stacked [M,K] blocks, b is `batch`
  // stacked [K,N] blocks ([N,K] when transpose_b). batch=1 is a plain matmul.
  Var matmul(Var a, Var b, bool transpose_b = false, std::size_t batch = 1) {
    Node node = make(OpKind::MatMul, {a, b});
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa.size() != 2 || sb.size() != 2) {
      fail(node, "operands must be rank 2, got " + shape_str(sa) + " and " +
                     shape_str(sb));
    }
    if (batch == 0 || sa[0] % batch || sb[0] % batch) {
      fail(node, "row counts " + shape_str(sa) + ", " + shape_str(sb) +
                     " not divisible by batch " + std::to_string(batch));
    }
    const std::size_t k = sa[1];
    const std::size_t kb = transpose_b ? sb[1] : sb[0] / batch;
    const std::size_t n = transpose_b ? sb[0] / batch : sb[1];
    if (k != kb) {
      fail(node, "inner dimensions differ: " + shape_str(sa) + " x " +
                     shape_str(sb) + (transpose_b ? "^T" : ""));
    }
    node.transpose_b = transpose_b;
    node.batch = batch;
    node.shape = {sa[0], n};
    return push(std::move(node));
  }

  // Elementwise sum; b may also be a row block that is tiled down a
  // (b rows divide a rows), which covers biases and positional tables.
  Var add(Var a, Var b) {
    Node node = make(OpKind::Add, {a, b});
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    const std::size_t ca = sa.back(), cb = sb.back();
    const std::size_t ra = numel(sa) / ca, rb = numel(sb) / cb;
    if (ca != cb || ra % rb) {
      fail(node, "cannot add " + shape_str(sb) + " onto " + shape_str(sa));
    }
    node.shape = sa;
    return push(std::move(node));
  }

  Var scale(Var a, double factor) {
    Node node = make(OpKind::Scale, {a});
    node.factor = factor;
    node.shape = at(a).shape;
    return push(std::move(node));
  }

  Var gelu(Var a) { return unary(OpKind::Gelu, a); }
  Var tanh(Var a) { return unary(OpKind::Tanh, a); }
  Var sigmoid(Var a) { return unary(OpKind::Sigmoid, a); }
  Var softmax(Var a) { return unary(OpKind::Softmax, a); }
  Var l2_normalize(Var a) { return unary(OpKind::L2Normalize, a); }

  Var layer_norm(Var x, Var gamma, Var beta) {
    Node node = make(OpKind::LayerNorm, {x, gamma, beta});
    const std::size_t cols = at(x).shape.back();
    if (numel(at(gamma).shape) != cols || numel(at(beta).shape) != cols) {
      fail(node, "gain/bias length must equal feature width " +
                     std::to_string(cols));
    }
    node.shape = at(x).shape;
    return push(std::move(node));
  }

  // Averages consecutive groups of `group` rows: [G*group, C] -> [G, C].
  // Optional per-row weights (length G*group) give a weighted mean; a group
  // whose weights are all zero falls back to the plain mean.
  Var mean_pool(Var x, std::size_t group, std::vector<double> weights = {}) {
    Node node = make(OpKind::MeanPool, {x});
    const Shape& sx = at(x).shape;
    const std::size_t cols = sx.back();
    const std::size_t rows = numel(sx) / cols;
    if (group == 0 || rows % group) {
      fail(node, "row count " + std::to_string(rows) +
                     " not divisible by group " + std::to_string(group));
    }
    if (!weights.empty() && weights.size() != rows) {
      fail(node, "weight count must equal row count");
    }
    if (weights.empty()) weights.assign(rows, 1.0);
    for (std::size_t g = 0; g < rows / group; ++g) {
      double total = 0.0;
      for (std::size_t t = 0; t < group; ++t) total += weights[g * group + t];
      for (std::size_t t = 0; t < group; ++t) {
        double& w = weights[g * group + t];
        w = total > 0.0 ? w / total : 1.0 / static_cast<double>(group);
      }
    }
    node.group = group;
    node.weights = std::move(weights);
    node.shape = {rows / group, cols};
    return push(std::move(node));
  }

  // Mean over all elements of (a - b)^2.
  Var mse_loss(Var a, Var b) {
    Node node = make(OpKind::MseLoss, {a, b});
    if (at(a).shape != at(b).shape) {
      fail(node, "operand shapes differ: " + shape_str(at(a).shape) + " vs " +
                     shape_str(at(b).shape));
    }
    node.shape = {1};
    return push(std::move(node));
  }

  // Mean over rows of -log softmax(logits)[target]; targets holds one class
  // id per row (stored as floats).
  Var softmax_cross_entropy(Var logits, Var targets) {
    Node node = make(OpKind::SoftmaxCrossEntropy, {logits, targets});
    const Shape& sl = at(logits).shape;
    const std::size_t rows = numel(sl) / sl.back();
    if (numel(at(targets).shape) != rows) {
      fail(node, "expected " + std::to_string(rows) + " targets, got " +
                     shape_str(at(targets).shape));
    }
    node.shape = {1};
    return push(std::move(node));
  }

  // Mean over all elements of the logistic loss, computed from logits.
  Var binary_cross_entropy(Var logits, Var targets) {
    Node node = make(OpKind::BinaryCrossEntropy, {logits, targets});
    if (numel(at(logits).shape) != numel(at(targets).shape)) {
      fail(node, "logits " + shape_str(at(logits).shape) + " vs targets " +
                     shape_str(at(targets).shape));
    }
    node.shape = {1};
    return push(std::move(node));
  }

  // Rank-2 concatenation along axis 0 (rows) or 1 (columns).
  Var concat(Var a, Var b, std::size_t axis) {
    Node node = make(OpKind::Concat, {a, b});
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa.size() != 2 || sb.size() != 2 || axis > 1 ||
        sa[1 - axis] != sb[1 - axis]) {
      fail(node, "cannot concatenate " + shape_str(sa) + " and " +
                     shape_str(sb) + " on axis " + std::to_string(axis));
    }
    node.axis = axis;
    node.shape = sa;
    node.shape[axis] += sb[axis];
    return push(std::move(node));
  }

  // Rank-2 half-open slice [begin, end) along axis 0 or 1.
  Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    Node node = make(OpKind::Slice, {a});
    const Shape& sa = at(a).shape;
    if (sa.size() != 2 || axis > 1 || begin >= end || end > sa[axis]) {
      fail(node, "invalid slice [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") of " + shape_str(sa) +
                     " on axis " + std::to_string(axis));
    }
    node.axis = axis;
    node.begin = begin;
    node.shape = sa;
    node.shape[axis] = end - begin;
    return push(std::move(node));
  }

  void name(Var v, const std::string& label) { nodes_.at(v.id).name = label; }
  void output(const std::string& label, Var v) { outputs_[label] = v.id; }

  // ---- evaluation ---------------------------------------------------------

  void bind(const std::string& name, const Tensor& value) {
    auto it = input_index_.find(name);
    if (it == input_index_.end()) {
      throw Error(ErrorKind::InvalidArgument, "unknown input '" + name + "'");
    }
    Node& node = nodes_[it->second];
    if (value.shape() != node.shape) {
      throw Error(ErrorKind::ShapeMismatch,
                  "input '" + name + "' expects " + shape_str(node.shape) +
                      ", got " + shape_str(value.shape()));
    }
    node.value.assign(value.data().begin(), value.data().end());
  }

  std::map<std::string, Tensor> forward(
      const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, value] : inputs) bind(name, value);
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& node = nodes_[id];
      if (node.op == OpKind::Input && node.value.size() != numel(node.shape)) {
        throw Error(ErrorKind::InvalidArgument,
                    "input '" + node.name + "' is not bound");
      }
      evaluate(node);
    }
    evaluated_ = true;
    std::map<std::string, Tensor> out;
    for (const auto& [label, id] : outputs_) out.emplace(label, value(Var{id}));
    return out;
  }

  // Gradients of the scalar `loss` w.r.t. every trainable parameter.
  std::map<std::string, Tensor> backward(Var loss) {
    const Node& ln = at(loss);
    if (numel(ln.shape) != 1) {
      throw Error(ErrorKind::ShapeMismatch,
                  "backward needs a scalar loss, node '" + ln.name +
                      "' has shape " + shape_str(ln.shape));
    }
    if (!evaluated_) {
      throw Error(ErrorKind::InvalidArgument, "backward before forward");
    }
    for (Node& node : nodes_) node.grad.clear();
    Node& root = nodes_[loss.id];
    if (root.needs_grad) root.grad.assign(1, Scalar(1));
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.needs_grad || node.grad.empty()) continue;
      propagate(node);
    }
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : param_index_) {
      const Node& node = nodes_[id];
      if (!node.trainable) continue;
      Tensor g(node.shape);
      if (!node.grad.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] = static_cast<float>(node.grad[i]);
        }
      }
      grads.emplace(name, std::move(g));
    }
    return grads;
  }

  // ---- accessors ----------------------------------------------------------

  Tensor value(Var v) const {
    const Node& node = at(v);
    std::vector<float> data(node.value.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = static_cast<float>(node.value[i]);
    }
    return Tensor(node.shape, std::move(data));
  }
  const Array& raw_value(Var v) const { return at(v).value; }
  Scalar scalar(Var v) const { return at(v).value.at(0); }
  const Shape& shape(Var v) const { return at(v).shape; }
  std::size_t zero_rows(Var v) const { return at(v).zero_rows; }

  std::optional<Var> find_parameter(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) return std::nullopt;
    return Var{it->second};
  }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : param_index_) out.push_back(name);
    return out;
  }
  bool is_trainable(const std::string& name) const {
    return nodes_.at(param_index_.at(name)).trainable;
  }
  Tensor parameter_value(const std::string& name) const {
    return value(Var{param_index_.at(name)});
  }
  void set_parameter(const std::string& name, const Tensor& value) {
    Node& node = nodes_.at(param_index_.at(name));
    if (value.shape() != node.shape) {
      throw Error(ErrorKind::ShapeMismatch,
                  "parameter '" + name + "' expects " + shape_str(node.shape));
    }
    node.value.assign(value.data().begin(), value.data().end());
    evaluated_ = false;
  }
  // Direct element access for finite-difference probing.
  Scalar& parameter_element(const std::string& name, std::size_t i) {
    evaluated_ = false;
    return nodes_.at(param_index_.at(name)).value.at(i);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(Var v) const { return at(v); }

  // Same graph with every stored value converted to another scalar type.
  template <class To>
  BasicGraph<To> cast() const {
    BasicGraph<To> out;
    out.param_index_ = param_index_;
    out.input_index_ = input_index_;
    out.outputs_ = outputs_;
    out.nodes_.reserve(nodes_.size());
    for (const Node& n : nodes_) {
      typename BasicGraph<To>::Node m;
      m.op = n.op;
      m.name = n.name;
      m.inputs = n.inputs;
      m.shape = n.shape;
      m.value.assign(n.value.begin(), n.value.end());
      m.trainable = n.trainable;
      m.needs_grad = n.needs_grad;
      m.transpose_b = n.transpose_b;
      m.batch = n.batch;
      m.axis = n.axis;
      m.begin = n.begin;
      m.group = n.group;
      m.factor = n.factor;
      m.weights = n.weights;
      out.nodes_.push_back(std::move(m));
    }
    return out;
  }

 private:
  template <class>
  friend class BasicGraph;

  const Node& at(Var v) const {
    if (v.id >= nodes_.size()) {
      throw Error(ErrorKind::InvalidArgument, "unknown node id");
    }
    return nodes_[v.id];
  }

  Node make(OpKind op, std::initializer_list<Var> ins) {
    Node node;
    node.op = op;
    node.name = std::string(to_string(op)) + "#" + std::to_string(nodes_.size());
    for (Var v : ins) {
      at(v);
      node.inputs.push_back(v.id);
      node.needs_grad = node.needs_grad || nodes_[v.id].needs_grad;
    }
    return node;
  }

  [[noreturn]] void fail(const Node& node, const std::string& msg) const {
    throw Error(ErrorKind::ShapeMismatch,
                "node '" + node.name + "' (" + to_string(node.op) + "): " + msg);
  }

  Var unary(OpKind op, Var a) {
    Node node = make(op, {a});
    node.shape = at(a).shape;
    return push(std::move(node));
  }

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    return Var{nodes_.size() - 1};
  }

  static std::size_t cols_of(const Node& n) { return n.shape.back(); }
  static std::size_t rows_of(const Node& n) {
    return numel(n.shape) / n.shape.back();
  }

  Array& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), Scalar(0));
    return n.grad;
  }

  // ---- forward kernels ----------------------------------------------------

  void evaluate(Node& node) {
    switch (node.op) {
      case OpKind::Parameter:
      case OpKind::Input:
        return;
      case OpKind::MatMul: return fwd_matmul(node);
      case OpKind::Add: return fwd_add(node);
      case OpKind::Scale: {
        const Array& x = nodes_[node.inputs[0]].value;
        node.value.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
          node.value[i] = static_cast<Scalar>(node.factor * x[i]);
        }
        return;
      }
      case OpKind::Gelu:
      case OpKind::Tanh:
      case OpKind::Sigmoid: {
        const Array& x = nodes_[node.inputs[0]].value;
        node.value.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double v = x[i];
          const double y = node.op == OpKind::Gelu   ? kernels::gelu(v)
                           : node.op == OpKind::Tanh ? std::tanh(v)
                                                     : kernels::sigmoid(v);
          node.value[i] = static_cast<Scalar>(y);
        }
        return;
      }
      case OpKind::LayerNorm: return fwd_layer_norm(node);
      case OpKind::MeanPool: return fwd_mean_pool(node);
      case OpKind::Softmax: return fwd_softmax(node);
      case OpKind::L2Normalize: return fwd_l2(node);
      case OpKind::MseLoss: {
        const Array& a = nodes_[node.inputs[0]].value;
        const Array& b = nodes_[node.inputs[1]].value;
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double d = static_cast<double>(a[i]) - b[i];
          acc += d * d;
        }
        node.value.assign(1, static_cast<Scalar>(acc / a.size()));
        return;
      }
      case OpKind::SoftmaxCrossEntropy: return fwd_softmax_ce(node);
      case OpKind::BinaryCrossEntropy: {
        const Array& z = nodes_[node.inputs[0]].value;
        const Array& y = nodes_[node.inputs[1]].value;
        double acc = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double zi = z[i];
          acc += kernels::softplus(zi) - zi * static_cast<double>(y[i]);
        }
        node.value.assign(1, static_cast<Scalar>(acc / z.size()));
        return;
      }
      case OpKind::Concat: return fwd_concat(node);
      case OpKind::Slice: return fwd_slice(node);
    }
  }

  void fwd_matmul(Node& node) {
    const Node& a = nodes_[node.inputs[0]];
    const Node& b = nodes_[node.inputs[1]];
    const std::size_t batch = node.batch;
    const std::size_t m = a.shape[0] / batch;
    const std::size_t k = a.shape[1];
    const std::size_t n = node.shape[1];
    node.value.resize(numel(node.shape));
    Array bt;
    for (std::size_t blk = 0; blk < batch; ++blk) {
      const Scalar* bp = b.value.data() + blk * k * n;
      if (node.transpose_b) {
        bt.resize(k * n);
        kernels::transpose(n, k, bp, bt.data());
        bp = bt.data();
      }
      kernels::gemm(m, n, k, a.value.data() + blk * m * k, bp,
                    node.value.data() + blk * m * n, false);
    }
  }

  void fwd_add(Node& node) {
    const Array& a = nodes_[node.inputs[0]].value;
    const Array& b = nodes_[node.inputs[1]].value;
    node.value.resize(a.size());
    const std::size_t nb = b.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
      node.value[i] = static_cast<Scalar>(static_cast<double>(a[i]) + b[i % nb]);
    }
  }

  void fwd_layer_norm(Node& node) {
    const Node& xn = nodes_[node.inputs[0]];
    const Array& gamma = nodes_[node.inputs[1]].value;
    const Array& beta = nodes_[node.inputs[2]].value;
    const std::size_t cols = cols_of(xn), rows = rows_of(xn);
    node.value.resize(xn.value.size());
    node.saved.resize(rows);  // inverse standard deviation per row
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* x = xn.value.data() + r * cols;
      double mean = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mean += x[c];
      mean /= static_cast<double>(cols);
      double var = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double d = x[c] - mean;
        var += d * d;
      }
      var /= static_cast<double>(cols);
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      node.saved[r] = static_cast<Scalar>(inv);
      Scalar* y = node.value.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        y[c] = static_cast<Scalar>((x[c] - mean) * inv * gamma[c] + beta[c]);
      }
    }
  }

  void fwd_mean_pool(Node& node) {
    const Node& xn = nodes_[node.inputs[0]];
    const std::size_t cols = cols_of(xn), groups = node.shape[0];
    node.value.resize(groups * cols);
    std::vector<double> acc(cols);
    for (std::size_t g = 0; g < groups; ++g) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t t = 0; t < node.group; ++t) {
        const std::size_t r = g * node.group + t;
        const double w = node.weights[r];
        if (w == 0.0) continue;
        const Scalar* x = xn.value.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc[c] += w * x[c];
      }
      for (std::size_t c = 0; c < cols; ++c) {
        node.value[g * cols + c] = static_cast<Scalar>(acc[c]);
      }
    }
  }

  void fwd_softmax(Node& node) {
    const Node& xn = nodes_[node.inputs[0]];
    const std::size_t cols = cols_of(xn), rows = rows_of(xn);
    node.value.resize(xn.value.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* x = xn.value.data() + r * cols;
      Scalar* y = node.value.data() + r * cols;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, double(x[c]));
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - mx);
      for (std::size_t c = 0; c < cols; ++c) {
        y[c] = static_cast<Scalar>(std::exp(x[c] - mx) / total);
      }
    }
  }

  void fwd_l2(Node& node) {
    const Node& xn = nodes_[node.inputs[0]];
    const std::size_t cols = cols_of(xn), rows = rows_of(xn);
    node.value.resize(xn.value.size());
    node.saved.resize(rows);  // row norms
    node.zero_rows = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* x = xn.value.data() + r * cols;
      Scalar* y = node.value.data() + r * cols;
      double sq = 0.0;
      for (std::size_t c = 0; c < cols; ++c) sq += double(x[c]) * x[c];
      const double norm = std::sqrt(sq);
      node.saved[r] = static_cast<Scalar>(norm);
      if (norm == 0.0) {
        ++node.zero_rows;
        for (std::size_t c = 0; c < cols; ++c) y[c] = Scalar(0);
        continue;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        y[c] = static_cast<Scalar>(x[c] / norm);
      }
    }
  }

  void fwd_softmax_ce(Node& node) {
    const Node& zn = nodes_[node.inputs[0]];
    const Array& targets = nodes_[node.inputs[1]].value;
    const std::size_t cols = cols_of(zn), rows = rows_of(zn);
    node.saved.resize(zn.value.size());  // softmax probabilities
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* z = zn.value.data() + r * cols;
      const auto t = static_cast<std::size_t>(targets[r]);
      if (t >= cols || static_cast<Scalar>(t) != targets[r]) {
        throw Error(ErrorKind::InvalidArgument,
                    "node '" + node.name + "': target out of range");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, double(z[c]));
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += std::exp(z[c] - mx);
      const double lse = mx + std::log(total);
      loss += lse - z[t];
      for (std::size_t c = 0; c < cols; ++c) {
        node.saved[r * cols + c] = static_cast<Scalar>(std::exp(z[c] - lse));
      }
    }
    node.value.assign(1, static_cast<Scalar>(loss / rows));
  }

  void fwd_concat(Node& node) {
    const Node& a = nodes_[node.inputs[0]];
    const Node& b = nodes_[node.inputs[1]];
    node.value.resize(numel(node.shape));
    if (node.axis == 0) {
      std::copy(a.value.begin(), a.value.end(), node.value.begin());
      std::copy(b.value.begin(), b.value.end(),
                node.value.begin() + static_cast<std::ptrdiff_t>(a.value.size()));
      return;
    }
    const std::size_t ca = a.shape[1], cb = b.shape[1], rows = a.shape[0];
    for (std::size_t r = 0; r < rows; ++r) {
      Scalar* out = node.value.data() + r * (ca + cb);
      std::copy_n(a.value.data() + r * ca, ca, out);
      std::copy_n(b.value.data() + r * cb, cb, out + ca);
    }
  }

  void fwd_slice(Node& node) {
    const Node& a = nodes_[node.inputs[0]];
    node.value.resize(numel(node.shape));
    const std::size_t ca = a.shape[1];
    const std::size_t rows = node.shape[0], cols = node.shape[1];
    const std::size_t r0 = node.axis == 0 ? node.begin : 0;
    const std::size_t c0 = node.axis == 1 ? node.begin : 0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(a.value.data() + (r + r0) * ca + c0, cols,
                  node.value.data() + r * cols);
    }
  }

  // ---- backward kernels ---------------------------------------------------

  void propagate(Node& node) {
    const Array& dy = node.grad;
    switch (node.op) {
      case OpKind::Parameter:
      case OpKind::Input:
        return;
      case OpKind::MatMul: return bwd_matmul(node);
      case OpKind::Add: {
        const std::size_t ia = node.inputs[0], ib = node.inputs[1];
        if (nodes_[ia].needs_grad) {
          Array& da = grad_of(ia);
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (nodes_[ib].needs_grad) {
          Array& db = grad_of(ib);
          const std::size_t nb = db.size();
          std::vector<double> acc(nb, 0.0);
          for (std::size_t i = 0; i < dy.size(); ++i) acc[i % nb] += dy[i];
          for (std::size_t i = 0; i < nb; ++i) {
            db[i] = static_cast<Scalar>(db[i] + acc[i]);
          }
        }
        return;
      }
      case OpKind::Scale: {
        Array& dx = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          dx[i] = static_cast<Scalar>(dx[i] + node.factor * dy[i]);
        }
        return;
      }
      case OpKind::Gelu: {
        const Array& x = nodes_[node.inputs[0]].value;
        Array& dx = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          dx[i] = static_cast<Scalar>(dx[i] + dy[i] * kernels::gelu_grad(x[i]));
        }
        return;
      }
      case OpKind::Tanh: {
        Array& dx = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          const double y = node.value[i];
          dx[i] = static_cast<Scalar>(dx[i] + dy[i] * (1.0 - y * y));
        }
        return;
      }
      case OpKind::Sigmoid: {
        Array& dx = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          const double y = node.value[i];
          dx[i] = static_cast<Scalar>(dx[i] + dy[i] * y * (1.0 - y));
        }
        return;
      }
      case OpKind::LayerNorm: return bwd_layer_norm(node);
      case OpKind::MeanPool: {
        Array& dx = grad_of(node.inputs[0]);
        const std::size_t cols = node.shape[1];
        for (std::size_t r = 0; r < node.weights.size(); ++r) {
          const double w = node.weights[r];
          if (w == 0.0) continue;
          const Scalar* g = dy.data() + (r / node.group) * cols;
          Scalar* d = dx.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            d[c] = static_cast<Scalar>(d[c] + w * g[c]);
          }
        }
        return;
      }
      case OpKind::Softmax: {
        Array& dx = grad_of(node.inputs[0]);
        const std::size_t cols = cols_of(node), rows = rows_of(node);
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* y = node.value.data() + r * cols;
          const Scalar* g = dy.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += double(y[c]) * g[c];
          Scalar* d = dx.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            d[c] = static_cast<Scalar>(d[c] + y[c] * (g[c] - dot));
          }
        }
        return;
      }
      case OpKind::L2Normalize: {
        Array& dx = grad_of(node.inputs[0]);
        const std::size_t cols = cols_of(node), rows = rows_of(node);
        for (std::size_t r = 0; r < rows; ++r) {
          const double norm = node.saved[r];
          if (norm == 0.0) continue;
          const Scalar* y = node.value.data() + r * cols;
          const Scalar* g = dy.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += double(y[c]) * g[c];
          Scalar* d = dx.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            d[c] = static_cast<Scalar>(d[c] + (g[c] - y[c] * dot) / norm);
          }
        }
        return;
      }
      case OpKind::MseLoss: {
        const Array& a = nodes_[node.inputs[0]].value;
        const Array& b = nodes_[node.inputs[1]].value;
        const double s = 2.0 * dy[0] / static_cast<double>(a.size());
        const bool ga = nodes_[node.inputs[0]].needs_grad;
        const bool gb = nodes_[node.inputs[1]].needs_grad;
        if (ga) {
          Array& da = grad_of(node.inputs[0]);
          for (std::size_t i = 0; i < a.size(); ++i) {
            da[i] = static_cast<Scalar>(da[i] + s * (double(a[i]) - b[i]));
          }
        }
        if (gb) {
          Array& db = grad_of(node.inputs[1]);
          for (std::size_t i = 0; i < a.size(); ++i) {
            db[i] = static_cast<Scalar>(db[i] - s * (double(a[i]) - b[i]));
          }
        }
        return;
      }
      case OpKind::SoftmaxCrossEntropy: {
        const Node& zn = nodes_[node.inputs[0]];
        const Array& targets = nodes_[node.inputs[1]].value;
        Array& dz = grad_of(node.inputs[0]);
        const std::size_t cols = cols_of(zn), rows = rows_of(zn);
        const double s = dy[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto t = static_cast<std::size_t>(targets[r]);
          for (std::size_t c = 0; c < cols; ++c) {
            const double p = node.saved[r * cols + c];
            const double g = (p - (c == t ? 1.0 : 0.0)) * s;
            dz[r * cols + c] = static_cast<Scalar>(dz[r * cols + c] + g);
          }
        }
        return;
      }
      case OpKind::BinaryCrossEntropy: {
        const Array& z = nodes_[node.inputs[0]].value;
        const Array& y = nodes_[node.inputs[1]].value;
        Array& dz = grad_of(node.inputs[0]);
        const double s = dy[0] / static_cast<double>(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double g = (kernels::sigmoid(z[i]) - double(y[i])) * s;
          dz[i] = static_cast<Scalar>(dz[i] + g);
        }
        return;
      }
      case OpKind::Concat: {
        const Node& a = nodes_[node.inputs[0]];
        const Node& b = nodes_[node.inputs[1]];
        const std::size_t ca = a.shape[1], cb = b.shape[1];
        const std::size_t width = node.shape[1];
        for (std::size_t r = 0; r < node.shape[0]; ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            const Scalar g = dy[r * width + c];
            bool to_a;
            std::size_t idx;
            if (node.axis == 0) {
              to_a = r < a.shape[0];
              idx = to_a ? r * ca + c : (r - a.shape[0]) * cb + c;
            } else {
              to_a = c < ca;
              idx = to_a ? r * ca + c : r * cb + (c - ca);
            }
            const std::size_t target = to_a ? node.inputs[0] : node.inputs[1];
            if (!nodes_[target].needs_grad) continue;
            Array& d = grad_of(target);
            d[idx] += g;
          }
        }
        return;
      }
      case OpKind::Slice: {
        const Node& a = nodes_[node.inputs[0]];
        Array& dx = grad_of(node.inputs[0]);
        const std::size_t ca = a.shape[1];
        const std::size_t rows = node.shape[0], cols = node.shape[1];
        const std::size_t r0 = node.axis == 0 ? node.begin : 0;
        const std::size_t c0 = node.axis == 1 ? node.begin : 0;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            dx[(r + r0) * ca + c0 + c] += dy[r * cols + c];
          }
        }
        return;
      }
    }
  }

  void bwd_matmul(Node& node) {
    const Node& a = nodes_[node.inputs[0]];
    const Node& b = nodes_[node.inputs[1]];
    const std::size_t batch = node.batch;
    const std::size_t m = a.shape[0] / batch;
    const std::size_t k = a.shape[1];
    const std::size_t n = node.shape[1];
    const bool ga = a.needs_grad, gb = b.needs_grad;
    const std::size_t ia = node.inputs[0], ib = node.inputs[1];
    Array tmp;
    for (std::size_t blk = 0; blk < batch; ++blk) {
      const Scalar* av = a.value.data() + blk * m * k;
      const Scalar* bv = b.value.data() + blk * k * n;
      const Scalar* g = node.grad.data() + blk * m * n;
      if (ga) {
        // dA[m,k] = dC[m,n] * B^T; with transpose_b, B is stored as [n,k].
        Scalar* da = grad_of(ia).data() + blk * m * k;
        if (node.transpose_b) {
          kernels::gemm(m, k, n, g, bv, da, true);
        } else {
          tmp.resize(k * n);
          kernels::transpose(k, n, bv, tmp.data());
          kernels::gemm(m, k, n, g, tmp.data(), da, true);
        }
      }
      if (gb) {
        Scalar* db = grad_of(ib).data() + blk * k * n;
        if (node.transpose_b) {
          // dB[n,k] = dC^T[n,m] * A[m,k]
          tmp.resize(m * n);
          kernels::transpose(m, n, g, tmp.data());
          kernels::gemm(n, k, m, tmp.data(), av, db, true);
        } else {
          // dB[k,n] = A^T[k,m] * dC[m,n]
          tmp.resize(m * k);
          kernels::transpose(m, k, av, tmp.data());
          kernels::gemm(k, n, m, tmp.data(), g, db, true);
        }
      }
    }
  }

  void bwd_layer_norm(Node& node) {
    const Node& xn = nodes_[node.inputs[0]];
    const Array& gamma = nodes_[node.inputs[1]].value;
    const std::size_t cols = cols_of(xn), rows = rows_of(xn);
    const bool gx = xn.needs_grad;
    const bool gg = nodes_[node.inputs[1]].needs_grad;
    const bool gbeta = nodes_[node.inputs[2]].needs_grad;
    std::vector<double> dgamma(cols, 0.0), dbeta(cols, 0.0);
    std::vector<double> xhat(cols), dxhat(cols);
    Array* dx = gx ? &grad_of(node.inputs[0]) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double inv = node.saved[r];
      const Scalar* g = node.grad.data() + r * cols;
      const Scalar* x = xn.value.data() + r * cols;
      double mean = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mean += x[c];
      mean /= static_cast<double>(cols);
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[c] = (x[c] - mean) * inv;
        dxhat[c] = double(g[c]) * gamma[c];
        dgamma[c] += double(g[c]) * xhat[c];
        dbeta[c] += g[c];
        sum_d += dxhat[c];
        sum_dx += dxhat[c] * xhat[c];
      }
      if (dx) {
        Scalar* d = dx->data() + r * cols;
        const double nc = static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = inv * (dxhat[c] - sum_d / nc - xhat[c] * sum_dx / nc);
          d[c] = static_cast<Scalar>(d[c] + v);
        }
      }
    }
    if (gg) {
      Array& d = grad_of(node.inputs[1]);
      for (std::size_t c = 0; c < cols; ++c) {
        d[c] = static_cast<Scalar>(d[c] + dgamma[c]);
      }
    }
    if (gbeta) {
      Array& d = grad_of(node.inputs[2]);
      for (std::size_t c = 0; c < cols; ++c) {
        d[c] = static_cast<Scalar>(d[c] + dbeta[c]);
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_index_;
  std::map<std::string, std::size_t> input_index_;
  std::map<std::string, std::size_t> outputs_;
  bool evaluated_ = false;
};

using Graph = BasicGraph<float>;

// Largest relative disagreement between the analytic gradient of `loss`
// w.r.t. `leaf` and a central difference with step `epsilon`. Both sides
// are taken on a double-precision copy of the graph so float rounding does
// not swamp small gradient entries. Inputs must already be bound.
inline double grad_check(Graph& graph, Var loss, const std::string& leaf,
                         double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) {
    throw Error(ErrorKind::InvalidArgument, "epsilon must lie in (0, 1e-2]");
  }
  if (!graph.find_parameter(leaf) || !graph.is_trainable(leaf)) {
    throw Error(ErrorKind::InvalidArgument,
                "grad_check leaf '" + leaf + "' is not a trainable parameter");
  }
  BasicGraph<double> probe = graph.cast<double>();
  probe.forward();
  const Tensor analytic = probe.backward(loss).at(leaf);
  double worst = 0.0;
  auto at = [&](std::size_t i, double value) {
    probe.parameter_element(leaf, i) = value;
    probe.forward();
    return static_cast<double>(probe.scalar(loss));
  };
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double saved = probe.parameter_element(leaf, i);
    const double h = epsilon;
    // Five-point stencil: truncation error O(h^4) rather than O(h^2).
    const double numeric = (8.0 * (at(i, saved + h) - at(i, saved - h)) -
                            (at(i, saved + 2 * h) - at(i, saved - 2 * h))) /
                           (12.0 * h);
    probe.parameter_element(leaf, i) = saved;
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace mpatch
