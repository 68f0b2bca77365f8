#include "wsikit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>

namespace wsikit::ad {

namespace detail {

using NodePtr = std::shared_ptr<TensorNode>;

// Single gateway for op implementations into Tensor/Tape internals.
struct OpAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }

  static Tensor wrap(NodePtr node) { return Tensor(std::move(node)); }

  static void push(Tape& tape, const char* name, NodePtr output, std::vector<NodePtr> inputs,
                   std::function<void()> pull) {
    tape.records_.push_back({name, std::move(output), std::move(inputs), std::move(pull)});
  }

  static const std::vector<Tape::Record>& records(const Tape& tape) { return tape.records_; }
};

}  // namespace detail

namespace {

using detail::NodePtr;
using detail::OpAccess;
using detail::TensorNode;

void ensure_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

NodePtr make_node(Shape shape, std::vector<double> value, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return node;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor operand");
}

void require_1d(const Tensor& t, const char* op) {
  if (t.shape().size() != 1) {
    throw ShapeError(std::string(op) + ": expected a 1-D tensor");
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor");
  }
}

// Finalizes an op: builds the output node and records the pull closure when
// gradients are needed. `pull` receives the output node.
Tensor finish_op(Tape& tape, const char* name, Shape shape, std::vector<double> value,
                 std::vector<NodePtr> inputs, const std::function<void(const NodePtr&)>& pull) {
  ensure_finite(value, name);
  bool requires_grad = false;
  for (const auto& in : inputs) requires_grad = requires_grad || in->requires_grad;
  auto out = make_node(std::move(shape), std::move(value), requires_grad);
  if (requires_grad) {
    OpAccess::push(tape, name, out, std::move(inputs), [out, pull] { pull(out); });
  }
  return OpAccess::wrap(out);
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b, BinKind kind,
                          const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(b);
  const bool a_scalar = an->value.size() == 1;
  const bool b_scalar = bn->value.size() == 1;
  if (!a_scalar && !b_scalar && an->shape != bn->shape) {
    throw ShapeError(std::string(name) + ": shapes must match or one side must be a scalar");
  }

  const auto& big = (a_scalar && !b_scalar) ? bn : an;
  const std::size_t n = big->value.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = an->value[a_scalar ? 0 : i];
    const double y = bn->value[b_scalar ? 0 : i];
    switch (kind) {
      case BinKind::Add: out[i] = x + y; break;
      case BinKind::Sub: out[i] = x - y; break;
      case BinKind::Mul: out[i] = x * y; break;
    }
  }

  auto pull = [an, bn, a_scalar, b_scalar, kind](const NodePtr& o) {
    const std::size_t n = o->value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = o->grad[i];
      if (an->requires_grad) {
        const double d = kind == BinKind::Mul ? bn->value[b_scalar ? 0 : i] : 1.0;
        an->grad[a_scalar ? 0 : i] += g * d;
      }
      if (bn->requires_grad) {
        double d;
        switch (kind) {
          case BinKind::Add: d = 1.0; break;
          case BinKind::Sub: d = -1.0; break;
          case BinKind::Mul: d = an->value[a_scalar ? 0 : i]; break;
          default: d = 0.0; break;
        }
        bn->grad[b_scalar ? 0 : i] += g * d;
      }
    }
  };
  return finish_op(tape, name, big->shape, std::move(out), {an, bn}, pull);
}

Tensor unary_elementwise(Tape& tape, const Tensor& x, const char* name,
                         const std::function<double(double)>& fwd,
                         const std::function<double(double, double)>& dval_from_x_y) {
  require_defined(x, name);
  const auto& xn = OpAccess::node(x);
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xn->value[i]);

  auto pull = [xn, dval_from_x_y](const NodePtr& o) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < o->value.size(); ++i) {
      xn->grad[i] += o->grad[i] * dval_from_x_y(xn->value[i], o->value[i]);
    }
  };
  return finish_op(tape, name, xn->shape, std::move(out), {xn}, pull);
}

TopK top_k_impl(Tape& tape, const Tensor& x, std::size_t k, bool largest, const char* name) {
  require_defined(x, name);
  require_1d(x, name);
  const auto& xn = OpAccess::node(x);
  const std::size_t n = xn->value.size();
  if (k > n) {
    throw ShapeError(std::string(name) + ": k exceeds input length");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto cmp = [&](std::size_t i, std::size_t j) {
    const double vi = xn->value[i];
    const double vj = xn->value[j];
    if (vi != vj) return largest ? vi > vj : vi < vj;
    return i < j;  // ties: lowest input index first
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    cmp);
  order.resize(k);

  std::vector<double> out(k);
  for (std::size_t t = 0; t < k; ++t) out[t] = xn->value[order[t]];

  auto indices = order;
  auto pull = [xn, indices](const NodePtr& o) {
    if (!xn->requires_grad) return;
    for (std::size_t t = 0; t < indices.size(); ++t) {
      xn->grad[indices[t]] += o->grad[t];
    }
  };
  Tensor values = finish_op(tape, name, Shape{k}, std::move(out), {xn}, pull);
  return TopK{std::move(values), std::move(order)};
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("Tensor::from: value count does not match the shape");
  }
  ensure_finite(values, "Tensor::from");
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> values(shape_size(shape), 0.0);
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  if (!std::isfinite(fill)) throw NumericError("Tensor::full: non-finite fill value");
  std::vector<double> values(shape_size(shape), fill);
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full(Shape{1}, value, requires_grad);
}

detail::TensorNode& Tensor::node() const {
  if (!node_) throw ShapeError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::size() const { return node().value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = node().shape;
  if (axis >= s.size()) throw ShapeError("Tensor::dim: axis out of range");
  return s[axis];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("Tensor::item: tensor is not a scalar");
  return node().value[0];
}

double Tensor::at(std::size_t flat) const {
  const auto& v = node().value;
  if (flat >= v.size()) throw ShapeError("Tensor::at: index out of range");
  return v[flat];
}

std::span<const double> Tensor::values() const { return node().value; }

std::span<double> Tensor::values_mut() { return node().value; }

std::span<const double> Tensor::grad() const {
  auto& n = node();
  if (!n.requires_grad) {
    throw TapeError("Tensor::grad: tensor does not require gradients");
  }
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  if (n.requires_grad) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& output) {
  if (!output.defined()) throw TapeError("backward: undefined output tensor");
  if (output.size() != 1) throw TapeError("backward: output must be a scalar");

  const auto& out_node = detail::OpAccess::node(output);
  bool produced_here = false;
  for (const auto& rec : records_) {
    if (rec.output == out_node) {
      produced_here = true;
      break;
    }
  }
  if (!produced_here) throw TapeError("backward: output tensor is not on this tape");

  // Reset every participating grad buffer, so non-ancestors end at zero.
  std::unordered_set<TensorNode*> seen;
  auto reset = [&seen](const NodePtr& n) {
    if (n->requires_grad && seen.insert(n.get()).second) {
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
  };
  for (const auto& rec : records_) {
    reset(rec.output);
    for (const auto& in : rec.inputs) reset(in);
  }

  out_node->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->pull();
  }
}

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(b);
  const std::size_t m = an->shape[0];
  const std::size_t k = an->shape[1];
  const std::size_t n = bn->shape[1];
  if (bn->shape[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree");
  }

  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = an->value[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bn->value.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }

  auto pull = [an, bn, m, k, n](const NodePtr& o) {
    if (an->requires_grad) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = o->grad.data() + i * n;
          const double* brow = bn->value.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          an->grad[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = o->grad.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an->value[i * k + p];
          if (aip == 0.0) continue;
          double* brow = bn->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  };
  return finish_op(tape, "matmul", Shape{m, n}, std::move(out), {an, bn}, pull);
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, a, b, BinKind::Add, "add");
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, a, b, BinKind::Sub, "sub");
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, a, b, BinKind::Mul, "mul");
}

Tensor add_rowvec(Tape& tape, const Tensor& matrix, const Tensor& row) {
  require_defined(matrix, "add_rowvec");
  require_defined(row, "add_rowvec");
  require_2d(matrix, "add_rowvec");
  require_1d(row, "add_rowvec");
  const auto& an = OpAccess::node(matrix);
  const auto& bn = OpAccess::node(row);
  const std::size_t m = an->shape[0];
  const std::size_t n = an->shape[1];
  if (bn->shape[0] != n) {
    throw ShapeError("add_rowvec: row length does not match matrix columns");
  }

  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = an->value[i * n + j] + bn->value[j];
  }

  auto pull = [an, bn, m, n](const NodePtr& o) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double g = o->grad[i * n + j];
        if (an->requires_grad) an->grad[i * n + j] += g;
        if (bn->requires_grad) bn->grad[j] += g;
      }
    }
  };
  return finish_op(tape, "add_rowvec", an->shape, std::move(out), {an, bn}, pull);
}

Tensor relu(Tape& tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });  // subgradient 0 at 0
}

Tensor tanh(Tape& tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  auto fwd = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary_elementwise(tape, x, "sigmoid", fwd,
                           [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(Tape& tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor log(Tape& tape, const Tensor& x) {
  require_defined(x, "log");
  for (double v : OpAccess::node(x)->value) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  return unary_elementwise(
      tape, x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor clamp_min(Tape& tape, const Tensor& x, double floor) {
  return unary_elementwise(
      tape, x, "clamp_min", [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor softmax(Tape& tape, const Tensor& x) {
  require_defined(x, "softmax");
  require_1d(x, "softmax");
  const auto& xn = OpAccess::node(x);
  const std::size_t n = xn->value.size();
  if (n == 0) throw ShapeError("softmax: empty input");

  const double hi = *std::max_element(xn->value.begin(), xn->value.end());
  std::vector<double> out(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(xn->value[i] - hi);
    total += out[i];
  }
  for (double& v : out) v /= total;

  auto pull = [xn](const NodePtr& o) {
    if (!xn->requires_grad) return;
    const std::size_t n = o->value.size();
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += o->grad[i] * o->value[i];
    for (std::size_t i = 0; i < n; ++i) {
      xn->grad[i] += o->value[i] * (o->grad[i] - dot);
    }
  };
  return finish_op(tape, "softmax", xn->shape, std::move(out), {xn}, pull);
}

Tensor sum(Tape& tape, const Tensor& x) {
  require_defined(x, "sum");
  const auto& xn = OpAccess::node(x);
  double total = 0.0;
  for (double v : xn->value) total += v;

  auto pull = [xn](const NodePtr& o) {
    if (!xn->requires_grad) return;
    const double g = o->grad[0];
    for (double& gv : xn->grad) gv += g;
  };
  return finish_op(tape, "sum", Shape{1}, {total}, {xn}, pull);
}

Tensor mean(Tape& tape, const Tensor& x) {
  require_defined(x, "mean");
  const auto& xn = OpAccess::node(x);
  const std::size_t n = xn->value.size();
  if (n == 0) throw ShapeError("mean: empty input");
  double total = 0.0;
  for (double v : xn->value) total += v;

  auto pull = [xn, n](const NodePtr& o) {
    if (!xn->requires_grad) return;
    const double g = o->grad[0] / static_cast<double>(n);
    for (double& gv : xn->grad) gv += g;
  };
  return finish_op(tape, "mean", Shape{1}, {total / static_cast<double>(n)}, {xn}, pull);
}

TopK max_k(Tape& tape, const Tensor& x, std::size_t k) {
  return top_k_impl(tape, x, k, /*largest=*/true, "max_k");
}

TopK min_k(Tape& tape, const Tensor& x, std::size_t k) {
  return top_k_impl(tape, x, k, /*largest=*/false, "min_k");
}

Tensor select(Tape& tape, const Tensor& x, std::size_t flat_index) {
  require_defined(x, "select");
  const auto& xn = OpAccess::node(x);
  if (flat_index >= xn->value.size()) {
    throw ShapeError("select: index out of range");
  }

  auto pull = [xn, flat_index](const NodePtr& o) {
    if (!xn->requires_grad) return;
    xn->grad[flat_index] += o->grad[0];
  };
  return finish_op(tape, "select", Shape{1}, {xn->value[flat_index]}, {xn}, pull);
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  const auto& xn = OpAccess::node(x);
  if (shape_size(shape) != xn->value.size()) {
    throw ShapeError("reshape: element count must be preserved");
  }

  auto pull = [xn](const NodePtr& o) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
  };
  std::vector<double> out = xn->value;
  return finish_op(tape, "reshape", std::move(shape), std::move(out), {xn}, pull);
}

Tensor concat(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat");
    require_1d(p, "concat");
    nodes.push_back(OpAccess::node(p));
    total += nodes.back()->value.size();
  }

  std::vector<double> out;
  out.reserve(total);
  for (const auto& n : nodes) out.insert(out.end(), n->value.begin(), n->value.end());

  auto pull = [nodes](const NodePtr& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        for (std::size_t i = 0; i < n->value.size(); ++i) n->grad[i] += o->grad[offset + i];
      }
      offset += n->value.size();
    }
  };
  return finish_op(tape, "concat", Shape{total}, std::move(out), std::move(nodes), pull);
}

}  // namespace wsikit::ad
