#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace wsikit::ad {

using Shape = std::vector<std::size_t>;

// Shape or argument mismatch detected before any computation runs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A primitive produced NaN/Inf, or was fed a value outside its domain.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// backward() misuse: non-scalar root, or a root this tape never produced.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value iff requires_grad
  bool requires_grad = false;
};

struct OpAccess;

}  // namespace detail

std::size_t shape_size(const Shape& shape);

// Dense row-major f64 tensor. Handles share the underlying node, so a
// parameter tensor can participate in many forward passes while the
// optimizer updates it in place through values_mut().
class Tensor {
 public:
  Tensor() = default;

  // All factories reject non-finite values.
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;
  bool requires_grad() const;

  double item() const;                // requires size() == 1
  double at(std::size_t flat) const;  // bounds-checked flat read
  std::span<const double> values() const;
  std::span<double> values_mut();

  // d(root)/d(this) after Tape::backward; zeros until then.
  std::span<const double> grad() const;
  void zero_grad();

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  detail::TensorNode& node() const;

  std::shared_ptr<detail::TensorNode> node_;
  friend struct detail::OpAccess;
};

// Record of one forward pass. Ops append in execution order, which is a
// topological order by construction; backward replays the records reversed,
// visiting each exactly once. Rebuilt per forward pass, never shared
// between threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  std::size_t op_count() const { return records_.size(); }

  // Reverse-mode accumulation from a scalar this tape produced. Grad
  // buffers of every participating requires_grad tensor are reset first,
  // so each call yields plain d(output)/d(tensor).
  void backward(const Tensor& output);

 private:
  struct Record {
    const char* name;
    std::shared_ptr<detail::TensorNode> output;
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::function<void()> pull;  // adds output grad into input grads
  };
  std::vector<Record> records_;
  friend struct detail::OpAccess;
};

struct TopK {
  Tensor values;                     // sorted: descending (max_k) / ascending (min_k)
  std::vector<std::size_t> indices;  // source position of each output slot
};

// Primitives. Results are recorded on the tape only when some input
// requires grad; inputs must all be finite and outputs are checked, so a
// NaN/Inf is reported at the op that created it.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

// add/sub/mul accept equal shapes or a scalar (size-1) on either side.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);

// matrix [m x n] + row [n], broadcast over rows.
Tensor add_rowvec(Tape& tape, const Tensor& matrix, const Tensor& row);

Tensor relu(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor abs(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);  // requires strictly positive input
Tensor clamp_min(Tape& tape, const Tensor& x, double floor);

// 1-D, max-subtracted for overflow safety; output sums to 1.
Tensor softmax(Tape& tape, const Tensor& x);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// k largest / smallest entries of a 1-D tensor. Ties resolve to the lowest
// input index; backward routes gradient only to the selected positions.
TopK max_k(Tape& tape, const Tensor& x, std::size_t k);
TopK min_k(Tape& tape, const Tensor& x, std::size_t k);

Tensor select(Tape& tape, const Tensor& x, std::size_t flat_index);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor concat(Tape& tape, std::span<const Tensor> parts);  // 1-D parts

}  // namespace wsikit::ad
