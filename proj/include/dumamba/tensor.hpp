#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dumamba/error.hpp"
#include "dumamba/scalar.hpp"

DUMAMBA_BEGIN_NAMESPACE

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Row-major strides, in elements.
std::vector<Index> row_major_strides(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl;
struct Access;
}  // namespace detail

/// Dense row-major tensor with optional participation in a gradient tape.
///
/// Copies are shallow: two `Tensor` handles may refer to the same node.
/// Values are treated as immutable once an op has produced them; only leaf
/// tensors (parameters, inputs) are written in place, and only outside of a
/// live tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  Index dim(int axis) const;
  Index numel() const;

  std::span<const Scalar> data() const;
  /// In-place access for leaves (parameter updates, fixture setup).
  std::span<Scalar> mutable_data();
  Scalar item() const;
  std::vector<Scalar> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  /// Accumulated gradient; zeros if backward has not reached this tensor.
  std::vector<Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  void zero_grad();

  /// Same values, cut from any tape.
  Tensor detach() const;
  /// Deep copy as a fresh leaf.
  Tensor clone() const;

  const void* id() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend struct detail::Access;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable ops.
///
/// Ops append nodes while the tape is active on the current thread (see
/// `TapeScope`). Nodes are appended after their inputs exist, so insertion
/// order is a topological order, and backward is one reverse sweep.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Fills `grad` of every requires-grad leaf reachable from `root`.
  /// `root` must be a scalar produced on this tape. A second call without
  /// `reset()` is an error.
  void backward(const Tensor& root);
  void reset();

  std::size_t size() const;
  /// Nodes whose adjoint ran during the last backward.
  std::size_t visited() const { return visited_; }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  friend struct detail::Access;
  struct Node;
  std::vector<Node> nodes_;
  std::uint64_t id_;
  std::size_t visited_ = 0;
  bool consumed_ = false;
};

/// Makes `tape` the recording tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Backward through the tape that is active on this thread.
void backward(const Tensor& root);

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops broadcast with the trailing-dimension rule:
// shapes are right-aligned and each pair of extents must be equal or one of
// them 1. Missing leading axes count as 1.

enum class BinaryOp { kAdd, kSub, kMul, kDiv };
enum class UnaryOp { kNeg, kExp, kLog, kSqrt, kSquare, kRelu, kSigmoid, kSilu, kSoftplus, kTanh };

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);

Tensor add_scalar(const Tensor& x, Scalar s);
Tensor mul_scalar(const Tensor& x, Scalar s);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Scalar slope);

// ---------------------------------------------------------------------------
// Reductions accumulate in double precision.

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim = false);

/// Sums `grad` (laid out as `from`) down to `to`, the inverse of broadcasting.
std::vector<Scalar> reduce_to_shape(std::span<const Scalar> grad, const Shape& from,
                                    const Shape& to);

// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Reinterprets the buffer; one extent may be -1.
Tensor reshape(const Tensor& x, Shape shape);
/// Output axis i is input axis order[i].
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, Index start, Index length);

namespace testing {
/// Fault injection used by self-check tests: when set, the adjoint of `mul`
/// is deliberately wrong.
void set_corrupt_adjoint(bool on);
bool corrupt_adjoint();
}  // namespace testing

// ---------------------------------------------------------------------------
// Building blocks for ops defined outside this file.

namespace detail {

using BackwardFn = std::function<void(std::span<const Scalar> grad_out)>;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<Scalar>> storage;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  // Identity of the tape generation that produced this tensor (0: leaf).
  std::uint64_t tape_id = 0;
  std::size_t node = 0;
};

struct Access {
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
  static void record(Tape& tape, const char* name, const Tensor& out, std::vector<Tensor> inputs,
                     BackwardFn fn);
};

/// Fresh non-leaf output buffer.
Tensor make_output(Shape shape, std::vector<Scalar> values);
/// Output sharing the storage of `src` under a new shape.
Tensor make_view(const Tensor& src, Shape shape);

/// Raises `NumericError` naming `op` if any value is NaN/Inf.
void check_finite(std::span<const Scalar> values, const char* op);

/// Records `out` on the active tape when any input requires grad. Also runs
/// the finite check on `out`.
void record(const char* op, const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

/// Writable gradient of `t`, zero-initialised on first use.
std::span<Scalar> grad_buffer(const Tensor& t);

inline bool needs_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

}  // namespace detail

DUMAMBA_END_NAMESPACE
