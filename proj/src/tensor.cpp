#include "dumamba/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

DUMAMBA_BEGIN_NAMESPACE

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};
std::atomic<bool> g_corrupt_adjoint{false};

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<Scalar> values) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<std::vector<Scalar>>(std::move(values));
  return impl;
}

void validate_shape(const Shape& shape) {
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

}  // namespace

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::vector<Index> row_major_strides(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(1), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  validate_shape(shape);
  const Index n = shape_numel(shape);
  Tensor t(new_impl(std::move(shape), std::vector<Scalar>(static_cast<std::size_t>(n), value)));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t(new_impl(std::move(shape), std::move(values)));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  Tensor t(new_impl({}, {value}));
  t.impl_->requires_grad = requires_grad;
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ValueError("use of undefined tensor");
  return impl_->shape;
}

Index Tensor::dim(int axis) const {
  return shape()[normalize_axis(axis, rank())];
}

Index Tensor::numel() const { return shape_numel(shape()); }

std::span<const Scalar> Tensor::data() const {
  if (!impl_) throw ValueError("use of undefined tensor");
  return {impl_->storage->data(), impl_->storage->size()};
}

std::span<Scalar> Tensor::mutable_data() {
  if (!impl_) throw ValueError("use of undefined tensor");
  return {impl_->storage->data(), impl_->storage->size()};
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

std::vector<Scalar> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ValueError("use of undefined tensor");
  if (!is_leaf()) throw AutogradError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && impl_->tape_id == 0; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<Scalar> Tensor::grad() const {
  if (!impl_) throw ValueError("use of undefined tensor");
  if (impl_->grad.empty()) return std::vector<Scalar>(impl_->storage->size(), Scalar(0));
  return impl_->grad;
}

std::span<Scalar> Tensor::mutable_grad() { return detail::grad_buffer(*this); }

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar(0));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  return from(shape(), to_vector(), false);
}

// ---------------------------------------------------------------------------
// Tape

struct Tape::Node {
  const char* name;
  std::vector<Tensor> inputs;
  Tensor output;
  detail::BackwardFn backward;
};

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

std::size_t Tape::size() const { return nodes_.size(); }

Tape* Tape::active() { return g_active_tape; }

void Tape::reset() {
  nodes_.clear();
  id_ = g_next_tape_id.fetch_add(1);
  visited_ = 0;
  consumed_ = false;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw AutogradError("backward on undefined tensor");
  if (root.rank() != 0) {
    throw AutogradError("backward root must be a scalar, got shape " + shape_str(root.shape()));
  }
  const auto& rimpl = root.impl();
  if (rimpl->tape_id != id_ || rimpl->node >= nodes_.size()) {
    throw AutogradError("backward root is detached from this tape");
  }
  if (consumed_) throw AutogradError("backward already ran on this tape; call reset() first");
  consumed_ = true;
  visited_ = 0;

  rimpl->grad.assign(1, Scalar(1));
  for (std::size_t i = rimpl->node + 1; i-- > 0;) {
    Node& node = nodes_[i];
    auto& out = *node.output.impl();
    if (out.grad.empty()) continue;
    node.backward(std::span<const Scalar>(out.grad.data(), out.grad.size()));
    ++visited_;
    std::vector<Scalar>().swap(out.grad);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& root) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw AutogradError("backward called without an active tape");
  tape->backward(root);
}

namespace testing {
void set_corrupt_adjoint(bool on) { g_corrupt_adjoint.store(on); }
bool corrupt_adjoint() { return g_corrupt_adjoint.load(); }
}  // namespace testing

// ---------------------------------------------------------------------------
// detail

namespace detail {

void Access::record(Tape& tape, const char* name, const Tensor& out, std::vector<Tensor> inputs,
                    BackwardFn fn) {
  out.impl_->requires_grad = true;
  out.impl_->tape_id = tape.id_;
  out.impl_->node = tape.nodes_.size();
  tape.nodes_.push_back(Tape::Node{name, std::move(inputs), out, std::move(fn)});
}

Tensor make_output(Shape shape, std::vector<Scalar> values) {
  return Access::wrap(new_impl(std::move(shape), std::move(values)));
}

Tensor make_view(const Tensor& src, Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = src.impl()->storage;
  return Access::wrap(std::move(impl));
}

void check_finite(std::span<const Scalar> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " produced by " << op << " at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

void record(const char* op, const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  check_finite(out.data(), op);
  Tape* tape = Tape::active();
  if (tape == nullptr) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return needs_grad(t); });
  if (!any) return;
  Access::record(*tape, op, out, std::move(inputs), std::move(fn));
}

std::span<Scalar> grad_buffer(const Tensor& t) {
  auto& impl = *t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.storage->size(), Scalar(0));
  return {impl.grad.data(), impl.grad.size()};
}

}  // namespace detail

using detail::grad_buffer;
using detail::needs_grad;

// ---------------------------------------------------------------------------
// Broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

// Strides of `s` aligned to `out`, zero along broadcast axes.
std::vector<Index> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  const auto own = row_major_strides(s);
  const std::size_t off = out.size() - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) {
    strides[off + i] = s[i] == 1 ? 0 : own[i];
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, F&& f) {
  const Index n = shape_numel(out);
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  const int rank = static_cast<int>(out.size());
  const Index inner = out[rank - 1];
  const Index ia = sa[rank - 1], ib = sb[rank - 1];
  std::vector<Index> idx(rank, 0);
  Index oa = 0, ob = 0;
  for (Index base = 0; base < n; base += inner) {
    for (Index j = 0; j < inner; ++j) f(base + j, oa + j * ia, ob + j * ib);
    for (int ax = rank - 2; ax >= 0; --ax) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * out[ax];
      ob -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

std::vector<Scalar> expand_to(const Tensor& t, const Shape& out) {
  if (t.shape() == out) return t.to_vector();
  std::vector<Scalar> r(static_cast<std::size_t>(shape_numel(out)));
  const auto st = broadcast_strides(t.shape(), out);
  const auto d = t.data();
  for_each_broadcast(out, st, st, [&](Index o, Index a, Index) { r[o] = d[a]; });
  return r;
}

void accumulate(const Tensor& t, const std::vector<Scalar>& full, const Shape& full_shape) {
  auto g = grad_buffer(t);
  if (t.shape() == full_shape) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += full[i];
    return;
  }
  const auto r = reduce_to_shape(full, full_shape, t.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += r[i];
}

}  // namespace

std::vector<Scalar> reduce_to_shape(std::span<const Scalar> grad, const Shape& from,
                                    const Shape& to) {
  if (broadcast_shape(from, to) != from) {
    throw ShapeError("cannot reduce " + shape_str(from) + " to " + shape_str(to));
  }
  std::vector<double> acc(static_cast<std::size_t>(shape_numel(to)), 0.0);
  const auto st = broadcast_strides(to, from);
  for_each_broadcast(from, st, st, [&](Index o, Index a, Index) { acc[a] += grad[o]; });
  return {acc.begin(), acc.end()};
}

// ---------------------------------------------------------------------------
// Binary elementwise

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Index n = shape_numel(out_shape);
  std::vector<Scalar> out(static_cast<std::size_t>(n));
  const auto da = a.data();
  const auto db = b.data();

  auto run = [&](auto fn) {
    if (a.shape() == b.shape()) {
      for (Index i = 0; i < n; ++i) out[i] = fn(da[i], db[i]);
    } else if (b.numel() == 1 && a.shape() == out_shape) {
      const Scalar s = db[0];
      for (Index i = 0; i < n; ++i) out[i] = fn(da[i], s);
    } else {
      const auto sa = broadcast_strides(a.shape(), out_shape);
      const auto sb = broadcast_strides(b.shape(), out_shape);
      for_each_broadcast(out_shape, sa, sb,
                         [&](Index o, Index ia, Index ib) { out[o] = fn(da[ia], db[ib]); });
    }
  };

  const char* name = "";
  switch (op) {
    case BinaryOp::kAdd:
      run([](Scalar x, Scalar y) { return x + y; });
      name = "add";
      break;
    case BinaryOp::kSub:
      run([](Scalar x, Scalar y) { return x - y; });
      name = "sub";
      break;
    case BinaryOp::kMul:
      run([](Scalar x, Scalar y) { return x * y; });
      name = "mul";
      break;
    case BinaryOp::kDiv:
      run([](Scalar x, Scalar y) { return x / y; });
      name = "div";
      break;
  }

  Tensor result = detail::make_output(out_shape, std::move(out));
  detail::record(name, result, {a, b}, [a, b, op, out_shape](std::span<const Scalar> g) {
    const std::size_t n = g.size();
    if (op == BinaryOp::kAdd || op == BinaryOp::kSub) {
      std::vector<Scalar> full(g.begin(), g.end());
      if (needs_grad(a)) accumulate(a, full, out_shape);
      if (needs_grad(b)) {
        if (op == BinaryOp::kSub) {
          for (auto& v : full) v = -v;
        }
        accumulate(b, full, out_shape);
      }
      return;
    }
    const auto va = expand_to(a, out_shape);
    const auto vb = expand_to(b, out_shape);
    if (op == BinaryOp::kMul) {
      const Scalar fault = testing::corrupt_adjoint() ? Scalar(1.5) : Scalar(1);
      if (needs_grad(a)) {
        std::vector<Scalar> full(n);
        for (std::size_t i = 0; i < n; ++i) full[i] = g[i] * vb[i] * fault;
        accumulate(a, full, out_shape);
      }
      if (needs_grad(b)) {
        std::vector<Scalar> full(n);
        for (std::size_t i = 0; i < n; ++i) full[i] = g[i] * va[i] * fault;
        accumulate(b, full, out_shape);
      }
    } else {
      if (needs_grad(a)) {
        std::vector<Scalar> full(n);
        for (std::size_t i = 0; i < n; ++i) full[i] = g[i] / vb[i];
        accumulate(a, full, out_shape);
      }
      if (needs_grad(b)) {
        std::vector<Scalar> full(n);
        for (std::size_t i = 0; i < n; ++i) full[i] = -g[i] * va[i] / (vb[i] * vb[i]);
        accumulate(b, full, out_shape);
      }
    }
  });
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kDiv, a, b); }
Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return neg(x); }

Tensor add_scalar(const Tensor& x, Scalar s) {
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] + s;
  Tensor r = detail::make_output(x.shape(), std::move(out));
  detail::record("add_scalar", r, {x}, [x](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return r;
}

Tensor mul_scalar(const Tensor& x, Scalar s) {
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * s;
  Tensor r = detail::make_output(x.shape(), std::move(out));
  detail::record("mul_scalar", r, {x}, [x, s](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
  return r;
}

// ---------------------------------------------------------------------------
// Unary elementwise

namespace {

// `deriv(x, y)` is dy/dx given input x and output y.
template <class F, class D>
Tensor unary(const char* name, const Tensor& x, F fwd, D deriv) {
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = fwd(d[i]);
  Tensor r = detail::make_output(x.shape(), std::move(out));
  // The output is captured by raw storage pointer: the tape keeps `r` alive
  // for as long as this closure can run.
  const auto* ystore = r.impl()->storage.get();
  detail::record(name, r, {x}, [x, ystore, deriv](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    const auto dx = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(dx[i], (*ystore)[i]);
  });
  return r;
}

inline Scalar sigmoid_of(Scalar v) {
  return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                : std::exp(v) / (Scalar(1) + std::exp(v));
}

inline Scalar softplus_of(Scalar v) {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace

Tensor elementwise(UnaryOp op, const Tensor& x) {
  switch (op) {
    case UnaryOp::kNeg:
      return unary("neg", x, [](Scalar v) { return -v; }, [](Scalar, Scalar) { return Scalar(-1); });
    case UnaryOp::kExp:
      return unary("exp", x, [](Scalar v) { return std::exp(v); },
                   [](Scalar, Scalar y) { return y; });
    case UnaryOp::kLog:
      return unary("log", x, [](Scalar v) { return std::log(v); },
                   [](Scalar v, Scalar) { return Scalar(1) / v; });
    case UnaryOp::kSqrt:
      return unary("sqrt", x, [](Scalar v) { return std::sqrt(v); },
                   [](Scalar, Scalar y) { return Scalar(0.5) / y; });
    case UnaryOp::kSquare:
      return unary("square", x, [](Scalar v) { return v * v; },
                   [](Scalar v, Scalar) { return Scalar(2) * v; });
    case UnaryOp::kRelu:
      return unary("relu", x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
                   [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
    case UnaryOp::kSigmoid:
      return unary("sigmoid", x, sigmoid_of, [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
    case UnaryOp::kSilu:
      return unary("silu", x, [](Scalar v) { return v * sigmoid_of(v); },
                   [](Scalar v, Scalar) {
                     const Scalar s = sigmoid_of(v);
                     return s * (Scalar(1) + v * (Scalar(1) - s));
                   });
    case UnaryOp::kSoftplus:
      return unary("softplus", x, softplus_of, [](Scalar v, Scalar) { return sigmoid_of(v); });
    case UnaryOp::kTanh:
      return unary("tanh", x, [](Scalar v) { return std::tanh(v); },
                   [](Scalar, Scalar y) { return Scalar(1) - y * y; });
  }
  throw ValueError("unknown unary op");
}

Tensor neg(const Tensor& x) { return elementwise(UnaryOp::kNeg, x); }
Tensor exp(const Tensor& x) { return elementwise(UnaryOp::kExp, x); }
Tensor log(const Tensor& x) { return elementwise(UnaryOp::kLog, x); }
Tensor sqrt(const Tensor& x) { return elementwise(UnaryOp::kSqrt, x); }
Tensor square(const Tensor& x) { return elementwise(UnaryOp::kSquare, x); }
Tensor relu(const Tensor& x) { return elementwise(UnaryOp::kRelu, x); }
Tensor sigmoid(const Tensor& x) { return elementwise(UnaryOp::kSigmoid, x); }
Tensor silu(const Tensor& x) { return elementwise(UnaryOp::kSilu, x); }
Tensor softplus(const Tensor& x) { return elementwise(UnaryOp::kSoftplus, x); }
Tensor tanh(const Tensor& x) { return elementwise(UnaryOp::kTanh, x); }

Tensor leaky_relu(const Tensor& x, Scalar slope) {
  return unary("leaky_relu", x, [slope](Scalar v) { return v >= 0 ? v : slope * v; },
               [slope](Scalar v, Scalar) { return v >= 0 ? Scalar(1) : slope; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (Scalar v : x.data()) acc += v;
  Tensor r = detail::make_output({}, {static_cast<Scalar>(acc)});
  detail::record("sum", r, {x}, [x](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for (auto& v : gx) v += g[0];
  });
  return r;
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (Scalar v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor r = detail::make_output({}, {static_cast<Scalar>(acc / n)});
  detail::record("mean", r, {x}, [x, n](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    const Scalar s = static_cast<Scalar>(g[0] / n);
    for (auto& v : gx) v += s;
  });
  return r;
}

namespace {

Tensor reduce_axes(const Tensor& x, std::vector<int> axes, bool keepdim, bool average) {
  const int rank = x.rank();
  for (auto& a : axes) a = normalize_axis(a, rank);
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());

  Shape kept = x.shape();
  Index count = 1;
  for (int a : axes) {
    count *= kept[a];
    kept[a] = 1;
  }
  std::vector<double> acc(static_cast<std::size_t>(shape_numel(kept)), 0.0);
  const auto st = broadcast_strides(kept, x.shape());
  const auto d = x.data();
  for_each_broadcast(x.shape(), st, st, [&](Index o, Index a, Index) { acc[a] += d[o]; });
  const double scale = average ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<Scalar> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<Scalar>(acc[i] * scale);

  Shape out_shape;
  if (keepdim) {
    out_shape = kept;
  } else {
    for (int i = 0; i < rank; ++i) {
      if (!std::binary_search(axes.begin(), axes.end(), i)) out_shape.push_back(x.shape()[i]);
    }
  }
  Tensor r = detail::make_output(out_shape, std::move(out));
  detail::record(average ? "mean_axes" : "sum_axes", r, {x},
                 [x, kept, scale](std::span<const Scalar> g) {
                   auto gx = grad_buffer(x);
                   const auto st = broadcast_strides(kept, x.shape());
                   for_each_broadcast(x.shape(), st, st, [&](Index o, Index a, Index) {
                     gx[o] += static_cast<Scalar>(g[a] * scale);
                   });
                 });
  return r;
}

}  // namespace

Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim) {
  return reduce_axes(x, std::move(axes), keepdim, false);
}

Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim) {
  return reduce_axes(x, std::move(axes), keepdim, true);
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<Scalar> out(static_cast<std::size_t>(m * n), Scalar(0));
  const Scalar* pa = a.data().data();
  const Scalar* pb = b.data().data();
  for (Index i = 0; i < m; ++i) {
    Scalar* row = out.data() + i * n;
    for (Index p = 0; p < k; ++p) {
      const Scalar s = pa[i * k + p];
      if (s == Scalar(0)) continue;
      const Scalar* brow = pb + p * n;
      for (Index j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  Tensor r = detail::make_output({m, n}, std::move(out));
  detail::record("matmul", r, {a, b}, [a, b, m, k, n](std::span<const Scalar> g) {
    const Scalar* pa = a.data().data();
    const Scalar* pb = b.data().data();
    if (needs_grad(a)) {
      auto ga = grad_buffer(a);
      for (Index i = 0; i < m; ++i) {
        const Scalar* grow = g.data() + i * n;
        for (Index p = 0; p < k; ++p) {
          const Scalar* brow = pb + p * n;
          Scalar acc = 0;
          for (Index j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (needs_grad(b)) {
      auto gb = grad_buffer(b);
      for (Index i = 0; i < m; ++i) {
        const Scalar* grow = g.data() + i * n;
        for (Index p = 0; p < k; ++p) {
          const Scalar s = pa[i * k + p];
          Scalar* gbrow = gb.data() + p * n;
          for (Index j = 0; j < n; ++j) gbrow[j] += s * grow[j];
        }
      }
    }
  });
  return r;
}

Tensor reshape(const Tensor& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape allows at most one -1 extent");
      infer = static_cast<int>(i);
    } else if (shape[i] <= 0) {
      throw ShapeError("invalid reshape target " + shape_str(shape));
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    shape[infer] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape changes element count: " + shape_str(x.shape()) + " -> " +
                     shape_str(shape));
  }
  Tensor r = detail::make_view(x, std::move(shape));
  detail::record("reshape", r, {x}, [x](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return r;
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int rank = x.rank();
  if (static_cast<int>(order.size()) != rank) {
    throw ShapeError("permutation length " + std::to_string(order.size()) +
                     " does not match rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  for (int o : order) {
    if (o < 0 || o >= rank || seen[o]) throw ShapeError("invalid axis permutation");
    seen[o] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = row_major_strides(x.shape());
  std::vector<Index> gather(rank);
  for (int i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[order[i]];
    gather[i] = in_strides[order[i]];
  }
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for_each_broadcast(out_shape, gather, gather, [&](Index o, Index a, Index) { out[o] = d[a]; });
  Tensor r = detail::make_output(out_shape, std::move(out));
  detail::record("permute", r, {x}, [x, out_shape, gather](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for_each_broadcast(out_shape, gather, gather, [&](Index o, Index a, Index) { gx[a] += g[o]; });
  });
  return r;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  const Index out_row = out_shape[axis] * inner;
  std::vector<Scalar> out(static_cast<std::size_t>(shape_numel(out_shape)));
  Index offset = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const Index row = p.shape()[axis] * inner;
    const auto d = p.data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(d.data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  Tensor r = detail::make_output(out_shape, std::move(out));
  detail::record("concat", r, parts,
                 [parts, offsets, outer, inner, out_row, axis](std::span<const Scalar> g) {
                   for (std::size_t k = 0; k < parts.size(); ++k) {
                     if (!needs_grad(parts[k])) continue;
                     auto gp = grad_buffer(parts[k]);
                     const Index row = parts[k].shape()[axis] * inner;
                     for (Index o = 0; o < outer; ++o) {
                       for (Index j = 0; j < row; ++j) {
                         gp[o * row + j] += g[o * out_row + offsets[k] + j];
                       }
                     }
                   }
                 });
  return r;
}

Tensor slice(const Tensor& x, int axis, Index start, Index length) {
  const int rank = x.rank();
  axis = normalize_axis(axis, rank);
  const Index extent = x.shape()[axis];
  if (start < 0 || length <= 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for extent " + std::to_string(extent));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  const Index in_row = extent * inner;
  const Index row = length * inner;
  const Index off = start * inner;
  const auto d = x.data();
  std::vector<Scalar> out(static_cast<std::size_t>(outer * row));
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(d.data() + o * in_row + off, row, out.data() + o * row);
  }
  Tensor r = detail::make_output(out_shape, std::move(out));
  detail::record("slice", r, {x}, [x, outer, row, in_row, off](std::span<const Scalar> g) {
    auto gx = grad_buffer(x);
    for (Index o = 0; o < outer; ++o) {
      for (Index j = 0; j < row; ++j) gx[o * in_row + off + j] += g[o * row + j];
    }
  });
  return r;
}

DUMAMBA_END_NAMESPACE
