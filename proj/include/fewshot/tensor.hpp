#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot {

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

// Row-major dense extents, last axis fastest.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
class Tape;

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  ArrayX<S> values;
  ArrayX<S> grad;  // allocated on first accumulation; present iff it participates
  bool requires_grad = false;
  const void* tape_tag = nullptr;  // tape that recorded the producing op, if any

  bool has_grad() const { return grad.size() == values.size() && values.size() > 0; }
  void ensure_grad() {
    if (grad.size() != values.size()) grad = ArrayX<S>::Zero(values.size());
  }
};

}  // namespace detail

// Value-semantic handle onto a shared dense node; copies alias the same
// storage, which is what lets op closures hold onto graph inputs.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : node_(std::make_shared<detail::TensorNode<S>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_array(std::move(shape), ArrayX<S>(), requires_grad, true);
  }

  static Tensor constant(Shape shape, S value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.node_->values.setConstant(value);
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return constant({1}, value, requires_grad);
  }

  static Tensor from_vector(Shape shape, const std::vector<S>& data, bool requires_grad = false) {
    ArrayX<S> v(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) v[static_cast<Eigen::Index>(i)] = data[i];
    return from_array(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from_array(Shape shape, ArrayX<S> data, bool requires_grad = false,
                           bool allow_alloc = false) {
    const std::int64_t n = shape_numel(shape);
    for (int e : shape) {
      if (e <= 0) throw Error(ErrCode::BadArgument, "tensor extent must be positive, got shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::TensorNode<S>>();
    if (allow_alloc && data.size() == 0) {
      data = ArrayX<S>::Zero(n);
    }
    if (data.size() != n) {
      throw Error(ErrCode::ShapeMismatch,
                  "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    node->shape = std::move(shape);
    node->values = std::move(data);
    node->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return node_->values.size(); }

  ArrayX<S>& values() { return node_->values; }
  const ArrayX<S>& values() const { return node_->values; }
  S* data() { return node_->values.data(); }
  const S* data() const { return node_->values.data(); }

  S item() const {
    if (numel() != 1) throw Error(ErrCode::BadArgument, "item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
  }

  // Row-major flat offset of a multi-index.
  std::int64_t offset_of(std::initializer_list<int> idx) const {
    std::int64_t off = 0;
    std::size_t a = 0;
    for (int i : idx) {
      off = off * node_->shape[a] + i;
      ++a;
    }
    return off;
  }
  S at(std::initializer_list<int> idx) const { return node_->values[offset_of(idx)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (!rg) node_->grad.resize(0);
  }

  bool has_grad() const { return node_->has_grad(); }
  ArrayX<S>& grad() {
    if (!node_->has_grad()) throw Error(ErrCode::MissingGrad, "gradient not populated for tensor " + shape_str(shape()));
    return node_->grad;
  }
  const ArrayX<S>& grad() const {
    if (!node_->has_grad()) throw Error(ErrCode::MissingGrad, "gradient not populated for tensor " + shape_str(shape()));
    return node_->grad;
  }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.setZero();
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>::from_array(node_->shape, node_->values.template cast<T>(), node_->requires_grad);
  }

  std::shared_ptr<detail::TensorNode<S>> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<S>> node_;
};

// Ordered record of executed differentiable ops. Ops append during the
// forward pass; the backward walk visits each record exactly once in
// reverse, which fixes the gradient accumulation order.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void run_backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }
  static Tape* active() { return active_slot(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// RAII activation; tapes are confined to the activating thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::active_slot()) { Tape<S>::active_slot() = &tape; }
  ~TapeScope() { Tape<S>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

// Seeds d(loss)/d(loss) = 1 and replays the active tape in reverse. Every
// requires_grad tensor reachable from the loss ends up with its gradient
// populated; contributions from multiple paths accumulate additively.
template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>* tape = Tape<S>::active();
  if (tape == nullptr) throw Error(ErrCode::BadArgument, "backward: no active tape");
  if (loss.numel() != 1)
    throw Error(ErrCode::BadArgument, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (loss.node()->tape_tag != tape)
    throw Error(ErrCode::BadArgument, "backward: loss was not produced on the active tape");
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  tape->run_backward();
}

}  // namespace fewshot
