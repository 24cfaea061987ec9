#pragma once

// Dense row-major tensor with an optional reverse-mode tape. Tensors are
// immutable once they participate in a tape; ops allocate fresh storage.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskattn {

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Allocator whose value-construction is a no-op, so vector(n) leaves the
// payload uninitialized. Op outputs that are fully overwritten use this to
// skip a redundant zero-fill of large activation buffers.
template <class T>
struct NoInitAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = NoInitAlloc<U>;
  };
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
using TensorStorage = std::vector<T, NoInitAlloc<T>>;

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<TensorStorage<T>>(size_t(numel(shape_)), T(0))) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (int64_t(values.size()) != numel(shape_))
      throw DimensionError("tensor data size does not match shape " + shape_str(shape_));
    data_ = std::make_shared<TensorStorage<T>>(values.begin(), values.end());
  }

  // Allocated but not zero-filled; caller must write every element.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<TensorStorage<T>>(size_t(numel(t.shape_)));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(int i) const {
    if (i < 0) i += int(shape_.size());
    return shape_[size_t(i)];
  }
  int rank() const { return int(shape_.size()); }
  int64_t size() const { return int64_t(data_ ? data_->size() : 0); }

  const T* data() const { return data_->data(); }
  T* mutable_data() { return data_->data(); }  // construction only, pre-tape
  const std::shared_ptr<TensorStorage<T>>& storage() const { return data_; }

  T value() const {
    if (size() != 1) throw DimensionError("value() on non-scalar tensor");
    return (*data_)[0];
  }
  T at(int64_t i) const { return (*data_)[size_t(i)]; }

  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  // Same storage, new shape; stays on the same tape node (layout unchanged).
  Tensor reshape(Shape s) const {
    if (numel(s) != size())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor r = *this;
    r.shape_ = std::move(s);
    return r;
  }

  Tensor detached() const {
    Tensor r = *this;
    r.tape_ = nullptr;
    r.node_ = -1;
    return r;
  }

  bool all_finite() const {
    for (const T& v : *data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<TensorStorage<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<T>&, const std::vector<T>&)>;

  // Registers a leaf (parameter/input) whose gradient will be accumulated.
  Tensor<T> watch(const Tensor<T>& t) {
    Tensor<T> r = t.detached();
    r.tape_ = this;
    r.node_ = add_node(t.size(), nullptr);
    return r;
  }

  int add_node(int64_t out_size, BackwardFn back) {
    nodes_.push_back({out_size, std::move(back)});
    grads_.emplace_back();
    return int(nodes_.size()) - 1;
  }

  // Tags an op output produced with `back` as its backward rule.
  Tensor<T> attach(Tensor<T> out, BackwardFn back) {
    out.tape_ = this;
    out.node_ = add_node(out.size(), std::move(back));
    return out;
  }

  std::vector<T>& grad_buf(int node) {
    auto& g = grads_[size_t(node)];
    if (g.empty()) g.assign(size_t(nodes_[size_t(node)].out_size), T(0));
    return g;
  }

  bool has_grad(const Tensor<T>& t) const {
    return t.tape_ == this && t.node_ >= 0 && !grads_[size_t(t.node_)].empty();
  }

  const std::vector<T>& grad(const Tensor<T>& t) {
    if (t.tape_ != this) throw std::runtime_error("tensor is not on this tape");
    return grad_buf(t.node_);
  }

  Tensor<T> grad_tensor(const Tensor<T>& t) {
    return Tensor<T>(t.shape(), grad(t));
  }

  void backward(const Tensor<T>& loss) {
    if (loss.tape_ != this) throw std::runtime_error("loss is not on this tape");
    if (loss.size() != 1) throw DimensionError("backward requires a scalar loss");
    if (consumed_) throw std::runtime_error("tape already consumed by backward");
    if (!std::isfinite(double(loss.value())))
      throw std::runtime_error("backward on non-finite loss");
    consumed_ = true;
    grad_buf(loss.node_)[0] += T(1);
    for (int i = loss.node_; i >= 0; --i) {
      auto& node = nodes_[size_t(i)];
      if (!grads_[size_t(i)].empty() && node.back) node.back(*this, grads_[size_t(i)]);
    }
  }

  bool consumed() const { return consumed_; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    int64_t out_size;
    BackwardFn back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

// Picks the tape shared by the given inputs (nullptr if none); mixing two
// different tapes is an error.
template <class T>
Tape<T>* result_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape())
      throw std::runtime_error("op inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace maskattn
