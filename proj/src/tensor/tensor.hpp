#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace bidet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
};

// Dense row-major tensor. Copies share storage (handle semantics), which is
// what lets the tape and the optimizer see the same parameter buffers; use
// clone() for an independent value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  // Populated by Tape::backward for every node on the tape.
  std::span<const T> grad() const { return node_->grad; }

  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// dLoss/dParam for the leaves of a backward pass. Lookups for tensors that
// were never reached return zeros of the right shape.
template <typename T>
class GradientMap {
 public:
  void set(const TensorNode<T>* node, Tensor<T> grad) { grads_[node] = std::move(grad); }
  bool contains(const Tensor<T>& t) const { return grads_.count(t.node()) != 0; }
  Tensor<T> get(const Tensor<T>& t) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const TensorNode<T>*, Tensor<T>> grads_;
};

// Records primitive applications in execution order. Backward rules are
// closures that read the output node's grad and accumulate into the grads
// of inputs that require them.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }

  // Relaxed mode swaps every straight-through primitive's forward for the
  // smooth function its backward rule differentiates. Used only by gradient
  // checks, where the hard forward would make finite differences vanish.
  bool relaxed() const { return relaxed_; }
  void set_relaxed(bool on) { relaxed_ = on; }

  // Returns true (and marks `output` as requiring grad) when recording is on
  // and at least one input requires grad.
  bool record(std::initializer_list<Tensor<T>> inputs, Tensor<T>& output, BackwardFn fn);
  bool record(const std::vector<Tensor<T>>& inputs, Tensor<T>& output, BackwardFn fn);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  GradientMap<T> backward(const Tensor<T>& loss);

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorNode<T>>> inputs;
    std::shared_ptr<TensorNode<T>> output;
    BackwardFn fn;
  };

  bool enabled_ = true;
  bool relaxed_ = false;
  std::vector<Entry> entries_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradientMap<float>;
extern template class GradientMap<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bidet
