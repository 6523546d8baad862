#include "tensor/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "error.hpp"

namespace bidet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  if (std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end())
    fail(ErrorCode::shape_mismatch, "tensor extents must be positive, got " + shape_str(shape));
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  if (std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end())
    fail(ErrorCode::shape_mismatch, "tensor extents must be positive, got " + shape_str(shape));
  require(values.size() == shape_numel(shape), ErrorCode::shape_mismatch,
          "data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  node_->data = std::move(values);
  node_->shape = std::move(shape);
}

template <typename T>
T Tensor<T>::item() const {
  require(numel() == 1, ErrorCode::shape_mismatch, "item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(node_->shape, node_->data);
}

template <typename T>
Tensor<T> GradientMap<T>::get(const Tensor<T>& t) const {
  auto it = grads_.find(t.node());
  if (it != grads_.end()) return it->second;
  return Tensor<T>(t.shape());
}

template <typename T>
bool Tape<T>::record(std::initializer_list<Tensor<T>> inputs, Tensor<T>& output, BackwardFn fn) {
  return record(std::vector<Tensor<T>>(inputs), output, std::move(fn));
}

template <typename T>
bool Tape<T>::record(const std::vector<Tensor<T>>& inputs, Tensor<T>& output, BackwardFn fn) {
  if (!enabled_) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return false;
  Entry e;
  e.inputs.reserve(inputs.size());
  for (const auto& t : inputs) e.inputs.push_back(t.shared_node());
  e.output = output.shared_node();
  e.fn = std::move(fn);
  output.set_requires_grad(true);
  entries_.push_back(std::move(e));
  return true;
}

template <typename T>
GradientMap<T> Tape<T>::backward(const Tensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorCode::shape_mismatch,
          "backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));

  std::unordered_set<const TensorNode<T>*> produced;
  for (auto& e : entries_) {
    for (auto& in : e.inputs) in->grad.assign(in->data.size(), T(0));
    e.output->grad.assign(e.output->data.size(), T(0));
    produced.insert(e.output.get());
  }
  TensorNode<T>* root = loss.node();
  root->grad.assign(1, T(1));

  std::unordered_set<const TensorNode<T>*> reached{root};
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!reached.count(it->output.get())) continue;
    it->fn();
    for (auto& in : it->inputs)
      if (in->requires_grad) reached.insert(in.get());
  }

  GradientMap<T> out;
  auto add_leaf = [&](const std::shared_ptr<TensorNode<T>>& n) {
    if (!n->requires_grad || produced.count(n.get())) return;
    Tensor<T> g(n->shape, n->grad);
    out.set(n.get(), std::move(g));
  };
  for (auto& e : entries_)
    for (auto& in : e.inputs) add_leaf(in);
  if (!produced.count(root) && root->requires_grad) out.set(root, Tensor<T>(root->shape, root->grad));
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradientMap<float>;
template class GradientMap<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace bidet
