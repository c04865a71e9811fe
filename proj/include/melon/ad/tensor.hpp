#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "melon/error.hpp"

namespace melon::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Graph recording is on by default; NoGrad turns it off for the current
// thread (evaluation passes, optimizer updates).
bool grad_enabled();

class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Handle to a node in the computation graph. Copies share the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T v, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  // Negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const { return n_->value.size(); }

  std::span<const T> data() const { return n_->value; }
  std::span<T> mutable_data() { return n_->value; }
  std::span<const T> grad() const { return n_->grad; }
  std::span<T> mutable_grad() { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  T item() const;
  T at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    n_->requires_grad = on;
    return *this;
  }

  // Reverse-mode sweep from this scalar; accumulates into leaf grads.
  void backward() const;
  void zero_grad() { n_->grad.clear(); }
  // Fresh leaf holding a copy of the value.
  Tensor detach() const { return from(shape(), n_->value); }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Builds an op result. Parents and the backward rule are only kept when
// grad mode is on and at least one parent needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace melon::ad
