#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deepstack/error.hpp"

namespace deepstack {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape);

/// Dense row-major tensor. Copies share storage; use clone() for a deep copy.
/// The gradient buffer is allocated lazily by the first accumulation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    validate(shape);
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    validate(shape);
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data has " + std::to_string(data.size()) +
                           " elements but shape " + to_string(shape) +
                           " needs " + std::to_string(numel(shape)));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  /// Dimension i; negative i counts from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) {
      throw DimensionError("dim " + std::to_string(i) + " out of range for " +
                           to_string(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(k)];
  }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + to_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros if absent.
  std::span<T> mutable_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(size(), T{0});
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  /// First accumulation copies; later ones add element-wise in index order.
  void accumulate_grad(std::span<const T> g) const {
    if (g.size() != size()) {
      throw DimensionError("gradient of " + std::to_string(g.size()) +
                           " elements for tensor " + to_string(shape()));
    }
    if (impl_->grad.empty()) {
      impl_->grad.assign(g.begin(), g.end());
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Deep copy of shape and data; gradient and tape history are dropped.
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  bool all_finite() const {
    for (const T v : impl_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void validate(const Shape& shape) {
    for (const std::size_t d : shape) {
      if (d == 0) {
        throw DimensionError("zero-sized dimension in shape " +
                             to_string(shape));
      }
    }
  }

  std::shared_ptr<Storage> impl_;
};

/// Ordered record of differentiable operations. backward() replays the
/// recorded closures once, newest first.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;
  using Observer = std::function<void(std::size_t index, const std::string& op)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  const std::string& op_name(std::size_t i) const { return nodes_.at(i).op; }

  void set_observer(Observer observer) { observer_ = std::move(observer); }

  void record(std::string op, Backward backward) {
    if (!recording_) return;
    if (consumed_) throw TapeError("cannot record on a tape after backward()");
    nodes_.push_back(Node{std::move(op), std::move(backward)});
  }

  /// Seeds d(output) = seed (broadcast) and runs every node in reverse.
  void backward(Tensor<T> output, T seed = T{1}) {
    std::vector<T> g(output.size(), seed);
    backward(std::move(output), std::span<const T>(g));
  }

  void backward(Tensor<T> output, std::span<const T> seed_grad) {
    if (consumed_) {
      throw TapeError("backward() called twice on the same tape");
    }
    consumed_ = true;
    if (!output.requires_grad()) return;
    output.accumulate_grad(seed_grad);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (observer_) observer_(i, nodes_[i].op);
      nodes_[i].backward();
    }
    // Closures own intermediate activations; release them now.
    nodes_.clear();
  }

 private:
  struct Node {
    std::string op;
    Backward backward;
  };

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  Observer observer_;
};

}  // namespace deepstack
