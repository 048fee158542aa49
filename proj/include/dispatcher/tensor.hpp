#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dispatcher/errors.hpp"
#include "dispatcher/memory.hpp"

namespace dispatcher {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct GradSlot;

using GradSpans = std::vector<std::span<double>>;
// Receives the gradient of an op's output and accumulates into the gradient
// buffers of its inputs. Inputs that need no gradient get an empty span.
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSpans& grad_in)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<GradSlot>> inputs;
  BackwardFn backward;
};

// Autograd state of a tensor. Lives apart from the value buffer so that an
// interior value can be freed as soon as nothing saved it for the backward
// pass, while gradient routing through the node stays intact.
struct GradSlot {
  Shape shape;
  Buffer grad;
  std::shared_ptr<Node> fn;  // null for leaves
  bool released = false;     // interior slot whose graph was consumed by backward()
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major tensor of doubles with optional reverse-mode gradient.
//
// Tensors are cheap handles: copies share the value buffer. Leaves created with
// requires_grad own a persistent gradient buffer; interior results carry a node
// describing how to push gradients to their inputs. The graph is consumed by
// backward(): a second call on the same graph is a ContractError.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, Buffer values, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::make_shared<Buffer>(std::move(values))) {
    if (numel(shape_) != data_->size()) {
      throw DimensionError("tensor of shape " + to_string(shape_) + " given " +
                           std::to_string(data_->size()) + " values");
    }
    for (std::size_t extent : shape_) {
      if (extent == 0) throw DimensionError("zero extent in shape " + to_string(shape_));
    }
    if (requires_grad) {
      slot_ = std::make_shared<detail::GradSlot>();
      slot_->shape = shape_;
      slot_->grad.assign(data_->size(), 0.0);
    }
  }

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer values(numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Buffer values(numel(shape), value);
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, Buffer{value}, requires_grad);
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t extent(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis out of range for shape " + to_string(shape_));
    return shape_[static_cast<std::size_t>(a)];
  }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  // Writable view of the values. Intended for leaves (parameters, inputs);
  // writing into an interior value that a node saved corrupts its gradient.
  std::span<double> mutable_data() { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  bool requires_grad() const { return slot_ != nullptr; }
  bool is_leaf() const { return !slot_ || !slot_->fn; }

  std::span<const double> grad() const {
    if (!slot_) throw ContractError("tensor does not require grad");
    return {slot_->grad.data(), slot_->grad.size()};
  }
  std::span<double> mutable_grad() {
    if (!slot_) throw ContractError("tensor does not require grad");
    return {slot_->grad.data(), slot_->grad.size()};
  }
  void zero_grad() {
    if (slot_) std::fill(slot_->grad.begin(), slot_->grad.end(), 0.0);
  }

  // Same values, no graph.
  Tensor detach() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = data_;
    return out;
  }

  void backward() const;

  // Internals used by op implementations.
  const std::shared_ptr<Buffer>& storage() const { return data_; }
  const std::shared_ptr<detail::GradSlot>& slot() const { return slot_; }

  static Tensor from_op(Shape shape, Buffer values, std::string op,
                        std::initializer_list<const Tensor*> inputs, detail::BackwardFn backward) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = std::make_shared<Buffer>(std::move(values));
    out.attach(std::move(op), inputs, std::move(backward));
    return out;
  }

  // Result sharing `source`'s value buffer under a new shape.
  static Tensor alias(const Tensor& source, Shape shape, std::string op,
                      detail::BackwardFn backward) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = source.data_;
    out.attach(std::move(op), {&source}, std::move(backward));
    return out;
  }

 private:
  void attach(std::string op, std::initializer_list<const Tensor*> inputs,
              detail::BackwardFn backward) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (!any) return;
    auto node = std::make_shared<detail::Node>();
    node->op = std::move(op);
    node->backward = std::move(backward);
    for (const Tensor* t : inputs) node->inputs.push_back(t->slot_);
    slot_ = std::make_shared<detail::GradSlot>();
    slot_->shape = shape_;
    slot_->fn = std::move(node);
  }

  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<detail::GradSlot> slot_;
};

namespace detail {

// Reverse topological order of the interior slots reachable from `root`.
// Slots are held by shared_ptr: releasing a node may drop the last other
// reference to its inputs before they are visited.
inline std::vector<std::shared_ptr<GradSlot>> topo_order(const std::shared_ptr<GradSlot>& root) {
  std::vector<std::shared_ptr<GradSlot>> order;
  std::unordered_set<GradSlot*> visited;
  std::vector<std::pair<std::shared_ptr<GradSlot>, std::size_t>> stack{{root, 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [slot, next] = stack.back();
    if (slot->released) {
      throw ContractError("backward through a graph that was already consumed");
    }
    if (slot->fn && next < slot->fn->inputs.size()) {
      const std::shared_ptr<GradSlot>& child = slot->fn->inputs[next++];
      if (child && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    if (slot->fn) order.push_back(slot);
    stack.pop_back();
  }
  return order;  // post-order: inputs before outputs
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) {
    throw ContractError("backward() needs a scalar, got shape " + to_string(shape_));
  }
  if (!slot_) throw ContractError("backward() on a tensor that does not require grad");
  if (slot_->released) throw ContractError("backward() called twice on the same graph");
  if (!slot_->fn) {
    slot_->grad[0] += 1.0;
    return;
  }
  std::vector<std::shared_ptr<detail::GradSlot>> order = detail::topo_order(slot_);
  slot_->grad.assign(1, 1.0);
  detail::GradSpans grad_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::GradSlot* slot = it->get();
    std::shared_ptr<detail::Node> node = std::move(slot->fn);
    slot->released = true;
    if (!slot->grad.empty()) {
      grad_in.clear();
      for (const auto& input : node->inputs) {
        if (!input) {
          grad_in.emplace_back();
          continue;
        }
        if (input->grad.empty()) input->grad.assign(numel(input->shape), 0.0);
        grad_in.emplace_back(input->grad.data(), input->grad.size());
      }
      node->backward({slot->grad.data(), slot->grad.size()}, grad_in);
    }
    Buffer().swap(slot->grad);
    // `node` goes out of scope here, dropping saved values and input links.
  }
}

}  // namespace dispatcher
