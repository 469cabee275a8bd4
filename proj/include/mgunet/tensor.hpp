#pragma once

// Dense double-precision tensors with define-by-run reverse-mode autodiff.
//
// Every op output keeps shared ownership of the nodes it was computed from
// and a closure that scatters its gradient into them. Node ids grow
// monotonically with creation, so sorting the reachable nodes by id gives a
// topological order of the recorded computation (the tape).

#include <algorithm>
#include <atomic>
#include <concepts>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mgunet/errors.hpp"

namespace mgu {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Allocator handing out 64-byte aligned storage. Vectorized kernels peel
/// their loops by pointer alignment, so a fixed alignment keeps summation
/// order, and therefore results, identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& nan_trap() {
  thread_local bool enabled = false;
  return enabled;
}

// Piecewise-linear ops (relu, max-pool) fold their activation pattern into
// this hash while it is active; gradcheck uses it to skip kink crossings.
struct KinkMonitor {
  bool active = false;
  std::uint64_t hash = 1469598103934665603ull;

  void mix(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
  }
};

inline KinkMonitor& kink_monitor() {
  thread_local KinkMonitor monitor;
  return monitor;
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, every op checks its output and throws NumericalError naming
/// itself on the first non-finite value.
class NanTrapGuard {
 public:
  NanTrapGuard() : previous_(detail::nan_trap()) { detail::nan_trap() = true; }
  ~NanTrapGuard() { detail::nan_trap() = previous_; }
  NanTrapGuard(const NanTrapGuard&) = delete;
  NanTrapGuard& operator=(const NanTrapGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  template <typename V>
    requires std::same_as<std::remove_cvref_t<V>, std::vector<double>>
  static Tensor from_values(Shape shape, V&& values, bool requires_grad = false) {
    return from_values(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
  }

  static Tensor from_values(Shape shape, Buffer values, bool requires_grad = false) {
    if (mgu::numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                           std::to_string(mgu::numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + to_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = mgu::numel(shape);
    return from_values(std::move(shape), Buffer(n, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_values({1}, Buffer{value}, requires_grad);
  }

  /// Creates an op output. Inputs and the backward closure are only retained
  /// when recording is enabled and some input requires a gradient.
  static Tensor make_result(Shape shape, Buffer values,
                            std::vector<Tensor> inputs, const char* op,
                            detail::BackwardFn backward) {
    if (detail::nan_trap()) {
      for (double v : values) {
        if (!std::isfinite(v)) {
          throw NumericalError(std::string("non-finite value produced by op '") +
                               op + "'");
        }
      }
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->id = detail::next_node_id();
    node->op = op;
    bool needs = false;
    if (detail::grad_mode()) {
      for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  const char* op_name() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  double value(std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  /// Raw access for parameter updates and test fixtures. Only leaves may be
  /// mutated; op outputs are immutable.
  std::span<double> mutable_values() {
    if (!node_->is_leaf()) throw ContractError("cannot mutate an op output");
    return node_->value;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad is fixed for op outputs");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(numel(), 0.0)
                               : std::vector<double>(node_->grad.begin(), node_->grad.end());
  }
  void zero_grad() { node_->grad.clear(); }

  /// Leaf copy of the values, cut from the graph.
  Tensor detach() const { return from_values(shape(), node_->value, false); }

  const detail::NodePtr& node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

struct TapeEntry {
  const char* op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output;
};

/// Ordered record of the ops reachable from a root tensor.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::NodePtr> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto node = std::move(stack.back());
      stack.pop_back();
      for (const auto& in : node->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
      }
      tape.nodes_.push_back(std::move(node));
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const auto& a, const auto& b) { return a->id < b->id; });
    return tape;
  }

  /// Non-leaf entries in forward order.
  std::vector<TapeEntry> entries() const {
    std::vector<TapeEntry> out;
    for (const auto& n : nodes_) {
      if (n->is_leaf()) continue;
      TapeEntry e{n->op, {}, n->id};
      for (const auto& in : n->inputs) e.inputs.push_back(in->id);
      out.push_back(std::move(e));
    }
    return out;
  }

  /// Seeds the root with `seed_grad` and visits every recorded op once in
  /// reverse order. Intermediate gradients are released after use; leaf
  /// gradients accumulate across calls.
  std::size_t run_backward(std::span<const double> seed_grad) {
    if (nodes_.empty()) return 0;
    auto& root = *nodes_.back();
    auto& g = root.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed_grad[i];
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = **it;
      if (node.is_leaf()) continue;
      if (!node.grad.empty()) node.backward(node);
      ++visited;
      node.grad.clear();
      node.grad.shrink_to_fit();
    }
    return visited;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::NodePtr> nodes_;
};

/// Populates d(loss)/d(leaf) for every leaf that requires gradients.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  auto tape = Tape::record(loss);
  const double one = 1.0;
  tape.run_backward(std::span<const double>(&one, 1));
}

}  // namespace mgu
