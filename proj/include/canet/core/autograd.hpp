#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "canet/core/tensor.hpp"

namespace canet {

/// A tensor participating in a recorded computation.
/// Records which side of a non-differentiable point each kinked op took.
/// Finite-difference checks compare traces to detect probes that straddle
/// a kink. Ops only pay for this while a trace is installed.
class BranchTrace {
 public:
  void mix(std::uint64_t v) {
    hash_ ^= v + 0x9e3779b97f4a7c15ull + (hash_ << 6) + (hash_ >> 2);
    ++count_;
  }
  std::uint64_t hash() const noexcept { return hash_; }
  std::uint64_t count() const noexcept { return count_; }

 private:
  std::uint64_t hash_ = 0;
  std::uint64_t count_ = 0;
};

inline thread_local BranchTrace* active_branch_trace = nullptr;

/// Installs a trace for the current thread for the lifetime of the guard.
class BranchTraceScope {
 public:
  explicit BranchTraceScope(BranchTrace& t) : prev_(active_branch_trace) { active_branch_trace = &t; }
  ~BranchTraceScope() { active_branch_trace = prev_; }
  BranchTraceScope(const BranchTraceScope&) = delete;
  BranchTraceScope& operator=(const BranchTraceScope&) = delete;

 private:
  BranchTrace* prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() {
    if (!grad.empty()) grad.fill(T(0));
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return make_var(std::move(value), false);
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  return make_var(std::move(value), true);
}

/// Copies the value into a fresh node that no tape will differentiate through.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return constant(x->value);
}

/// Records backward closures in forward order and replays them in reverse.
/// A non-recording tape is used for inference: ops then produce constants.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return ops_.size(); }

  template <typename... Inputs>
  bool wants_grad(const Inputs&... inputs) const {
    return recording_ && (... || (inputs && inputs->requires_grad));
  }

  void record(std::function<void()> backward_fn) {
    if (recording_) ops_.push_back(std::move(backward_fn));
  }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad node.
  /// The tape is cleared afterwards and cannot be replayed.
  void backward(const Var<T>& loss) {
    if (!loss || loss->value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got " +
                       (loss ? to_string(loss->value.shape()) : std::string("null")));
    }
    if (!loss->requires_grad) throw std::logic_error("backward: loss was not produced on a recording tape");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    loss->ensure_grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
    consumed_ = true;
  }

 private:
  bool recording_;
  bool consumed_ = false;
  std::vector<std::function<void()>> ops_;
};

}  // namespace canet
