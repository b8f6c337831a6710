#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "atcon/tensor.hpp"

namespace atcon {

/// ReLU backward rule. Guided mode additionally zeroes negative upstream
/// gradients; every other op is unaffected by the mode.
enum class ReluBackward { standard, guided };

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Arguments handed to a backward rule. `needs[j]` says whether the gradient
/// for input j is wanted; the rule fills `grads[j]` for those inputs.
struct BackwardContext {
  Var upstream;
  Var output;
  std::vector<char> needs;
  std::vector<Var> grads;
};

using BackwardRule = std::function<void(BackwardContext&)>;

/// Records operations in order and replays them in exact reverse order.
///
/// Backward rules are themselves written in terms of recorded ops, so calling
/// gradients() with create_graph=true leaves a differentiable gradient graph on
/// the same tape. That is what lets a loss built from Grad-CAM or guided
/// backprop maps be differentiated again with respect to the parameters.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op. When recording is disabled or no input requires grad the
  /// result is a constant and `rule` is dropped.
  Var record(Tensor value, std::vector<Var> inputs, BackwardRule rule);

  /// d(output)/d(wrt[i]) for a scalar output. Targets with no path from the
  /// output get zeros. With create_graph the results are differentiable.
  std::vector<Var> gradients(const Var& output, std::span<const Var> wrt, bool create_graph = false);

  /// Accumulates d(output)/d(leaf) into the grad buffer of every leaf that
  /// requires grad.
  void backward(const Var& output);
  const Tensor* grad(const Var& leaf) const;
  void zero_grad() { leaf_grads_.clear(); }

  ReluBackward relu_backward_mode() const { return relu_mode_; }
  void set_relu_backward_mode(ReluBackward mode) { relu_mode_ = mode; }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;

  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<int, Tensor> leaf_grads_;
  ReluBackward relu_mode_ = ReluBackward::standard;
  bool grad_enabled_ = true;
};

/// Scoped ReLU backward mode.
class ReluModeGuard {
 public:
  ReluModeGuard(Tape& tape, ReluBackward mode) : tape_(tape), saved_(tape.relu_backward_mode()) {
    tape.set_relu_backward_mode(mode);
  }
  ~ReluModeGuard() { tape_.set_relu_backward_mode(saved_); }
  ReluModeGuard(const ReluModeGuard&) = delete;
  ReluModeGuard& operator=(const ReluModeGuard&) = delete;

 private:
  Tape& tape_;
  ReluBackward saved_;
};

/// Scoped recording switch.
class GradModeGuard {
 public:
  GradModeGuard(Tape& tape, bool enabled) : tape_(tape), saved_(tape.grad_enabled()) {
    tape.set_grad_enabled(enabled);
  }
  ~GradModeGuard() { tape_.set_grad_enabled(saved_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  Tape& tape_;
  bool saved_;
};

}  // namespace atcon
