#include "atcon/autodiff.hpp"

#include <algorithm>

#include "atcon/errors.hpp"
#include "atcon/ops.hpp"

namespace atcon {

Tape& Var::tape() const {
  if (!tape_) throw InternalError("use of an empty Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().nodes_[static_cast<std::size_t>(id_)].value; }

bool Var::requires_grad() const { return tape().nodes_[static_cast<std::size_t>(id_)].requires_grad; }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardRule rule) {
  Node node;
  node.value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) {
    if (!in.valid() || in.tape_ != this) throw InternalError("op input from a different tape");
    any = any || in.requires_grad();
  }
  if (grad_enabled_ && any) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.id_);
    node.rule = std::move(rule);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

std::vector<Var> Tape::gradients(const Var& output, std::span<const Var> wrt, bool create_graph) {
  if (output.tape_ != this) throw InternalError("gradients() output from a different tape");
  if (output.size() != 1) {
    throw DimensionError("gradients() needs a scalar output, got " + shape_string(output.shape()));
  }
  const int out = output.id_;
  std::vector<char> target(static_cast<std::size_t>(out) + 1, 0);
  int lo = out;
  for (const auto& w : wrt) {
    if (w.tape_ != this) throw InternalError("gradients() target from a different tape");
    if (w.id_ <= out) {
      target[static_cast<std::size_t>(w.id_)] = 1;
      lo = std::min(lo, w.id_);
    }
  }

  // A node matters only if some target is reachable through its inputs.
  std::vector<char> needed(target);
  for (int i = lo; i <= out; ++i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.requires_grad) {
      if (!node.is_leaf) needed[static_cast<std::size_t>(i)] = 0;
      continue;
    }
    for (int in : node.inputs) {
      if (in >= lo && needed[static_cast<std::size_t>(in)]) {
        needed[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  }

  GradModeGuard mode(*this, create_graph);
  std::vector<Var> grads(static_cast<std::size_t>(out) + 1);
  grads[static_cast<std::size_t>(out)] = constant(Tensor(output.shape(), 1.0f));

  for (int i = out; i >= lo; --i) {
    const auto ui = static_cast<std::size_t>(i);
    if (!grads[ui].valid() || !needed[ui]) continue;
    Node& node = nodes_[ui];
    if (node.inputs.empty()) continue;

    BackwardContext ctx;
    ctx.upstream = grads[ui];
    ctx.output = Var(this, i);
    ctx.needs.assign(node.inputs.size(), 0);
    ctx.grads.resize(node.inputs.size());
    bool any = false;
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const int in = node.inputs[j];
      if (in >= i) throw InternalError("tape cycle: op input recorded after the op");
      ctx.needs[j] = (in >= lo && needed[static_cast<std::size_t>(in)]) ? 1 : 0;
      any = any || ctx.needs[j];
    }
    if (!any) continue;
    if (!node.rule) throw InternalError("missing backward rule on recorded op");
    node.rule(ctx);

    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (!ctx.needs[j] || !ctx.grads[j].valid()) continue;
      const auto in = static_cast<std::size_t>(node.inputs[j]);
      if (ctx.grads[j].shape() != nodes_[in].value.shape()) {
        throw InternalError("backward rule produced gradient of shape " + shape_string(ctx.grads[j].shape()) +
                            " for input of shape " + shape_string(nodes_[in].value.shape()));
      }
      grads[in] = grads[in].valid() ? ops::add(grads[in], ctx.grads[j]) : ctx.grads[j];
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.id_ <= out && grads[static_cast<std::size_t>(w.id_)].valid()) {
      result.push_back(grads[static_cast<std::size_t>(w.id_)]);
    } else {
      result.push_back(constant(Tensor(w.shape(), 0.0f)));
    }
  }
  return result;
}

void Tape::backward(const Var& output) {
  std::vector<Var> leaves;
  for (int i = 0; i <= output.id_; ++i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.is_leaf && node.requires_grad) leaves.push_back(Var(this, i));
  }
  auto grads = gradients(output, leaves, false);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto [it, inserted] = leaf_grads_.try_emplace(leaves[k].id_, grads[k].value());
    if (!inserted) {
      auto dst = it->second.data();
      auto src = grads[k].value().data();
      for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
    }
  }
}

const Tensor* Tape::grad(const Var& leaf) const {
  auto it = leaf_grads_.find(leaf.id_);
  return it == leaf_grads_.end() ? nullptr : &it->second;
}

}  // namespace atcon
