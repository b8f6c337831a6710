// Finite-difference oracles. Built against the f64 library so that difference
// quotients are accurate to ~1e-9 and the comparison isolates rule errors.
#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "atcon/attribution.hpp"
#include "atcon/consistency.hpp"
#include "atcon/evaluate.hpp"
#include "atcon/ops.hpp"
#include "atcon/training.hpp"
#include "gradcheck_cases.hpp"
#include "test_util.hpp"

static_assert(sizeof(atcon::Real) == 8, "gradient checks need the f64 build");

using namespace atcon;
using namespace atcon::testing;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Projects the op output onto fixed random weights so that every output
// element contributes to the scalar.
Var project(Tape& tape, const Var& out, std::uint64_t seed) {
  return ops::sum(ops::mul(out, tape.constant(random_tensor(out.shape(), seed))));
}

double eval_scalar(const Builder& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  return project(tape, f(tape, vars), 99).value()[0];
}

// First order: analytic d/dinputs vs central differences on every coordinate.
void check_first_order(const std::string& name, const Builder& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  auto grads = tape.gradients(project(tape, f(tape, vars), 99), vars);
  const double eps = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += eps;
      minus[k][i] -= eps;
      const double fd = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2 * eps);
      const double a = grads[k].value()[i];
      EXPECT_NEAR(a, fd, 1e-6 * std::max(1.0, std::fabs(fd))) << name << " input " << k << " coord " << i;
    }
  }
}

// Second order: the gradient graph itself must be differentiable. Checks
// d/dx <r, d/dx <s, f(x)>> against differences of the first-order gradient.
void check_second_order(const std::string& name, const Builder& f, const std::vector<Tensor>& inputs) {
  auto inner = [&](const std::vector<Tensor>& in, bool create, Tape& tape, std::vector<Var>& vars) {
    for (const auto& t : in) vars.push_back(tape.leaf(t, true));
    auto g = tape.gradients(project(tape, f(tape, vars), 99), vars, create);
    Var total;
    for (std::size_t k = 0; k < g.size(); ++k) {
      Var term = project(tape, g[k], 200 + k);
      total = total.valid() ? ops::add(total, term) : term;
    }
    return total;
  };
  Tape tape;
  std::vector<Var> vars;
  Var h = inner(inputs, true, tape, vars);
  auto hg = tape.gradients(h, vars);
  auto value = [&](const std::vector<Tensor>& in) {
    Tape t;
    std::vector<Var> v;
    return inner(in, false, t, v).value()[0];
  };
  const double eps = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += eps;
      minus[k][i] -= eps;
      const double fd = (value(plus) - value(minus)) / (2 * eps);
      EXPECT_NEAR(hg[k].value()[i], fd, 1e-5 * std::max(1.0, std::fabs(fd))) << name << " input " << k << " coord " << i;
    }
  }
}

struct OpCase {
  std::string name;
  Builder f;
  std::vector<Tensor> inputs;
};

std::vector<OpCase> op_cases() {
  auto r = [](Shape s, std::uint64_t seed, float lo = -1, float hi = 1) { return random_tensor(s, seed, lo, hi); };
  std::vector<OpCase> c;
  auto un = [&](std::string n, std::function<Var(const Var&)> op, Tensor t) {
    c.push_back({n, [op](Tape&, const std::vector<Var>& v) { return op(v[0]); }, {t}});
  };
  un("neg", ops::neg, r({5}, 1));
  un("scale", [](const Var& x) { return ops::scale(x, -2.5f); }, r({5}, 2));
  un("add_scalar", [](const Var& x) { return ops::add_scalar(x, 0.7f); }, r({5}, 3));
  un("exp", ops::exp, r({5}, 4));
  un("log", ops::log, r({5}, 5, 0.5f, 2.0f));
  un("sqrt", ops::sqrt, r({5}, 6, 0.5f, 2.0f));
  un("square", ops::square, r({5}, 7));
  un("sigmoid", ops::sigmoid, r({5}, 8, -3, 3));
  un("softplus", ops::softplus, r({5}, 9, -3, 3));
  un("abs", ops::abs, r({5}, 10));
  un("relu", ops::relu, r({6}, 11));
  un("clamp_min", [](const Var& x) { return ops::clamp_min(x, 0.1f); }, r({6}, 12));
  un("sum", ops::sum, r({4}, 13));
  un("mean", ops::mean, r({4}, 14));
  un("expand", [](const Var& x) { return ops::expand(x, Shape{2, 3}); }, r({1}, 15));
  un("reshape", [](const Var& x) { return ops::reshape(x, Shape{3, 2}); }, r({6}, 16));
  un("select", [](const Var& x) { return ops::select(x, 2); }, r({4}, 17));
  un("max_all", ops::max_all, r({6}, 18));
  un("min_all", ops::min_all, r({6}, 19));
  un("maxpool", [](const Var& x) { return ops::maxpool2d(x, 2, 2); }, r({2, 4, 4}, 20));
  un("adaptive_maxpool", [](const Var& x) { return ops::adaptive_maxpool2d(x, 2, 3); }, r({5, 5}, 21));
  un("upsample", [](const Var& x) { return ops::upsample_bilinear(x, 7, 5); }, r({3, 2}, 22));
  un("box_filter3", ops::box_filter3, r({4, 3}, 23));
  un("channel_sum_spatial", ops::channel_sum_spatial, r({3, 2, 2}, 24));
  un("channel_expand_spatial", [](const Var& x) { return ops::channel_expand_spatial(x, 2, 3); }, r({3}, 25));
  un("sum_channels", ops::sum_channels, r({3, 2, 2}, 26));
  un("expand_channels", [](const Var& x) { return ops::expand_channels(x, 3); }, r({2, 2}, 27));
  un("channel_max", ops::channel_max, r({3, 2, 3}, 28));
  un("global_avg_pool", ops::global_avg_pool, r({3, 2, 2}, 29));
  un("logsumexp", ops::logsumexp, r({4}, 30));
  un("softmax", ops::softmax, r({4}, 31));

  auto bin = [&](std::string n, std::function<Var(const Var&, const Var&)> op, Tensor a, Tensor b) {
    c.push_back({n, [op](Tape&, const std::vector<Var>& v) { return op(v[0], v[1]); }, {a, b}});
  };
  bin("add", ops::add, r({4}, 40), r({4}, 41));
  bin("sub", ops::sub, r({4}, 42), r({4}, 43));
  bin("mul", ops::mul, r({4}, 44), r({4}, 45));
  bin("div", ops::div, r({4}, 46), r({4}, 47, 0.5f, 2.0f));
  bin("weighted_channel_sum", ops::weighted_channel_sum, r({3, 2, 2}, 48), r({3}, 49));
  bin("channel_outer", ops::channel_outer, r({3}, 50), r({2, 2}, 51));
  bin("channel_dot", ops::channel_dot, r({3, 2, 2}, 52), r({2, 2}, 53));
  bin("matvec", ops::matvec, r({3, 4}, 54), r({4}, 55));
  bin("matvec_t", ops::matvec_t, r({3, 4}, 56), r({3}, 57));
  bin("outer", ops::outer, r({3}, 58), r({4}, 59));
  c.push_back({"linear",
               [](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); },
               {r({4}, 60), r({3, 4}, 61), r({3}, 62)}});
  c.push_back({"conv2d",
               [](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], &v[2], 2, 1); },
               {r({2, 5, 5}, 63), r({3, 2, 3, 3}, 64), r({3}, 65)}});
  c.push_back({"conv2d_input_grad",
               [](Tape&, const std::vector<Var>& v) { return ops::conv2d_input_grad(v[0], v[1], 5, 5, 2, 1); },
               {r({3, 3, 3}, 66), r({3, 2, 3, 3}, 67)}});
  c.push_back({"conv2d_weight_grad",
               [](Tape&, const std::vector<Var>& v) { return ops::conv2d_weight_grad(v[0], v[1], 3, 2, 1); },
               {r({2, 5, 5}, 68), r({3, 3, 3}, 69)}});
  // a small relu/conv/pool chain so second-order rules meet each other
  c.push_back({"conv_relu_pool_chain",
               [](Tape&, const std::vector<Var>& v) {
                 Var h = ops::relu(ops::conv2d(v[0], v[1], nullptr, 1, 1));
                 return ops::softmax(ops::global_avg_pool(ops::maxpool2d(ops::square(h), 2, 2)));
               },
               {r({2, 4, 4}, 70), r({3, 2, 3, 3}, 71)}});
  return c;
}

}  // namespace

TEST(GradCheck, EveryOpFirstOrder) {
  for (const auto& c : op_cases()) check_first_order(c.name, c.f, c.inputs);
}

TEST(GradCheck, EveryOpSecondOrder) {
  for (const auto& c : op_cases()) check_second_order(c.name, c.f, c.inputs);
}

TEST(GradCheck, GuidedModeSecondOrder) {
  // guided backprop maps are differentiated again during consistency training
  Builder f = [](Tape& tape, const std::vector<Var>& v) {
    Var y = ops::sum(ops::mul(ops::relu(ops::conv2d(v[0], v[1], nullptr, 1, 1)),
                              tape.constant(random_tensor({3, 4, 4}, 5))));
    ReluModeGuard guided(tape, ReluBackward::guided);
    return tape.gradients(y, std::vector<Var>{v[0]}, true)[0];
  };
  check_first_order("guided_input_grad", f, {random_tensor({2, 4, 4}, 1), random_tensor({3, 2, 3, 3}, 2)});
}

TEST(GradCheck, SupervisedLossMulticlassAndMultilabel) {
  for (HeadMode head : {HeadMode::multiclass_softmax, HeadMode::multilabel_sigmoid}) {
    for (std::uint64_t s = 1; s <= 3; ++s) {
      const Model m = tiny_model(s, 3, head);
      const Tensor x = random_tensor({3, 8, 8}, s, 0, 1);
      const std::vector<int> labels = head == HeadMode::multiclass_softmax ? std::vector<int>{0, 0, 1}
                                                                           : std::vector<int>{1, 0, 1};
      const auto g = supervised_gradient(m, {x}, {labels});
      const auto rep = fd_check_params(
          m, g.grads, [&](const Model& mm) { return supervised_loss_value(mm.logits(x), labels, head); }, 12,
          kGradCheckEps, s);
      EXPECT_EQ(rep.passed, rep.checked) << to_string(head) << " seed " << s << " worst " << rep.worst_where;
    }
  }
}

TEST(GradCheck, EveryConsistencyVariant) {
  for (std::uint64_t s = 1; s <= 3; ++s) {
    const Model m = tiny_model(100 + s);
    const Tensor x = random_tensor({3, 8, 8}, s, 0, 1);
    for (const auto& [name, cfg] : consistency_variants(m)) {
      const auto res = consistency_loss(m, x, cfg, true);
      ASSERT_TRUE(res.grads.has_value()) << name;
      const auto rep = fd_check_params(
          m, *res.grads, [&](const Model& mm) { return consistency_loss(mm, x, cfg, false).loss; }, 10,
          kGradCheckEps, s);
      EXPECT_EQ(rep.passed, rep.checked) << name << " seed " << s << " worst " << rep.worst_where;
    }
  }
}

TEST(GradCheck, FrozenMaskDropsOnlyTheMaskPath) {
  const Model m = tiny_model(7);
  const Tensor x = random_tensor({3, 8, 8}, 7, 0, 1);
  ConsistencyConfig cfg;
  cfg.freeze_mask = true;
  const auto res = consistency_loss(m, x, cfg, true);
  ASSERT_TRUE(res.grads);
  // reference: same loss with the mask computed from the unperturbed model
  const Mask mask = make_mask(guided_backprop(m, x, res.diag.class_index));
  const Tensor p = mask.to_tensor();
  auto frozen_loss = [&](const Model& mm) {
    Tensor xm = x;
    for (int c = 0; c < x.dim(0); ++c)
      for (int i = 0; i < x.dim(1); ++i)
        for (int j = 0; j < x.dim(2); ++j) xm.at(c, i, j) *= p.at(i, j);
    const auto a = grad_cam(mm, x, res.diag.class_index);
    const auto b = grad_cam(mm, xm, res.diag.class_index);
    return -correlate(a.values, b.values, CorrelationMetric::pearson);
  };
  EXPECT_NEAR(frozen_loss(m), res.loss, 1e-9);
  const auto rep = fd_check_params(m, *res.grads, frozen_loss, 10, kGradCheckEps, 7);
  EXPECT_EQ(rep.passed, rep.checked) << rep.worst_where;
}

TEST(GradCheck, GradCamAlphaMatchesFiniteDifferenceOfLogit) {
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Model m = tiny_model(s);
    const Tensor x = random_tensor({3, 8, 8}, s, 0, 1);
    const int cls = static_cast<int>(s % 3);
    const auto ctx = grad_cam_context(m, x, cls);
    const auto fd = alpha_by_finite_differences(m, x, cls, m.last_conv_layer(), kGradCheckEps);
    ASSERT_EQ(fd.size(), ctx.weights.size());
    for (std::size_t k = 0; k < fd.size(); ++k) {
      EXPECT_LE(std::fabs(ctx.weights[k] - fd[k]), 1e-3 * std::max(std::fabs(fd[k]), 1e-12))
          << "seed " << s << " channel " << k << " alpha " << ctx.weights[k] << " fd " << fd[k];
    }
  }
}
