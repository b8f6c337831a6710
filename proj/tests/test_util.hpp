#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "atcon/model.hpp"
#include "atcon/tensor.hpp"

namespace atcon::testing {

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Two-block net on 3x8x8 inputs; small enough for dense finite differences.
inline Model tiny_model(std::uint64_t seed, int classes = 3, HeadMode head = HeadMode::multiclass_softmax) {
  TinyCnnConfig cfg;
  cfg.channels = {4, 6};
  cfg.input_channels = 3;
  cfg.image_size = 8;
  cfg.num_classes = classes;
  cfg.head_mode = head;
  cfg.seed = seed;
  return build_tinycnn(cfg);
}

/// Fresh models have zero biases, which makes them positively homogeneous and
/// integrated gradients exact for any step count. Random biases break that.
inline Model with_random_biases(Model m, std::uint64_t seed, float amplitude = 0.5f) {
  for (auto& [name, t] : m.mutable_params()) {
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      t = random_tensor(t.shape(), seed + std::hash<std::string>{}(name), -amplitude, amplitude);
    }
  }
  return m;
}

// Agreement rule for one coordinate: |a - n| <= rtol * max(|a|, |n|, floor).
// The floor (a millionth of the largest gradient in the check) only matters for
// coordinates whose true gradient is exactly zero. Meaningful only against the
// f64 build; in f32 the rounding noise of a difference quotient is ~1e-4.
struct FdReport {
  int checked = 0;
  int passed = 0;
  double worst = 0.0;
  std::string worst_where;

  double coverage() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
};

inline constexpr double kFdRelTol = 5e-3;
inline constexpr double kFdFloorFraction = 1e-6;

/// Central differences on `per_tensor` random coordinates of every parameter.
inline FdReport fd_check_params(const Model& model, const ParamMap& analytic,
                                const std::function<double(const Model&)>& loss, int per_tensor, double eps,
                                std::uint64_t seed) {
  struct Probe {
    std::string name;
    std::size_t index;
    double a;
    double n;
  };
  std::mt19937_64 rng(seed);
  std::vector<Probe> probes;
  double scale = 0.0;
  for (const auto& [name, value] : model.params()) {
    const Tensor& g = analytic.at(name);
    for (Real v : g.data()) scale = std::max(scale, static_cast<double>(std::fabs(v)));
    std::uniform_int_distribution<std::size_t> pick(0, value.size() - 1);
    for (int k = 0; k < per_tensor; ++k) {
      const std::size_t i = pick(rng);
      Model plus = model;
      Model minus = model;
      plus.mutable_params()[name][i] += static_cast<Real>(eps);
      minus.mutable_params()[name][i] -= static_cast<Real>(eps);
      // the perturbation actually representable in Real
      const double h = static_cast<double>(plus.params().at(name)[i]) - minus.params().at(name)[i];
      const double n = (loss(plus) - loss(minus)) / h;
      probes.push_back({name, i, g[i], n});
    }
  }
  FdReport rep;
  const double floor = kFdFloorFraction * scale;
  for (const auto& p : probes) {
    const double denom = std::max({std::fabs(p.a), std::fabs(p.n), floor, 1e-12});
    const double err = std::fabs(p.a - p.n) / denom;
    ++rep.checked;
    if (err <= kFdRelTol) ++rep.passed;
    if (err > rep.worst) {
      rep.worst = err;
      rep.worst_where = p.name + "[" + std::to_string(p.index) + "] a=" + std::to_string(p.a) +
                        " fd=" + std::to_string(p.n);
    }
  }
  return rep;
}

}  // namespace atcon::testing
