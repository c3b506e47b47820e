#pragma once

// Gradient self-checks: every primitive op (first and second order) against
// central differences, the conv classifier end to end, Meta-SGD
// meta-gradients through unrolled inner steps, and the quadratic closed forms.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mlab/autodiff.hpp"
#include "mlab/gradcheck.hpp"
#include "mlab/meta.hpp"
#include "mlab/models.hpp"
#include "mlab/tasks.hpp"

namespace mlab::selfcheck {

inline constexpr double kEpsilon = 1e-5;
inline constexpr double kFirstOrderTol = 1e-5;
inline constexpr double kSecondOrderTol = 1e-4;

struct Outcome {
  std::string name;
  double error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

struct PrimitiveCase {
  std::string name;
  ParamSet inputs;
  std::function<Var(const VarMap&)> op;
};

namespace detail {

inline Tensor uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Magnitudes in [lo, hi] with random sign: keeps relu/reciprocal off their kinks.
inline Tensor away_from_zero(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  Tensor t = uniform(rng, std::move(shape), lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

// Distinct values on a 0.05 grid: every 2x2 window has a unique maximum.
inline Tensor distinct(std::mt19937_64& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::vector<double> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 1.0;
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

}  // namespace detail

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&rng](Shape s) { return detail::uniform(rng, std::move(s), -1.0, 1.0); };
  auto p = [](const VarMap& m, const char* k) { return m.at(k); };
  const auto idx = std::make_shared<const std::vector<std::size_t>>(
      std::vector<std::size_t>{4, 0, 7, 4, 2, 9});

  std::vector<PrimitiveCase> c;
  c.push_back({"add", {{"a", u({2, 3})}, {"b", u({2, 3})}},
               [=](const VarMap& m) { return add(p(m, "a"), p(m, "b")); }});
  c.push_back({"sub", {{"a", u({2, 3})}, {"b", u({2, 3})}},
               [=](const VarMap& m) { return sub(p(m, "a"), p(m, "b")); }});
  c.push_back({"hadamard", {{"a", u({2, 3})}, {"b", u({2, 3})}},
               [=](const VarMap& m) { return hadamard(p(m, "a"), p(m, "b")); }});
  c.push_back({"scale", {{"a", u({3, 2})}},
               [=](const VarMap& m) { return scale(p(m, "a"), -1.7); }});
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
      Shape sb = tb ? Shape{2, 4} : Shape{4, 2};
      c.push_back({"matmul" + std::string(ta ? "_ta" : "") + (tb ? "_tb" : ""),
                   {{"a", u(sa)}, {"b", u(sb)}},
                   [=](const VarMap& m) { return matmul(p(m, "a"), p(m, "b"), ta, tb); }});
    }
  }
  c.push_back({"conv2d", {{"x", u({2, 2, 4, 5})}, {"w", u({3, 2, 3, 3})}},
               [=](const VarMap& m) { return conv2d(p(m, "x"), p(m, "w")); }});
  c.push_back({"conv2d_input_grad", {{"g", u({2, 3, 4, 5})}, {"w", u({3, 2, 3, 3})}},
               [=](const VarMap& m) { return conv2d_input_grad(p(m, "g"), p(m, "w")); }});
  c.push_back({"conv2d_weight_grad", {{"x", u({2, 2, 4, 5})}, {"g", u({2, 3, 4, 5})}},
               [=](const VarMap& m) { return conv2d_weight_grad(p(m, "x"), p(m, "g")); }});
  c.push_back({"maxpool2x2", {{"x", detail::distinct(rng, {2, 2, 4, 4})}},
               [=](const VarMap& m) { return maxpool2x2(p(m, "x")); }});
  c.push_back({"gather", {{"x", u({2, 5})}},
               [=](const VarMap& m) { return gather(p(m, "x"), idx, {2, 3}); }});
  c.push_back({"scatter", {{"g", u({3, 2})}},
               [=](const VarMap& m) { return scatter(p(m, "g"), idx, {2, 5}); }});
  c.push_back({"relu", {{"x", detail::away_from_zero(rng, {3, 4}, 0.1, 1.0)}},
               [=](const VarMap& m) { return relu(p(m, "x")); }});
  c.push_back({"flatten", {{"x", u({2, 2, 2, 2})}},
               [=](const VarMap& m) { return flatten(p(m, "x")); }});
  c.push_back({"channel_broadcast", {{"v", u({3})}},
               [=](const VarMap& m) { return channel_broadcast(p(m, "v"), {2, 3, 2, 2}); }});
  c.push_back({"channel_sum", {{"x", u({2, 3, 2, 2})}},
               [=](const VarMap& m) { return channel_sum(p(m, "x")); }});
  c.push_back({"affine_norm", {{"x", u({2, 3, 2, 2})}, {"s", u({3})}, {"b", u({3})}},
               [=](const VarMap& m) { return affine_norm(p(m, "x"), p(m, "s"), p(m, "b")); }});
  c.push_back({"sum", {{"x", u({3, 4})}}, [=](const VarMap& m) { return sum(p(m, "x")); }});
  c.push_back({"mean", {{"x", u({3, 4})}}, [=](const VarMap& m) { return mean(p(m, "x")); }});
  c.push_back({"fill", {{"s", u({})}}, [=](const VarMap& m) { return fill(p(m, "s"), {2, 3}); }});
  c.push_back({"softmax", {{"z", u({3, 4})}},
               [=](const VarMap& m) { return softmax(p(m, "z")); }});
  c.push_back({"softmax_cross_entropy", {{"z", u({4, 3})}}, [=](const VarMap& m) {
                 return softmax_cross_entropy(p(m, "z"), {0, 2, 1, 2});
               }});
  c.push_back({"dot", {{"a", u({5})}, {"b", u({5})}},
               [=](const VarMap& m) { return dot(p(m, "a"), p(m, "b")); }});
  c.push_back({"l2_norm", {{"x", u({2, 3})}},
               [=](const VarMap& m) { return l2_norm(p(m, "x")); }});
  c.push_back({"reciprocal", {{"x", detail::away_from_zero(rng, {2, 3}, 0.5, 1.5)}},
               [=](const VarMap& m) { return reciprocal(p(m, "x")); }});
  return c;
}

/// h(x) = <y, R> + 1/2 <y, y> with y = op(x); the quadratic term keeps the
/// first gradient x-dependent even for linear ops.
inline Var probe_loss(const PrimitiveCase& pc, Graph& g, const VarMap& m, const Tensor& r) {
  const Var y = pc.op(m);
  return add(dot(y, g.constant(r)), scale(dot(y, y), 0.5));
}

inline Tensor probe_weights(const PrimitiveCase& pc, std::uint64_t seed) {
  Graph g;
  VarMap m;
  for (const auto& [k, t] : pc.inputs) m.emplace(k, g.constant(t));
  std::mt19937_64 rng(seed);
  return detail::uniform(rng, pc.op(m).shape(), -1.0, 1.0);
}

inline Outcome check_first_order(const PrimitiveCase& pc, std::optional<Op> fault,
                                 std::uint64_t seed) {
  const Tensor r = probe_weights(pc, seed);
  const double err = finite_diff_check(
      [&](Graph& g, const VarMap& m) {
        g.inject_fault(fault);
        return probe_loss(pc, g, m, r);
      },
      pc.inputs, kEpsilon);
  return {pc.name, err, kFirstOrderTol, err < kFirstOrderTol};
}

/// s(x) = sum_k <dh/dx_k, R2_k>, differentiated through the create_graph backward.
inline Outcome check_second_order(const PrimitiveCase& pc, std::optional<Op> fault,
                                  std::uint64_t seed) {
  const Tensor r = probe_weights(pc, seed);
  std::mt19937_64 rng(seed + 1);
  ParamSet r2;
  for (const auto& [k, t] : pc.inputs) r2.emplace(k, detail::uniform(rng, t.shape(), -1.0, 1.0));
  const double err = finite_diff_check(
      [&](Graph& g, const VarMap& m) {
        g.inject_fault(fault);
        const VarMap grads = g.grad(probe_loss(pc, g, m, r), m, true);
        Var total = g.constant(Tensor::scalar(0.0));
        for (const auto& [k, v] : grads) total = add(total, dot(v, g.constant(r2.at(k))));
        return total;
      },
      pc.inputs, kEpsilon);
  return {pc.name + " (2nd order)", err, kSecondOrderTol, err < kSecondOrderTol};
}

inline std::vector<Outcome> primitive_checks(std::optional<Op> fault = std::nullopt,
                                             std::uint64_t seed = 17) {
  std::vector<Outcome> out;
  for (const auto& pc : primitive_cases(seed)) {
    out.push_back(check_first_order(pc, fault, seed));
    out.push_back(check_second_order(pc, fault, seed));
  }
  return out;
}

/// Cross-entropy of the full desk-scale conv classifier on a random batch.
inline Outcome conv_model_check(std::optional<Op> fault = std::nullopt,
                                std::uint64_t seed = 5) {
  const ModelSpec spec = ModelSpec::desk();
  ParamSet params = init_params(spec, seed);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : params) {
    if (name.find("norm") != std::string::npos || name.find("bias") != std::string::npos) {
      const Tensor jitter = detail::uniform(rng, t.shape(), -0.2, 0.2);
      t = kernels::add(t, jitter);
    }
  }
  Shape xs{5};
  const Shape in = spec.input_shape();
  xs.insert(xs.end(), in.begin(), in.end());
  const Tensor x = detail::uniform(rng, xs, -1.0, 1.0);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4};
  const double err = finite_diff_check(
      [&](Graph& g, const VarMap& m) {
        g.inject_fault(fault);
        return softmax_cross_entropy(forward(spec, m, g.constant(x)), labels);
      },
      params, kEpsilon);
  return {"conv model (desk spec)", err, kFirstOrderTol, err < kFirstOrderTol};
}

/// Random classification tasks for a small MLP.
struct MlpTaskFixture {
  ModelSpec spec = ModelSpec::mlp({4, 6, 3});
  std::vector<Episode> episodes;
  std::vector<EpisodeTask> tasks;
  ParamSet theta;
  ParamSet alpha;

  explicit MlpTaskFixture(std::uint64_t seed, std::size_t n_tasks = 2) {
    std::mt19937_64 rng(seed);
    theta = init_params(spec, seed);
    alpha = LearningRateSet::learned(theta, 0.0).rates;
    for (auto& [name, t] : alpha) t = detail::uniform(rng, t.shape(), -0.3, 0.6);
    for (std::size_t i = 0; i < n_tasks; ++i) {
      Episode ep;
      ep.support = {detail::uniform(rng, {6, 4}, -1.0, 1.0), {0, 1, 2, 0, 1, 2}};
      ep.query = {detail::uniform(rng, {6, 4}, -1.0, 1.0), {2, 1, 0, 0, 2, 1}};
      ep.class_ids = {0, 1, 2};
      episodes.push_back(std::move(ep));
    }
    for (const auto& ep : episodes) tasks.push_back({&spec, &ep});
  }

  MlpTaskFixture(const MlpTaskFixture&) = delete;
  MlpTaskFixture& operator=(const MlpTaskFixture&) = delete;

  /// Summed query loss after `steps` inner updates; keys "<param>" and "alpha.<param>".
  double outer_loss(const ParamSet& joint, std::size_t steps) const {
    double total = 0.0;
    for (const auto& task : tasks) {
      Graph g;
      VarMap p, lr;
      for (const auto& [name, t] : theta) {
        p.emplace(name, g.parameter(joint.at(name)));
        lr.emplace(name, g.constant(joint.at(kAlphaPrefix + name)));
      }
      const auto adapted = inner_adapt(
          p, lr, [&](const VarMap& q) { return task.support_loss(q); }, steps, false);
      total += task.query_loss(adapted.params).value().item();
    }
    return total;
  }
};

/// meta_gradient() (full second order, learnable alpha) against central
/// differences of the summed post-adaptation query loss.
inline std::vector<Outcome> meta_gradient_checks(std::size_t steps = 2, std::uint64_t seed = 11) {
  const MlpTaskFixture fx(seed);
  LearningRateSet lr{fx.alpha, true};
  const MetaGradient mg = meta_gradient(fx.theta, lr, std::span<const EpisodeTask>(fx.tasks),
                                        steps, false);
  ParamSet joint = fx.theta;
  for (const auto& [name, t] : fx.alpha) joint.emplace(kAlphaPrefix + name, t);
  const ParamSet numeric = numeric_gradient(
      [&](const ParamSet& p) { return fx.outer_loss(p, steps); }, joint, kEpsilon);

  ParamSet num_theta, num_alpha;
  for (const auto& [name, t] : fx.theta) {
    num_theta.emplace(name, numeric.at(name));
    num_alpha.emplace(name, numeric.at(kAlphaPrefix + name));
  }
  const double e_theta = compare_gradients(mg.theta, num_theta).max_rel_error;
  const double e_alpha = compare_gradients(mg.alpha, num_alpha).max_rel_error;
  const std::string tag = " (mlp, " + std::to_string(steps) + " inner steps)";
  return {{"meta-gradient wrt theta" + tag, e_theta, kSecondOrderTol, e_theta < kSecondOrderTol},
          {"meta-gradient wrt alpha" + tag, e_alpha, kSecondOrderTol, e_alpha < kSecondOrderTol}};
}

struct QuadraticRow {
  double theta, c, alpha;
  double full_expected, full_computed;
  double first_expected, first_computed;
  double alpha_expected, alpha_computed;
};

/// One inner step on 1/2 (theta - c)^2:
///   d/dtheta (full)        = (1 - alpha)^2 (theta - c)
///   d/dtheta (first order) = (1 - alpha) (theta - c)
///   d/dalpha               = -(theta' - c)(theta - c)
inline std::vector<QuadraticRow> quadratic_table() {
  const double cases[][3] = {{0.0, 1.0, 0.1}, {1.0, 0.0, 0.1}, {1.0, 0.0, -0.1},
                             {0.3, -0.7, 0.25}, {-1.2, 0.4, -0.05}};
  std::vector<QuadraticRow> rows;
  for (const auto& cs : cases) {
    const double theta = cs[0], c = cs[1], alpha = cs[2];
    const QuadraticTask task{c};
    const ParamSet th{{"theta", Tensor::scalar(theta)}};
    const LearningRateSet lr{{{"theta", Tensor::scalar(alpha)}}, true};
    const std::span<const QuadraticTask> one(&task, 1);
    const MetaGradient full = meta_gradient(th, lr, one, 1, false);
    const MetaGradient first = meta_gradient(th, lr, one, 1, true);
    const double adapted = task.adapted(theta, alpha, 1);
    rows.push_back({theta, c, alpha,
                    (1 - alpha) * (1 - alpha) * (theta - c), full.theta.at("theta").item(),
                    (1 - alpha) * (theta - c), first.theta.at("theta").item(),
                    -(adapted - c) * (theta - c), full.alpha.at("theta").item()});
  }
  return rows;
}

inline double quadratic_max_error(const std::vector<QuadraticRow>& rows) {
  double worst = 0.0;
  for (const auto& r : rows) {
    worst = std::max({worst, std::abs(r.full_expected - r.full_computed),
                      std::abs(r.first_expected - r.first_computed),
                      std::abs(r.alpha_expected - r.alpha_computed)});
  }
  return worst;
}

}  // namespace mlab::selfcheck
