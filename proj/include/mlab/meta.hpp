#pragma once

// MAML and Meta-SGD under one trainer. The inner loop applies
//   theta <- theta - alpha * grad L_support(theta)      (elementwise alpha)
// `steps` times; the outer loop differentiates the summed query losses of the
// adapted parameters with respect to theta and, in meta-sgd mode, alpha.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlab/autodiff.hpp"
#include "mlab/checkpoint.hpp"
#include "mlab/models.hpp"
#include "mlab/tasks.hpp"

namespace mlab {

enum class Mode { Maml, MetaSgd };

inline std::string_view mode_name(Mode m) {
  return m == Mode::Maml ? "maml" : "meta-sgd";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "maml") return Mode::Maml;
  if (s == "meta-sgd") return Mode::MetaSgd;
  throw Error("unknown mode '" + std::string(s) + "' (expected maml or meta-sgd)");
}

enum class OuterOptimizerKind { Adam, Sgd };

struct MetaConfig {
  Mode mode = Mode::Maml;
  std::size_t inner_steps = 5;
  double inner_lr_init = 0.01;
  std::size_t meta_batch = 3;
  double outer_lr = 0.001;
  OuterOptimizerKind optimizer = OuterOptimizerKind::Adam;
  std::size_t iterations = 0;
  bool first_order = false;
  // Keep alpha at its initial value even in meta-sgd mode.
  bool freeze_alpha = false;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_query = 10;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t val_episodes = 20;

  EpisodeShape episode_shape() const { return {n_way, k_shot, q_query}; }

  void validate() const {
    if (inner_steps < 1) throw Error("meta config: inner_steps must be >= 1");
    if (meta_batch < 1) throw Error("meta config: meta_batch must be >= 1");
    if (log_every < 1) throw Error("meta config: log_every must be >= 1");
  }
};

/// Per-parameter inner learning rates, keyed like the ParamSet they step.
/// MAML uses a fixed constant; Meta-SGD learns every entry. Values are never
/// clamped: negative rates are legal.
struct LearningRateSet {
  ParamSet rates;
  bool learnable = false;

  static LearningRateSet fixed(const ParamSet& params, double value) {
    return make(params, value, false);
  }

  static LearningRateSet learned(const ParamSet& params, double init) {
    return make(params, init, true);
  }

  double fraction_negative() const {
    std::size_t neg = 0, total = 0;
    for (const auto& [name, t] : rates) {
      for (double v : t.data()) neg += v < 0.0 ? 1 : 0;
      total += t.numel();
    }
    return total ? static_cast<double>(neg) / static_cast<double>(total) : 0.0;
  }

 private:
  static LearningRateSet make(const ParamSet& params, double value, bool learn) {
    LearningRateSet lr;
    lr.learnable = learn;
    for (const auto& [name, t] : params) lr.rates.emplace(name, Tensor::full(t.shape(), value));
    return lr;
  }
};

struct AdaptedParams {
  VarMap params;
  std::size_t steps = 0;
  std::uint64_t episode_id = 0;
};

/// Anything with support/query losses over a VarMap of model parameters.
template <class T>
concept MetaTask = requires(const T& t, const VarMap& p) {
  { t.support_loss(p) } -> std::same_as<Var>;
  { t.query_loss(p) } -> std::same_as<Var>;
};

/// Cross-entropy support/query losses of a classifier on one episode.
struct EpisodeTask {
  const ModelSpec* spec = nullptr;
  const Episode* episode = nullptr;

  Var support_loss(const VarMap& p) const { return loss(p, episode->support); }
  Var query_loss(const VarMap& p) const { return loss(p, episode->query); }

  Var loss(const VarMap& p, const LabeledSet& set) const {
    Graph& g = p.begin()->second.graph();
    return softmax_cross_entropy(forward(*spec, p, g.constant(set.examples)),
                                 set.labels);
  }
};

/// `steps` gradient steps on the support loss. With track_graph the inner
/// gradients are differentiable (full second order); without it they enter the
/// update as constants, so the result still depends on theta and alpha but only
/// through the update's direct terms.
template <class LossFn>
AdaptedParams inner_adapt(VarMap params, const VarMap& lr, LossFn&& support_loss,
                          std::size_t steps, bool track_graph) {
  if (steps < 1) throw Error("inner_adapt: steps must be >= 1");
  if (params.empty()) throw Error("inner_adapt: empty parameter set");
  for (std::size_t s = 0; s < steps; ++s) {
    const Var loss = support_loss(params);
    if (!loss.value().all_finite()) {
      throw NumericError("inner_adapt: non-finite support loss at step " +
                         std::to_string(s));
    }
    Graph& g = loss.graph();
    const VarMap grads = g.grad(loss, params, track_graph);
    for (auto& [name, v] : params) {
      v = sub(v, hadamard(lr.at(name), grads.at(name)));
    }
  }
  return {std::move(params), steps, 0};
}

struct MetaGradient {
  ParamSet theta;
  ParamSet alpha;  // empty unless the rates are learnable
  double loss = 0.0;
};

namespace detail {

inline void accumulate(ParamSet& into, const VarMap& grads,
                       const std::vector<std::string>& names) {
  for (const auto& name : names) {
    const Tensor& g = grads.at(name).value();
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g);
    } else {
      it->second = kernels::add(it->second, g);
    }
  }
}

}  // namespace detail

/// Gradient of sum_i L_query(adapted_i) with respect to theta (and alpha when
/// learnable). Per-task gradients are summed in task order.
template <MetaTask Task>
MetaGradient meta_gradient(const ParamSet& theta, const LearningRateSet& lr,
                           std::span<const Task> tasks, std::size_t inner_steps,
                           bool first_order) {
  MetaGradient out;
  std::vector<std::string> names;
  for (const auto& [name, t] : theta) names.push_back(name);

  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Graph g;
    VarMap theta_vars, alpha_vars;
    for (const auto& [name, t] : theta) theta_vars.emplace(name, g.parameter(t));
    for (const auto& [name, t] : lr.rates) {
      alpha_vars.emplace(name, lr.learnable ? g.parameter(t) : g.constant(t));
    }
    const Task& task = tasks[i];
    AdaptedParams adapted = inner_adapt(
        theta_vars, alpha_vars,
        [&task](const VarMap& p) { return task.support_loss(p); }, inner_steps,
        !first_order);
    adapted.episode_id = i;
    const Var query = task.query_loss(adapted.params);
    const double q = query.value().item();
    if (!std::isfinite(q)) {
      throw NumericError("meta_gradient: non-finite query loss for task " +
                         std::to_string(i));
    }
    out.loss += q;

    VarMap wrt = theta_vars;
    if (lr.learnable) {
      for (const auto& [name, v] : alpha_vars) wrt.emplace(kAlphaPrefix + name, v);
    }
    const VarMap grads = g.grad(query, wrt, false);
    detail::accumulate(out.theta, grads, names);
    if (lr.learnable) {
      VarMap alpha_grads;
      for (const auto& name : names) {
        alpha_grads.emplace(name, grads.at(kAlphaPrefix + name));
      }
      detail::accumulate(out.alpha, alpha_grads, names);
    }
  }
  return out;
}

/// Outer-loop optimizer: Adam by default, plain gradient descent by flag.
class OuterOptimizer {
 public:
  OuterOptimizer(OuterOptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(ParamSet& theta, const ParamSet& theta_grad, ParamSet* alpha,
            const ParamSet* alpha_grad) {
    ++t_;
    update(theta, theta_grad, "theta/");
    if (alpha && alpha_grad) update(*alpha, *alpha_grad, "alpha/");
  }

 private:
  void update(ParamSet& params, const ParamSet& grads, const std::string& tag) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      const Tensor& g = grads.at(name);
      if (kind_ == OuterOptimizerKind::Sgd) {
        for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr_ * g[i];
        continue;
      }
      auto [mit, m_new] = m_.try_emplace(tag + name, Tensor::zeros(p.shape()));
      auto [vit, v_new] = v_.try_emplace(tag + name, Tensor::zeros(p.shape()));
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

  OuterOptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  ParamSet m_, v_;
};

struct MetaStepResult {
  double loss = 0.0;
  MetaGradient gradient;
};

/// Holds theta, alpha and the outer optimizer state across meta-steps.
class MetaLearner {
 public:
  MetaLearner(ParamSet theta, LearningRateSet lr, MetaConfig config)
      : theta_(std::move(theta)),
        lr_(std::move(lr)),
        config_(config),
        optimizer_(config.optimizer, config.outer_lr) {
    config_.validate();
  }

  template <MetaTask Task>
  MetaStepResult step(std::span<const Task> tasks) {
    if (tasks.size() != config_.meta_batch) {
      throw Error("meta_step: expected " + std::to_string(config_.meta_batch) +
                  " tasks, got " + std::to_string(tasks.size()));
    }
    MetaGradient grad = meta_gradient(theta_, lr_, tasks, config_.inner_steps,
                                      config_.first_order);
    if (!std::isfinite(grad.loss)) throw NumericError("meta_step: non-finite meta-loss");
    const bool update_alpha = lr_.learnable && !config_.freeze_alpha;
    optimizer_.step(theta_, grad.theta, update_alpha ? &lr_.rates : nullptr,
                    update_alpha ? &grad.alpha : nullptr);
    return {grad.loss, std::move(grad)};
  }

  const ParamSet& params() const noexcept { return theta_; }
  const LearningRateSet& rates() const noexcept { return lr_; }
  const MetaConfig& config() const noexcept { return config_; }

  Checkpoint checkpoint() const {
    Checkpoint c{theta_, std::nullopt};
    if (config_.mode == Mode::MetaSgd) c.alpha = lr_.rates;
    return c;
  }

 private:
  ParamSet theta_;
  LearningRateSet lr_;
  MetaConfig config_;
  OuterOptimizer optimizer_;
};

inline LearningRateSet initial_rates(const MetaConfig& config, const ParamSet& theta) {
  return config.mode == Mode::MetaSgd
             ? LearningRateSet::learned(theta, config.inner_lr_init)
             : LearningRateSet::fixed(theta, config.inner_lr_init);
}

/// Adapted parameter values (no graph kept), as used for evaluation.
inline ParamSet adapt_values(const ModelSpec& spec, const ParamSet& theta,
                             const ParamSet& rates, const LabeledSet& support,
                             std::size_t steps) {
  if (steps == 0) return theta;
  Graph g;
  VarMap p, lr;
  for (const auto& [name, t] : theta) p.emplace(name, g.parameter(t));
  for (const auto& [name, t] : rates) lr.emplace(name, g.constant(t));
  const Var x = g.constant(support.examples);
  const auto adapted = inner_adapt(
      p, lr,
      [&](const VarMap& q) {
        return softmax_cross_entropy(forward(spec, q, x), support.labels);
      },
      steps, false);
  ParamSet out;
  for (const auto& [name, v] : adapted.params) out.emplace(name, v.value());
  return out;
}

inline double support_loss_value(const ModelSpec& spec, const ParamSet& theta,
                                 const LabeledSet& set) {
  return kernels::softmax_cross_entropy(forward(spec, theta, set.examples),
                                        set.labels);
}

/// Fraction of `set` whose argmax logit equals the label.
inline double head_accuracy(const ModelSpec& spec, const ParamSet& theta,
                            const LabeledSet& set) {
  const Tensor logits = forward(spec, theta, set.examples);
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < set.size(); ++r) {
    const auto row = logits.data().subspan(r * k, k);
    const auto best = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == set.labels[r] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

struct TrainLogRow {
  std::size_t iteration = 0;
  double meta_loss = 0.0;
  double val_accuracy = 0.0;
  std::optional<double> alpha_frac_negative;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

// Sub-streams of the run seed.
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kValidationStream = 2;

/// Meta-training loop. Iteration i draws meta_batch episodes with seeds
/// seed_stream(seed_stream(seed, kTrainStream), i * meta_batch + j). Every
/// log_every iterations it records the meta-loss and the mean post-adaptation
/// query accuracy over a fixed validation episode set.
inline TrainResult train(const MetaConfig& config, const TaskDistribution& dist,
                         const ModelSpec& spec,
                         const std::function<void(const TrainLogRow&)>& on_log = {}) {
  config.validate();
  if (spec.n_way != config.n_way) {
    throw Error("train: model n_way " + std::to_string(spec.n_way) +
                " differs from episode n_way " + std::to_string(config.n_way));
  }
  ParamSet theta = init_params(spec, config.seed);
  MetaLearner learner(theta, initial_rates(config, theta), config);
  const std::uint64_t train_seed = seed_stream(config.seed, kTrainStream);
  const std::uint64_t val_seed = seed_stream(config.seed, kValidationStream);

  std::vector<Episode> val;
  for (std::size_t v = 0; v < config.val_episodes; ++v) {
    val.push_back(dist.sample_episode(seed_stream(val_seed, v), config.episode_shape()));
  }

  TrainResult result;
  std::vector<Episode> episodes(config.meta_batch);
  std::vector<EpisodeTask> tasks(config.meta_batch);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t j = 0; j < config.meta_batch; ++j) {
      episodes[j] = dist.sample_episode(
          seed_stream(train_seed, it * config.meta_batch + j), config.episode_shape());
      tasks[j] = {&spec, &episodes[j]};
    }
    MetaStepResult step;
    try {
      step = learner.step(std::span<const EpisodeTask>(tasks));
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    if ((it + 1) % config.log_every != 0) continue;

    TrainLogRow row;
    row.iteration = it + 1;
    row.meta_loss = step.loss;
    double acc = 0.0;
    for (const auto& ep : val) {
      const ParamSet adapted = adapt_values(spec, learner.params(),
                                            learner.rates().rates, ep.support,
                                            config.inner_steps);
      acc += head_accuracy(spec, adapted, ep.query);
    }
    row.val_accuracy = val.empty() ? 0.0 : acc / static_cast<double>(val.size());
    if (config.mode == Mode::MetaSgd) {
      row.alpha_frac_negative = learner.rates().fraction_negative();
    }
    if (on_log) on_log(row);
    result.log.push_back(row);
  }
  result.checkpoint = learner.checkpoint();
  return result;
}

}  // namespace mlab
