#pragma once

// Head-stripped probing: class prototypes are mean support embeddings and
// queries go to the prototype with the highest cosine similarity.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mlab/checkpoint.hpp"
#include "mlab/meta.hpp"
#include "mlab/models.hpp"
#include "mlab/tasks.hpp"

namespace mlab {

struct PrototypeSet {
  Tensor centroids;  // [n_way, D]; row k belongs to label k

  std::size_t n_way() const { return centroids.dim(0); }
  std::size_t dim() const { return centroids.dim(1); }
  std::span<const double> row(std::size_t k) const {
    return centroids.data().subspan(k * dim(), dim());
  }
};

inline PrototypeSet prototypes(const Tensor& embeddings,
                               const std::vector<std::size_t>& labels,
                               std::size_t n_way) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("prototypes",
                     "[" + std::to_string(labels.size()) + ",D] embeddings",
                     embeddings.shape());
  }
  const std::size_t d = embeddings.dim(1);
  Tensor sums = Tensor::zeros({n_way, d});
  std::vector<std::size_t> counts(n_way, 0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= n_way) throw Error("prototypes: label out of range");
    for (std::size_t j = 0; j < d; ++j) sums[labels[r] * d + j] += embeddings[r * d + j];
    ++counts[labels[r]];
  }
  for (std::size_t k = 0; k < n_way; ++k) {
    if (counts[k] == 0) {
      throw Error("prototypes: class " + std::to_string(k) + " has no embeddings");
    }
    for (std::size_t j = 0; j < d; ++j) sums[k * d + j] /= static_cast<double>(counts[k]);
  }
  return {std::move(sums)};
}

namespace detail {

inline double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// argmax_k cos(query, c_k); ties go to the smallest label. Cosine is undefined
/// for zero vectors, so a zero-norm query or centroid is an error.
inline std::size_t classify(std::span<const double> query, const PrototypeSet& protos) {
  if (query.size() != protos.dim()) {
    throw ShapeError("classify", "query of dimension " + std::to_string(protos.dim()),
                     Shape{query.size()});
  }
  const double qn = detail::norm(query);
  if (qn == 0.0) throw NumericError("classify: zero-norm query embedding");
  std::size_t best = 0;
  double best_cos = -2.0;
  for (std::size_t k = 0; k < protos.n_way(); ++k) {
    const auto c = protos.row(k);
    const double cn = detail::norm(c);
    if (cn == 0.0) {
      throw NumericError("classify: zero-norm prototype for class " + std::to_string(k));
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < c.size(); ++j) dot += query[j] * c[j];
    const double cos = dot / (qn * cn);
    if (cos > best_cos) {
      best_cos = cos;
      best = k;
    }
  }
  return best;
}

/// Prototype accuracy of the body of `params` on one episode.
inline double episode_accuracy(const ModelSpec& spec, const ParamSet& params,
                               const Episode& ep) {
  const PrototypeSet protos = prototypes(embed(spec, params, ep.support.examples),
                                         ep.support.labels, ep.class_ids.size());
  const Tensor q = embed(spec, params, ep.query.examples);
  const std::size_t d = q.dim(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < ep.query.size(); ++r) {
    correct += classify(q.data().subspan(r * d, d), protos) == ep.query.labels[r] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

enum class Phase { Pre, On, Off };

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::Pre: return "pre";
    case Phase::On: return "on";
    case Phase::Off: return "off";
  }
  return "?";
}

inline Phase parse_phase(std::string_view s) {
  if (s == "pre") return Phase::Pre;
  if (s == "on") return Phase::On;
  if (s == "off") return Phase::Off;
  throw Error("unknown phase '" + std::string(s) + "'");
}

struct EvalRecord {
  std::size_t iteration = 0;
  Phase phase = Phase::Pre;
  double accuracy = 0.0;
  std::string model;
  std::uint64_t seed = 0;
};

struct ProtocolConfig {
  std::size_t iterations = 100;
  std::size_t inner_steps = 5;
  double inner_lr = 0.01;  // used when the checkpoint carries no alpha
  EpisodeShape shape;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct ProtocolResult {
  std::vector<EvalRecord> records;       // 3 per iteration: pre, on, off
  std::vector<double> support_loss_before;  // task A support loss at theta
  std::vector<double> support_loss_after;   // ... and at the adapted theta
};

/// Iteration i, with s = seed_stream(seed, i):
///   pre  - prototype accuracy of theta on an independent episode (seed_stream(s, 0))
///   on   - theta adapted on task A's support, evaluated on task A
///   off  - the same adapted theta evaluated on task B, class-disjoint from A
/// A and B come from sample_disjoint_pair(seed_stream(s, 1)). theta itself is
/// never modified.
inline ProtocolResult run_protocol(const ModelSpec& spec, const Checkpoint& ckpt,
                                   const TaskDistribution& dist,
                                   const ProtocolConfig& config) {
  const ParamSet& theta = ckpt.params;
  const ParamSet rates = ckpt.alpha ? *ckpt.alpha
                                    : LearningRateSet::fixed(theta, config.inner_lr).rates;
  const std::string tag(mode_name(ckpt.is_meta_sgd() ? Mode::MetaSgd : Mode::Maml));

  ProtocolResult out;
  out.records.resize(3 * config.iterations);
  out.support_loss_before.resize(config.iterations);
  out.support_loss_after.resize(config.iterations);

  auto run_one = [&](std::size_t i) {
    const std::uint64_t s = seed_stream(config.seed, i);
    const Episode pre = dist.sample_episode(seed_stream(s, 0), config.shape);
    const auto [task_a, task_b] = dist.sample_disjoint_pair(seed_stream(s, 1), config.shape);
    const ParamSet adapted =
        adapt_values(spec, theta, rates, task_a.support, config.inner_steps);
    out.support_loss_before[i] = support_loss_value(spec, theta, task_a.support);
    out.support_loss_after[i] = support_loss_value(spec, adapted, task_a.support);
    const double acc[3] = {episode_accuracy(spec, theta, pre),
                           episode_accuracy(spec, adapted, task_a),
                           episode_accuracy(spec, adapted, task_b)};
    for (std::size_t p = 0; p < 3; ++p) {
      out.records[3 * i + p] = {i, static_cast<Phase>(p), acc[p], tag, config.seed};
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, config.workers);
  std::vector<std::exception_ptr> errors(config.iterations);
  auto worker = [&](std::size_t w) {
    for (std::size_t i = w; i < config.iterations; i += workers) {
      try {
        run_one(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericError& e) {
      throw NumericError("protocol iteration " + std::to_string(i) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("protocol iteration " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mlab
