#pragma once

// Episodic N-way K-shot task distributions.
//
// Seed-stream contract: everything an episode contains is a pure function of
// its seed. Runs derive per-episode seeds with seed_stream(run_seed, i), so
// results do not depend on worker count or iteration order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mlab/autodiff.hpp"
#include "mlab/checkpoint.hpp"
#include "mlab/tensor.hpp"

namespace mlab {

/// splitmix64 finaliser over (run_seed, index).
inline std::uint64_t seed_stream(std::uint64_t run_seed, std::uint64_t index) {
  std::uint64_t z = run_seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct LabeledSet {
  Tensor examples;  // [M, ...example shape]
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct EpisodeShape {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_query = 10;
};

/// One N-way K-shot task. Label k stands for source class class_ids[k].
struct Episode {
  LabeledSet support;
  LabeledSet query;
  std::vector<std::size_t> class_ids;
};

/// Relabels an episode: old label l becomes perm[l]. Examples are untouched.
inline Episode permute_labels(const Episode& ep,
                              const std::vector<std::size_t>& perm) {
  if (perm.size() != ep.class_ids.size()) {
    throw Error("permute_labels: permutation size does not match n_way");
  }
  Episode out = ep;
  for (std::size_t k = 0; k < perm.size(); ++k) out.class_ids[perm[k]] = ep.class_ids[k];
  for (auto& l : out.support.labels) l = perm[l];
  for (auto& l : out.query.labels) l = perm[l];
  return out;
}

/// Class prototypes drawn once from N(0, 1) per pixel; examples are a
/// prototype plus i.i.d. N(0, sigma^2) noise, where sigma = noise_scale times
/// the RMS per-pixel distance between prototypes.
class GaussianClasses {
 public:
  GaussianClasses(Shape example_shape, std::size_t num_classes,
                  double noise_scale, std::uint64_t seed)
      : shape_(std::move(example_shape)) {
    if (num_classes < 2) throw Error("gaussian classes: need at least 2 classes");
    if (noise_scale < 0.0) throw Error("gaussian classes: negative noise scale");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    prototypes_.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
      Tensor p = Tensor::zeros(shape_);
      for (double& v : p.data()) v = normal(rng);
      prototypes_.push_back(std::move(p));
    }
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < num_classes; ++i) {
      for (std::size_t j = i + 1; j < num_classes; ++j) {
        const Tensor d = kernels::sub(prototypes_[i], prototypes_[j]);
        total += std::sqrt(kernels::dot(d, d) / static_cast<double>(d.numel()));
        ++pairs;
      }
    }
    spacing_ = total / static_cast<double>(pairs);
    sigma_ = noise_scale * spacing_;
  }

  std::size_t num_classes() const noexcept { return prototypes_.size(); }
  const Shape& example_shape() const noexcept { return shape_; }
  double spacing() const noexcept { return spacing_; }
  double sigma() const noexcept { return sigma_; }
  const Tensor& prototype(std::size_t c) const { return prototypes_.at(c); }

  template <class Rng>
  Tensor draw(std::size_t cls, Rng& rng) const {
    Tensor x = prototypes_.at(cls);
    if (sigma_ > 0.0) {
      std::normal_distribution<double> noise(0.0, sigma_);
      for (double& v : x.data()) v += noise(rng);
    }
    return x;
  }

 private:
  Shape shape_;
  std::vector<Tensor> prototypes_;
  double spacing_ = 0.0;
  double sigma_ = 0.0;
};

/// Examples held on disk: `classes.txt` lists one class directory per line;
/// each directory holds one tensor file per example (read in name order).
class DiskDataset {
 public:
  static DiskDataset load(const std::filesystem::path& root) {
    std::ifstream index(root / "classes.txt");
    if (!index) throw IoError("dataset: missing " + (root / "classes.txt").string());
    DiskDataset ds;
    std::string line;
    while (std::getline(index, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto dir = root / line;
      if (!std::filesystem::is_directory(dir)) {
        throw IoError("dataset: class directory " + dir.string() + " not found");
      }
      std::vector<std::filesystem::path> files;
      for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<Tensor> examples;
      for (const auto& f : files) {
        examples.push_back(load_tensor(f));
        if (examples.back().shape() != examples.front().shape() ||
            (!ds.examples_.empty() &&
             examples.back().shape() != ds.examples_.front().front().shape())) {
          throw IoError("dataset: inconsistent example shape in " + f.string());
        }
      }
      if (examples.empty()) throw IoError("dataset: class " + line + " is empty");
      ds.names_.push_back(line);
      ds.examples_.push_back(std::move(examples));
    }
    if (ds.names_.size() < 2) throw IoError("dataset: fewer than 2 classes");
    return ds;
  }

  std::size_t num_classes() const noexcept { return examples_.size(); }
  const std::string& class_name(std::size_t c) const { return names_.at(c); }
  const std::vector<Tensor>& examples(std::size_t c) const { return examples_.at(c); }
  const Shape& example_shape() const { return examples_.front().front().shape(); }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<Tensor>> examples_;
};

/// Writes `per_class` draws of every class of `source` in the on-disk format.
inline void write_dataset(const std::filesystem::path& root,
                          const GaussianClasses& source, std::size_t per_class,
                          std::uint64_t seed) {
  std::filesystem::create_directories(root);
  std::ofstream index(root / "classes.txt", std::ios::trunc);
  if (!index) throw IoError("cannot write " + (root / "classes.txt").string());
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < source.num_classes(); ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%03zu", c);
    index << name << '\n';
    std::filesystem::create_directories(root / name);
    for (std::size_t i = 0; i < per_class; ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "%05zu.bin", i);
      save_tensor(root / name / file, source.draw(c, rng));
    }
  }
}

class TaskDistribution {
 public:
  explicit TaskDistribution(GaussianClasses source) : source_(std::move(source)) {}
  explicit TaskDistribution(DiskDataset source) : source_(std::move(source)) {}

  std::size_t num_classes() const {
    return std::visit([](const auto& s) { return s.num_classes(); }, source_);
  }

  Shape example_shape() const {
    return std::visit([](const auto& s) { return s.example_shape(); }, source_);
  }

  const GaussianClasses* gaussian() const {
    return std::get_if<GaussianClasses>(&source_);
  }

  Episode sample_episode(std::uint64_t seed, const EpisodeShape& shape) const {
    check_shape(shape, 1);
    const auto order = class_order(seed);
    return build(std::vector<std::size_t>(order.begin(), order.begin() + shape.n_way),
                 seed_stream(seed, 1), shape);
  }

  /// Two class-disjoint episodes. The first equals sample_episode(seed, shape).
  std::pair<Episode, Episode> sample_disjoint_pair(std::uint64_t seed,
                                                   const EpisodeShape& shape) const {
    check_shape(shape, 2);
    const auto order = class_order(seed);
    const auto mid = order.begin() + static_cast<std::ptrdiff_t>(shape.n_way);
    return {build(std::vector<std::size_t>(order.begin(), mid), seed_stream(seed, 1), shape),
            build(std::vector<std::size_t>(mid, mid + static_cast<std::ptrdiff_t>(shape.n_way)),
                  seed_stream(seed, 2), shape)};
  }

 private:
  void check_shape(const EpisodeShape& s, std::size_t copies) const {
    if (s.n_way < 1 || s.k_shot < 1 || s.q_query < 1) {
      throw Error("episode: n_way, k_shot and q_query must be >= 1");
    }
    if (num_classes() < copies * s.n_way) {
      throw Error("episode: class universe of " + std::to_string(num_classes()) +
                  " is smaller than " + std::to_string(copies * s.n_way));
    }
  }

  std::vector<std::size_t> class_order(std::uint64_t seed) const {
    std::vector<std::size_t> order(num_classes());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed_stream(seed, 0));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  Episode build(std::vector<std::size_t> classes, std::uint64_t example_seed,
                const EpisodeShape& shape) const {
    std::mt19937_64 rng(example_seed);
    const Shape ex = example_shape();
    const std::size_t ex_size = numel(ex);
    std::vector<std::vector<Tensor>> per_class(classes.size());

    if (const auto* g = std::get_if<GaussianClasses>(&source_)) {
      for (std::size_t k = 0; k < classes.size(); ++k) {
        for (std::size_t i = 0; i < shape.k_shot + shape.q_query; ++i) {
          per_class[k].push_back(g->draw(classes[k], rng));
        }
      }
    } else {
      const auto& d = std::get<DiskDataset>(source_);
      for (std::size_t k = 0; k < classes.size(); ++k) {
        const auto& pool = d.examples(classes[k]);
        if (pool.size() < shape.k_shot + shape.q_query) {
          throw Error("episode: class " + d.class_name(classes[k]) + " has " +
                      std::to_string(pool.size()) + " examples, need " +
                      std::to_string(shape.k_shot + shape.q_query));
        }
        std::vector<std::size_t> pick(pool.size());
        std::iota(pick.begin(), pick.end(), 0);
        std::shuffle(pick.begin(), pick.end(), rng);
        for (std::size_t i = 0; i < shape.k_shot + shape.q_query; ++i) {
          per_class[k].push_back(pool[pick[i]]);
        }
      }
    }

    auto assemble = [&](std::size_t begin, std::size_t count) {
      Shape s{classes.size() * count};
      s.insert(s.end(), ex.begin(), ex.end());
      LabeledSet set{Tensor::zeros(s), {}};
      std::size_t row = 0;
      for (std::size_t k = 0; k < classes.size(); ++k) {
        for (std::size_t i = begin; i < begin + count; ++i, ++row) {
          std::copy(per_class[k][i].data().begin(), per_class[k][i].data().end(),
                    set.examples.data().begin() + static_cast<std::ptrdiff_t>(row * ex_size));
          set.labels.push_back(k);
        }
      }
      return set;
    };

    Episode ep;
    ep.support = assemble(0, shape.k_shot);
    ep.query = assemble(shape.k_shot, shape.q_query);
    ep.class_ids = std::move(classes);
    return ep;
  }

  std::variant<GaussianClasses, DiskDataset> source_;
};

/// Scalar task L(theta) = 1/2 (theta - c)^2, used as an analytic oracle for
/// inner-loop and meta-gradients. The model parameter is named "theta".
struct QuadraticTask {
  double c = 0.0;

  double loss(double theta) const { return 0.5 * (theta - c) * (theta - c); }
  double grad(double theta) const { return theta - c; }

  /// theta after `steps` updates theta <- theta - alpha * grad.
  double adapted(double theta, double alpha, std::size_t steps) const {
    return c + std::pow(1.0 - alpha, static_cast<double>(steps)) * (theta - c);
  }

  double adapted_loss(double theta, double alpha, std::size_t steps) const {
    return loss(adapted(theta, alpha, steps));
  }

  Var loss(Var theta) const {
    Graph& g = theta.graph();
    const Var d = sub(theta, g.constant(Tensor::full(theta.shape(), c)));
    return scale(dot(d, d), 0.5);
  }

  Var support_loss(const VarMap& p) const { return loss(p.at("theta")); }
  Var query_loss(const VarMap& p) const { return loss(p.at("theta")); }
};

/// c drawn uniformly from [c_lo, c_hi].
struct QuadraticFamily {
  double c_lo = -1.0;
  double c_hi = 1.0;

  QuadraticTask sample(std::uint64_t seed) const {
    std::mt19937_64 rng(seed_stream(seed, 0));
    std::uniform_real_distribution<double> u(c_lo, c_hi);
    return {u(rng)};
  }
};

}  // namespace mlab
