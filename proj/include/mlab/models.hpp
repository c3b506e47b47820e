#pragma once

// The few-shot classifier: a stack of conv blocks (3x3 conv + bias,
// affine_norm, relu, 2x2 max-pool) or a small relu MLP, followed by a linear
// "logits" head. embed() is the body alone; forward() is head(embed(x)).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mlab/autodiff.hpp"
#include "mlab/tensor.hpp"

namespace mlab {

struct ModelSpec {
  enum class Kind { Conv, Mlp };

  Kind kind = Kind::Conv;
  std::size_t in_channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t blocks = 4;
  std::size_t channels = 8;
  // Mlp only: input width, hidden widths..., n_way.
  std::vector<std::size_t> mlp_widths;
  std::size_t n_way = 5;
  // Constant added to every embedding coordinate; > 0 keeps an all-dead relu
  // embedding off the zero vector.
  double embed_lift = 0.0;

  /// Default CPU-sized config: 1x16x16 inputs, 4 blocks of 8 channels, 5-way.
  static ModelSpec desk() { return {}; }

  /// 3x84x84 inputs, 4 blocks of 64 channels: a 1600-wide embedding.
  static ModelSpec full_scale() {
    ModelSpec s;
    s.in_channels = 3;
    s.height = 84;
    s.width = 84;
    s.channels = 64;
    return s;
  }

  static ModelSpec mlp(std::vector<std::size_t> widths) {
    ModelSpec s;
    s.kind = Kind::Mlp;
    if (widths.size() < 3) {
      throw Error("mlp spec needs input, at least one hidden and an output width");
    }
    s.n_way = widths.back();
    s.mlp_widths = std::move(widths);
    return s;
  }

  /// Spatial side lengths after all pools; throws if a pool would hit zero.
  std::pair<std::size_t, std::size_t> final_spatial() const {
    std::size_t h = height, w = width;
    for (std::size_t b = 0; b < blocks; ++b) {
      if (h < 2 || w < 2) {
        throw Error("model spec: block " + std::to_string(b + 1) +
                    " pools " + std::to_string(h) + "x" + std::to_string(w) +
                    " below 1x1");
      }
      h /= 2;
      w /= 2;
    }
    return {h, w};
  }

  std::size_t embedding_dim() const {
    if (kind == Kind::Mlp) return mlp_widths[mlp_widths.size() - 2];
    const auto [h, w] = final_spatial();
    return channels * h * w;
  }

  /// Shape of one example (without the batch axis).
  Shape input_shape() const {
    if (kind == Kind::Mlp) return {mlp_widths.front()};
    return {in_channels, height, width};
  }

  void validate() const {
    if (n_way < 2) throw Error("model spec: n_way must be >= 2");
    if (!(embed_lift >= 0.0) || !std::isfinite(embed_lift)) {
      throw Error("model spec: embed_lift must be finite and >= 0");
    }
    if (kind == Kind::Mlp) {
      if (mlp_widths.size() < 3 || mlp_widths.back() != n_way) {
        throw Error("model spec: mlp widths must end with n_way");
      }
      for (std::size_t w : mlp_widths) {
        if (w == 0) throw Error("model spec: zero-width mlp layer");
      }
      return;
    }
    if (blocks == 0 || channels == 0 || in_channels == 0) {
      throw Error("model spec: blocks, channels and in_channels must be positive");
    }
    final_spatial();
  }
};

inline bool is_head_param(const std::string& name) {
  return name.rfind("logits.", 0) == 0;
}

/// Layer name prefixes in network order: conv1..convB or fc1..fcL, then logits.
inline std::vector<std::string> layer_prefixes(const ModelSpec& spec) {
  std::vector<std::string> out;
  const std::size_t body = spec.kind == ModelSpec::Kind::Conv
                               ? spec.blocks
                               : spec.mlp_widths.size() - 2;
  const std::string stem = spec.kind == ModelSpec::Kind::Conv ? "conv" : "fc";
  for (std::size_t i = 1; i <= body; ++i) out.push_back(stem + std::to_string(i));
  out.emplace_back("logits");
  return out;
}

/// Fan-in scaled uniform weights (He bound for relu layers, 1/sqrt(fan_in) for
/// the head), zero biases, affine_norm scale 1 and shift 0.
inline ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };

  ParamSet p;
  std::size_t fan_in_channels = spec.in_channels;
  if (spec.kind == ModelSpec::Kind::Conv) {
    for (std::size_t b = 1; b <= spec.blocks; ++b) {
      const std::string layer = "conv" + std::to_string(b);
      const double fan_in = static_cast<double>(fan_in_channels * 9);
      p[layer + ".weight"] = uniform({spec.channels, fan_in_channels, 3, 3},
                                     std::sqrt(6.0 / fan_in));
      p[layer + ".bias"] = Tensor::zeros({spec.channels});
      p[layer + ".norm_scale"] = Tensor::full({spec.channels}, 1.0);
      p[layer + ".norm_shift"] = Tensor::zeros({spec.channels});
      fan_in_channels = spec.channels;
    }
  } else {
    const auto& w = spec.mlp_widths;
    for (std::size_t i = 0; i + 2 < w.size(); ++i) {
      const std::string layer = "fc" + std::to_string(i + 1);
      p[layer + ".weight"] = uniform({w[i + 1], w[i]},
                                     std::sqrt(6.0 / static_cast<double>(w[i])));
      p[layer + ".bias"] = Tensor::zeros({w[i + 1]});
    }
  }
  const std::size_t emb = spec.embedding_dim();
  p["logits.weight"] = uniform({spec.n_way, emb},
                               1.0 / std::sqrt(static_cast<double>(emb)));
  p["logits.bias"] = Tensor::zeros({spec.n_way});
  return p;
}

inline std::size_t parameter_count(const ParamSet& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.numel();
  return n;
}

namespace detail {

inline void check_batch(const ModelSpec& spec, const Shape& s) {
  const Shape in = spec.input_shape();
  Shape expected{0};
  expected.insert(expected.end(), in.begin(), in.end());
  const bool ok = s.size() == expected.size() && !s.empty() && s[0] > 0 &&
                  std::equal(in.begin(), in.end(), s.begin() + 1);
  if (!ok) {
    throw ShapeError("model", "batch of shape [N," +
                                  to_string(in).substr(1),
                     s);
  }
}

}  // namespace detail

namespace detail {

inline Var lift(const ModelSpec& spec, Var x) {
  if (spec.embed_lift == 0.0) return x;
  return add(x, x.graph().constant(Tensor::full(x.shape(), spec.embed_lift)));
}

}  // namespace detail

/// Body only: [N, ...input] -> [N, embedding_dim]. Never touches logits.*.
inline Var embed(const ModelSpec& spec, const VarMap& p, Var x) {
  detail::check_batch(spec, x.shape());
  if (spec.kind == ModelSpec::Kind::Conv) {
    for (std::size_t b = 1; b <= spec.blocks; ++b) {
      const std::string layer = "conv" + std::to_string(b);
      x = add_bias(conv2d(x, p.at(layer + ".weight")), p.at(layer + ".bias"));
      x = affine_norm(x, p.at(layer + ".norm_scale"), p.at(layer + ".norm_shift"));
      x = maxpool2x2(relu(x));
    }
    return detail::lift(spec, flatten(x));
  }
  x = flatten(x);
  for (std::size_t i = 1; i + 1 < spec.mlp_widths.size(); ++i) {
    const std::string layer = "fc" + std::to_string(i);
    x = relu(add_bias(matmul(x, p.at(layer + ".weight"), false, true),
                      p.at(layer + ".bias")));
  }
  return detail::lift(spec, x);
}

/// Linear classification layer: [N, D] -> [N, n_way].
inline Var head(const VarMap& p, Var embedding) {
  return add_bias(matmul(embedding, p.at("logits.weight"), false, true),
                  p.at("logits.bias"));
}

inline Var forward(const ModelSpec& spec, const VarMap& p, Var x) {
  return head(p, embed(spec, p, x));
}

inline VarMap constants(Graph& g, const ParamSet& params) {
  VarMap out;
  for (const auto& [name, t] : params) out.emplace(name, g.constant(t));
  return out;
}

inline Tensor embed(const ModelSpec& spec, const ParamSet& params,
                    const Tensor& batch) {
  Graph g;
  return embed(spec, constants(g, params), g.constant(batch)).value();
}

inline Tensor forward(const ModelSpec& spec, const ParamSet& params,
                      const Tensor& batch) {
  Graph g;
  return forward(spec, constants(g, params), g.constant(batch)).value();
}

}  // namespace mlab
