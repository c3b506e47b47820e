#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "mlab/autodiff.hpp"

namespace mlab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences of the scalar f(ParamSet) -> double.
template <class ValueFn>
ParamSet numeric_gradient(ValueFn&& f, const ParamSet& params, double epsilon) {
  ParamSet out;
  ParamSet probe = params;
  for (const auto& [name, base] : params) {
    Tensor grad = Tensor::zeros(base.shape());
    Tensor& t = probe.at(name);
    for (std::size_t i = 0; i < base.numel(); ++i) {
      t[i] = base[i] + epsilon;
      const double up = f(probe);
      t[i] = base[i] - epsilon;
      const double down = f(probe);
      t[i] = base[i];
      grad[i] = (up - down) / (2.0 * epsilon);
    }
    out.emplace(name, std::move(grad));
  }
  return out;
}

/// Worst elementwise |a - n| / max(|a|, |n|, 1e-8) over matching entries.
inline GradCheckResult compare_gradients(const ParamSet& analytic,
                                         const ParamSet& numeric) {
  GradCheckResult result;
  for (const auto& [name, n] : numeric) {
    const Tensor& a = analytic.at(name);
    if (a.shape() != n.shape()) {
      throw ShapeError("compare_gradients", to_string(n.shape()), a.shape());
    }
    for (std::size_t i = 0; i < n.numel(); ++i) {
      const double denom = std::max({std::abs(a[i]), std::abs(n[i]), 1e-8});
      const double err = std::abs(a[i] - n[i]) / denom;
      if (result.worst_param.empty() || err > result.max_rel_error) {
        result = {err, name, i, a[i], n[i]};
      }
    }
  }
  return result;
}

/// Compares backward() against central differences for every scalar entry of
/// every parameter. `loss_fn(Graph&, const VarMap&) -> Var` must be
/// deterministic and return a scalar.
template <class LossFn>
GradCheckResult finite_diff_check_detailed(LossFn&& loss_fn, const ParamSet& params,
                                           double epsilon) {
  ParamSet analytic;
  {
    Graph g;
    VarMap vars;
    for (const auto& [name, t] : params) vars.emplace(name, g.parameter(t));
    const Var loss = loss_fn(g, vars);
    for (const auto& [name, v] : g.grad(loss, vars, false)) analytic.emplace(name, v.value());
  }
  const auto value = [&](const ParamSet& p) {
    Graph g;
    VarMap vars;
    for (const auto& [name, t] : p) vars.emplace(name, g.parameter(t));
    return loss_fn(g, vars).value().item();
  };
  return compare_gradients(analytic, numeric_gradient(value, params, epsilon));
}

template <class LossFn>
double finite_diff_check(LossFn&& loss_fn, const ParamSet& params, double epsilon) {
  return finite_diff_check_detailed(std::forward<LossFn>(loss_fn), params, epsilon)
      .max_rel_error;
}

}  // namespace mlab
