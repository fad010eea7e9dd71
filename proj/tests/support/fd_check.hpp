#pragma once

// Central finite-difference oracle for the tape. Test-only: the oracle only
// ever evaluates forward values, so it shares no code path with backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cdt/diff.hpp"
#include "cdt/random.hpp"
#include "cdt/tensor.hpp"

namespace cdt::testing {

/// Builds a scalar on a fresh graph from the given input leaves.
using ScalarFn = std::function<diff::Var(diff::Graph&, std::vector<diff::Var>&)>;

inline double eval_scalar(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  diff::Graph g;
  std::vector<diff::Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t, false));
  return fn(g, vars).value().item();
}

inline std::vector<Tensor> analytic_grads(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  diff::Graph g;
  std::vector<diff::Var> vars;
  std::vector<diff::TapHandle> taps;
  for (const auto& t : inputs) {
    vars.push_back(g.input(t, true));
    taps.push_back(g.tap(vars.back()));
  }
  diff::Var out = fn(g, vars);
  auto grads = g.backward(out, taps);
  std::vector<Tensor> res;
  for (const auto& h : taps) res.push_back(grads.tap(h));
  return res;
}

inline std::vector<Tensor> numeric_grads(const ScalarFn& fn, std::vector<Tensor> inputs, double step = 1e-5) {
  std::vector<Tensor> res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor g(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double up = eval_scalar(fn, inputs);
      inputs[k][i] = orig - step;
      const double down = eval_scalar(fn, inputs);
      inputs[k][i] = orig;
      g[i] = (up - down) / (2.0 * step);
    }
    res.push_back(std::move(g));
  }
  return res;
}

/// Elementwise relative error |a-b| / max(|a|, |b|, floor). The floor keeps
/// entries that are zero up to rounding from dominating the statistic.
inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

inline double gradient_check(const ScalarFn& fn, const std::vector<Tensor>& inputs, double step = 1e-5) {
  auto an = analytic_grads(fn, inputs);
  auto nu = numeric_grads(fn, inputs, step);
  double worst = 0.0;
  for (std::size_t k = 0; k < an.size(); ++k) worst = std::max(worst, max_relative_error(an[k], nu[k]));
  return worst;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = sd * rng.normal();
  return t;
}

/// Random-weighted sum, so that constant-sum outputs (softmax rows) still
/// produce a nontrivial gradient.
inline diff::Var weighted_sum(diff::Graph& g, diff::Var x, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(x.shape());
  for (auto& v : w.storage()) v = rng.normal();
  return diff::sum(diff::mul(x, g.constant(std::move(w))));
}

}  // namespace cdt::testing
