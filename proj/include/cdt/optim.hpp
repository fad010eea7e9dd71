#pragma once

// Adam with bias correction and global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdt/errors.hpp"
#include "cdt/tensor.hpp"

namespace cdt::optim {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;

  static AdamState zeros_like(std::span<const Tensor> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

inline void check_shapes(std::span<const Tensor> params, std::span<const Tensor> grads, const AdamState& st) {
  if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw DimensionError("adam: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                         " gradients, " + std::to_string(st.m.size()) + " moment slots");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].shape() || st.m[i].shape() != params[i].shape() ||
        st.v[i].shape() != params[i].shape())
      throw DimensionError("adam: slot " + std::to_string(i) + " has parameter " + shape_str(params[i].shape()) +
                           " but gradient " + shape_str(grads[i].shape()));
}

/// One bias-corrected Adam step, in place.
inline void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& st,
                        const AdamConfig& cfg) {
  check_shapes({params.data(), params.size()}, grads, st);
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].storage();
    auto& m = st.m[i].storage();
    auto& v = st.v[i].storage();
    const auto& g = grads[i].storage();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

inline double global_norm(std::span<const Tensor> grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.storage()) s += x * x;
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  const double n = global_norm({grads.data(), grads.size()});
  if (!std::isfinite(n)) return n;
  if (max_norm > 0.0 && n > max_norm) {
    const double f = max_norm / n;
    for (auto& g : grads)
      for (double& x : g.storage()) x *= f;
  }
  return n;
}

/// Rounds every element through 32-bit float, the precision checkpoints
/// store. Applied to live state at checkpoint steps so a resumed run and an
/// uninterrupted one continue from identical bits.
inline void quantize_f32(std::span<Tensor> ts) {
  for (auto& t : ts)
    for (double& x : t.storage()) x = double(float(x));
}

}  // namespace cdt::optim
