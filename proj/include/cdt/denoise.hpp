#pragma once

// Noise identification from per-token scores and the embedding-level
// denoising step, plus the probe that denoises a trained model's inputs by
// hand and watches where its attention goes.

#include <algorithm>
#include <array>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cdt/attribution.hpp"
#include "cdt/errors.hpp"
#include "cdt/model.hpp"
#include "cdt/taskgen.hpp"
#include "cdt/tensor.hpp"

namespace cdt::denoise {

enum class Basis { grad_norm, ig_token };

inline const char* to_string(Basis b) { return b == Basis::grad_norm ? "grad_norm" : "ig_token"; }

/// I(x_i) = 1 marks a token as noise.
struct NoiseMask {
  std::vector<std::uint8_t> indicator;
  double threshold = 0.0;
  Basis basis = Basis::grad_norm;

  std::size_t size() const { return indicator.size(); }
  std::size_t noisy() const { return std::size_t(std::count(indicator.begin(), indicator.end(), 1)); }
  double density() const { return indicator.empty() ? 0.0 : double(noisy()) / double(indicator.size()); }
};

/// Tokens strictly below the mean score are noise; ties count as critical.
inline NoiseMask detect_noise(std::span<const double> scores, Basis basis = Basis::grad_norm) {
  if (scores.empty()) throw EmptyInputError("detect_noise needs at least one score");
  NoiseMask m;
  m.basis = basis;
  m.threshold = std::accumulate(scores.begin(), scores.end(), 0.0) / double(scores.size());
  m.indicator.reserve(scores.size());
  for (double s : scores) m.indicator.push_back(s < m.threshold ? 1 : 0);
  return m;
}

/// Same rule with an explicit threshold (e.g. a percentile).
inline NoiseMask detect_below(std::span<const double> scores, double threshold, Basis basis) {
  if (scores.empty()) throw EmptyInputError("detect_below needs at least one score");
  NoiseMask m;
  m.basis = basis;
  m.threshold = threshold;
  for (double s : scores) m.indicator.push_back(s < threshold ? 1 : 0);
  return m;
}

struct DenoiseConfig {
  double lr = 3e-4;
  double beta = 1.0;
  std::vector<std::uint8_t> protect;  // nonzero rows are never perturbed; empty protects nothing

  double strength() const { return lr * beta; }
};

/// E'_i = E_i - I(x_i) * g_i * lr * beta, leaving critical and protected rows
/// bit-identical. The result is a plain tensor, so nothing differentiates
/// through the subtracted term.
inline Tensor denoise_embeddings(const Tensor& e, const Tensor& grads, const NoiseMask& mask,
                                 const DenoiseConfig& cfg) {
  if (e.shape() != grads.shape() || e.rank() != 2)
    throw DimensionError("embeddings " + shape_str(e.shape()) + " and gradients " + shape_str(grads.shape()) +
                         " disagree");
  if (mask.size() != e.rows())
    throw DimensionError("mask covers " + std::to_string(mask.size()) + " tokens, embeddings " +
                         std::to_string(e.rows()));
  if (!cfg.protect.empty() && cfg.protect.size() != e.rows())
    throw DimensionError("protect set length differs from the sequence length");
  if (cfg.beta < 0.0 || cfg.lr < 0.0) throw PreconditionError("denoising strength must be non-negative");
  Tensor out = e;
  const double step = cfg.lr * cfg.beta;
  if (step == 0.0) return out;
  for (std::size_t r = 0; r < e.rows(); ++r) {
    if (!mask.indicator[r] || (!cfg.protect.empty() && cfg.protect[r])) continue;
    auto dst = out.row(r);
    const auto g = grads.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] -= g[c] * step;
  }
  return out;
}

enum class ThresholdMode { mean, percentile };

struct ManualDenoiseOptions {
  ThresholdMode threshold_mode = ThresholdMode::mean;
  double percentile = 50.0;  // used when threshold_mode is percentile
  std::vector<double> strengths{0.0, 0.5, 1.0, 2.0, 4.0};
  model::LossMaskMode loss_mode = model::LossMaskMode::answer_only;
};

struct SweepPoint {
  double strength = 0.0;
  std::array<double, 4> mass{};  // Sup, Inter, Irr, Low
  double critical() const { return mass[0] + mass[1]; }
};

struct ManualDenoiseReport {
  std::vector<SweepPoint> sweep;
  double threshold = 0.0;
  std::size_t flagged = 0;           // context tokens marked irrelevant
  std::size_t flagged_critical = 0;  // of which labelled Sup or Inter
  std::size_t context = 0;

  /// Critical mass at each sweep point relative to the first point.
  std::vector<double> ratios() const {
    std::vector<double> out;
    for (const auto& p : sweep) out.push_back(sweep.front().critical() > 0 ? p.critical() / sweep.front().critical() : 0.0);
    return out;
  }
};

inline double percentile_of(std::vector<double> v, double pct) {
  if (v.empty()) throw EmptyInputError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * double(v.size() - 1);
  const auto lo = std::size_t(pos);
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

/// Flags context tokens whose IG falls below the threshold, subtracts their
/// raw embedding gradients at each strength and records where the answer
/// positions' attention lands.
inline ManualDenoiseReport manual_denoise_analysis(const model::Parameters& params, const task::LabeledSample& sample,
                                                   const ManualDenoiseOptions& opt) {
  const auto answer_span = sample.answer_span();
  const auto answer = model::answer_positions(answer_span);
  const auto classes = attr::class_sets(sample);
  const auto context = attr::context_positions(classes);

  model::ForwardOptions fo;
  fo.tap_attention = true;
  fo.tap_embeddings = true;
  fo.train_params = false;
  auto pass = model::forward(params, sample.tokens, fo);
  auto loss = model::lm_loss(pass, sample.tokens, opt.loss_mode, answer_span);
  const auto taps = pass.taps();
  auto grads = pass.graph().backward(loss, taps);
  const auto ev = attr::AttentionEvidence::from(pass, grads);
  const Tensor& egrad = grads.tap(*pass.embedding_tap());
  const Tensor base = pass.embeddings().value();
  const auto ig = attr::ig_token_scores(ev, answer);

  std::vector<double> ctx_ig;
  for (auto i : context) ctx_ig.push_back(ig[i]);
  if (std::all_of(ctx_ig.begin(), ctx_ig.end(), [](double v) { return v == 0.0; }))
    throw AnalysisUnavailableError("all context IG scores are zero; the model carries no attribution signal");

  ManualDenoiseReport rep;
  rep.context = context.size();
  rep.threshold = opt.threshold_mode == ThresholdMode::mean
                      ? std::accumulate(ctx_ig.begin(), ctx_ig.end(), 0.0) / double(ctx_ig.size())
                      : percentile_of(ctx_ig, opt.percentile);
  NoiseMask mask;
  mask.basis = Basis::ig_token;
  mask.threshold = rep.threshold;
  mask.indicator.assign(sample.size(), 0);
  for (auto i : context)
    if (ig[i] < rep.threshold) {
      mask.indicator[i] = 1;
      ++rep.flagged;
      if (sample.classes[i] == task::TokenClass::sup || sample.classes[i] == task::TokenClass::inter)
        ++rep.flagged_critical;
    }

  for (double s : opt.strengths) {
    if (s < 0.0) throw PreconditionError("sweep strengths must be non-negative");
    DenoiseConfig cfg{1.0, s, sample.protect_mask()};
    const Tensor e2 = denoise_embeddings(base, egrad, mask, cfg);
    model::ForwardOptions o;
    o.embedding_override = &e2;
    o.train_params = false;
    const auto trace = model::forward(params, sample.tokens, o).trace();
    rep.sweep.push_back({s, attr::attention_mass(trace, classes, answer)});
  }
  return rep;
}

/// Element-wise mean of several reports' sweeps (same strengths assumed).
inline std::vector<SweepPoint> mean_sweep(std::span<const ManualDenoiseReport> reps) {
  if (reps.empty()) throw EmptyInputError("no reports to average");
  std::vector<SweepPoint> out = reps[0].sweep;
  for (auto& p : out) p.mass = {};
  for (const auto& r : reps) {
    if (r.sweep.size() != out.size()) throw DimensionError("reports use different sweeps");
    for (std::size_t k = 0; k < out.size(); ++k)
      for (std::size_t c = 0; c < 4; ++c) out[k].mass[c] += r.sweep[k].mass[c] / double(reps.size());
  }
  return out;
}

/// Shape test for a sweep curve: strictly rising from the first point up to
/// a peak, then not rising again through the last point, with the peak
/// strictly before the end.
inline bool rises_then_saturates(std::span<const double> curve) {
  if (curve.size() < 3) return false;
  std::size_t peak = 0;
  while (peak + 1 < curve.size() && curve[peak + 1] > curve[peak]) ++peak;
  if (peak == 0 || peak + 1 == curve.size()) return false;
  for (std::size_t k = peak + 1; k < curve.size(); ++k)
    if (curve[k] > curve[k - 1]) return false;
  return true;
}

}  // namespace cdt::denoise
