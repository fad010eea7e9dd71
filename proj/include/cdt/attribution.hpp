#pragma once

// Attribution over one forward/backward pass: how much attention and how
// much loss-sensitive attention (IG) flows from each context token into the
// answer positions, and how well the cheap embedding-gradient norm tracks it.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "cdt/diff.hpp"
#include "cdt/errors.hpp"
#include "cdt/model.hpp"
#include "cdt/taskgen.hpp"
#include "cdt/tensor.hpp"

namespace cdt::attr {

using task::TokenClass;

/// Positions of Sup, Inter, Irr and Low tokens, in that order.
using ClassSets = std::array<std::vector<std::size_t>, 4>;

inline std::size_t class_index(TokenClass c) {
  switch (c) {
    case TokenClass::sup: return 0;
    case TokenClass::inter: return 1;
    case TokenClass::irr: return 2;
    case TokenClass::low: return 3;
    default: throw UndefinedClassError(std::string("class ") + task::to_string(c) + " is not a context class");
  }
}

inline ClassSets class_sets(const task::LabeledSample& s) {
  ClassSets out;
  for (std::size_t i = 0; i < s.context_end(); ++i) {
    const auto c = s.classes[i];
    if (c == TokenClass::sup || c == TokenClass::inter || c == TokenClass::irr || c == TokenClass::low)
      out[class_index(c)].push_back(i);
  }
  return out;
}

/// Union of the four context classes, ascending.
inline std::vector<std::size_t> context_positions(const ClassSets& cs) {
  std::vector<std::size_t> all;
  for (const auto& v : cs) all.insert(all.end(), v.begin(), v.end());
  std::sort(all.begin(), all.end());
  return all;
}

enum class HeadMode { all, top_k_heads };

inline const char* to_string(HeadMode m) { return m == HeadMode::all ? "all" : "top_k_heads"; }
inline HeadMode head_mode_from(const std::string& s) {
  if (s == "all") return HeadMode::all;
  if (s == "top_k_heads") return HeadMode::top_k_heads;
  throw ConfigError("unknown head mode '" + s + "'");
}

/// Attention matrices and their loss gradients, flat index layer * H + head.
struct AttentionEvidence {
  std::vector<Tensor> attention;
  std::vector<Tensor> grads;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;

  std::size_t head_count() const { return attention.size(); }
  std::size_t length() const { return attention.empty() ? 0 : attention[0].rows(); }

  void validate() const {
    if (attention.size() != n_layers * n_heads || grads.size() != attention.size())
      throw DimensionError("evidence holds " + std::to_string(attention.size()) + " attention and " +
                           std::to_string(grads.size()) + " gradient tensors for " + std::to_string(n_layers) +
                           "x" + std::to_string(n_heads) + " heads");
    for (std::size_t k = 0; k < attention.size(); ++k)
      if (attention[k].shape() != grads[k].shape() || attention[k].shape() != attention[0].shape())
        throw DimensionError("attention and gradient shapes disagree at head " + std::to_string(k));
  }

  /// Collects evidence from a pass built with tap_attention.
  static AttentionEvidence from(const model::ForwardPass& pass, const diff::GradientMap& g) {
    if (pass.attention_taps().empty()) throw MissingEvidenceError("forward pass has no attention taps");
    AttentionEvidence ev;
    ev.n_layers = pass.n_layers();
    ev.n_heads = pass.n_heads();
    for (std::size_t l = 0; l < ev.n_layers; ++l)
      for (std::size_t h = 0; h < ev.n_heads; ++h) {
        ev.attention.push_back(pass.attention(l, h).value());
        ev.grads.push_back(g.tap(pass.attention_taps()[l * ev.n_heads + h]));
      }
    ev.validate();
    return ev;
  }
};

struct ClassScores {
  std::array<double, 4> score{};  // Sup, Inter, Irr, Low
  HeadMode mode = HeadMode::all;
  std::vector<std::size_t> heads;  // flat head indices that were averaged
  bool k_clamped = false;          // FR only: requested k exceeded the length

  double operator[](TokenClass c) const { return score[class_index(c)]; }
};

/// IG[i, j] = A[j, i] * |dL/dA[j, i]|: rows are source tokens, columns the
/// positions that attend to them.
inline Tensor ig_matrix(const Tensor& a, const Tensor& grad) {
  if (a.shape() != grad.shape() || a.rank() != 2 || a.rows() != a.cols())
    throw DimensionError("ig_matrix needs matching square matrices, got " + shape_str(a.shape()) + " and " +
                         shape_str(grad.shape()));
  const std::size_t n = a.rows();
  Tensor out({n, n});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) out(i, j) = a(j, i) * std::abs(grad(j, i));
  return out;
}

namespace detail {

inline std::vector<std::size_t> resolve_heads(std::size_t total, std::span<const std::size_t> heads) {
  std::vector<std::size_t> out(heads.begin(), heads.end());
  if (out.empty()) {
    out.resize(total);
    std::iota(out.begin(), out.end(), 0);
  }
  for (auto h : out)
    if (h >= total) throw IndexError("head " + std::to_string(h) + " out of range");
  return out;
}

inline void check_positions(std::span<const std::size_t> pos, std::size_t n, const char* what) {
  for (auto p : pos)
    if (p >= n) throw IndexError(std::string(what) + " position " + std::to_string(p) + " outside length " + std::to_string(n));
}

/// Σ_{j ∈ answer} A[j, i] |G[j, i]| for one head.
inline double flow_into(const Tensor& a, const Tensor& g, std::size_t i, std::span<const std::size_t> answer) {
  double s = 0.0;
  for (auto j : answer) s += a(j, i) * std::abs(g(j, i));
  return s;
}

}  // namespace detail

/// Heads ranked by total IG flowing from context tokens into the answer
/// positions; returns the `count` highest (ties keep the lower index).
inline std::vector<std::size_t> top_heads(const AttentionEvidence& ev, std::span<const std::size_t> context,
                                          std::span<const std::size_t> answer, std::size_t count) {
  ev.validate();
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t h = 0; h < ev.head_count(); ++h) {
    double s = 0.0;
    for (auto i : context) s += detail::flow_into(ev.attention[h], ev.grads[h], i, answer);
    ranked.push_back({-s, h});
  }
  std::stable_sort(ranked.begin(), ranked.end());
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < std::min(count, ranked.size()); ++k) out.push_back(ranked[k].second);
  std::sort(out.begin(), out.end());
  return out;
}

/// Positions of the k largest entries of a row, ties to the lower index.
inline std::vector<std::size_t> top_k_row(const Tensor& a, std::size_t row, std::size_t k) {
  const std::size_t n = a.cols();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t x, std::size_t y) {
    return a(row, x) != a(row, y) ? a(row, x) > a(row, y) : x < y;
  });
  idx.resize(k);
  return idx;
}

/// Fraction of each class covered by the top-k attended positions, averaged
/// over answer steps and then over the given heads (all when empty).
inline ClassScores fr_score(const model::ForwardTrace& trace, std::span<const std::size_t> answer, std::size_t k,
                            const ClassSets& classes, std::span<const std::size_t> heads = {}) {
  if (k == 0) throw PreconditionError("fr_score needs k >= 1");
  if (answer.empty()) throw PreconditionError("fr_score needs answer positions");
  if (trace.attention.empty()) throw MissingEvidenceError("trace holds no attention");
  const std::size_t n = trace.attention[0].rows();
  detail::check_positions(answer, n, "answer");
  ClassScores out;
  out.k_clamped = k > n;
  out.heads = detail::resolve_heads(trace.attention.size(), heads);
  out.mode = heads.empty() ? HeadMode::all : HeadMode::top_k_heads;
  for (std::size_t c = 0; c < 4; ++c)
    if (classes[c].empty()) throw UndefinedClassError("class " + std::to_string(c) + " has no tokens");

  std::vector<std::uint8_t> member(n, 0);
  for (std::size_t c = 0; c < 4; ++c)
    for (auto i : classes[c]) {
      if (i >= n) throw IndexError("class position outside sequence");
      member[i] = std::uint8_t(c + 1);
    }
  for (auto h : out.heads) {
    std::array<double, 4> acc{};
    for (auto j : answer) {
      std::array<std::size_t, 4> hit{};
      for (auto i : top_k_row(trace.attention[h], j, k))
        if (member[i]) ++hit[member[i] - 1];
      for (std::size_t c = 0; c < 4; ++c) acc[c] += double(hit[c]) / double(classes[c].size());
    }
    for (std::size_t c = 0; c < 4; ++c) out.score[c] += acc[c] / double(answer.size());
  }
  for (auto& s : out.score) s /= double(out.heads.size());
  return out;
}

/// (1/|T|) Σ_{i∈T, j∈answer} IG[i, j], averaged over the given heads.
inline double ig_class_score(const AttentionEvidence& ev, std::span<const std::size_t> tokens,
                             std::span<const std::size_t> answer, std::span<const std::size_t> heads = {}) {
  ev.validate();
  if (tokens.empty()) throw UndefinedClassError("IG class score over an empty token set");
  detail::check_positions(tokens, ev.length(), "class");
  detail::check_positions(answer, ev.length(), "answer");
  const auto hs = detail::resolve_heads(ev.head_count(), heads);
  double total = 0.0;
  for (auto h : hs) {
    double s = 0.0;
    for (auto i : tokens) s += detail::flow_into(ev.attention[h], ev.grads[h], i, answer);
    total += s / double(tokens.size());
  }
  return total / double(hs.size());
}

inline ClassScores ig_class_scores(const AttentionEvidence& ev, const ClassSets& classes,
                                   std::span<const std::size_t> answer, std::span<const std::size_t> heads = {}) {
  ClassScores out;
  out.heads = detail::resolve_heads(ev.head_count(), heads);
  out.mode = heads.empty() ? HeadMode::all : HeadMode::top_k_heads;
  for (std::size_t c = 0; c < 4; ++c) out.score[c] = ig_class_score(ev, classes[c], answer, out.heads);
  return out;
}

/// Σ_{j∈answer} IG[i, j], averaged over heads.
inline double ig_token_score(const AttentionEvidence& ev, std::size_t i, std::span<const std::size_t> answer,
                             std::span<const std::size_t> heads = {}) {
  ev.validate();
  if (i >= ev.length()) throw IndexError("token " + std::to_string(i) + " outside length " + std::to_string(ev.length()));
  const auto hs = detail::resolve_heads(ev.head_count(), heads);
  double total = 0.0;
  for (auto h : hs) total += detail::flow_into(ev.attention[h], ev.grads[h], i, answer);
  return total / double(hs.size());
}

/// Per-token IG for every position of the sequence.
inline std::vector<double> ig_token_scores(const AttentionEvidence& ev, std::span<const std::size_t> answer,
                                           std::span<const std::size_t> heads = {}) {
  std::vector<double> out(ev.length());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ig_token_score(ev, i, answer, heads);
  return out;
}

/// Mean attention probability that answer positions place on each class,
/// averaged over answer positions and heads (summed within a class).
inline std::array<double, 4> attention_mass(const model::ForwardTrace& trace, const ClassSets& classes,
                                            std::span<const std::size_t> answer,
                                            std::span<const std::size_t> heads = {}) {
  if (trace.attention.empty()) throw MissingEvidenceError("trace holds no attention");
  if (answer.empty()) throw PreconditionError("attention mass needs answer positions");
  detail::check_positions(answer, trace.attention[0].rows(), "answer");
  const auto hs = detail::resolve_heads(trace.attention.size(), heads);
  std::array<double, 4> out{};
  for (auto h : hs)
    for (auto j : answer)
      for (std::size_t c = 0; c < 4; ++c)
        for (auto i : classes[c]) out[c] += trace.attention[h](j, i);
  for (auto& v : out) v /= double(hs.size() * answer.size());
  return out;
}

/// Row-wise L2 norms of the embedding gradient.
inline std::vector<double> embgrad_norms(const Tensor& grad) {
  if (grad.empty()) throw MissingEvidenceError("no embedding gradient: the detection pass needs an embedding tap");
  if (grad.rank() != 2) throw DimensionError("embedding gradient must be a matrix");
  std::vector<double> out(grad.rows());
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    double s = 0.0;
    for (double v : grad.row(r)) s += v * v;
    out[r] = std::sqrt(s);
  }
  return out;
}

inline std::vector<double> embgrad_norms(const model::ForwardPass& pass, const diff::GradientMap& g) {
  if (!pass.embedding_tap()) throw MissingEvidenceError("forward pass has no embedding tap");
  return embgrad_norms(g.tap(*pass.embedding_tap()));
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("correlation over sequences of different length");
  if (x.size() < 2) return std::nullopt;
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman rank correlation; nullopt when either side is constant.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("correlation over sequences of different length");
  const auto rx = ranks(x), ry = ranks(y);
  return pearson(rx, ry);
}

struct ProportionalityReport {
  std::optional<double> spearman;
  std::array<std::optional<double>, 4> mean_ig;    // per class, nullopt when the class is absent
  std::array<std::optional<double>, 4> mean_norm;
  std::size_t tokens = 0;
};

/// Rank agreement between per-token IG and embedding-gradient norms over the
/// context positions, plus per-class mean pairs.
inline ProportionalityReport proportionality_report(std::span<const double> ig, std::span<const double> norms,
                                                    const ClassSets& classes) {
  if (ig.size() != norms.size()) throw DimensionError("IG and gradient-norm sequences differ in length");
  ProportionalityReport r;
  std::vector<double> a, b;
  for (auto i : context_positions(classes)) {
    if (i >= ig.size()) throw IndexError("context position outside the score sequences");
    a.push_back(ig[i]);
    b.push_back(norms[i]);
  }
  r.tokens = a.size();
  r.spearman = spearman(a, b);
  for (std::size_t c = 0; c < 4; ++c) {
    if (classes[c].empty()) continue;
    double si = 0, sn = 0;
    for (auto i : classes[c]) si += ig[i], sn += norms[i];
    r.mean_ig[c] = si / double(classes[c].size());
    r.mean_norm[c] = sn / double(classes[c].size());
  }
  return r;
}

struct Normalized {
  std::vector<double> values;
  double min = 0.0;
  double max = 0.0;
};

/// Min-max scaling to [0, 1]; a constant input maps to all zeros.
inline Normalized minmax_normalize(std::span<const double> x) {
  Normalized out;
  if (x.empty()) return out;
  out.min = *std::min_element(x.begin(), x.end());
  out.max = *std::max_element(x.begin(), x.end());
  const double span = out.max - out.min;
  for (double v : x) out.values.push_back(span > 0 ? (v - out.min) / span : 0.0);
  return out;
}

}  // namespace cdt::attr
