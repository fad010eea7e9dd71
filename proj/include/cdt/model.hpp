#pragma once

// Tiny pre-norm decoder-only transformer built on the diff tape. Every
// forward pass can expose the per-head attention matrices and the layer-0
// input embeddings as gradient taps.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdt/diff.hpp"
#include "cdt/errors.hpp"
#include "cdt/random.hpp"
#include "cdt/tensor.hpp"

namespace cdt::model {

enum class PositionScheme { learned, sinusoidal };

inline const char* to_string(PositionScheme p) {
  return p == PositionScheme::learned ? "learned" : "sinusoidal";
}

inline PositionScheme position_scheme_from(const std::string& s) {
  if (s == "learned") return PositionScheme::learned;
  if (s == "sinusoidal") return PositionScheme::sinusoidal;
  throw ConfigError("unknown position_scheme '" + s + "'");
}

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 1024;
  PositionScheme position_scheme = PositionScheme::learned;
  std::uint64_t init_seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t ffn_dim() const { return 4 * d_model; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || vocab_size == 0 || max_seq == 0)
      throw ConfigError("model dimensions must all be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameter tensors in a fixed slot order.
///
/// Layout: tok_emb, [pos_emb], then per layer ln1.g ln1.b wq wk wv wo ln2.g
/// ln2.b ff1.w ff1.b ff2.w ff2.b, then lnf.g lnf.b out.w.
struct Parameters {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }

  std::size_t slot(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw IndexError("no parameter named '" + name + "'");
  }
  Tensor& operator[](const std::string& name) { return tensors[slot(name)]; }
  const Tensor& operator[](const std::string& name) const { return tensors[slot(name)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

namespace detail {

inline std::string layer_name(std::size_t l, const char* leaf) {
  return "l" + std::to_string(l) + "." + leaf;
}

inline Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(d));
      t(p, i) = std::sin(double(p) * freq);
      if (i + 1 < d) t(p, i + 1) = std::cos(double(p) * freq);
    }
  return t;
}

}  // namespace detail

inline Parameters init_params(const ModelConfig& config) {
  config.validate();
  Parameters p;
  p.config = config;
  Rng rng(config.init_seed);
  const std::size_t d = config.d_model, f = config.ffn_dim(), v = config.vocab_size;
  auto normal = [&](std::string name, Shape shape) {
    Tensor t(std::move(shape));
    for (auto& x : t.storage()) x = 0.02 * rng.normal();
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  };
  auto constant = [&](std::string name, Shape shape, double value) {
    p.names.push_back(std::move(name));
    p.tensors.emplace_back(std::move(shape), value);
  };
  normal("tok_emb", {v, d});
  if (config.position_scheme == PositionScheme::learned) normal("pos_emb", {config.max_seq, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    constant(detail::layer_name(l, "ln1.g"), {d}, 1.0);
    constant(detail::layer_name(l, "ln1.b"), {d}, 0.0);
    normal(detail::layer_name(l, "wq"), {d, d});
    normal(detail::layer_name(l, "wk"), {d, d});
    normal(detail::layer_name(l, "wv"), {d, d});
    normal(detail::layer_name(l, "wo"), {d, d});
    constant(detail::layer_name(l, "ln2.g"), {d}, 1.0);
    constant(detail::layer_name(l, "ln2.b"), {d}, 0.0);
    normal(detail::layer_name(l, "ff1.w"), {d, f});
    constant(detail::layer_name(l, "ff1.b"), {f}, 0.0);
    normal(detail::layer_name(l, "ff2.w"), {f, d});
    constant(detail::layer_name(l, "ff2.b"), {d}, 0.0);
  }
  constant("lnf.g", {d}, 1.0);
  constant("lnf.b", {d}, 0.0);
  normal("out.w", {d, v});
  return p;
}

/// Values captured from one forward pass.
struct ForwardTrace {
  Tensor embeddings;              // n × d_model, the layer-0 input actually used
  std::vector<Tensor> attention;  // index layer * n_heads + head, each n × n
  Tensor logits;                  // rows logit_begin.. of the n × vocab_size logits
  std::size_t logit_begin = 0;
  std::size_t n_heads = 0;

  /// Greedy prediction for the token after position `row`.
  int predict(std::size_t row) const;

  const Tensor& attn(std::size_t layer, std::size_t head) const {
    return attention.at(layer * n_heads + head);
  }
};

struct ForwardOptions {
  bool tap_attention = false;
  bool tap_embeddings = false;
  /// When false every parameter is a frozen constant.
  bool train_params = true;
  /// Replaces the layer-0 input (token embedding plus position). Gradients
  /// still flow to the table lookup as if the override were not there.
  const Tensor* embedding_override = nullptr;
  /// Project only these rows to the vocabulary (empty means all). The
  /// output head dominates the cost when the loss reads a single row.
  Span logit_rows{};
};

/// Live graph for one forward pass plus handles into it.
class ForwardPass {
 public:
  ForwardPass() : graph_(std::make_unique<diff::Graph>()) {}

  diff::Graph& graph() { return *graph_; }
  const diff::Var& logits() const { return logits_; }
  const diff::Var& embeddings() const { return embeddings_; }
  const diff::Var& attention(std::size_t layer, std::size_t head) const {
    return attention_.at(layer * n_heads_ + head);
  }
  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t length() const { return length_; }
  /// First sequence position held in logits(); rows before it were skipped.
  std::size_t logit_begin() const { return logit_begin_; }

  const std::optional<diff::TapHandle>& embedding_tap() const { return embedding_tap_; }
  const std::vector<diff::TapHandle>& attention_taps() const { return attention_taps_; }

  /// Every tap requested for this pass, embeddings first.
  std::vector<diff::TapHandle> taps() const {
    std::vector<diff::TapHandle> all;
    if (embedding_tap_) all.push_back(*embedding_tap_);
    all.insert(all.end(), attention_taps_.begin(), attention_taps_.end());
    return all;
  }

  ForwardTrace trace() const {
    ForwardTrace t;
    t.embeddings = embeddings_.value();
    t.logits = logits_.value();
    t.logit_begin = logit_begin_;
    t.n_heads = n_heads_;
    t.attention.reserve(attention_.size());
    for (const auto& a : attention_) t.attention.push_back(a.value());
    return t;
  }

 private:
  friend ForwardPass forward(const Parameters&, std::span<const int>, const ForwardOptions&);

  std::unique_ptr<diff::Graph> graph_;
  diff::Var logits_;
  diff::Var embeddings_;
  std::vector<diff::Var> attention_;
  std::optional<diff::TapHandle> embedding_tap_;
  std::vector<diff::TapHandle> attention_taps_;
  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::size_t length_ = 0;
  std::size_t logit_begin_ = 0;
};

inline ForwardPass forward(const Parameters& params, std::span<const int> tokens,
                           const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = params.config;
  const std::size_t n = tokens.size();
  if (n == 0) throw LengthError("forward needs at least one token");
  if (n > cfg.max_seq)
    throw LengthError("input of " + std::to_string(n) + " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  if (opts.embedding_override &&
      opts.embedding_override->shape() != Shape{n, cfg.d_model})
    throw DimensionError("embedding override has shape " + shape_str(opts.embedding_override->shape()) +
                         ", expected " + shape_str({n, cfg.d_model}));

  if (opts.logit_rows.size() > 0 && opts.logit_rows.end > n)
    throw IndexError("logit rows end at " + std::to_string(opts.logit_rows.end) + " past length " + std::to_string(n));

  ForwardPass pass;
  pass.length_ = n;
  pass.n_layers_ = cfg.n_layers;
  pass.n_heads_ = cfg.n_heads;
  diff::Graph& g = pass.graph();
  auto P = [&](const std::string& name) {
    const std::size_t s = params.slot(name);
    return g.parameter(params.tensors[s], s, opts.train_params);
  };

  diff::Var x = diff::gather_rows(P("tok_emb"), tokens);
  if (cfg.position_scheme == PositionScheme::learned) {
    x = diff::add(x, diff::slice_rows(P("pos_emb"), 0, n));
  } else {
    x = diff::add(x, g.constant(detail::sinusoidal_positions(n, cfg.d_model)));
  }
  if (opts.embedding_override) x = diff::substitute(x, *opts.embedding_override);
  pass.embeddings_ = x;
  if (opts.tap_embeddings) pass.embedding_tap_ = g.tap(x);

  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(double(hd));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto L = [&](const char* leaf) { return P(detail::layer_name(l, leaf)); };
    diff::Var h = diff::layer_norm(x, L("ln1.g"), L("ln1.b"));
    diff::Var q = diff::matmul(h, L("wq"));
    diff::Var k = diff::matmul(h, L("wk"));
    diff::Var v = diff::matmul(h, L("wv"));
    std::vector<diff::Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      diff::Var qh = diff::slice_cols(q, hh * hd, hd);
      diff::Var kh = diff::slice_cols(k, hh * hd, hd);
      diff::Var vh = diff::slice_cols(v, hh * hd, hd);
      diff::Var a = diff::masked_softmax_rows(diff::scale(diff::matmul_bt(qh, kh), inv_sqrt), true);
      pass.attention_.push_back(a);
      if (opts.tap_attention) pass.attention_taps_.push_back(g.tap(a));
      heads.push_back(diff::matmul(a, vh));
    }
    diff::Var o = diff::matmul(diff::concat_cols(heads), L("wo"));
    x = diff::add(x, o);
    diff::Var f = diff::layer_norm(x, L("ln2.g"), L("ln2.b"));
    f = diff::gelu(diff::add_bias(diff::matmul(f, L("ff1.w")), L("ff1.b")));
    f = diff::add_bias(diff::matmul(f, L("ff2.w")), L("ff2.b"));
    x = diff::add(x, f);
  }
  if (opts.logit_rows.size() > 0) {
    x = diff::slice_rows(x, opts.logit_rows.begin, opts.logit_rows.size());
    pass.logit_begin_ = opts.logit_rows.begin;
  }
  x = diff::layer_norm(x, P("lnf.g"), P("lnf.b"));
  pass.logits_ = diff::matmul(x, P("out.w"));
  return pass;
}

enum class LossMaskMode { all_positions, answer_only };

inline const char* to_string(LossMaskMode m) {
  return m == LossMaskMode::all_positions ? "all_positions" : "answer_only";
}

inline LossMaskMode loss_mask_mode_from(const std::string& s) {
  if (s == "all_positions") return LossMaskMode::all_positions;
  if (s == "answer_only") return LossMaskMode::answer_only;
  throw ConfigError("unknown loss_mask_mode '" + s + "'");
}

using cdt::Span;

/// Logit rows whose next-token target is selected by the mode. Row i
/// predicts token i + 1.
inline std::vector<std::uint8_t> loss_mask(std::size_t n, LossMaskMode mode, Span answer) {
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (mode == LossMaskMode::all_positions || answer.contains(i + 1)) mask[i] = 1;
  }
  return mask;
}

/// Next-token cross-entropy over the positions selected by `mode`.
inline diff::Var lm_loss(ForwardPass& pass, std::span<const int> tokens, LossMaskMode mode, Span answer = {}) {
  const std::size_t n = tokens.size();
  if (pass.length() != n) throw DimensionError("loss tokens do not match the forward pass length");
  if (mode == LossMaskMode::answer_only && (answer.size() == 0 || answer.begin == 0 || answer.end > n))
    throw PreconditionError("answer_only loss needs a nonempty answer span after position 0");
  const std::size_t lo = pass.logit_begin(), rows = pass.logits().value().rows();
  const auto mask = loss_mask(n, mode, answer);
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] && (i < lo || i >= lo + rows))
      throw PreconditionError("loss selects position " + std::to_string(i) + " whose logits were not computed");
  std::vector<int> targets(rows, 0);
  for (std::size_t r = 0; r < rows && lo + r + 1 < n; ++r) targets[r] = tokens[lo + r + 1];
  return diff::cross_entropy(pass.logits(), targets, std::span(mask).subspan(lo, rows));
}

/// Rows of the logits that predict answer tokens (teacher-forced positions).
inline std::vector<std::size_t> answer_positions(Span answer) {
  std::vector<std::size_t> pos;
  for (std::size_t i = answer.begin; i < answer.end; ++i) pos.push_back(i - 1);
  return pos;
}

inline int argmax_row(const Tensor& logits, std::size_t row) {
  const auto r = logits.row(row);
  std::size_t best = 0;
  for (std::size_t c = 1; c < r.size(); ++c)
    if (r[c] > r[best]) best = c;
  return static_cast<int>(best);
}

inline int ForwardTrace::predict(std::size_t row) const {
  if (row < logit_begin || row - logit_begin >= logits.rows())
    throw IndexError("no logits computed for position " + std::to_string(row));
  return argmax_row(logits, row - logit_begin);
}

/// The logit rows an answer-only loss reads: one before each answer token.
inline Span answer_logit_rows(Span answer) { return {answer.begin - 1, answer.end - 1}; }

}  // namespace cdt::model
