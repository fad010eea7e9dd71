#pragma once

// Cross-entropy baseline, the two-pass denoising step, evaluation with
// attribution probes, and the logged training loop.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdt/attribution.hpp"
#include "cdt/checkpoint.hpp"
#include "cdt/denoise.hpp"
#include "cdt/errors.hpp"
#include "cdt/jsonio.hpp"
#include "cdt/model.hpp"
#include "cdt/optim.hpp"
#include "cdt/random.hpp"
#include "cdt/taskgen.hpp"

namespace cdt::train {

using task::LabeledSample;

enum class Objective { ce, cdt };

inline const char* to_string(Objective o) { return o == Objective::ce ? "ce" : "cdt"; }

inline Objective objective_from(const std::string& s) {
  if (s == "ce") return Objective::ce;
  if (s == "cdt") return Objective::cdt;
  throw ConfigError("unknown objective '" + s + "' (expected ce or cdt)");
}

struct TrainConfig {
  Objective objective = Objective::ce;
  double lr = 3e-4;
  double beta = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;  // drives initialization and batch order
  model::LossMaskMode loss_mask_mode = model::LossMaskMode::answer_only;
  std::size_t eval_interval = 100;
  std::size_t eval_samples = 100;  // held-out samples probed at each log row
  std::size_t checkpoint_interval = 0;
  std::size_t detect_top_k = 30;
  attr::HeadMode head_mode = attr::HeadMode::all;
  std::size_t head_top_k = 4;
  std::size_t denoise_warmup = 0;  // CDT steps before the first denoised update
  model::ModelConfig model;

  double delta() const { return lr * beta; }

  optim::AdamConfig adam() const { return {lr, adam_beta1, adam_beta2, adam_eps}; }

  /// Model config with the run seed as its initialization seed.
  model::ModelConfig seeded_model() const {
    auto m = model;
    m.init_seed = seed;
    return m;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (objective == Objective::cdt && !(beta >= 0.0)) throw ConfigError("beta must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
    if (detect_top_k == 0 || head_top_k == 0) throw ConfigError("top-k values must be positive");
    if (checkpoint_interval % eval_interval != 0)
      throw ConfigError("checkpoint_interval must be a multiple of eval_interval");
    model.validate();
  }

  json to_json() const {
    return {{"objective", to_string(objective)},
            {"lr", lr},
            {"beta", beta},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"clip_norm", clip_norm},
            {"steps", steps},
            {"batch_size", batch_size},
            {"seed", seed},
            {"loss_mask_mode", model::to_string(loss_mask_mode)},
            {"eval_interval", eval_interval},
            {"eval_samples", eval_samples},
            {"checkpoint_interval", checkpoint_interval},
            {"detect_top_k", detect_top_k},
            {"head_mode", attr::to_string(head_mode)},
            {"head_top_k", head_top_k},
            {"denoise_warmup", denoise_warmup},
            {"model", ckpt::config_to_json(model)}};
  }

  static TrainConfig from_json(const json& j) {
    const std::string w = "train config";
    reject_unknown_keys(j, {"objective", "lr", "beta", "adam_beta1", "adam_beta2", "adam_eps", "clip_norm", "steps",
                            "batch_size", "seed", "loss_mask_mode", "eval_interval", "eval_samples",
                            "checkpoint_interval", "detect_top_k", "head_mode", "head_top_k", "denoise_warmup",
                            "model"},
                        w);
    TrainConfig c;
    c.objective = objective_from(get_or<std::string>(j, "objective", "ce", w));
    c.lr = get_or(j, "lr", c.lr, w);
    c.beta = get_or(j, "beta", c.beta, w);
    c.adam_beta1 = get_or(j, "adam_beta1", c.adam_beta1, w);
    c.adam_beta2 = get_or(j, "adam_beta2", c.adam_beta2, w);
    c.adam_eps = get_or(j, "adam_eps", c.adam_eps, w);
    c.clip_norm = get_or(j, "clip_norm", c.clip_norm, w);
    c.steps = get_or(j, "steps", c.steps, w);
    c.batch_size = get_or(j, "batch_size", c.batch_size, w);
    c.seed = get_or(j, "seed", c.seed, w);
    c.loss_mask_mode = model::loss_mask_mode_from(get_or<std::string>(j, "loss_mask_mode", "answer_only", w));
    c.eval_interval = get_or(j, "eval_interval", c.eval_interval, w);
    c.eval_samples = get_or(j, "eval_samples", c.eval_samples, w);
    c.checkpoint_interval = get_or(j, "checkpoint_interval", c.checkpoint_interval, w);
    c.detect_top_k = get_or(j, "detect_top_k", c.detect_top_k, w);
    c.head_mode = attr::head_mode_from(get_or<std::string>(j, "head_mode", "all", w));
    c.head_top_k = get_or(j, "head_top_k", c.head_top_k, w);
    c.denoise_warmup = get_or(j, "denoise_warmup", c.denoise_warmup, w);
    if (j.contains("model")) c.model = ckpt::config_from_json(j.at("model"), w + ".model");
    c.validate();
    return c;
  }
};

/// Parameters plus optimizer state; everything a step mutates.
struct TrainState {
  model::Parameters params;
  optim::AdamState adam;

  static TrainState fresh(const TrainConfig& cfg) {
    TrainState s{model::init_params(cfg.seeded_model()), {}};
    s.adam = optim::AdamState::zeros_like(s.params.tensors);
    return s;
  }
};

struct StepStats {
  double loss = 0.0;                  // loss the update was taken on (phase C for CDT)
  std::optional<double> detect_loss;  // phase A, CDT only
  std::optional<double> mask_density;
  double grad_norm = 0.0;  // before clipping
  double t_detect = 0.0;   // seconds
  double t_emphasize = 0.0;
  double t_optim = 0.0;
};

namespace detail {

using clock = std::chrono::steady_clock;

inline double seconds_since(clock::time_point t0) {
  return std::chrono::duration<double>(clock::now() - t0).count();
}

/// The logit rows a loss needs; answer-only losses read one row per answer
/// token, so the vocabulary projection can skip everything else.
inline Span needed_rows(const LabeledSample& s, model::LossMaskMode mode) {
  return mode == model::LossMaskMode::answer_only ? model::answer_logit_rows(s.answer_span()) : Span{};
}

inline void accumulate(std::vector<Tensor>& acc, const diff::GradientMap& g) {
  for (std::size_t s = 0; s < acc.size(); ++s) {
    const Tensor* t = g.param(s);
    if (!t) continue;
    auto& a = acc[s].storage();
    const auto& b = t->storage();
    for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
  }
}

inline std::vector<Tensor> zero_grads(const model::Parameters& p) {
  std::vector<Tensor> g;
  g.reserve(p.size());
  for (const auto& t : p.tensors) g.emplace_back(t.shape());
  return g;
}

/// Forward plus backward over all parameters; adds the gradient to `acc`.
inline double emphasize(const model::Parameters& params, const LabeledSample& s, model::LossMaskMode mode,
                        const Tensor* override_e, std::vector<Tensor>& acc) {
  model::ForwardOptions o;
  o.embedding_override = override_e;
  o.logit_rows = needed_rows(s, mode);
  auto pass = model::forward(params, s.tokens, o);
  auto loss = model::lm_loss(pass, s.tokens, mode, s.answer_span());
  const double value = loss.value().item();
  accumulate(acc, pass.graph().backward(loss, {}));
  return value;
}

inline double finish(TrainState& st, std::vector<Tensor>& acc, std::size_t batch, const TrainConfig& cfg,
                     StepStats& stats) {
  const auto t0 = clock::now();
  const double inv = 1.0 / double(batch);
  for (auto& g : acc)
    for (double& x : g.storage()) x *= inv;
  stats.grad_norm = optim::clip_global_norm(acc, cfg.clip_norm);
  optim::adam_update(st.params.tensors, acc, st.adam, cfg.adam());
  stats.t_optim = seconds_since(t0);
  return stats.grad_norm;
}

inline void check_batch(std::span<const LabeledSample* const> batch, const model::ModelConfig& m) {
  if (batch.empty()) throw EmptyInputError("empty training batch");
  for (const auto* s : batch)
    if (s->size() > m.max_seq)
      throw LengthError("sample of " + std::to_string(s->size()) + " tokens exceeds max_seq " +
                        std::to_string(m.max_seq));
}

}  // namespace detail

/// One plain cross-entropy update over the batch (mean loss).
inline StepStats ce_step(TrainState& st, std::span<const LabeledSample* const> batch, const TrainConfig& cfg) {
  detail::check_batch(batch, st.params.config);
  StepStats stats;
  auto acc = detail::zero_grads(st.params);
  const auto t0 = detail::clock::now();
  for (const auto* s : batch) stats.loss += detail::emphasize(st.params, *s, cfg.loss_mask_mode, nullptr, acc);
  stats.t_emphasize = detail::seconds_since(t0);
  stats.loss /= double(batch.size());
  detail::finish(st, acc, batch.size(), cfg, stats);
  return stats;
}

/// Result of the frozen detection pass on one sample.
struct Detection {
  double loss = 0.0;
  Tensor embeddings;   // the layer-0 input E
  Tensor grads;        // dL/dE, raw
  denoise::NoiseMask mask;
  std::vector<std::uint8_t> protect;
};

/// Phase A and B for one sample: frozen forward with only the embedding tap,
/// gradient norms per token, and the mean-threshold noise mask over the
/// context (everything before the question, except <bos>).
inline Detection detect(const model::Parameters& params, const LabeledSample& s, model::LossMaskMode mode) {
  model::ForwardOptions o;
  o.train_params = false;
  o.tap_embeddings = true;
  o.logit_rows = detail::needed_rows(s, mode);
  auto pass = model::forward(params, s.tokens, o);
  auto loss = model::lm_loss(pass, s.tokens, mode, s.answer_span());
  const auto taps = pass.taps();
  auto g = pass.graph().backward(loss, taps);

  Detection d;
  d.loss = loss.value().item();
  d.embeddings = pass.embeddings().value();
  d.grads = g.tap(*pass.embedding_tap());
  const auto norms = attr::embgrad_norms(d.grads);
  const std::size_t ctx_end = s.context_end();
  d.protect.assign(s.size(), 1);
  d.mask.indicator.assign(s.size(), 0);
  if (ctx_end > 1) {
    const std::span<const double> ctx(norms.data() + 1, ctx_end - 1);
    auto m = denoise::detect_noise(ctx, denoise::Basis::grad_norm);
    d.mask.threshold = m.threshold;
    for (std::size_t i = 1; i < ctx_end; ++i) {
      d.mask.indicator[i] = m.indicator[i - 1];
      d.protect[i] = 0;
    }
  }
  return d;
}

/// Two-pass denoising step: detect on frozen parameters, perturb the noise
/// rows of the layer-0 input, then train every parameter on the result.
inline StepStats cdt_step(TrainState& st, std::span<const LabeledSample* const> batch, const TrainConfig& cfg) {
  if (cfg.objective != Objective::cdt) throw PreconditionError("cdt_step needs objective cdt");
  detail::check_batch(batch, st.params.config);
  StepStats stats;
  stats.detect_loss = 0.0;
  stats.mask_density = 0.0;
  auto acc = detail::zero_grads(st.params);
  const denoise::DenoiseConfig dc_base{cfg.lr, cfg.beta, {}};
  for (const auto* s : batch) {
    auto t0 = detail::clock::now();
    auto d = detect(st.params, *s, cfg.loss_mask_mode);
    denoise::DenoiseConfig dc = dc_base;
    dc.protect = std::move(d.protect);
    std::optional<Tensor> e2;
    if (d.mask.noisy() > 0) e2 = denoise::denoise_embeddings(d.embeddings, d.grads, d.mask, dc);
    stats.t_detect += detail::seconds_since(t0);
    *stats.detect_loss += d.loss;
    *stats.mask_density += d.mask.density();

    t0 = detail::clock::now();
    // an all-critical mask leaves nothing to denoise: plain CE on this sample
    stats.loss += detail::emphasize(st.params, *s, cfg.loss_mask_mode, e2 ? &*e2 : nullptr, acc);
    stats.t_emphasize += detail::seconds_since(t0);
  }
  const double b = double(batch.size());
  stats.loss /= b;
  *stats.detect_loss /= b;
  *stats.mask_density /= b;
  detail::finish(st, acc, batch.size(), cfg, stats);
  return stats;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Everything one frozen, fully tapped pass says about a sample.
struct SampleProbe {
  bool correct = false;
  std::vector<int> predicted;
  std::vector<std::size_t> context;  // labelled context positions
  std::vector<double> ig;            // per-token IG over the whole sequence (all heads)
  std::vector<double> grad_norm;     // per-token embedding-gradient norm
  std::vector<double> attention;     // per-token attention from answer positions (all heads)
  attr::ClassScores ig_class;        // all heads
  attr::ClassScores ig_class_top;    // top heads by context-to-answer IG
  attr::ClassScores fr_class;
  std::array<double, 4> mass{};
  double loss = 0.0;
};

struct ProbeOptions {
  std::size_t fr_k = 30;
  std::size_t head_top_k = 4;
};

/// Exact match reads the teacher-forced argmax at each answer position.
/// Greedy decoding agrees with it whenever every earlier answer token was
/// predicted correctly, which is exactly when exact match can still hold.
inline SampleProbe probe_sample(const model::Parameters& params, const LabeledSample& s, const ProbeOptions& opt = {}) {
  const Span answer_span = s.answer_span();
  const auto answer = model::answer_positions(answer_span);
  model::ForwardOptions o;
  o.train_params = false;
  o.tap_attention = true;
  o.tap_embeddings = true;
  o.logit_rows = model::answer_logit_rows(answer_span);
  auto pass = model::forward(params, s.tokens, o);
  auto loss = model::lm_loss(pass, s.tokens, model::LossMaskMode::answer_only, answer_span);
  const auto taps = pass.taps();
  auto g = pass.graph().backward(loss, taps);
  const auto trace = pass.trace();
  const auto ev = attr::AttentionEvidence::from(pass, g);
  const auto classes = attr::class_sets(s);

  SampleProbe p;
  p.loss = loss.value().item();
  p.correct = true;
  for (std::size_t k = 0; k < answer.size(); ++k) {
    p.predicted.push_back(trace.predict(answer[k]));
    if (p.predicted.back() != s.answer_tokens[k]) p.correct = false;
  }
  p.context = attr::context_positions(classes);
  p.ig = attr::ig_token_scores(ev, answer);
  p.grad_norm = attr::embgrad_norms(pass, g);
  p.attention.assign(s.size(), 0.0);
  for (const auto& a : trace.attention)
    for (auto j : answer)
      for (std::size_t i = 0; i <= j; ++i) p.attention[i] += a(j, i);
  for (auto& v : p.attention) v /= double(trace.attention.size() * answer.size());
  p.ig_class = attr::ig_class_scores(ev, classes, answer);
  const auto heads = attr::top_heads(ev, p.context, answer, opt.head_top_k);
  p.ig_class_top = attr::ig_class_scores(ev, classes, answer, heads);
  p.fr_class = attr::fr_score(trace, answer, opt.fr_k, classes);
  p.mass = attr::attention_mass(trace, classes, answer);
  return p;
}

struct DetectionCounts {
  std::size_t selected = 0, hits = 0, critical = 0, irrelevant = 0;

  double precision() const { return selected ? double(hits) / double(selected) : 0.0; }
  double recall() const { return critical ? double(hits) / double(critical) : 0.0; }
  DetectionCounts& operator+=(const DetectionCounts& o) {
    selected += o.selected;
    hits += o.hits;
    critical += o.critical;
    irrelevant += o.irrelevant;
    return *this;
  }
};

/// Top-k context positions by `score` (ties to the lower position), scored
/// against the Sup and Inter labels. Irrelevant false positives count Irr.
inline DetectionCounts detection_counts(const LabeledSample& s, std::span<const std::size_t> context,
                                        std::span<const double> score, std::size_t k) {
  std::vector<std::size_t> idx(context.begin(), context.end());
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return score[a] != score[b] ? score[a] > score[b] : a < b;
  });
  DetectionCounts c;
  c.selected = k;
  auto critical = [&](std::size_t i) {
    return s.classes[i] == task::TokenClass::sup || s.classes[i] == task::TokenClass::inter;
  };
  for (auto i : context) c.critical += critical(i);
  for (std::size_t r = 0; r < k; ++r) {
    if (critical(idx[r])) ++c.hits;
    if (s.classes[idx[r]] == task::TokenClass::irr) ++c.irrelevant;
  }
  return c;
}

struct EvalReport {
  std::size_t samples = 0;
  double exact_match = 0.0;
  double mean_loss = 0.0;
  DetectionCounts grad, attn;
  std::array<double, 4> ig{}, ig_top{}, fr{}, mass{};
  std::vector<bool> correct;
  std::vector<SampleProbe> probes;  // kept when requested

  double critical_mass() const { return mass[0] + mass[1]; }
};

struct EvalOptions {
  std::size_t top_k = 30;  // detection and FR
  std::size_t head_top_k = 4;
  std::size_t max_samples = 0;  // 0: all
  bool keep_probes = false;
};

inline EvalReport evaluate(const model::Parameters& params, std::span<const LabeledSample> data,
                           const EvalOptions& opt = {}) {
  EvalReport r;
  const std::size_t n = opt.max_samples ? std::min(opt.max_samples, data.size()) : data.size();
  if (n == 0) return r;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data[i];
    auto p = probe_sample(params, s, {opt.top_k, opt.head_top_k});
    r.correct.push_back(p.correct);
    r.exact_match += p.correct;
    r.mean_loss += p.loss;
    r.grad += detection_counts(s, p.context, p.grad_norm, opt.top_k);
    r.attn += detection_counts(s, p.context, p.attention, opt.top_k);
    for (std::size_t c = 0; c < 4; ++c) {
      r.ig[c] += p.ig_class.score[c];
      r.ig_top[c] += p.ig_class_top.score[c];
      r.fr[c] += p.fr_class.score[c];
      r.mass[c] += p.mass[c];
    }
    if (opt.keep_probes) r.probes.push_back(std::move(p));
  }
  r.samples = n;
  const double inv = 1.0 / double(n);
  r.exact_match *= inv;
  r.mean_loss *= inv;
  for (std::size_t c = 0; c < 4; ++c) {
    r.ig[c] *= inv;
    r.ig_top[c] *= inv;
    r.fr[c] *= inv;
    r.mass[c] *= inv;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Run log

/// Fixed column order of the run log table.
inline const std::vector<std::string>& runlog_columns() {
  static const std::vector<std::string> cols{
      "step",           "train_loss",    "detect_loss",    "mask_density",  "grad_norm",
      "eval_em",        "eval_loss",     "ig_sup",         "ig_inter",      "ig_irr",
      "ig_low",         "crit_mass",     "grad_precision", "grad_recall",   "grad_irr_fp",
      "attn_precision", "attn_recall",   "attn_irr_fp",    "t_detect_ms",   "t_emphasize_ms",
      "t_optim_ms"};
  return cols;
}

/// Columns that hold wall-clock measurements; the content digest skips
/// them because timings never reproduce.
inline bool is_timing_column(const std::string& c) { return c.rfind("t_", 0) == 0; }

struct LogRow {
  std::size_t step = 0;
  std::vector<std::optional<double>> values;  // one per column after "step"

  std::optional<double> get(const std::string& col) const {
    const auto& cols = runlog_columns();
    for (std::size_t i = 1; i < cols.size(); ++i)
      if (cols[i] == col) return values.at(i - 1);
    throw IndexError("no run log column '" + col + "'");
  }
};

struct RunLog {
  std::vector<LogRow> rows;

  static std::string format(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }

  std::string to_csv(bool with_timing = true) const {
    const auto& cols = runlog_columns();
    std::string out;
    auto keep = [&](std::size_t i) { return with_timing || !is_timing_column(cols[i]); };
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (!keep(i)) continue;
      if (!out.empty()) out += ',';
      out += cols[i];
    }
    out += '\n';
    for (const auto& r : rows) {
      std::string line = std::to_string(r.step);
      for (std::size_t i = 1; i < cols.size(); ++i) {
        if (!keep(i)) continue;
        line += ',';
        if (r.values[i - 1]) line += format(*r.values[i - 1]);
      }
      out += line + '\n';
    }
    return out;
  }

  /// Fingerprint of every non-timing cell.
  std::string digest() const { return digest_of(to_csv(false)); }

  static RunLog from_csv(std::string_view text) {
    RunLog log;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("run log is empty");
    std::vector<std::string> header;
    {
      std::istringstream hs(line);
      std::string c;
      while (std::getline(hs, c, ',')) header.push_back(c);
    }
    if (header != runlog_columns()) throw IntegrityError("run log header does not match the column layout");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::size_t start = 0;
      for (;;) {
        const auto comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      if (cells.size() != header.size())
        throw IntegrityError("run log line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                             " cells");
      LogRow r;
      try {
        r.step = std::stoull(cells[0]);
        for (std::size_t i = 1; i < cells.size(); ++i)
          r.values.push_back(cells[i].empty() ? std::nullopt : std::optional<double>(std::stod(cells[i])));
      } catch (const std::exception&) {
        throw IntegrityError("run log line " + std::to_string(lineno) + " has a malformed number");
      }
      log.rows.push_back(std::move(r));
    }
    return log;
  }
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainHooks {
  std::string checkpoint_dir;                // empty: checkpoints are not written
  std::string dataset_digest;                // recorded in checkpoint metadata
  const ckpt::Checkpoint* resume = nullptr;  // continue after its step
  RunLog prior;                              // rows logged before the resume point
  std::size_t stop_after = 0;                // stop once this step completes (0: run to the end)
  std::function<void(const LogRow&)> on_log;
};

struct TrainResult {
  TrainState state;
  RunLog log;
  std::vector<std::string> checkpoints;
  std::size_t last_step = 0;
};

inline std::string checkpoint_name(std::size_t step) {
  std::ostringstream os;
  os << "ckpt_step" << std::setw(6) << std::setfill('0') << step << ".bin";
  return os.str();
}

/// Indices of the batch for `step`, a pure function of (seed, step) so a
/// resumed run draws the same batches as an uninterrupted one.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t pool,
                                              std::size_t batch) {
  Rng rng(derive_seed(derive_seed(seed, 0x6261746368ULL), step));
  if (batch <= pool) return rng.sample_indices(pool, batch);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = rng.index(pool);
  return out;
}

inline TrainResult train(const TrainConfig& cfg, std::span<const LabeledSample> train_set,
                         std::span<const LabeledSample> eval_set, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw EmptyInputError("training set is empty");

  TrainResult res;
  std::size_t start = 1;
  if (hooks.resume) {
    if (!hooks.resume->adam) throw IntegrityError("resume checkpoint carries no optimizer state");
    if (hooks.resume->params.config != cfg.seeded_model())
      throw IntegrityError("resume checkpoint was written for a different model config");
    res.state = {hooks.resume->params, *hooks.resume->adam};
    start = hooks.resume->meta.at("step").get<std::size_t>() + 1;
    for (const auto& r : hooks.prior.rows)
      if (r.step < start) res.log.rows.push_back(r);
  } else {
    res.state = TrainState::fresh(cfg);
  }

  const EvalOptions eo{cfg.detect_top_k, cfg.head_top_k, cfg.eval_samples, false};
  double loss_sum = 0.0, det_sum = 0.0, dens_sum = 0.0, gn_sum = 0.0, td = 0.0, te = 0.0, to = 0.0;
  std::size_t since = 0, det_count = 0;

  auto write_checkpoint = [&](std::size_t step, const std::string& name) {
    if (hooks.checkpoint_dir.empty()) return;
    ckpt::Checkpoint ck{res.state.params, res.state.adam,
                        {{"step", step},
                         {"objective", to_string(cfg.objective)},
                         {"train_config", cfg.to_json()},
                         {"dataset_digest", hooks.dataset_digest}}};
    const auto path = (std::filesystem::path(hooks.checkpoint_dir) / name).string();
    ckpt::save(path, ck);
    res.checkpoints.push_back(path);
  };

  auto log_row = [&](std::size_t step) {
    const auto ev = evaluate(res.state.params, eval_set, eo);
    LogRow r;
    r.step = step;
    auto opt = [&](bool have, double v) { return have ? std::optional<double>(v) : std::nullopt; };
    const bool trained = since > 0, has_eval = ev.samples > 0;
    const bool ig_top = cfg.head_mode == attr::HeadMode::top_k_heads;
    const auto& ig = ig_top ? ev.ig_top : ev.ig;
    r.values = {opt(trained, loss_sum / double(std::max<std::size_t>(since, 1))),
                opt(det_count > 0, det_sum / double(std::max<std::size_t>(det_count, 1))),
                opt(det_count > 0, dens_sum / double(std::max<std::size_t>(det_count, 1))),
                opt(trained, gn_sum / double(std::max<std::size_t>(since, 1))),
                opt(has_eval, ev.exact_match),
                opt(has_eval, ev.mean_loss),
                opt(has_eval, ig[0]),
                opt(has_eval, ig[1]),
                opt(has_eval, ig[2]),
                opt(has_eval, ig[3]),
                opt(has_eval, ev.critical_mass()),
                opt(has_eval, ev.grad.precision()),
                opt(has_eval, ev.grad.recall()),
                opt(has_eval, double(ev.grad.irrelevant)),
                opt(has_eval, ev.attn.precision()),
                opt(has_eval, ev.attn.recall()),
                opt(has_eval, double(ev.attn.irrelevant)),
                opt(det_count > 0, 1e3 * td / double(std::max<std::size_t>(since, 1))),
                opt(trained, 1e3 * te / double(std::max<std::size_t>(since, 1))),
                opt(trained, 1e3 * to / double(std::max<std::size_t>(since, 1)))};
    res.log.rows.push_back(r);
    if (hooks.on_log) hooks.on_log(r);
    loss_sum = det_sum = dens_sum = gn_sum = td = te = to = 0.0;
    since = det_count = 0;
  };

  if (start == 1) log_row(0);
  std::vector<const LabeledSample*> batch;
  for (std::size_t step = start; step <= cfg.steps; ++step) {
    batch.clear();
    for (auto i : batch_indices(cfg.seed, step, train_set.size(), cfg.batch_size)) batch.push_back(&train_set[i]);
    const bool denoise_now = cfg.objective == Objective::cdt && step > cfg.denoise_warmup;
    const StepStats st = denoise_now ? cdt_step(res.state, batch, cfg) : ce_step(res.state, batch, cfg);
    if (!std::isfinite(st.loss) || !std::isfinite(st.grad_norm) || !res.state.params.all_finite()) {
      write_checkpoint(step, "ckpt_diagnostic_step" + std::to_string(step) + ".bin");
      throw NonFiniteError("non-finite loss or parameters at step " + std::to_string(step) +
                           (hooks.checkpoint_dir.empty() ? "" : "; diagnostic checkpoint written"));
    }
    loss_sum += st.loss;
    gn_sum += st.grad_norm;
    if (st.detect_loss) {
      det_sum += *st.detect_loss;
      dens_sum += *st.mask_density;
      ++det_count;
    }
    td += st.t_detect;
    te += st.t_emphasize;
    to += st.t_optim;
    ++since;
    res.last_step = step;

    if (cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0) {
      // the file holds 32-bit floats; continue from exactly what it holds
      optim::quantize_f32(res.state.params.tensors);
      optim::quantize_f32(res.state.adam.m);
      optim::quantize_f32(res.state.adam.v);
      write_checkpoint(step, checkpoint_name(step));
    }
    if (step % cfg.eval_interval == 0 || step == cfg.steps) log_row(step);
    if (hooks.stop_after && step >= hooks.stop_after) break;
  }
  return res;
}

}  // namespace cdt::train
