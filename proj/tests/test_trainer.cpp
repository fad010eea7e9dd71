#include <gtest/gtest.h>

#include <filesystem>

#include "cdt/trainer.hpp"

using namespace cdt;
using namespace cdt::train;

namespace {

const std::vector<LabeledSample>& corpus() {
  static const auto ds = [] {
    task::GenSpec s;
    s.hops = 3;
    s.sample_count = 48;
    s.target_len_tokens = 120;
    s.seed = 21;
    return task::gen_dataset(s).samples;
  }();
  return ds;
}

TrainConfig small(Objective obj = Objective::ce, double beta = 0.0) {
  TrainConfig c;
  c.objective = obj;
  c.beta = beta;
  c.lr = 1e-3;
  c.batch_size = 4;
  c.model.d_model = 32;
  c.model.max_seq = 160;
  c.eval_interval = 5;
  c.eval_samples = 4;
  c.detect_top_k = 10;
  return c;
}

std::vector<const LabeledSample*> batch_of(std::size_t from, std::size_t n) {
  std::vector<const LabeledSample*> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(&corpus()[from + i]);
  return b;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(TrainConfig, JsonRoundTripAndStrictness) {
  auto c = small(Objective::cdt, 3.0);
  c.head_mode = attr::HeadMode::top_k_heads;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json(json{{"lr", 1e-3}, {"betta", 1.0}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(json{{"objective", "dpo"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(json{{"lr", "fast"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(json{{"objective", "cdt"}, {"beta", -1.0}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(json{{"eval_interval", 10}, {"checkpoint_interval", 15}}), ConfigError);
}

TEST(TrainConfig, CeIgnoresBeta) {
  auto c = small(Objective::ce, -5.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(CeStep, OverfitsOneSample) {
  auto cfg = small();
  cfg.lr = 3e-3;
  auto st = TrainState::fresh(cfg);
  const auto b = batch_of(0, 1);
  double loss = 1e9;
  for (int k = 0; k < 500 && loss >= 0.05; ++k) loss = ce_step(st, b, cfg).loss;
  EXPECT_LT(loss, 0.05);
}

TEST(CeStep, SingleBatchDescent) {
  auto cfg = small();
  auto st = TrainState::fresh(cfg);
  const auto b = batch_of(0, 4);
  std::vector<double> losses;
  for (int k = 0; k < 50; ++k) {
    auto s = ce_step(st, b, cfg);
    EXPECT_TRUE(std::isfinite(s.grad_norm));
    losses.push_back(s.loss);
  }
  double head = 0, tail = 0;
  for (int k = 0; k < 10; ++k) {
    head += losses[std::size_t(k)];
    tail += losses[losses.size() - 1 - std::size_t(k)];
  }
  EXPECT_LT(tail, head);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(CdtStep, ZeroBetaIsBitwiseCe) {
  auto ce_cfg = small(Objective::ce);
  auto cdt_cfg = small(Objective::cdt, 0.0);
  auto a = TrainState::fresh(ce_cfg), b = TrainState::fresh(cdt_cfg);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto batch = batch_of(4 * k, 4);
    const auto sa = ce_step(a, batch, ce_cfg);
    const auto sb = cdt_step(b, batch, cdt_cfg);
    EXPECT_EQ(sa.loss, sb.loss);
  }
  EXPECT_EQ(a.params, b.params);
  for (std::size_t s = 0; s < a.adam.m.size(); ++s) EXPECT_EQ(a.adam.v[s].storage(), b.adam.v[s].storage());
}

TEST(CdtStep, PositiveBetaChangesTheUpdate) {
  auto ce_cfg = small(Objective::ce);
  auto cdt_cfg = small(Objective::cdt, 50.0);
  auto a = TrainState::fresh(ce_cfg), b = TrainState::fresh(cdt_cfg);
  ce_step(a, batch_of(0, 4), ce_cfg);
  auto s = cdt_step(b, batch_of(0, 4), cdt_cfg);
  EXPECT_NE(a.params, b.params);
  ASSERT_TRUE(s.detect_loss && s.mask_density);
  EXPECT_GT(*s.mask_density, 0.0);
  EXPECT_LT(*s.mask_density, 1.0);
}

TEST(CdtStep, RequiresCdtObjective) {
  auto cfg = small(Objective::ce);
  auto st = TrainState::fresh(cfg);
  EXPECT_THROW(cdt_step(st, batch_of(0, 2), cfg), PreconditionError);
  std::vector<const LabeledSample*> none;
  EXPECT_THROW(ce_step(st, none, cfg), EmptyInputError);
}

TEST(CdtStep, AllCriticalMaskDegradesToCe) {
  // no context at all: <bos>, a question, an answer
  const auto& v = task::Vocabulary::instance();
  LabeledSample s;
  const std::vector<std::string> words{"<bos>", "where", "is", "the", "apple", "?", "kitchen"};
  s.tokens = v.encode(words);
  s.classes.assign(s.tokens.size(), task::TokenClass::query);
  s.question_span = {1, 6};
  s.answer_tokens = {s.tokens.back()};
  std::vector<const LabeledSample*> b{&s};
  auto ce_cfg = small(Objective::ce);
  auto cdt_cfg = small(Objective::cdt, 100.0);
  auto x = TrainState::fresh(ce_cfg), y = TrainState::fresh(cdt_cfg);
  ce_step(x, b, ce_cfg);
  auto st = cdt_step(y, b, cdt_cfg);
  EXPECT_EQ(*st.mask_density, 0.0);
  EXPECT_EQ(x.params, y.params);
}

TEST(Detect, FrozenPassLeavesStateAndUsesContextMean) {
  auto cfg = small(Objective::cdt, 1.0);
  auto st = TrainState::fresh(cfg);
  const auto before = st.params;
  const auto& s = corpus()[0];
  auto d = detect(st.params, s, cfg.loss_mask_mode);
  EXPECT_EQ(st.params, before);
  EXPECT_EQ(st.adam.step, 0u);

  const auto norms = attr::embgrad_norms(d.grads);
  double mean = 0;
  for (std::size_t i = 1; i < s.context_end(); ++i) mean += norms[i];
  mean /= double(s.context_end() - 1);
  EXPECT_NEAR(d.mask.threshold, mean, 1e-15);
  EXPECT_EQ(d.mask.indicator[0], 0);
  EXPECT_EQ(d.protect[0], 1);
  for (std::size_t i = s.context_end(); i < s.size(); ++i) {
    EXPECT_EQ(d.mask.indicator[i], 0);
    EXPECT_EQ(d.protect[i], 1);
  }
  for (std::size_t i = 1; i < s.context_end(); ++i) EXPECT_EQ(d.mask.indicator[i], norms[i] < mean ? 1 : 0);
}

TEST(CdtStep, FirstOrderDescentAtSmallStrength) {
  auto cfg = small(Objective::cdt, 1.0);  // delta = 1e-3
  auto st = TrainState::fresh(cfg);
  int ok = 0;
  for (std::size_t k = 0; k < 20; ++k) {
    auto s = cdt_step(st, batch_of((4 * k) % 44, 4), cfg);
    ok += s.loss <= *s.detect_loss;
  }
  EXPECT_GE(ok, 19);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  auto st = TrainState::fresh(small());
  auto r = evaluate(st.params, corpus(), {10, 4, 0, false});
  EXPECT_EQ(r.samples, corpus().size());
  EXPECT_LE(r.exact_match, 0.05);
  EXPECT_GT(r.grad.selected, 0u);
}

TEST(Evaluate, EmptySetGivesEmptyReport) {
  auto st = TrainState::fresh(small());
  auto r = evaluate(st.params, {}, {});
  EXPECT_EQ(r.samples, 0u);
}

TEST(Evaluate, ProbeCorrectnessMatchesPredictions) {
  auto st = TrainState::fresh(small());
  const auto& s = corpus()[3];
  auto p = probe_sample(st.params, s);
  ASSERT_EQ(p.predicted.size(), s.answer_tokens.size());
  EXPECT_EQ(p.correct, p.predicted == s.answer_tokens);
  model::ForwardOptions o;
  o.train_params = false;
  const auto trace = model::forward(st.params, s.tokens, o).trace();
  EXPECT_EQ(p.predicted[0], trace.predict(s.size() - 2));
}

TEST(Detection, PerfectDetectorScoresOne) {
  const auto& s = corpus()[0];
  const auto classes = attr::class_sets(s);
  const auto context = attr::context_positions(classes);
  std::vector<double> score(s.size(), 0.0);
  std::size_t critical = 0;
  for (auto i : context)
    if (s.classes[i] == task::TokenClass::sup || s.classes[i] == task::TokenClass::inter) {
      score[i] = 1.0;
      ++critical;
    }
  auto c = detection_counts(s, context, score, critical);
  EXPECT_DOUBLE_EQ(c.precision(), 1.0);
  EXPECT_DOUBLE_EQ(c.recall(), 1.0);
  EXPECT_EQ(c.irrelevant, 0u);
  auto clamped = detection_counts(s, context, score, 100000);
  EXPECT_EQ(clamped.selected, context.size());
  EXPECT_DOUBLE_EQ(clamped.recall(), 1.0);
}

TEST(RunLog, CsvRoundTripAndTimingFreeDigest) {
  RunLog log;
  LogRow r;
  r.step = 5;
  r.values.assign(runlog_columns().size() - 1, std::nullopt);
  r.values[0] = 1.25;
  r.values[4] = 0.1;
  r.values.back() = 3.0;
  log.rows.push_back(r);
  auto back = RunLog::from_csv(log.to_csv());
  ASSERT_EQ(back.rows.size(), 1u);
  EXPECT_EQ(back.rows[0].step, 5u);
  EXPECT_EQ(back.rows[0].values, r.values);
  EXPECT_EQ(*back.rows[0].get("train_loss"), 1.25);
  EXPECT_FALSE(back.rows[0].get("detect_loss"));
  EXPECT_THROW(back.rows[0].get("nope"), IndexError);

  auto timed = log;
  timed.rows[0].values.back() = 99.0;
  EXPECT_EQ(timed.digest(), log.digest());
  timed.rows[0].values[0] = 1.5;
  EXPECT_NE(timed.digest(), log.digest());
  EXPECT_THROW(RunLog::from_csv("step,wrong\n"), IntegrityError);
  EXPECT_THROW(RunLog::from_csv(runlog_columns()[0] + "\n"), IntegrityError);
}

TEST(BatchIndices, DeterministicAndInRange) {
  EXPECT_EQ(batch_indices(3, 7, 100, 16), batch_indices(3, 7, 100, 16));
  EXPECT_NE(batch_indices(3, 7, 100, 16), batch_indices(3, 8, 100, 16));
  for (auto i : batch_indices(1, 1, 5, 12)) EXPECT_LT(i, 5u);
}

TEST(Train, SameConfigSameDigest) {
  auto cfg = small(Objective::cdt, 5.0);
  cfg.steps = 10;
  const std::span<const LabeledSample> tr(corpus().data(), 40), ho(corpus().data() + 40, 8);
  auto a = train::train(cfg, tr, ho);
  auto b = train::train(cfg, tr, ho);
  EXPECT_EQ(a.log.digest(), b.log.digest());
  EXPECT_EQ(a.state.params, b.state.params);
  ASSERT_EQ(a.log.rows.size(), 3u);  // steps 0, 5, 10
  EXPECT_FALSE(a.log.rows[0].get("train_loss"));
  EXPECT_TRUE(a.log.rows[1].get("detect_loss"));
  for (const auto& r : a.log.rows)
    for (const auto& v : r.values)
      if (v) {
        EXPECT_TRUE(std::isfinite(*v));
      }
}

TEST(Train, CeRowsLeaveDetectionColumnsEmpty) {
  auto cfg = small();
  cfg.steps = 5;
  auto r = train::train(cfg, corpus(), corpus());
  EXPECT_FALSE(r.log.rows.back().get("detect_loss"));
  EXPECT_FALSE(r.log.rows.back().get("mask_density"));
  EXPECT_TRUE(r.log.rows.back().get("eval_em"));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  TempDir full("cdt_train_full"), cut("cdt_train_cut");
  auto cfg = small(Objective::cdt, 5.0);
  cfg.steps = 20;
  cfg.checkpoint_interval = 10;
  const std::span<const LabeledSample> tr(corpus().data(), 40), ho(corpus().data() + 40, 8);

  TrainHooks h;
  h.checkpoint_dir = full.path.string();
  auto whole = train::train(cfg, tr, ho, h);
  ASSERT_EQ(whole.checkpoints.size(), 2u);

  TrainHooks first;
  first.checkpoint_dir = cut.path.string();
  first.stop_after = 13;  // interrupted past the checkpoint
  auto part = train::train(cfg, tr, ho, first);
  EXPECT_EQ(part.last_step, 13u);
  const auto ck = ckpt::load((cut.path / checkpoint_name(10)).string());
  EXPECT_EQ(ck.meta.at("step"), 10);

  TrainHooks second;
  second.checkpoint_dir = cut.path.string();
  second.resume = &ck;
  second.prior = part.log;
  auto rest = train::train(cfg, tr, ho, second);
  EXPECT_EQ(rest.state.params, whole.state.params);
  EXPECT_EQ(rest.log.digest(), whole.log.digest());
  EXPECT_EQ(ckpt::load((cut.path / checkpoint_name(20)).string()).params,
            ckpt::load((full.path / checkpoint_name(20)).string()).params);
}

TEST(Train, NonFiniteAbortsWithDiagnosticCheckpoint) {
  TempDir dir("cdt_train_nan");
  auto cfg = small();
  cfg.lr = 1e300;
  cfg.clip_norm = 0.0;
  cfg.steps = 20;
  TrainHooks h;
  h.checkpoint_dir = dir.path.string();
  EXPECT_THROW(train::train(cfg, corpus(), corpus(), h), NonFiniteError);
  bool found = false;
  for (const auto& e : std::filesystem::directory_iterator(dir.path))
    found |= e.path().filename().string().rfind("ckpt_diagnostic", 0) == 0;
  EXPECT_TRUE(found);
}

TEST(Train, RejectsEmptyTrainingSetAndMismatchedResume) {
  auto cfg = small();
  EXPECT_THROW(train::train(cfg, {}, corpus()), EmptyInputError);
  ckpt::Checkpoint other{model::init_params(cfg.seeded_model()), std::nullopt, {{"step", 1}}};
  TrainHooks h;
  h.resume = &other;
  EXPECT_THROW(train::train(cfg, corpus(), corpus(), h), IntegrityError);
  other.adam = optim::AdamState::zeros_like(other.params.tensors);
  cfg.seed = 99;
  EXPECT_THROW(train::train(cfg, corpus(), corpus(), h), IntegrityError);
}

TEST(Timing, DetectionPassCheaperThanEmphasizing) {
  // At the default width the frozen pass skips enough weight-gradient work
  // to show; at tiny widths the two are too close to call.
  auto cfg = small(Objective::cdt, 1.0);
  cfg.model = model::ModelConfig{};
  auto st = TrainState::fresh(cfg);
  // fastest of several steps, so a preempted step does not decide the outcome
  double det = 1e9, emph = 1e9;
  for (std::size_t k = 0; k < 6; ++k) {
    auto s = cdt_step(st, batch_of(4 * k, 8), cfg);
    det = std::min(det, s.t_detect);
    emph = std::min(emph, s.t_emphasize);
  }
  EXPECT_LT(det, emph);
}
