#pragma once

// Command implementations behind the cdt_lab binary: configuration
// loading, run directories with a lock and manifest, and the reports each
// subcommand emits. Argument parsing lives in the tool; everything here is
// callable from tests.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdt/attribution.hpp"
#include "cdt/checkpoint.hpp"
#include "cdt/denoise.hpp"
#include "cdt/errors.hpp"
#include "cdt/jsonio.hpp"
#include "cdt/taskgen.hpp"
#include "cdt/trainer.hpp"

#ifndef CDT_VERSION
#define CDT_VERSION "dev"
#endif

namespace cdt::harness {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kIntegrity = 3, kEmpty = 4 };

inline int exit_code_for(const std::exception& e) {
  if (const auto* ce = dynamic_cast<const Error*>(&e)) {
    if (ce->kind() == "config") return kConfig;
    if (ce->kind() == "integrity") return kIntegrity;
    if (ce->kind() == "empty-input") return kEmpty;
  }
  return kInternal;
}

/// Runs `body`, turning exceptions into exit codes with a one-line
/// diagnostic.
template <typename F>
int guarded(F&& body, std::ostream& diag = std::cerr) {
  try {
    return body();
  } catch (const Error& e) {
    diag << "error [" << e.kind() << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    diag << "error [internal]: " << e.what() << "\n";
    return kInternal;
  }
}

inline constexpr const char* kRunRootEnv = "CDT_RUN_ROOT";

/// Relative run directories resolve against $CDT_RUN_ROOT when it is set.
inline fs::path resolve_run_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative())
    if (const char* root = std::getenv(kRunRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

/// Exclusive ownership of a run directory for one command.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / "run.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) throw IntegrityError("run directory '" + dir.string() + "' is locked by another command (" +
                                 path_.string() + ")");
    std::fclose(f);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

struct RunManifest {
  json config;
  std::string dataset_digest;
  std::string code_version = CDT_VERSION;
  std::vector<std::string> artifacts;  // relative to the run directory
  std::string status = "running";
  json overrides = json::object();

  json to_json() const {
    return {{"config", config},       {"dataset_digest", dataset_digest}, {"code_version", code_version},
            {"artifacts", artifacts}, {"status", status},                 {"overrides", overrides}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    try {
      m.config = j.at("config");
      m.dataset_digest = j.at("dataset_digest").get<std::string>();
      m.code_version = j.at("code_version").get<std::string>();
      m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
      m.status = j.at("status").get<std::string>();
      m.overrides = j.value("overrides", json::object());
    } catch (const json::exception& e) {
      throw IntegrityError(std::string("run manifest: ") + e.what());
    }
    return m;
  }

  /// Files listed but absent from `dir`.
  std::vector<std::string> missing(const fs::path& dir) const {
    std::vector<std::string> out;
    for (const auto& a : artifacts)
      if (!fs::exists(dir / a)) out.push_back(a);
    return out;
  }
};

inline json read_json_file(const std::string& path) { return parse_json(read_file(path), path); }

inline void write_json_file(const fs::path& path, const json& j) { write_file(path.string(), j.dump(2) + "\n"); }

inline fs::path dataset_manifest_path(const std::string& dataset) { return fs::path(dataset + ".manifest.json"); }

struct LoadedDataset {
  std::vector<task::LabeledSample> samples;
  std::string digest;
};

/// Reads a dataset and checks it against the manifest written beside it.
inline LoadedDataset load_dataset(const std::string& path, bool require_manifest = true) {
  LoadedDataset d;
  const std::string text = read_file(path);
  d.digest = digest_of(text);
  const auto mpath = dataset_manifest_path(path);
  if (fs::exists(mpath)) {
    json m;
    try {
      m = json::parse(read_file(mpath.string()));
    } catch (const json::exception& e) {
      throw IntegrityError(mpath.string() + ": " + e.what());
    }
    const auto want = m.value("corpus_digest", std::string());
    if (want != d.digest)
      throw IntegrityError("dataset digest " + d.digest + " does not match manifest digest " + want);
  } else if (require_manifest) {
    throw IntegrityError("no manifest next to dataset '" + path + "'");
  }
  d.samples = task::from_jsonl(text);
  return d;
}

// ---------------------------------------------------------------------------
// gen-data

inline int cmd_gen_data(const std::string& spec_path, const std::string& out_path, std::ostream& out,
                        std::ostream& diag) {
  const auto spec = task::GenSpec::from_json(read_json_file(spec_path));
  const auto ds = task::gen_dataset(spec);
  write_file(out_path, task::to_jsonl(ds.samples));
  write_json_file(dataset_manifest_path(out_path), ds.manifest.to_json());
  out << "samples " << ds.samples.size() << "\n"
      << "audited " << ds.manifest.audited << "\n"
      << "passed " << ds.manifest.audited - ds.manifest.failures.size() << "\n"
      << "corpus_digest " << ds.manifest.corpus_digest << "\n";
  if (!ds.manifest.passed()) {
    for (const auto& f : ds.manifest.failures) {
      diag << "audit failure in sample " << f.index << ":";
      for (const auto& why : f.failures) diag << " " << why << ";";
      diag << "\n";
    }
    return kIntegrity;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOverrides {
  std::optional<std::string> objective;
  std::optional<double> lr, beta;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> head_mode;
  std::optional<std::size_t> top_k;
  std::optional<std::size_t> steps;
  std::size_t stop_after = 0;  // not part of the config: simulates an interruption

  /// Applies every set flag to the config JSON and returns what changed.
  json apply(json& cfg) const {
    json changed = json::object();
    auto set = [&](const char* key, const json& v) {
      cfg[key] = v;
      changed[key] = v;
    };
    if (objective) set("objective", *objective);
    if (lr) set("lr", *lr);
    if (beta) set("beta", *beta);
    if (seed) set("seed", *seed);
    if (head_mode) set("head_mode", *head_mode);
    if (top_k) set("detect_top_k", *top_k);
    if (steps) set("steps", *steps);
    return changed;
  }
};

inline std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  if (!fs::exists(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_step", 0) == 0 && (!best || name > best->filename().string())) best = e.path();
  }
  return best;
}

inline int cmd_train(const std::string& config_path, const std::string& dataset_path, const std::string& run_dir,
                     const TrainOverrides& ov, bool resume, std::ostream& out, std::ostream& diag) {
  json cj = config_path.empty() ? json::object() : read_json_file(config_path);
  if (!cj.is_object()) throw ConfigError(config_path + ": expected an object");
  const json overrides = ov.apply(cj);
  const auto cfg = train::TrainConfig::from_json(cj);
  const auto data = load_dataset(dataset_path);
  if (data.samples.empty()) throw EmptyInputError("dataset '" + dataset_path + "' has no samples");
  auto [train_set, held_out] = task::split_by_parity(data.samples);
  if (train_set.empty()) throw EmptyInputError("dataset has no training samples (all seeds are odd)");

  const fs::path dir = resolve_run_dir(run_dir);
  RunLock lock(dir);
  const fs::path mpath = dir / "manifest.json";

  RunManifest man;
  man.config = cfg.to_json();
  man.dataset_digest = data.digest;
  man.overrides = overrides;
  train::TrainHooks hooks;
  hooks.checkpoint_dir = dir.string();
  hooks.dataset_digest = data.digest;
  hooks.stop_after = ov.stop_after;
  std::optional<ckpt::Checkpoint> ck;
  if (resume) {
    if (!fs::exists(mpath)) throw IntegrityError("nothing to resume in '" + dir.string() + "'");
    const auto prev = RunManifest::from_json(read_json_file(mpath.string()));
    if (prev.dataset_digest != data.digest) throw IntegrityError("dataset differs from the one the run started on");
    if (prev.config != man.config) throw ConfigError("resume config differs from the interrupted run's config");
    if (auto last = latest_checkpoint(dir)) {
      ck = ckpt::load(last->string());
      hooks.resume = &*ck;
      if (fs::exists(dir / "runlog.csv")) hooks.prior = train::RunLog::from_csv(read_file((dir / "runlog.csv").string()));
      diag << "resuming after step " << ck->meta.at("step") << " from " << last->filename().string() << "\n";
    }
  }
  write_json_file(dir / "config.json", cfg.to_json());
  write_json_file(mpath, man.to_json());

  train::RunLog live = hooks.resume ? hooks.prior : train::RunLog{};
  if (hooks.resume) {
    const auto start = ck->meta.at("step").get<std::size_t>();
    std::erase_if(live.rows, [&](const train::LogRow& r) { return r.step > start; });
  }
  hooks.prior = live;
  hooks.on_log = [&](const train::LogRow& r) {
    live.rows.push_back(r);
    write_file((dir / "runlog.csv").string(), live.to_csv());
    const auto em = r.get("eval_em");
    out << "step " << r.step << " eval_em " << (em ? train::RunLog::format(*em) : "NA") << "\n";
  };

  train::TrainResult res;
  try {
    res = train::train(cfg, train_set, held_out, hooks);
  } catch (const NonFiniteError&) {
    man.status = "aborted";
    write_json_file(mpath, man.to_json());
    throw;
  }
  write_file((dir / "runlog.csv").string(), res.log.to_csv());
  if (res.last_step < cfg.steps) {
    man.status = "interrupted";
    write_json_file(mpath, man.to_json());
    out << "stopped after step " << res.last_step << "\n";
    return kOk;
  }
  ckpt::save((dir / "final.bin").string(),
             {res.state.params, res.state.adam, {{"step", res.last_step}, {"dataset_digest", data.digest}}});

  man.artifacts = {"config.json", "runlog.csv", "final.bin"};
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_step", 0) == 0) man.artifacts.push_back(name);
  }
  std::sort(man.artifacts.begin() + 3, man.artifacts.end());
  man.status = "complete";
  if (const auto miss = man.missing(dir); !miss.empty()) throw IntegrityError("artifact missing: " + miss.front());
  write_json_file(mpath, man.to_json());
  out << "runlog_digest " << res.log.digest() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

inline json class_json(const std::array<double, 4>& v) {
  return {{"Sup", v[0]}, {"Inter", v[1]}, {"Irr", v[2]}, {"Low", v[3]}};
}

struct ProbeSettings {
  std::size_t top_k = 30;
  std::size_t head_top_k = 4;
  attr::HeadMode head_mode = attr::HeadMode::all;
  std::size_t max_samples = 0;
};

/// Per-sample attribution report plus corpus aggregates split by verdict.
inline json probe_report(const model::Parameters& params, std::span<const task::LabeledSample> data,
                         const ProbeSettings& ps) {
  if (data.empty()) throw EmptyInputError("probe needs at least one sample");
  const auto ev = train::evaluate(params, data, {ps.top_k, ps.head_top_k, ps.max_samples, true});
  json samples = json::array();
  std::vector<double> pooled_ig, pooled_norm;
  std::array<std::array<double, 4>, 2> ig_by{}, fr_by{};
  std::array<std::size_t, 2> count_by{};
  for (std::size_t k = 0; k < ev.probes.size(); ++k) {
    const auto& p = ev.probes[k];
    const auto& s = data[k];
    std::vector<double> ig, norm;
    for (auto i : p.context) {
      ig.push_back(p.ig[i]);
      norm.push_back(p.grad_norm[i]);
    }
    pooled_ig.insert(pooled_ig.end(), ig.begin(), ig.end());
    pooled_norm.insert(pooled_norm.end(), norm.begin(), norm.end());
    const auto rho = attr::spearman(ig, norm);
    const auto& ig_used = ps.head_mode == attr::HeadMode::all ? p.ig_class : p.ig_class_top;
    const std::size_t v = p.correct ? 1 : 0;
    ++count_by[v];
    for (std::size_t c = 0; c < 4; ++c) {
      ig_by[v][c] += ig_used.score[c];
      fr_by[v][c] += p.fr_class.score[c];
    }
    samples.push_back({{"index", k},
                       {"seed", s.seed},
                       {"correct", p.correct},
                       {"predicted", p.predicted},
                       {"answer", s.answer_tokens},
                       {"fr", class_json(p.fr_class.score)},
                       {"ig", class_json(ig_used.score)},
                       {"attention_mass", class_json(p.mass)},
                       {"spearman_ig_gradnorm", rho ? json(*rho) : json(nullptr)},
                       {"detection_grad", {{"precision", train::detection_counts(s, p.context, p.grad_norm, ps.top_k).precision()}}},
                       {"detection_attn", {{"precision", train::detection_counts(s, p.context, p.attention, ps.top_k).precision()}}}});
  }
  auto split = [&](std::size_t v) {
    json j = {{"samples", count_by[v]}};
    if (count_by[v] == 0) {
      j["fr"] = nullptr;
      j["ig"] = nullptr;
      return j;
    }
    std::array<double, 4> ig = ig_by[v], fr = fr_by[v];
    for (std::size_t c = 0; c < 4; ++c) {
      ig[c] /= double(count_by[v]);
      fr[c] /= double(count_by[v]);
    }
    j["fr"] = class_json(fr);
    j["ig"] = class_json(ig);
    return j;
  };
  const auto pooled = attr::spearman(pooled_ig, pooled_norm);
  return {{"samples", ev.samples},
          {"top_k", ps.top_k},
          {"head_mode", attr::to_string(ps.head_mode)},
          {"exact_match", ev.exact_match},
          {"spearman_pooled", pooled ? json(*pooled) : json(nullptr)},
          {"detection",
           {{"grad", {{"precision", ev.grad.precision()}, {"recall", ev.grad.recall()}, {"irrelevant_fp", ev.grad.irrelevant}}},
            {"attn", {{"precision", ev.attn.precision()}, {"recall", ev.attn.recall()}, {"irrelevant_fp", ev.attn.irrelevant}}}}},
          {"by_verdict", {{"correct", split(1)}, {"wrong", split(0)}}},
          {"per_sample", samples}};
}

inline int cmd_probe(const std::string& checkpoint, const std::string& dataset, const std::string& report_path,
                     const ProbeSettings& ps, std::ostream& out) {
  const auto ck = ckpt::load(checkpoint);
  const auto data = load_dataset(dataset, false);
  if (data.samples.empty()) throw EmptyInputError("dataset '" + dataset + "' has no samples");
  const auto rep = probe_report(ck.params, data.samples, ps);
  write_json_file(report_path, rep);
  out << "samples " << rep["samples"] << " exact_match " << rep["exact_match"] << " spearman_pooled "
      << rep["spearman_pooled"] << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// denoise-analyze

/// Parses "0,0.5,1" into strengths; the text itself is echoed in reports.
inline std::vector<double> parse_sweep(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("sweep entry '" + item + "' is not a number");
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (used != item.size()) throw ConfigError("sweep entry '" + item + "' has trailing text");
    if (v < 0 || !std::isfinite(v)) throw ConfigError("sweep strengths must be finite and non-negative");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty sweep");
  return out;
}

struct DenoiseSettings {
  std::string sweep_text = "0,1,2,4,8,16,32";
  denoise::ThresholdMode threshold_mode = denoise::ThresholdMode::mean;
  double percentile = 50.0;
  std::size_t max_samples = 0;
};

inline json denoise_report(const model::Parameters& params, std::span<const task::LabeledSample> data,
                           const DenoiseSettings& ds) {
  if (data.empty()) throw EmptyInputError("denoise analysis needs at least one sample");
  denoise::ManualDenoiseOptions opt;
  opt.strengths = parse_sweep(ds.sweep_text);
  opt.threshold_mode = ds.threshold_mode;
  opt.percentile = ds.percentile;
  const std::size_t n = ds.max_samples ? std::min(ds.max_samples, data.size()) : data.size();
  std::vector<denoise::ManualDenoiseReport> reps;
  std::size_t skipped = 0, flagged = 0, flagged_critical = 0, context = 0;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      reps.push_back(denoise::manual_denoise_analysis(params, data[i], opt));
    } catch (const AnalysisUnavailableError&) {
      ++skipped;
      continue;
    }
    flagged += reps.back().flagged;
    flagged_critical += reps.back().flagged_critical;
    context += reps.back().context;
  }
  if (reps.empty()) throw AnalysisUnavailableError("no sample carried an attribution signal");
  const auto mean = denoise::mean_sweep(reps);
  std::vector<double> curve;
  for (const auto& p : mean) curve.push_back(p.critical());
  json table = json::array();
  for (const auto& p : mean)
    table.push_back({{"strength", p.strength},
                     {"critical_mass", p.critical()},
                     {"ratio", mean.front().critical() > 0 ? p.critical() / mean.front().critical() : 0.0},
                     {"mass", class_json(p.mass)}});
  std::size_t rising = 0;
  for (const auto& r : reps)
    if (r.sweep.size() > 1 && r.sweep[1].critical() > r.sweep[0].critical()) ++rising;
  double peak = 0;
  for (double c : curve) peak = std::max(peak, c);
  return {{"sweep", ds.sweep_text},
          {"threshold_mode", ds.threshold_mode == denoise::ThresholdMode::mean ? "mean" : "percentile"},
          {"samples", reps.size()},
          {"skipped_no_signal", skipped},
          {"mask", {{"context_tokens", context},
                    {"flagged", flagged},
                    {"flagged_critical", flagged_critical},
                    {"flagged_fraction", context ? double(flagged) / double(context) : 0.0}}},
          {"before", class_json(mean.front().mass)},
          {"after", class_json(mean.back().mass)},
          {"table", table},
          {"peak_ratio", mean.front().critical() > 0 ? peak / mean.front().critical() : 0.0},
          {"samples_rising_at_first_step", rising},
          {"rises_then_saturates", denoise::rises_then_saturates(curve)}};
}

inline int cmd_denoise_analyze(const std::string& checkpoint, const std::string& dataset,
                               const DenoiseSettings& ds, const std::string& report_path, std::ostream& out) {
  const auto ck = ckpt::load(checkpoint);
  const auto data = load_dataset(dataset, false);
  if (data.samples.empty()) throw EmptyInputError("dataset '" + dataset + "' has no samples");
  const auto rep = denoise_report(ck.params, data.samples, ds);
  write_json_file(report_path, rep);
  out << "sweep " << ds.sweep_text << "\n";
  for (const auto& row : rep["table"]) out << "strength " << row["strength"] << " ratio " << row["ratio"] << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// report

struct RunSummary {
  std::string name;
  fs::path dir;
  bool complete = false;
  std::string problem;
  std::optional<train::RunLog> log;
  json config;
};

inline RunSummary summarize_run(const fs::path& dir) {
  RunSummary r;
  r.dir = dir;
  r.name = dir.filename().string();
  if (r.name.empty()) r.name = dir.parent_path().filename().string();
  try {
    const auto man = RunManifest::from_json(read_json_file((dir / "manifest.json").string()));
    r.config = man.config;
    if (man.status != "complete") r.problem = "status " + man.status;
    else if (auto miss = man.missing(dir); !miss.empty()) r.problem = "missing artifact " + miss.front();
  } catch (const Error& e) {
    r.problem = std::string("no readable manifest: ") + e.what();
  }
  try {
    r.log = train::RunLog::from_csv(read_file((dir / "runlog.csv").string()));
  } catch (const Error& e) {
    if (r.problem.empty()) r.problem = std::string("no readable run log: ") + e.what();
  }
  r.complete = r.problem.empty();
  return r;
}

/// Step-aligned table of `columns` for every run; absent cells print NA.
inline std::string aligned_table(std::span<const RunSummary> runs, const std::vector<std::string>& columns) {
  std::map<std::size_t, std::vector<std::string>> rows;
  const std::size_t width = runs.size() * columns.size();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (!runs[r].log) continue;
    for (const auto& row : runs[r].log->rows) {
      auto& cells = rows.try_emplace(row.step, width, "NA").first->second;
      for (std::size_t c = 0; c < columns.size(); ++c)
        if (auto v = row.get(columns[c])) cells[r * columns.size() + c] = train::RunLog::format(*v);
    }
  }
  std::string out = "step";
  for (const auto& run : runs)
    for (const auto& c : columns) out += "," + run.name + ":" + c;
  out += "\n";
  for (const auto& [step, cells] : rows) {
    out += std::to_string(step);
    for (const auto& c : cells) out += "," + c;
    out += "\n";
  }
  return out;
}

inline int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_path, std::ostream& out,
                      std::ostream& diag) {
  if (run_dirs.empty()) throw EmptyInputError("report needs at least one run directory");
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) runs.push_back(summarize_run(resolve_run_dir(d)));
  const std::string base = out_path;
  write_file(base + "_accuracy.csv", aligned_table(runs, {"eval_em", "train_loss", "eval_loss"}));
  write_file(base + "_timing.csv", aligned_table(runs, {"t_detect_ms", "t_emphasize_ms", "t_optim_ms"}));
  write_file(base + "_detection.csv",
             aligned_table(runs, {"grad_precision", "grad_recall", "grad_irr_fp", "attn_precision", "attn_recall",
                                  "attn_irr_fp"}));
  write_file(base + "_attribution.csv", aligned_table(runs, {"ig_sup", "ig_inter", "ig_irr", "ig_low", "crit_mass"}));

  std::ostringstream txt;
  txt << "runs " << runs.size() << "\n";
  for (const auto& r : runs) {
    txt << "\n[run " << r.name << "]\n";
    txt << "status " << (r.complete ? "complete" : "INCOMPLETE (" + r.problem + ")") << "\n";
    if (!r.complete) diag << "warning: run " << r.name << " is incomplete: " << r.problem << "\n";
    if (r.config.is_object())
      txt << "objective " << r.config.value("objective", "NA") << "\nlr " << r.config.value("lr", 0.0) << "\nbeta "
          << r.config.value("beta", 0.0) << "\nseed " << r.config.value("seed", 0) << "\n";
    if (r.log && !r.log->rows.empty()) {
      const auto& last = r.log->rows.back();
      auto cell = [&](const char* c) {
        auto v = last.get(c);
        return v ? train::RunLog::format(*v) : std::string("NA");
      };
      txt << "final_step " << last.step << "\nfinal_eval_em " << cell("eval_em") << "\n";
      double det = 0, emph = 0, opt = 0;
      std::size_t n = 0;
      for (const auto& row : r.log->rows)
        if (auto e = row.get("t_emphasize_ms")) {
          det += row.get("t_detect_ms").value_or(0.0);
          emph += *e;
          opt += row.get("t_optim_ms").value_or(0.0);
          ++n;
        }
      if (n) {
        txt << "mean_ms_per_step detect " << det / double(n) << " emphasize " << emph / double(n) << " optimizer "
            << opt / double(n) << "\n";
      } else {
        txt << "mean_ms_per_step NA\n";
      }
    } else {
      txt << "final_eval_em NA\n";
    }
  }
  // CE vs CDT pairs that share a seed; the delta is CDT minus CE final EM
  auto final_em = [](const RunSummary& r) -> std::optional<double> {
    if (!r.log || r.log->rows.empty()) return std::nullopt;
    return r.log->rows.back().get("eval_em");
  };
  std::ostringstream pairs;
  pairs << "seed,ce_run,cdt_run,ce_em,cdt_em,delta\n";
  double delta_sum = 0;
  std::size_t paired = 0;
  for (const auto& c : runs) {
    if (!c.config.is_object() || c.config.value("objective", "") != "cdt") continue;
    for (const auto& b : runs) {
      if (!b.config.is_object() || b.config.value("objective", "") != "ce" ||
          b.config.value("seed", json()) != c.config.value("seed", json()))
        continue;
      const auto e0 = final_em(b), e1 = final_em(c);
      auto fmt = [](std::optional<double> v) { return v ? train::RunLog::format(*v) : std::string("NA"); };
      pairs << c.config["seed"] << "," << b.name << "," << c.name << "," << fmt(e0) << "," << fmt(e1) << ","
            << (e0 && e1 ? train::RunLog::format(*e1 - *e0) : "NA") << "\n";
      if (e0 && e1) {
        delta_sum += *e1 - *e0;
        ++paired;
      }
    }
  }
  write_file(base + "_pairs.csv", pairs.str());
  if (paired) txt << "\nmean_em_delta_cdt_minus_ce " << delta_sum / double(paired) << " over " << paired << " pairs\n";
  write_file(base + ".txt", txt.str());
  out << txt.str();
  return kOk;
}

}  // namespace cdt::harness
