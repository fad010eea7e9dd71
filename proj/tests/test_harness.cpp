#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cdt/harness.hpp"

using namespace cdt;
using namespace cdt::harness;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cdt_harness_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

void write_gen_spec(const std::string& p) {
  write_file(p, R"({"hops": 3, "sample_count": 24, "target_len_tokens": 120, "seed": 5})");
}

void write_train_config(const std::string& p) {
  write_file(p, R"({"objective": "ce", "steps": 6, "batch_size": 2, "eval_interval": 3, "eval_samples": 2,
                    "checkpoint_interval": 3, "lr": 0.001, "model": {"d_model": 32, "max_seq": 160}})");
}

}  // namespace

TEST(ExitCodes, FollowErrorKinds) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), kConfig);
  EXPECT_EQ(exit_code_for(IntegrityError("x")), kIntegrity);
  EXPECT_EQ(exit_code_for(EmptyInputError("x")), kEmpty);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kInternal);
  std::ostringstream diag;
  EXPECT_EQ(guarded([]() -> int { throw ConfigError("bad key"); }, diag), kConfig);
  EXPECT_NE(diag.str().find("bad key"), std::string::npos);
}

TEST(Sweep, ParsesAndRejects) {
  EXPECT_EQ(parse_sweep("0,0.5, 2"), (std::vector<double>{0.0, 0.5, 2.0}));
  EXPECT_THROW(parse_sweep(""), ConfigError);
  EXPECT_THROW(parse_sweep("1,abc"), ConfigError);
  EXPECT_THROW(parse_sweep("1x"), ConfigError);
  EXPECT_THROW(parse_sweep("-1"), ConfigError);
}

TEST(RunDir, RelativePathsUseTheRunRoot) {
  ::setenv(kRunRootEnv, "/runs", 1);
  EXPECT_EQ(resolve_run_dir("a"), fs::path("/runs/a"));
  EXPECT_EQ(resolve_run_dir("/abs"), fs::path("/abs"));
  ::unsetenv(kRunRootEnv);
  EXPECT_EQ(resolve_run_dir("a"), fs::path("a"));
}

TEST(RunDir, LockIsExclusive) {
  TempDir t;
  {
    RunLock a(t.path / "run");
    EXPECT_THROW(RunLock b(t.path / "run"), IntegrityError);
  }
  EXPECT_NO_THROW(RunLock c(t.path / "run"));
}

TEST(GenData, WritesManifestWithDigest) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  std::ostringstream out, diag;
  ASSERT_EQ(cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag), kOk);
  const auto m = read_json_file(dataset_manifest_path(t / "d.jsonl").string());
  EXPECT_EQ(m["corpus_digest"], digest_of(read_file(t / "d.jsonl")));
  EXPECT_EQ(load_dataset(t / "d.jsonl").samples.size(), 24u);
}

TEST(GenData, UnknownKeyIsAConfigError) {
  TempDir t;
  write_file(t / "gen.json", R"({"hops": 3, "sample_count": 4, "target_len_tokens": 120, "colour": 1})");
  std::ostringstream out, diag;
  EXPECT_EQ(guarded([&] { return cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag); }, diag), kConfig);
}

TEST(Dataset, TamperingIsDetected) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  std::ostringstream out, diag;
  cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag);
  // drop the last record: still well-formed, but not the corpus that was audited
  auto text = read_file(t / "d.jsonl");
  text.pop_back();
  write_file(t / "d.jsonl", text.substr(0, text.rfind('\n') + 1));
  EXPECT_THROW(load_dataset(t / "d.jsonl"), IntegrityError);
  fs::remove(dataset_manifest_path(t / "d.jsonl"));
  EXPECT_THROW(load_dataset(t / "d.jsonl"), IntegrityError);
  EXPECT_NO_THROW(load_dataset(t / "d.jsonl", false));
}

TEST(Train, ResumedRunMatchesUninterrupted) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  write_train_config(t / "tr.json");
  std::ostringstream out, diag;
  cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag);
  TrainOverrides ov;
  ov.objective = "cdt";
  ov.beta = 10.0;
  ASSERT_EQ(cmd_train(t / "tr.json", t / "d.jsonl", t / "full", ov, false, out, diag), kOk);

  TrainOverrides cut = ov;
  cut.stop_after = 3;
  ASSERT_EQ(cmd_train(t / "tr.json", t / "d.jsonl", t / "split", cut, false, out, diag), kOk);
  EXPECT_EQ(read_json_file(t / "split/manifest.json")["status"], "interrupted");
  ASSERT_EQ(cmd_train(t / "tr.json", t / "d.jsonl", t / "split", ov, true, out, diag), kOk);

  const auto a = train::RunLog::from_csv(read_file(t / "full/runlog.csv"));
  const auto b = train::RunLog::from_csv(read_file(t / "split/runlog.csv"));
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(read_file(t / "full/final.bin"), read_file(t / "split/final.bin"));
  const auto man = RunManifest::from_json(read_json_file(t / "split/manifest.json"));
  EXPECT_EQ(man.status, "complete");
  EXPECT_EQ(man.overrides["objective"], "cdt");
  EXPECT_TRUE(man.missing(t.path / "split").empty());
  EXPECT_FALSE(fs::exists(t.path / "split/run.lock"));
}

TEST(Train, ResumeRejectsAChangedConfig) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  write_train_config(t / "tr.json");
  std::ostringstream out, diag;
  cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag);
  TrainOverrides ov;
  ov.stop_after = 3;
  cmd_train(t / "tr.json", t / "d.jsonl", t / "r", ov, false, out, diag);
  TrainOverrides other;
  other.lr = 0.01;
  EXPECT_THROW(cmd_train(t / "tr.json", t / "d.jsonl", t / "r", other, true, out, diag), ConfigError);
  EXPECT_THROW(cmd_train(t / "tr.json", t / "d.jsonl", t / "fresh", other, true, out, diag), IntegrityError);
}

TEST(Report, MissingValuesAndIncompleteRunsAreMarked) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  write_train_config(t / "tr.json");
  std::ostringstream out, diag;
  cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag);
  cmd_train(t / "tr.json", t / "d.jsonl", t / "ce", {}, false, out, diag);
  fs::create_directories(t.path / "broken");
  std::ostringstream rout, rdiag;
  EXPECT_EQ(cmd_report({t / "ce", t / "broken"}, t / "rep", rout, rdiag), kOk);
  EXPECT_NE(rout.str().find("INCOMPLETE"), std::string::npos);
  EXPECT_NE(rdiag.str().find("broken"), std::string::npos);
  const auto acc = read_file(t / "rep_accuracy.csv");
  EXPECT_EQ(acc.substr(0, acc.find('\n')),
            "step,ce:eval_em,ce:train_loss,ce:eval_loss,broken:eval_em,broken:train_loss,broken:eval_loss");
  EXPECT_NE(acc.find("\n0,"), std::string::npos);
  EXPECT_NE(acc.find(",NA"), std::string::npos);
  // CE has no detection stage, so its detection time is NA at every step
  const auto timing = read_file(t / "rep_timing.csv");
  EXPECT_NE(timing.find("\n3,NA,"), std::string::npos);
  EXPECT_THROW(cmd_report({}, t / "rep", rout, rdiag), EmptyInputError);

  TrainOverrides cdt_run;
  cdt_run.objective = "cdt";
  cdt_run.beta = 1.0;
  cmd_train(t / "tr.json", t / "d.jsonl", t / "cdt", cdt_run, false, out, diag);
  cmd_report({t / "ce", t / "cdt"}, t / "rep", rout, rdiag);
  const auto pairs = read_file(t / "rep_pairs.csv");
  EXPECT_EQ(std::count(pairs.begin(), pairs.end(), '\n'), 2);
  EXPECT_NE(pairs.find("\n0,ce,cdt,"), std::string::npos);
}

TEST(Analysis, ReportsEchoTheirInputs) {
  TempDir t;
  write_gen_spec(t / "gen.json");
  write_train_config(t / "tr.json");
  std::ostringstream out, diag;
  cmd_gen_data(t / "gen.json", t / "d.jsonl", out, diag);
  cmd_train(t / "tr.json", t / "d.jsonl", t / "ce", {}, false, out, diag);
  const auto ck = ckpt::load(t / "ce/final.bin");
  const auto data = load_dataset(t / "d.jsonl").samples;

  DenoiseSettings ds;
  ds.sweep_text = "0, 2,8";
  ds.max_samples = 3;
  const auto dn = denoise_report(ck.params, data, ds);
  EXPECT_EQ(dn["sweep"], "0, 2,8");
  ASSERT_EQ(dn["table"].size(), 3u);
  EXPECT_DOUBLE_EQ(dn["table"][0]["ratio"].get<double>(), 1.0);
  EXPECT_EQ(dn["table"][2]["strength"], 8.0);

  ProbeSettings ps;
  ps.max_samples = 4;
  const auto pr = probe_report(ck.params, data, ps);
  EXPECT_EQ(pr["per_sample"].size(), 4u);
  EXPECT_EQ(pr["by_verdict"]["correct"]["samples"].get<std::size_t>() +
                pr["by_verdict"]["wrong"]["samples"].get<std::size_t>(),
            4u);
  EXPECT_THROW(probe_report(ck.params, {}, ps), EmptyInputError);
}
