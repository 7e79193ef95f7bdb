#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "icrl/cli/pipeline.hpp"

using namespace icrl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("icrl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string l;
  while (std::getline(is, l)) out.push_back(l);
  return out;
}

// Tiny discrete run: small model, few steps, short eval.
cli::RunConfig tiny(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> ov{
      {"paths.out", dir.string()}, {"env.train_tasks", "4"},  {"env.eval_tasks", "2"},   {"data.histories", "8"},
      {"data.oracle_episodes", "4"}, {"model.layers", "3"},  {"model.hidden", "16"},    {"model.heads", "2"},
      {"train.steps", "6"},         {"train.batch", "2"},    {"train.log_every", "2"},  {"eval.episodes", "3"},
      {"eval.seeds", "[1]"},        {"seed", "5"}};
  return cli::resolve_config("", ov);
}

int run_cli(const std::string& args) { return std::system((std::string(ICRL_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str()); }

}  // namespace

TEST(Config, EmptyFileGivesDefaultsAndEchoes) {
  auto dir = scratch("empty");
  std::ofstream(dir / "c.cfg").close();
  auto cfg = cli::resolve_config((dir / "c.cfg").string(), {{"paths.out", dir.string()}});
  cli::RunConfig defaults;
  defaults.paths.out = dir.string();
  EXPECT_EQ(cfg.to_json(), defaults.to_json());
  cli::echo_config(cfg);
  auto echoed = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_EQ(echoed, cfg.to_json());
  // Every field is present explicitly.
  for (const auto& [section, body] : echoed.items()) {
    if (section != "seed") {
      EXPECT_FALSE(body.empty()) << section;
    }
  }
  EXPECT_EQ(cli::RunConfig::from_json(echoed).to_json(), echoed);
}

TEST(Config, FlagOverridesFileValue) {
  auto dir = scratch("override");
  std::ofstream(dir / "c.cfg") << R"({"train": {"lr": 0.01, "steps": 5}})";
  auto cfg = cli::resolve_config((dir / "c.cfg").string(), {{"train.lr", "0.0005"}});
  EXPECT_EQ(cfg.train.lr, 0.0005);
  EXPECT_EQ(cfg.train.steps, 5);
  EXPECT_EQ(cfg.train_config().lr, 0.0005);
}

TEST(Config, UnknownKeyIsNamed) {
  auto dir = scratch("unknown");
  std::ofstream(dir / "c.cfg") << R"({"train": {"lerning_rate": 0.01}})";
  try {
    cli::resolve_config((dir / "c.cfg").string(), {});
    FAIL() << "expected ConfigError";
  } catch (const cli::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lerning_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cli::resolve_config("", {{"bogus", "1"}}), cli::ConfigError);
  EXPECT_THROW(cli::resolve_config("", {{"train.lr", "\"fast\""}}), cli::ConfigError);
  EXPECT_THROW(cli::resolve_config("", {{"model.hidden", "30"}, {"model.heads", "4"}}), cli::ConfigError);
  EXPECT_THROW(cli::resolve_config("", {{"model.context_len", "60"}}), cli::ConfigError);
  EXPECT_THROW(cli::resolve_config((dir / "missing.cfg").string(), {}), std::runtime_error);
}

TEST(Cli, GenDataCoversEveryTask) {
  auto dir = scratch("gen");
  auto cfg = cli::resolve_config("", {{"paths.out", dir.string()}, {"env.train_tasks", "60"}, {"data.histories", "1000"}, {"seed", "7"}});
  std::ostringstream log;
  cli::run_gen_data(cfg, log);
  auto ds = data::read_dataset((dir / "dataset.bin").string());
  std::map<int, int> per_task;
  for (const auto& h : ds.histories) per_task[h.task_id]++;
  EXPECT_EQ(per_task.size(), 60u);
  for (const auto& [id, n] : per_task) EXPECT_GE(n, 1000 / 60);
  auto split = cli::read_split((dir / "dataset.bin").string());
  EXPECT_EQ(split.train.size(), 60u);
  for (int id : split.eval) EXPECT_EQ(per_task.count(id), 0u);
  EXPECT_TRUE(fs::exists(dir / "config.json"));
}

TEST(Cli, EmpWritesMonotoneCsv) {
  auto dir = scratch("emp");
  auto recs = (dir / "r.log").string();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 40);
  for (int i = 0; i < 17; ++i) {
    harness::SweepRecord r;
    r.index = i;
    r.params = {{"lr", 0.001}};
    r.score = u(rng);
    harness::append_record(recs, r);
  }
  auto cfg = cli::resolve_config("", {{"paths.out", dir.string()}, {"paths.records", recs}});
  std::ostringstream log;
  cli::run_emp(cfg, 50, log);
  auto rows = lines(slurp(dir / "emp.csv"));
  ASSERT_EQ(rows.size(), 51u);
  EXPECT_EQ(rows[0], "budget,value,std");
  double prev = -1;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    double b, v, s;
    ASSERT_EQ(std::sscanf(rows[i].c_str(), "%lf,%lf,%lf", &b, &v, &s), 3);
    EXPECT_EQ(b, double(i));
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Cli, TrainTwiceGivesIdenticalLossLogs) {
  auto a = scratch("det_a"), b = scratch("det_b");
  std::ostringstream log;
  auto ca = tiny(a), cb = tiny(b);
  cli::run_gen_data(ca, log);
  cb.paths.dataset = (a / "dataset.bin").string();
  cli::run_train(ca, log);
  cli::run_train(cb, log);
  auto la = slurp(a / "loss.csv"), lb = slurp(b / "loss.csv");
  EXPECT_FALSE(la.empty());
  EXPECT_EQ(la, lb);
  EXPECT_EQ(lines(la).size(), 4u);
  EXPECT_EQ(slurp(a / "model.bin"), slurp(b / "model.bin"));
}

TEST(Cli, DiscretePipelineEndToEnd) {
  auto dir = scratch("e2e");
  auto cfg = tiny(dir);
  cfg.model.ngram_positions = {1};
  std::ostringstream log;
  cli::run_gen_data(cfg, log);
  cli::run_train(cfg, log);
  auto res = cli::run_eval(cfg, log);
  EXPECT_EQ(res.records.size(), 2u);
  auto recs = lines(slurp(dir / "eval.jsonl"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(nlohmann::json::parse(recs[0])["returns"].size(), 3u);
  cfg.paths.records = (dir / "eval.jsonl").string();
  cli::run_plot(cfg, log);
  EXPECT_EQ(lines(slurp(dir / "episode_curve.csv")).size(), 4u);
}

TEST(Cli, PixelPipelineEndToEnd) {
  auto dir = scratch("pixel");
  auto cfg = tiny(dir);
  cfg.env.kind = "pixel";
  cfg.vq.channels = 8;
  cfg.vq.latent_dim = 4;
  cfg.vq.steps = 3;
  cfg.vq.batch = 4;
  cfg.model.ngram_positions = {1};
  cfg.model.match_mode = "vq";
  cfg.validate();
  std::ostringstream log;
  cli::run_gen_data(cfg, log);
  cli::run_train_vq(cfg, log);
  EXPECT_EQ(lines(slurp(dir / "vq_loss.csv")).size(), 4u);
  cli::run_train(cfg, log);
  auto ck = model::load_model((dir / "model.bin").string());
  EXPECT_EQ(ck.model.config().obs_input, model::ObsInput::Latent);
  EXPECT_EQ(ck.vq_reference, (dir / "vq.bin").string());
  auto res = cli::run_eval(cfg, log);
  EXPECT_EQ(res.records.size(), 2u);
}

TEST(Cli, SweepWritesRecordsAndEmp) {
  auto dir = scratch("sweep");
  auto cfg = tiny(dir);
  std::ostringstream log;
  cli::run_gen_data(cfg, log);
  cfg.sweep.assignments = 3;
  cfg.sweep.fixed = {{"batch", 2}, {"steps", 2}, {"hidden", 16}, {"context_len", 100}, {"subsample", 1}};
  auto res = cli::run_sweep(cfg, log);
  EXPECT_EQ(res.records.size(), 3u);
  auto recs = harness::load_records((dir / "sweep.jsonl").string());
  EXPECT_EQ(recs.size(), 3u);
  EXPECT_EQ(lines(slurp(dir / "emp.csv")).size(), 4u);
  cfg.paths.records = (dir / "sweep.jsonl").string();
  cli::run_plot(cfg, log);
  EXPECT_EQ(lines(slurp(dir / "return_vs_assignments.csv")).size(), 4u);
}

TEST(Cli, BinaryExitCodes) {
  auto dir = scratch("bin");
  EXPECT_NE(run_cli("train --bogus"), 0);
  EXPECT_NE(run_cli("frobnicate"), 0);
  EXPECT_NE(run_cli("train --set train.lerning_rate=1 --out " + dir.string()), 0);
  EXPECT_NE(run_cli("eval --out " + dir.string() + " --model " + (dir / "missing.bin").string()), 0);
  EXPECT_EQ(run_cli("gen-data --tasks 3 --eval-tasks 2 --histories 3 --episodes 2 --out " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "dataset.bin"));
}
