#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "bfs_oracle.hpp"
#include "icrl/harness/emp.hpp"
#include "icrl/harness/pixel.hpp"
#include "icrl/harness/rollout.hpp"
#include "icrl/harness/sweep.hpp"
#include "stats_util.hpp"

using namespace icrl;
using harness::emp;
namespace tu = icrl::testing;

namespace {

// Expected max over all K^n ordered draws, accumulated as an integer sum.
double brute_emp(const std::vector<int>& pool, int n) {
  const std::size_t K = pool.size();
  std::vector<std::size_t> idx(std::size_t(n), 0);
  long long total = 0;
  long long count = 0;
  while (true) {
    int m = pool[idx[0]];
    for (auto i : idx) m = std::max(m, pool[i]);
    total += m;
    ++count;
    std::size_t d = 0;
    while (d < idx.size() && ++idx[d] == K) idx[d++] = 0;
    if (d == idx.size()) break;
  }
  return double(total) / double(count);
}

// Moves along a BFS shortest path to a known goal, reading the agent cell
// from the newest token.
class GoalStub : public harness::Policy {
 public:
  GoalStub(envs::EnvConfig cfg, envs::Cell goal) : cfg_(cfg), goal_(goal) {}
  std::vector<int> act(const std::vector<std::vector<match::Token>>& contexts, std::vector<std::mt19937_64>&) override {
    std::vector<int> out;
    for (const auto& c : contexts) {
      max_len = std::max(max_len, c.size());
      envs::Cell here = cfg_.cell_of(int(c.back().obs));
      int best = envs::kStay;
      int best_d = tu::bfs_distance(cfg_, here, goal_);
      for (int a = 0; a < 4; ++a) {
        int d = tu::bfs_distance(cfg_, envs::apply_move(cfg_, here, a), goal_);
        if (d < best_d) best = a, best_d = d;
      }
      out.push_back(best);
    }
    return out;
  }
  std::size_t max_len = 0;

 private:
  envs::EnvConfig cfg_;
  envs::Cell goal_;
};

envs::Task darkroom_task(const envs::EnvConfig& cfg, int id) { return envs::task_by_id(cfg, id); }

model::TransformerConfig tiny_model(int context) {
  model::TransformerConfig mc;
  mc.layers = 2;
  mc.hidden = 16;
  mc.heads = 2;
  mc.context_len = context;
  return mc;
}

}  // namespace

TEST(Emp, HandExamples) {
  EXPECT_DOUBLE_EQ(emp({0, 1}, 1), 0.5);
  EXPECT_DOUBLE_EQ(emp({0, 1}, 2), 0.75);
  EXPECT_DOUBLE_EQ(emp({1, 2, 3}, 2), 22.0 / 9.0);
  EXPECT_DOUBLE_EQ(emp({3, 1, 2}, 2), 22.0 / 9.0);
  EXPECT_NEAR(emp({0.3, -2, 7.5}, 5000), 7.5, 1e-12);
  EXPECT_THROW(emp({}, 1), std::invalid_argument);
  EXPECT_THROW(emp({1}, 0), std::invalid_argument);
}

TEST(Emp, MatchesBruteForceEnumerationExactly) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> val(-20, 50);
  for (int K = 1; K <= 4; ++K) {
    for (int n = 1; n <= 4; ++n) {
      for (int rep = 0; rep < 25; ++rep) {
        std::vector<int> pool{};
        pool.resize(std::size_t(K));
        for (auto& v : pool) v = val(rng);
        std::vector<double> d(pool.begin(), pool.end());
        EXPECT_EQ(emp(d, n), brute_emp(pool, n)) << "K=" << K << " n=" << n;
      }
    }
  }
}

TEST(Emp, CurveMonotoneAndBounded) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0, 5);
  for (int rep = 0; rep < 200; ++rep) {
    std::size_t K = 1 + rng() % 40;
    std::vector<double> pool(K);
    for (auto& v : pool) v = g(rng);
    auto c = harness::emp_curve(pool, int(K) + 10, 0);
    double lo = *std::min_element(pool.begin(), pool.end());
    double hi = *std::max_element(pool.begin(), pool.end());
    ASSERT_EQ(c.size(), K + 10);
    EXPECT_NEAR(c.value[0], tu::mean(pool), 1e-9);
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_GE(c.value[i], lo - 1e-12);
      EXPECT_LE(c.value[i], hi);
      if (i) {
        EXPECT_GE(c.value[i], c.value[i - 1]);
      }
    }
  }
}

TEST(Emp, SingleScoreCurveIsFlat) {
  auto c = harness::emp_curve({4.25}, 6, 1000, 1);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c.value[i], 4.25);
    EXPECT_EQ(c.stddev[i], 0.0);
  }
}

TEST(Emp, BootstrapStdIsPositiveAndDeterministic) {
  std::vector<double> pool{1, 5, 2, 8, 3, 3, 9, 0};
  auto a = harness::emp_curve(pool, 8, 1000, 5);
  auto b = harness::emp_curve(pool, 8, 1000, 5);
  EXPECT_EQ(a.stddev, b.stddev);
  for (double s : a.stddev) EXPECT_GT(s, 0.0);
  std::ostringstream os;
  a.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  int rows = 0;
  std::getline(is, line);
  EXPECT_EQ(line, "budget,value,std");
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 8);
}

TEST(Rollout, OracleStubScoresFiftyMinusDistanceFromFirstEpisode) {
  envs::EnvConfig cfg;
  for (int id : {0, 7, 39, 80}) {
    auto task = darkroom_task(cfg, id);
    GoalStub stub(cfg, task.goal);
    auto rec = harness::rollout_incontext(stub, cfg, task, 5, 1, 100);
    ASSERT_EQ(rec.returns.size(), 5u);
    const float expect = 50.f - float(tu::bfs_distance(cfg, cfg.center(), task.goal));
    for (float r : rec.returns) EXPECT_EQ(r, expect);
    EXPECT_EQ(rec.task_id, id);
  }
}

TEST(Rollout, BufferNeverExceedsContext) {
  envs::EnvConfig cfg;
  auto task = darkroom_task(cfg, 3);
  for (int ctx : {1, 7, 49, 100, 120}) {
    GoalStub stub(cfg, task.goal);
    harness::rollout_incontext(stub, cfg, task, 4, 0, ctx);
    EXPECT_EQ(stub.max_len, std::size_t(ctx));
  }
}

TEST(Rollout, RandomWeightModelMatchesRandomPolicyBaseline) {
  envs::EnvConfig cfg;
  auto tasks = envs::enumerate_tasks(cfg);
  std::vector<envs::Task> chosen;
  for (std::size_t i = 0; i < tasks.size(); i += 8) chosen.push_back(tasks[i]);

  // Monte-Carlo baseline: uniform actions simulated directly per goal.
  std::mt19937_64 mc_rng(123);
  std::uniform_int_distribution<int> pick(0, 4);
  std::vector<double> mc;
  for (const auto& t : chosen) {
    for (int rep = 0; rep < 400; ++rep) {
      envs::Cell at = cfg.center();
      double ret = 0;
      for (int s = 0; s < cfg.episode_len; ++s) {
        if (at == t.goal) ret += 1;
        at = envs::apply_move(cfg, at, pick(mc_rng));
      }
      mc.push_back(ret);
    }
  }

  model::Transformer<float> m(tiny_model(100), 5);
  harness::ModelPolicy pol(m, {model::Decode::Sample, 1.0});
  auto res = harness::evaluate(pol, cfg, chosen, 20, {1, 2}, 100, {}, {model::Decode::Sample, 1.0});
  std::vector<double> got;
  for (const auto& r : res.records)
    for (float x : r.returns) got.push_back(x);
  const double se = std::sqrt(tu::stddev(mc) * tu::stddev(mc) / double(mc.size()) +
                              tu::stddev(got) * tu::stddev(got) / double(got.size()));
  EXPECT_LT(std::abs(tu::mean(got) - tu::mean(mc)), 4 * se)
      << "model " << tu::mean(got) << " random " << tu::mean(mc);
}

TEST(Rollout, DeterministicForSameSeed) {
  envs::EnvConfig cfg;
  auto task = darkroom_task(cfg, 12);
  model::Transformer<float> m(tiny_model(60), 2);
  harness::ModelPolicy pol(m, {model::Decode::Sample, 1.0});
  auto a = harness::rollout_incontext(pol, cfg, task, 3, 9, 60);
  auto b = harness::rollout_incontext(pol, cfg, task, 3, 9, 60);
  EXPECT_EQ(a.returns, b.returns);
  // Lockstep batching must not change a rollout.
  auto many = harness::rollout_many(pol, cfg, {{darkroom_task(cfg, 4), 1}, {task, 9}}, 3, 60);
  EXPECT_EQ(many[1].returns, a.returns);
}

TEST(Rollout, KeyToDoorReturnsWithinBounds) {
  envs::EnvConfig cfg;
  cfg.kind = envs::EnvKind::KeyToDoor;
  auto tasks = envs::enumerate_tasks(cfg);
  harness::RandomPolicy rp;
  std::vector<envs::Task> some(tasks.begin(), tasks.begin() + 5);
  auto res = harness::evaluate(rp, cfg, some, 6, {1, 2}, 100);
  EXPECT_GE(res.score, 0.0);
  EXPECT_LE(res.score, 2.0);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.returns.size(), 6u);
    for (float x : r.returns) EXPECT_TRUE(x >= 0 && x <= 2);
  }
}

TEST(Evaluate, SingleRolloutScoreIsEndpoint) {
  envs::EnvConfig cfg;
  auto task = darkroom_task(cfg, 20);
  harness::RandomPolicy rp;
  auto rec = harness::rollout_incontext(rp, cfg, task, 6, 3, 100);
  auto res = harness::evaluate(rp, cfg, {task}, 6, {3}, 100);
  const double endpoint = (rec.returns[3] + rec.returns[4] + rec.returns[5]) / 3.0;
  EXPECT_DOUBLE_EQ(res.score, endpoint);
  ASSERT_EQ(res.per_task.size(), 1u);
  EXPECT_EQ(res.per_task[0].first, 20);
}

TEST(Evaluate, DuplicatedTasksWeighDouble) {
  envs::EnvConfig cfg;
  auto a = darkroom_task(cfg, 1), b = darkroom_task(cfg, 30);
  harness::RandomPolicy rp;
  auto ra = harness::evaluate(rp, cfg, {a}, 4, {1, 2}, 100).score;
  auto rb = harness::evaluate(rp, cfg, {b}, 4, {1, 2}, 100).score;
  auto dup = harness::evaluate(rp, cfg, {a, a, b}, 4, {1, 2}, 100).score;
  EXPECT_NEAR(dup, (2 * ra + rb) / 3.0, 1e-12);
}

TEST(Evaluate, RefusesTrainingTasks) {
  envs::EnvConfig cfg;
  harness::RandomPolicy rp;
  EXPECT_THROW(harness::evaluate(rp, cfg, {darkroom_task(cfg, 5)}, 3, {0}, 100, {1, 5}), std::invalid_argument);
  EXPECT_NO_THROW(harness::evaluate(rp, cfg, {darkroom_task(cfg, 6)}, 3, {0}, 100, {1, 5}));
  EXPECT_THROW(harness::evaluate(rp, cfg, {}, 3, {0}, 100), std::invalid_argument);
}

TEST(Sweep, AssignmentsArePureFunctionsOfSeedAndIndex) {
  auto space = harness::with_ngram_axes(harness::grid_space());
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(space.sample(7, std::uint64_t(i)), space.sample(7, std::uint64_t(i)));
  }
  EXPECT_NE(space.sample(7, 0), space.sample(8, 0));
  EXPECT_NE(space.sample(7, 0), space.sample(7, 1));
}

TEST(Sweep, SamplesRespectAxisBounds) {
  auto space = harness::with_ngram_axes(harness::grid_space());
  std::vector<double> log_lr;
  for (int i = 0; i < 4000; ++i) {
    auto a = space.sample(1, std::uint64_t(i));
    double lr = a["lr"].get<double>();
    EXPECT_GE(lr, 1e-4);
    EXPECT_LE(lr, 1e-2);
    log_lr.push_back(std::log10(lr));
    double ed = a["embed_dropout"].get<double>();
    EXPECT_TRUE(ed >= 0 && ed <= 0.9);
    int ctx = a["context_len"].get<int>();
    EXPECT_TRUE(ctx == 100 || ctx == 160 || ctx == 200);
    EXPECT_EQ(a["batch"], 1024);
    model::TransformerConfig mc;
    model::TrainConfig tc;
    harness::apply_assignment(a, mc, tc);
    EXPECT_NO_THROW(mc.validate(50));
  }
  // Log-uniform: log10(lr) is uniform on [-4, -2], mean -3.
  EXPECT_NEAR(tu::mean(log_lr), -3.0, 0.03);
}

TEST(Sweep, SpaceJsonRoundTripAndValidation) {
  auto space = harness::with_ngram_axes(harness::grid_space());
  auto back = harness::SweepSpace::from_json(space.to_json());
  EXPECT_EQ(back.to_json(), space.to_json());
  using harness::json;
  EXPECT_THROW(harness::SweepSpace::from_json(json::parse(R"({"axes":{"lr":{"uniform":[2,1]}}})")), std::invalid_argument);
  EXPECT_THROW(harness::SweepSpace::from_json(json::parse(R"({"axes":{"lr":{"categorical":[]}}})")), std::invalid_argument);
  EXPECT_THROW(harness::SweepSpace::from_json(json::parse(R"({"axes":{"lr":{"log_uniform":[0,1]}}})")), std::invalid_argument);
  EXPECT_THROW(harness::SweepSpace::from_json(json::parse(R"({"axes":{"lr":{"normal":[0,1]}}})")), std::invalid_argument);
  EXPECT_THROW(harness::SweepSpace::from_json(json::parse(R"({"axis":{}})")), std::invalid_argument);
  model::TransformerConfig mc;
  model::TrainConfig tc;
  EXPECT_THROW(harness::apply_assignment(json{{"lerning_rate", 1}}, mc, tc), std::invalid_argument);
}

TEST(Sweep, FailedTrialsGetSentinelAndSweepContinues) {
  auto space = harness::grid_space();
  harness::SweepOptions opt;
  opt.assignments = 12;
  opt.seed = 3;
  opt.failure_score = -1;
  auto trial = [](const harness::json& p, std::uint64_t) -> double {
    if (!p["qk_norm"].get<bool>()) throw std::runtime_error("diverged");
    return p["lr"].get<double>() * 1000;
  };
  auto res = harness::random_sweep(space, trial, opt);
  ASSERT_EQ(res.records.size(), 12u);
  int failed = 0;
  for (const auto& r : res.records) {
    if (r.params["qk_norm"] == false) {
      EXPECT_TRUE(r.failed);
      EXPECT_EQ(r.score, -1);
      EXPECT_EQ(r.error, "diverged");
      ++failed;
    } else {
      EXPECT_FALSE(r.failed);
    }
  }
  EXPECT_GT(failed, 0);
  EXPECT_EQ(res.curve.size(), 12u);
  EXPECT_NEAR(res.curve.value[0], tu::mean(harness::record_scores(res.records)), 1e-12);
}

TEST(Sweep, ParallelWorkersMatchSerial) {
  auto space = harness::grid_space();
  auto trial = [](const harness::json& p, std::uint64_t s) { return p["lr"].get<double>() + double(s % 97); };
  harness::SweepOptions opt;
  opt.assignments = 12;
  opt.seed = 9;
  auto serial = harness::random_sweep(space, trial, opt);
  opt.workers = 4;
  auto parallel = harness::random_sweep(space, trial, opt);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(serial.records[i].params, parallel.records[i].params);
    EXPECT_EQ(serial.records[i].score, parallel.records[i].score);
  }
  EXPECT_EQ(serial.curve.value, parallel.curve.value);
}

TEST(Sweep, BaselineAndNgramSweepsShareBudgets) {
  auto base = harness::grid_space();
  auto ngram = harness::with_ngram_axes(base);
  for (int i = 0; i < 20; ++i) {
    auto a = base.sample(4, std::uint64_t(i)), b = ngram.sample(4, std::uint64_t(i));
    EXPECT_EQ(a["steps"], b["steps"]);
    EXPECT_EQ(a["batch"], b["batch"]);
  }
}

TEST(Sweep, RecordLogSkipsPartialLines) {
  auto path = (std::filesystem::temp_directory_path() / "icrl_sweep_records.jsonl").string();
  std::filesystem::remove(path);
  harness::SweepRecord r;
  r.params = {{"lr", 0.001}};
  for (int i = 0; i < 3; ++i) {
    r.index = i;
    r.score = 1.5 * i;
    harness::append_record(path, r);
  }
  {
    std::ofstream os(path, std::ios::app);
    os << R"({"index": 3, "params": {"lr": 0.)";
  }
  auto back = harness::load_records(path);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[2].score, 3.0);
  EXPECT_EQ(back[1].params, r.params);
  std::filesystem::remove(path);
}

TEST(PixelRollout, LabelsNewImagesAndStaysDeterministic) {
  envs::EnvConfig cfg;
  cfg.kind = envs::EnvKind::Pixel;
  vq::VqConfig vc;
  vc.channels = 8;
  vc.latent_dim = 4;
  vq::VqModel vqm(vc, 1);
  auto mc = tiny_model(60);
  mc.obs_input = model::ObsInput::Latent;
  mc.obs_dim = 4 * 4 * 4;
  mc.layers = 3;
  mc.ngram_positions = {1};
  mc.match_mode = match::MatchMode::VqIndex;
  model::Transformer<float> m(mc, 3);
  const auto vq_bytes = vq::encode_vq(vqm);

  harness::PixelModelPolicy a(m, {model::Decode::Sample, 1.0}, vqm);
  auto ra = harness::rollout_incontext(a, cfg, envs::task_by_id(cfg, 2), 2, 4, 60);
  harness::PixelModelPolicy b(m, {model::Decode::Sample, 1.0}, vqm);
  auto rb = harness::rollout_incontext(b, cfg, envs::task_by_id(cfg, 2), 2, 4, 60);
  EXPECT_EQ(ra.returns, rb.returns);
  EXPECT_GE(a.distinct_images(), 2u);
  EXPECT_LE(a.distinct_images(), 81u);
  EXPECT_EQ(vq::encode_vq(vqm), vq_bytes);

  auto wrong = tiny_model(60);
  model::Transformer<float> discrete(wrong, 1);
  EXPECT_THROW(harness::PixelModelPolicy(discrete, {}, vqm), std::invalid_argument);
}
