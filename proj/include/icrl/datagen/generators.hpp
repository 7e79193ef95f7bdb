#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "icrl/datagen/history.hpp"
#include "icrl/envs/grid.hpp"

namespace icrl::data {

/// Independent stream per (global seed, task id, replica id).
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t task, std::uint64_t replica) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(task), std::uint32_t(task >> 32),
                    std::uint32_t(replica), std::uint32_t(replica >> 32), 0x1c71u};
  return std::mt19937_64(seq);
}

class QTable {
 public:
  QTable(int states, int actions, double init = 0.0)
      : states_(states), actions_(actions), q_(std::size_t(states * actions), init) {}

  double& at(int s, int a) { return q_[std::size_t(s * actions_ + a)]; }
  double at(int s, int a) const { return q_[std::size_t(s * actions_ + a)]; }

  double max_value(int s) const {
    double m = at(s, 0);
    for (int a = 1; a < actions_; ++a) m = std::max(m, at(s, a));
    return m;
  }

  /// Lowest index wins ties.
  int greedy(int s) const {
    int best = 0;
    for (int a = 1; a < actions_; ++a)
      if (at(s, a) > at(s, best)) best = a;
    return best;
  }

  int states() const { return states_; }
  int actions() const { return actions_; }

 private:
  int states_, actions_;
  std::vector<double> q_;
};

struct QLearningConfig {
  int episodes = 500;
  double alpha = 0.1;
  double gamma = 0.9;
  double eps_start = 1.0;
  double eps_end = 0.01;
  /// Episodes over which epsilon decays linearly; <= 0 means all of them.
  int decay_episodes = 0;
  /// Optimistic initial action value; drives the greedy part to untried actions.
  double q_init = 1.0;

  double epsilon(int episode) const {
    int span = decay_episodes > 0 ? decay_episodes : episodes;
    if (span <= 1) return eps_end;
    double frac = std::min(1.0, double(episode) / double(span - 1));
    return eps_start + (eps_end - eps_start) * frac;
  }

  std::string snapshot() const {
    std::ostringstream os;
    os << "q-learning episodes=" << episodes << " alpha=" << alpha << " gamma=" << gamma << " eps_start=" << eps_start
       << " eps_end=" << eps_end << " decay_episodes=" << decay_episodes << " q_init=" << q_init;
    return os.str();
  }
};

/// Q-learner state: agent cell, plus the has-key bit for Key-to-Door. The
/// bit never reaches the recorded observations.
inline int q_state(const envs::EnvConfig& cfg, const envs::EnvState& s) {
  int id = cfg.cell_id(s.agent);
  return cfg.kind == envs::EnvKind::KeyToDoor && s.has_key ? id + cfg.num_states() : id;
}

struct QLearningRun {
  LearningHistory history;
  QTable q;
};

inline QLearningRun q_learning_run(const envs::EnvConfig& cfg, const envs::Task& task, const QLearningConfig& qc,
                                   std::mt19937_64& rng) {
  if (envs::has_images(cfg.kind)) throw std::invalid_argument("q-learning requires a discrete-observation env");
  envs::GridEnv env(cfg);
  const int n_q_states = cfg.kind == envs::EnvKind::KeyToDoor ? 2 * cfg.num_states() : cfg.num_states();
  QLearningRun run{LearningHistory{}, QTable(n_q_states, envs::kNumActions, qc.q_init)};
  run.history.task_id = task.id;
  run.history.generator = GeneratorTag::QLearning;
  run.history.config_snapshot = qc.snapshot();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> any_action(0, envs::kNumActions - 1);

  for (int ep = 0; ep < qc.episodes; ++ep) {
    const double eps = qc.epsilon(ep);
    auto [state, obs] = env.reset(task, rng);
    Episode episode;
    while (!state.done) {
      const int s = q_state(cfg, state);
      const int a = unit(rng) < eps ? any_action(rng) : run.q.greedy(s);
      auto r = env.step(state, a);
      const int s2 = q_state(cfg, r.state);
      // Only the door opening is a true terminal; the time limit still bootstraps.
      const bool terminal = task.kind == envs::EnvKind::KeyToDoor && r.done && r.state.step < cfg.episode_len;
      const double target = r.reward + (terminal ? 0.0 : qc.gamma * run.q.max_value(s2));
      run.q.at(s, a) += qc.alpha * (target - run.q.at(s, a));
      episode.push_back(Transition{std::uint32_t(obs.state_id), std::uint8_t(a), r.reward, r.done});
      state = r.state;
      obs = r.obs;
    }
    run.history.episodes.push_back(std::move(episode));
  }
  return run;
}

inline LearningHistory q_learning_history(const envs::EnvConfig& cfg, const envs::Task& task,
                                          const QLearningConfig& qc, std::uint64_t seed) {
  auto rng = derive_rng(seed, std::uint64_t(task.id), 0);
  return q_learning_run(cfg, task, qc, rng).history;
}

/// Return of the greedy policy of `q` from the task's start state.
inline float greedy_return(const envs::EnvConfig& cfg, const envs::Task& task, const QTable& q, std::mt19937_64& rng) {
  envs::GridEnv env(cfg);
  auto [state, obs] = env.reset(task, rng);
  float total = 0;
  while (!state.done) {
    auto r = env.step(state, q.greedy(q_state(cfg, state)));
    total += r.reward;
    state = r.state;
  }
  return total;
}

/// Shortest-path action toward the current target (goal, or key then door),
/// moving along rows first. Stays put on the target.
inline int oracle_action(const envs::EnvConfig& cfg, const envs::EnvState& s) {
  (void)cfg;
  envs::Cell target = s.task.goal;
  if (s.task.kind == envs::EnvKind::KeyToDoor) target = s.has_key ? s.task.door : s.task.key;
  if (s.agent.row > target.row) return envs::kUp;
  if (s.agent.row < target.row) return envs::kDown;
  if (s.agent.col > target.col) return envs::kLeft;
  if (s.agent.col < target.col) return envs::kRight;
  return envs::kStay;
}

/// Episode t of N follows the oracle with probability 1 - eps_t and acts
/// uniformly otherwise, eps_t = 1 - t / (N - 1). Pixel observations are
/// interned into `images`.
inline LearningHistory oracle_noise_history(const envs::EnvConfig& cfg, const envs::Task& task, int episodes,
                                            std::mt19937_64& rng, ImageStore* images = nullptr) {
  if (episodes < 1) throw std::invalid_argument("oracle_noise_history needs >= 1 episode");
  if (envs::has_images(cfg.kind) && images == nullptr) {
    throw std::invalid_argument("pixel env needs an image store");
  }
  envs::GridEnv env(cfg);
  LearningHistory h;
  h.task_id = task.id;
  h.generator = GeneratorTag::OracleNoise;
  h.config_snapshot = "oracle-noise episodes=" + std::to_string(episodes) + " schedule=linear";
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> any_action(0, envs::kNumActions - 1);
  auto encode = [&](const envs::Observation& o) {
    return o.has_image() ? images->intern(o.image) : std::uint32_t(o.state_id);
  };
  for (int ep = 0; ep < episodes; ++ep) {
    const double eps = episodes == 1 ? 0.0 : 1.0 - double(ep) / double(episodes - 1);
    auto [state, obs] = env.reset(task, rng);
    Episode episode;
    while (!state.done) {
      // Draw both so the stream layout does not depend on the branch taken.
      const double coin = unit(rng);
      const int random_action = any_action(rng);
      const int a = coin < eps ? random_action : oracle_action(cfg, state);
      auto r = env.step(state, a);
      episode.push_back(Transition{encode(obs), std::uint8_t(a), r.reward, r.done});
      state = r.state;
      obs = r.obs;
    }
    h.episodes.push_back(std::move(episode));
  }
  return h;
}

inline LearningHistory oracle_noise_history(const envs::EnvConfig& cfg, const envs::Task& task, int episodes,
                                            std::uint64_t seed, ImageStore* images = nullptr) {
  auto rng = derive_rng(seed, std::uint64_t(task.id), 0);
  return oracle_noise_history(cfg, task, episodes, rng, images);
}

enum class TaskSampling { RoundRobin, WithReplacement };

struct GenerationSpec {
  envs::EnvConfig env;
  std::vector<envs::Task> tasks;
  int histories = 100;
  GeneratorTag generator = GeneratorTag::QLearning;
  QLearningConfig qlearning;
  int oracle_episodes = 100;
  TaskSampling sampling = TaskSampling::RoundRobin;
  std::uint64_t seed = 0;
  int workers = 1;
};

/// Task assignment per history. Round-robin gives every task at least
/// floor(histories / tasks) histories.
inline std::vector<std::size_t> assign_tasks(const GenerationSpec& spec) {
  if (spec.tasks.empty()) throw std::invalid_argument("no tasks to generate for");
  if (spec.histories < 0) throw std::invalid_argument("negative history count");
  std::vector<std::size_t> out(std::size_t(spec.histories));
  if (spec.sampling == TaskSampling::RoundRobin) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i % spec.tasks.size();
  } else {
    std::mt19937_64 rng(spec.seed ^ 0x5bd1e995ull);
    std::uniform_int_distribution<std::size_t> pick(0, spec.tasks.size() - 1);
    for (auto& t : out) t = pick(rng);
  }
  return out;
}

/// Generates all histories, in parallel when `workers > 1`. History i uses
/// the stream derived from (seed, task id, i), so output is independent of
/// the worker count.
inline Dataset generate_dataset(const GenerationSpec& spec) {
  const auto assignment = assign_tasks(spec);
  const bool pixels = envs::has_images(spec.env.kind);
  std::vector<LearningHistory> histories(assignment.size());
  std::vector<ImageStore> local_images(pixels ? assignment.size() : 0);

  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next++; i < assignment.size(); i = next++) {
      const auto& task = spec.tasks[assignment[i]];
      auto rng = derive_rng(spec.seed, std::uint64_t(task.id), i);
      if (spec.generator == GeneratorTag::QLearning) {
        histories[i] = q_learning_run(spec.env, task, spec.qlearning, rng).history;
      } else {
        histories[i] = oracle_noise_history(spec.env, task, spec.oracle_episodes, rng,
                                            pixels ? &local_images[i] : nullptr);
      }
    }
  };
  const int n_workers = std::max(1, spec.workers);
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  Dataset ds;
  ds.env_kind = spec.env.kind;
  ds.grid_size = spec.env.grid_size;
  ds.num_actions = envs::kNumActions;
  if (pixels) {
    for (std::size_t i = 0; i < histories.size(); ++i) {
      for (auto& ep : histories[i].episodes)
        for (auto& t : ep) t.obs = ds.images.intern(local_images[i].at(t.obs));
    }
  }
  ds.histories = std::move(histories);
  return ds;
}

}  // namespace icrl::data
