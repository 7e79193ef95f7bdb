#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "icrl/datagen/generators.hpp"
#include "icrl/envs/grid.hpp"
#include "icrl/model/train.hpp"

namespace icrl::harness {

using match::Token;

/// Chooses actions for a set of equally long contexts.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::vector<int> act(const std::vector<std::vector<Token>>& contexts, std::vector<std::mt19937_64>& rngs) = 0;
  /// Observation id placed in the token; discrete envs use the state id.
  virtual std::uint32_t encode(const envs::Observation& o) { return std::uint32_t(o.state_id); }
  /// Called once per rollout batch before the first step.
  virtual void begin() {}
};

class RandomPolicy : public Policy {
 public:
  std::vector<int> act(const std::vector<std::vector<Token>>& contexts, std::vector<std::mt19937_64>& rngs) override {
    std::vector<int> a(contexts.size());
    std::uniform_int_distribution<int> pick(0, envs::kNumActions - 1);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = pick(rngs[i]);
    return a;
  }
};

/// Frozen transformer acting through decode rule `decode`.
class ModelPolicy : public Policy {
 public:
  ModelPolicy(model::Transformer<float>& m, model::DecodeConfig decode) : model_(m), decode_(decode) {}

  std::vector<int> act(const std::vector<std::vector<Token>>& contexts, std::vector<std::mt19937_64>& rngs) override {
    const auto& cfg = model_.config();
    model::ForwardInput<float> in;
    in.batch = contexts.size();
    in.len = contexts.front().size();
    for (const auto& c : contexts) {
      if (c.size() != in.len) throw std::invalid_argument("model policy: contexts differ in length");
      in.tokens.insert(in.tokens.end(), c.begin(), c.end());
    }
    if (cfg.uses_ngram()) {
      in.masks = model::build_masks<float>(in.tokens, in.batch, in.len, cfg.match_mode, cfg.ngram_max, labels(),
                                           permute_ ? ++permute_calls_ + (permute_ << 24) : 0);
    }
    in.obs_features = features();
    diff::Graph<float> g;
    const auto& out = g.forward(model_.forward(g, in));
    const std::size_t A = std::size_t(cfg.num_actions);
    std::vector<int> actions(in.batch);
    std::vector<double> logits(A);
    for (std::size_t b = 0; b < in.batch; ++b) {
      const float* row = out.data() + (b * in.len + in.len - 1) * A;
      for (std::size_t a = 0; a < A; ++a) logits[a] = row[a];
      actions[b] = model::choose_action(logits, decode_, rngs[b]);
    }
    return actions;
  }

 protected:
  /// Index matrices for VQ matching; null for discrete observations.
  virtual const std::vector<match::IndexMatrix>* labels() { return nullptr; }
  /// Latent feature table for image observations; null for discrete ones.
  virtual std::shared_ptr<const diff::Tensor<float>> features() { return nullptr; }

  model::Transformer<float>& model_;
  model::DecodeConfig decode_;
  std::uint64_t permute_ = 0;
  std::uint64_t permute_calls_ = 0;

 public:
  /// Permutes n-gram masks with a fresh seed derived from `seed` on every
  /// call, matching models trained with permuted masks. Zero disables.
  void permute_masks(std::uint64_t seed) {
    permute_ = seed;
    permute_calls_ = 0;
  }
};

struct RolloutSpec {
  envs::Task task;
  std::uint64_t seed = 0;
};

struct RolloutRecord {
  int task_id = 0;
  std::uint64_t seed = 0;
  model::DecodeConfig decode;
  std::vector<float> returns;
};

/// Runs every spec for `episodes` episodes in lockstep: each iteration steps
/// all unfinished rollouts once, so their contexts stay equally long. Each
/// rollout keeps the last `context_len` tokens across episode boundaries.
inline std::vector<RolloutRecord> rollout_many(Policy& policy, const envs::EnvConfig& cfg,
                                               const std::vector<RolloutSpec>& specs, int episodes, int context_len,
                                               model::DecodeConfig decode = {}) {
  if (episodes < 1) throw std::invalid_argument("rollout: episode budget must be >= 1");
  if (context_len < 1) throw std::invalid_argument("rollout: context length must be >= 1");
  envs::GridEnv env(cfg);
  struct Live {
    std::mt19937_64 env_rng;
    std::mt19937_64 act_rng;
    envs::EnvState state;
    Token next;
    std::deque<Token> buffer;
    float episode_return = 0;
  };
  std::vector<Live> live(specs.size());
  std::vector<RolloutRecord> records(specs.size());
  policy.begin();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& L = live[i];
    L.env_rng = data::derive_rng(specs[i].seed, std::uint64_t(specs[i].task.id), 0x0e);
    L.act_rng = data::derive_rng(specs[i].seed, std::uint64_t(specs[i].task.id), 0xac);
    auto [s, o] = env.reset(specs[i].task, L.env_rng);
    L.state = s;
    L.next.obs = policy.encode(o);
    records[i].task_id = specs[i].task.id;
    records[i].seed = specs[i].seed;
    records[i].decode = decode;
  }
  std::vector<std::size_t> active(specs.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  std::vector<std::vector<Token>> contexts;
  std::vector<std::mt19937_64> rngs;
  while (!active.empty()) {
    contexts.clear();
    rngs.clear();
    for (auto i : active) {
      auto& L = live[i];
      L.buffer.push_back(L.next);
      while (L.buffer.size() > std::size_t(context_len)) L.buffer.pop_front();
      contexts.emplace_back(L.buffer.begin(), L.buffer.end());
      rngs.push_back(L.act_rng);
    }
    auto actions = policy.act(contexts, rngs);
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      auto i = active[k];
      auto& L = live[i];
      L.act_rng = rngs[k];
      auto r = env.step(L.state, actions[k]);
      L.episode_return += r.reward;
      L.next.prev_action = actions[k];
      L.next.prev_reward = model::reward_bucket(r.reward);
      if (r.done) {
        records[i].returns.push_back(L.episode_return);
        L.episode_return = 0;
        if (int(records[i].returns.size()) == episodes) continue;
        auto [s, o] = env.reset(specs[i].task, L.env_rng);
        L.state = s;
        L.next.obs = policy.encode(o);
      } else {
        L.state = r.state;
        L.next.obs = policy.encode(r.obs);
      }
      still.push_back(i);
    }
    active = std::move(still);
  }
  return records;
}

inline RolloutRecord rollout_incontext(Policy& policy, const envs::EnvConfig& cfg, const envs::Task& task, int episodes,
                                       std::uint64_t seed, int context_len, model::DecodeConfig decode = {}) {
  return rollout_many(policy, cfg, {RolloutSpec{task, seed}}, episodes, context_len, decode).front();
}

/// Mean of the last three episode returns (fewer if the budget is shorter).
inline double endpoint(const RolloutRecord& r) {
  if (r.returns.empty()) throw std::invalid_argument("endpoint of an empty rollout");
  std::size_t k = std::min<std::size_t>(3, r.returns.size());
  double s = 0;
  for (std::size_t i = r.returns.size() - k; i < r.returns.size(); ++i) s += r.returns[i];
  return s / double(k);
}

struct EvalResult {
  double score = 0;
  /// (task id, endpoint averaged over seeds), in input order.
  std::vector<std::pair<int, double>> per_task;
  /// Mean return at each episode index over all rollouts.
  std::vector<double> curve;
  std::vector<RolloutRecord> records;
};

/// Evaluates every task under every seed. Tasks listed in `train_ids` are
/// refused so held-out evaluation cannot leak training goals.
inline EvalResult evaluate(Policy& policy, const envs::EnvConfig& cfg, const std::vector<envs::Task>& tasks, int episodes,
                           const std::vector<std::uint64_t>& seeds, int context_len,
                           const std::set<int>& train_ids = {}, model::DecodeConfig decode = {}) {
  if (tasks.empty()) throw std::invalid_argument("evaluate: no tasks");
  if (seeds.empty()) throw std::invalid_argument("evaluate: no seeds");
  for (const auto& t : tasks) {
    if (train_ids.count(t.id)) throw std::invalid_argument("evaluate: task " + std::to_string(t.id) + " is in the training split");
  }
  std::vector<RolloutSpec> specs;
  for (const auto& t : tasks)
    for (auto s : seeds) specs.push_back({t, s});
  EvalResult res;
  res.records = rollout_many(policy, cfg, specs, episodes, context_len, decode);
  res.curve.assign(std::size_t(episodes), 0.0);
  double total = 0;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    double task_sum = 0;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      const auto& r = res.records[ti * seeds.size() + si];
      task_sum += endpoint(r);
      for (std::size_t e = 0; e < r.returns.size(); ++e) res.curve[e] += r.returns[e];
    }
    res.per_task.emplace_back(tasks[ti].id, task_sum / double(seeds.size()));
    total += task_sum;
  }
  for (auto& c : res.curve) c /= double(res.records.size());
  res.score = total / double(res.records.size());
  return res;
}

}  // namespace icrl::harness
