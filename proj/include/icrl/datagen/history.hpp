#pragma once

#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "icrl/common/binary_io.hpp"
#include "icrl/envs/grid.hpp"

namespace icrl::data {

/// One executed step. `obs` is the state id for discrete envs and an index
/// into the dataset's ImageStore for pixel envs.
struct Transition {
  std::uint32_t obs = 0;
  std::uint8_t action = 0;
  float reward = 0;
  bool done = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

using Episode = std::vector<Transition>;

enum class GeneratorTag : std::uint8_t { QLearning = 0, OracleNoise = 1 };

struct LearningHistory {
  int task_id = 0;
  GeneratorTag generator = GeneratorTag::QLearning;
  std::string config_snapshot;
  std::vector<Episode> episodes;

  std::size_t num_transitions() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.size();
    return n;
  }

  friend bool operator==(const LearningHistory&, const LearningHistory&) = default;
};

inline float episode_return(const Episode& e) {
  float r = 0;
  for (const auto& t : e) r += t.reward;
  return r;
}

inline std::vector<float> episode_returns(const LearningHistory& h) {
  std::vector<float> out;
  out.reserve(h.episodes.size());
  for (const auto& e : h.episodes) out.push_back(episode_return(e));
  return out;
}

/// Mean return over the last decile of episodes is at least the mean over
/// the first decile (at least one episode each).
inline bool satisfies_ordering(const LearningHistory& h) {
  auto r = episode_returns(h);
  if (r.empty()) return true;
  std::size_t k = std::max<std::size_t>(1, r.size() / 10);
  double first = std::accumulate(r.begin(), r.begin() + std::ptrdiff_t(k), 0.0) / double(k);
  double last = std::accumulate(r.end() - std::ptrdiff_t(k), r.end(), 0.0) / double(k);
  return last >= first;
}

/// Keeps episodes 0, k, 2k, ... in order.
inline LearningHistory subsample_history(const LearningHistory& h, int k) {
  if (k < 1) throw std::invalid_argument("subsample stride must be >= 1, got " + std::to_string(k));
  LearningHistory out;
  out.task_id = h.task_id;
  out.generator = h.generator;
  out.config_snapshot = h.config_snapshot;
  for (std::size_t i = 0; i < h.episodes.size(); i += std::size_t(k)) out.episodes.push_back(h.episodes[i]);
  return out;
}

/// n_tasks * episodes_per_task * episode_len, refusing to overflow.
inline std::uint64_t transition_count(std::uint64_t n_tasks, std::uint64_t episodes_per_task, std::uint64_t episode_len) {
  if (n_tasks == 0 || episodes_per_task == 0 || episode_len == 0) {
    throw std::invalid_argument("transition_count arguments must be positive");
  }
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  if (n_tasks > kMax / episodes_per_task) throw std::overflow_error("transition_count overflow");
  std::uint64_t p = n_tasks * episodes_per_task;
  if (p > kMax / episode_len) throw std::overflow_error("transition_count overflow");
  return p * episode_len;
}

/// Deduplicated storage of rendered observations, keyed by content hash.
class ImageStore {
 public:
  std::uint32_t intern(const envs::Image& img) {
    std::uint64_t h = hash(img);
    auto it = index_.find(h);
    if (it != index_.end()) return it->second;
    auto id = std::uint32_t(images_.size());
    images_.push_back(img);
    hashes_.push_back(h);
    index_.emplace(h, id);
    return id;
  }

  const envs::Image& at(std::uint32_t id) const {
    if (id >= images_.size()) throw std::out_of_range("image index " + std::to_string(id) + " not in store");
    return images_[id];
  }

  std::size_t size() const { return images_.size(); }
  bool empty() const { return images_.empty(); }
  const std::vector<envs::Image>& images() const { return images_; }
  std::uint64_t hash_at(std::uint32_t id) const { return hashes_.at(id); }

  static std::uint64_t hash(const envs::Image& img) {
    std::uint8_t dims[3] = {std::uint8_t(img.channels), std::uint8_t(img.height), std::uint8_t(img.width)};
    return io::fnv1a(img.bytes.data(), img.bytes.size(), io::fnv1a(dims, 3));
  }

  friend bool operator==(const ImageStore& a, const ImageStore& b) { return a.images_ == b.images_; }

 private:
  std::vector<envs::Image> images_;
  std::vector<std::uint64_t> hashes_;
  std::unordered_map<std::uint64_t, std::uint32_t> index_;
};

struct Dataset {
  envs::EnvKind env_kind = envs::EnvKind::DarkRoom;
  int grid_size = 9;
  int num_actions = envs::kNumActions;
  std::vector<LearningHistory> histories;
  ImageStore images;

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.env_kind == b.env_kind && a.grid_size == b.grid_size && a.num_actions == b.num_actions &&
           a.histories == b.histories && a.images == b.images;
  }
};

}  // namespace icrl::data
