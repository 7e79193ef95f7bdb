#pragma once

// Breadth-first search over grid cells with wall clipping; independent of the
// oracle policy used by the generators.

#include <queue>
#include <vector>

#include "icrl/envs/grid.hpp"

namespace icrl::testing {

inline int bfs_distance(const envs::EnvConfig& cfg, envs::Cell from, envs::Cell to) {
  std::vector<int> dist(std::size_t(cfg.num_states()), -1);
  std::queue<envs::Cell> q;
  dist[std::size_t(cfg.cell_id(from))] = 0;
  q.push(from);
  while (!q.empty()) {
    auto c = q.front();
    q.pop();
    if (c == to) return dist[std::size_t(cfg.cell_id(c))];
    for (int a = 0; a < envs::kNumActions; ++a) {
      auto n = envs::apply_move(cfg, c, a);
      if (dist[std::size_t(cfg.cell_id(n))] < 0) {
        dist[std::size_t(cfg.cell_id(n))] = dist[std::size_t(cfg.cell_id(c))] + 1;
        q.push(n);
      }
    }
  }
  return -1;
}

/// Best Dark Room return: reward accrues on every step that starts on the
/// goal, and the goal is first occupied at step d.
inline float bfs_optimal_darkroom(const envs::EnvConfig& cfg, const envs::Task& t) {
  int d = bfs_distance(cfg, cfg.center(), t.goal);
  return float(cfg.episode_len - d);
}

}  // namespace icrl::testing
