#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace icrl::envs {

enum class EnvKind : std::uint8_t { DarkRoom = 0, KeyToDoor = 1, Pixel = 2 };

inline const char* env_name(EnvKind k) {
  switch (k) {
    case EnvKind::DarkRoom: return "darkroom";
    case EnvKind::KeyToDoor: return "keytodoor";
    case EnvKind::Pixel: return "pixel";
  }
  return "?";
}

inline EnvKind parse_env_kind(const std::string& s) {
  if (s == "darkroom") return EnvKind::DarkRoom;
  if (s == "keytodoor" || s == "key-to-door" || s == "k2d") return EnvKind::KeyToDoor;
  if (s == "pixel" || s == "pixel-darkroom") return EnvKind::Pixel;
  throw std::invalid_argument("unknown env kind '" + s + "'");
}

inline bool has_images(EnvKind k) { return k == EnvKind::Pixel; }

/// Actions: up, down, left, right, do nothing.
enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
inline constexpr int kNumActions = 5;

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

inline int manhattan(Cell a, Cell b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col); }

struct EnvConfig {
  EnvKind kind = EnvKind::DarkRoom;
  int grid_size = 9;
  int episode_len = 50;
  int image_size = 32;
  /// Draw the key while it is uncollected. Off by default: tasks stay hidden.
  bool show_key = false;

  int num_states() const { return grid_size * grid_size; }
  Cell center() const { return {grid_size / 2, grid_size / 2}; }
  int cell_id(Cell c) const { return c.row * grid_size + c.col; }
  Cell cell_of(int id) const { return {id / grid_size, id % grid_size}; }
  bool in_bounds(Cell c) const {
    return c.row >= 0 && c.col >= 0 && c.row < grid_size && c.col < grid_size;
  }
};

struct Task {
  EnvKind kind = EnvKind::DarkRoom;
  Cell goal;  // Dark Room and Pixel
  Cell key;   // Key-to-Door
  Cell door;  // Key-to-Door
  int id = 0;
};

/// Channels x height x width RGB bytes.
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const Image&, const Image&) = default;
};

struct Observation {
  /// row * width + col of the agent. For pixel envs this is privileged
  /// information used only to key the image store.
  int state_id = 0;
  Image image;  // empty for discrete envs

  bool has_image() const { return !image.bytes.empty(); }
};

struct EnvState {
  Cell agent;
  int step = 0;
  bool has_key = false;
  bool done = false;
  Task task;
};

struct StepResult {
  EnvState state;
  Observation obs;
  float reward = 0;
  bool done = false;
};

inline Cell apply_move(const EnvConfig& cfg, Cell c, int action) {
  static constexpr std::array<std::array<int, 2>, kNumActions> delta{
      {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {0, 0}}};
  if (action < 0 || action >= kNumActions) {
    throw std::out_of_range("action " + std::to_string(action) + " outside [0, 5)");
  }
  Cell n{c.row + delta[std::size_t(action)][0], c.col + delta[std::size_t(action)][1]};
  return cfg.in_bounds(n) ? n : c;
}

inline Image render_pixel(const EnvConfig& cfg, const EnvState& state);

class GridEnv {
 public:
  explicit GridEnv(EnvConfig cfg) : cfg_(cfg) {
    if (cfg_.grid_size < 2) throw std::invalid_argument("grid_size must be >= 2");
    if (cfg_.episode_len < 1) throw std::invalid_argument("episode_len must be >= 1");
  }

  const EnvConfig& config() const { return cfg_; }

  void validate(const Task& t) const {
    if (t.kind != cfg_.kind) throw std::invalid_argument("task kind does not match env kind");
    if (t.kind == EnvKind::KeyToDoor) {
      if (!cfg_.in_bounds(t.key) || !cfg_.in_bounds(t.door)) throw std::invalid_argument("key/door out of bounds");
    } else {
      if (!cfg_.in_bounds(t.goal)) throw std::invalid_argument("goal out of bounds");
      if (t.goal == cfg_.center()) throw std::invalid_argument("goal coincides with the start cell");
    }
  }

  /// Dark Room and Pixel start in the center; Key-to-Door starts at a
  /// uniformly random cell drawn from `rng`.
  template <typename Rng>
  std::pair<EnvState, Observation> reset(const Task& task, Rng& rng) const {
    validate(task);
    EnvState s;
    s.task = task;
    if (task.kind == EnvKind::KeyToDoor) {
      std::uniform_int_distribution<int> cell(0, cfg_.num_states() - 1);
      s.agent = cfg_.cell_of(cell(rng));
    } else {
      s.agent = cfg_.center();
    }
    return {s, observe(s)};
  }

  StepResult step(const EnvState& state, int action) const {
    if (state.done) throw std::logic_error("step called on a finished episode");
    StepResult r;
    r.state = state;
    EnvState& s = r.state;
    if (state.task.kind == EnvKind::KeyToDoor) {
      s.agent = apply_move(cfg_, s.agent, action);
      if (!s.has_key && s.agent == s.task.key) {
        s.has_key = true;
        r.reward = 1;
      } else if (s.has_key && s.agent == s.task.door) {
        r.reward = 1;
        s.done = true;
      }
    } else {
      // One unit per time step spent on the goal cell.
      r.reward = s.agent == s.task.goal ? 1.f : 0.f;
      s.agent = apply_move(cfg_, s.agent, action);
    }
    s.step += 1;
    if (s.step >= cfg_.episode_len) s.done = true;
    r.done = s.done;
    r.obs = observe(s);
    return r;
  }

  Observation observe(const EnvState& s) const {
    Observation o;
    o.state_id = cfg_.cell_id(s.agent);
    if (has_images(cfg_.kind)) o.image = render_pixel(cfg_, s);
    return o;
  }

  float max_return() const { return cfg_.kind == EnvKind::KeyToDoor ? 2.f : float(cfg_.episode_len); }

 private:
  EnvConfig cfg_;
};

/// Return of the best policy for a task from the given start cell.
inline float optimal_return(const EnvConfig& cfg, const Task& t, Cell start) {
  if (t.kind == EnvKind::KeyToDoor) {
    int to_key = manhattan(start, t.key);
    if (to_key == 0) to_key = 1;  // pickup happens on a step
    if (to_key > cfg.episode_len) return 0;
    int to_door = std::max(1, manhattan(t.key, t.door));
    return to_key + to_door <= cfg.episode_len ? 2.f : 1.f;
  }
  int d = manhattan(start, t.goal);
  return float(std::max(0, cfg.episode_len - d));
}

/// All tasks of an env kind: every non-center goal cell for Dark Room and
/// Pixel (id = goal cell id), every ordered (key, door) pair for Key-to-Door
/// (id = key_id * cells + door_id).
inline std::vector<Task> enumerate_tasks(const EnvConfig& cfg) {
  std::vector<Task> tasks;
  const int n = cfg.num_states();
  if (cfg.kind == EnvKind::KeyToDoor) {
    tasks.reserve(std::size_t(n) * std::size_t(n));
    for (int k = 0; k < n; ++k)
      for (int d = 0; d < n; ++d) {
        Task t;
        t.kind = cfg.kind;
        t.key = cfg.cell_of(k);
        t.door = cfg.cell_of(d);
        t.id = k * n + d;
        tasks.push_back(t);
      }
  } else {
    for (int c = 0; c < n; ++c) {
      if (cfg.cell_of(c) == cfg.center()) continue;
      Task t;
      t.kind = cfg.kind;
      t.goal = cfg.cell_of(c);
      t.id = c;
      tasks.push_back(t);
    }
  }
  return tasks;
}

inline Task task_by_id(const EnvConfig& cfg, int id) {
  const int n = cfg.num_states();
  Task t;
  t.kind = cfg.kind;
  t.id = id;
  if (cfg.kind == EnvKind::KeyToDoor) {
    if (id < 0 || id >= n * n) throw std::out_of_range("task id " + std::to_string(id));
    t.key = cfg.cell_of(id / n);
    t.door = cfg.cell_of(id % n);
  } else {
    if (id < 0 || id >= n || cfg.cell_of(id) == cfg.center()) {
      throw std::out_of_range("task id " + std::to_string(id));
    }
    t.goal = cfg.cell_of(id);
  }
  return t;
}

struct TaskSplit {
  std::vector<Task> train;
  std::vector<Task> eval;
};

/// Seeded shuffle, then the first `n_train` tasks train and the remainder
/// evaluates. A positive `eval_count` keeps only that many of the remainder.
inline TaskSplit split_tasks(std::vector<Task> tasks, int n_train, std::uint64_t seed, int eval_count = -1) {
  if (n_train <= 0 || std::size_t(n_train) >= tasks.size()) {
    throw std::invalid_argument("n_train must be in (0, " + std::to_string(tasks.size()) + "), got " +
                                std::to_string(n_train));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(tasks.begin(), tasks.end(), rng);
  TaskSplit s;
  s.train.assign(tasks.begin(), tasks.begin() + n_train);
  auto rest_end = tasks.end();
  if (eval_count > 0 && std::size_t(eval_count) < tasks.size() - std::size_t(n_train)) {
    rest_end = tasks.begin() + n_train + eval_count;
  }
  s.eval.assign(tasks.begin() + n_train, rest_end);
  return s;
}

/// Top-down render: grid lines, a tinted band through the agent's row and
/// column, and the agent marker. Goal and door are never drawn.
inline Image render_pixel(const EnvConfig& cfg, const EnvState& state) {
  const int size = cfg.image_size;
  const int g = cfg.grid_size;
  const int pitch = (size - 2) / g;
  if (pitch < 2) throw std::invalid_argument("image_size too small for grid");
  const int span = pitch * g + 1;
  const int margin = (size - span) / 2;

  Image img;
  img.channels = 3;
  img.height = size;
  img.width = size;
  img.bytes.assign(std::size_t(3 * size * size), 0);
  auto put = [&](int y, int x, std::array<std::uint8_t, 3> rgb) {
    if (y < 0 || x < 0 || y >= size || x >= size) return;
    for (int c = 0; c < 3; ++c) img.bytes[std::size_t((c * size + y) * size + x)] = rgb[std::size_t(c)];
  };
  constexpr std::array<std::uint8_t, 3> background{18, 18, 26};
  constexpr std::array<std::uint8_t, 3> line{72, 72, 84};
  constexpr std::array<std::uint8_t, 3> band{34, 52, 110};
  constexpr std::array<std::uint8_t, 3> agent{250, 70, 40};
  constexpr std::array<std::uint8_t, 3> key{240, 220, 40};

  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) put(y, x, background);
  auto fill_cell = [&](Cell c, std::array<std::uint8_t, 3> rgb) {
    for (int dy = 1; dy < pitch; ++dy)
      for (int dx = 1; dx < pitch; ++dx) put(margin + c.row * pitch + dy, margin + c.col * pitch + dx, rgb);
  };
  for (int i = 0; i < g; ++i) {
    fill_cell({state.agent.row, i}, band);
    fill_cell({i, state.agent.col}, band);
  }
  for (int i = 0; i <= g; ++i) {
    for (int t = 0; t < span; ++t) {
      put(margin + i * pitch, margin + t, line);
      put(margin + t, margin + i * pitch, line);
    }
  }
  if (cfg.show_key && state.task.kind == EnvKind::KeyToDoor && !state.has_key) fill_cell(state.task.key, key);
  fill_cell(state.agent, agent);
  return img;
}

}  // namespace icrl::envs
