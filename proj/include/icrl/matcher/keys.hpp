#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace icrl::match {

/// Composite input token (a_{t-1}, r_{t-1}, o_t). The first token of a
/// history carries padding in both previous-step fields.
struct Token {
  static constexpr int kPad = -1;

  int prev_action = kPad;
  int prev_reward = kPad;
  /// State id (discrete envs) or image index (pixel envs).
  std::uint32_t obs = 0;

  bool is_padding() const { return prev_action == kPad; }
  friend bool operator==(const Token&, const Token&) = default;
};

enum class MatchMode : std::uint8_t { StateOnly = 0, FullTransition = 1, VqIndex = 2 };

inline const char* match_mode_name(MatchMode m) {
  switch (m) {
    case MatchMode::StateOnly: return "state";
    case MatchMode::FullTransition: return "transition";
    case MatchMode::VqIndex: return "vq";
  }
  return "?";
}

inline MatchMode parse_match_mode(const std::string& s) {
  if (s == "state" || s == "state-only") return MatchMode::StateOnly;
  if (s == "transition" || s == "full-transition") return MatchMode::FullTransition;
  if (s == "vq" || s == "vq-index") return MatchMode::VqIndex;
  throw std::invalid_argument("unknown match mode '" + s + "'");
}

/// Flattened G x G matrix of codebook indices.
using IndexMatrix = std::vector<std::int32_t>;

/// Exact-equality match datum.
struct MatchKey {
  std::vector<std::int32_t> parts;
  friend bool operator==(const MatchKey&, const MatchKey&) = default;
};

struct MatchKeyHash {
  std::size_t operator()(const MatchKey& k) const {
    std::size_t h = 1469598103934665603ull;
    for (auto v : k.parts) {
      h ^= std::hash<std::int32_t>{}(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return h;
  }
};

/// One key per token. `labels[obs]` supplies the index matrix in VqIndex mode.
inline std::vector<MatchKey> build_keys(const std::vector<Token>& tokens, MatchMode mode,
                                        const std::vector<IndexMatrix>* labels = nullptr) {
  std::vector<MatchKey> keys;
  keys.reserve(tokens.size());
  for (const auto& t : tokens) {
    MatchKey k;
    switch (mode) {
      case MatchMode::StateOnly:
        k.parts = {std::int32_t(t.obs)};
        break;
      case MatchMode::FullTransition:
        k.parts = {t.prev_action, t.prev_reward, std::int32_t(t.obs)};
        break;
      case MatchMode::VqIndex:
        if (labels == nullptr || t.obs >= labels->size() || (*labels)[t.obs].empty()) {
          throw std::invalid_argument("vq match mode: observation " + std::to_string(t.obs) + " has no index matrix");
        }
        k.parts = (*labels)[t.obs];
        break;
    }
    keys.push_back(std::move(k));
  }
  return keys;
}

}  // namespace icrl::match
