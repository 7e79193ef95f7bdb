#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "icrl/matcher/keys.hpp"

namespace icrl::model {

/// How observations enter the token embedding.
enum class ObsInput : std::uint8_t { Discrete = 0, Latent = 1 };

struct TransformerConfig {
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int context_len = 100;
  int mlp_ratio = 4;
  bool pre_norm = true;
  bool qk_norm = false;
  double embed_dropout = 0.0;
  double resid_dropout = 0.0;
  std::vector<int> ngram_positions;
  int ngram_max = 1;
  match::MatchMode match_mode = match::MatchMode::StateOnly;
  /// When false, n-gram layers may also sit first or last (small test models).
  bool interior_ngram_only = true;

  int num_actions = 5;
  ObsInput obs_input = ObsInput::Discrete;
  /// Vocabulary size for discrete observations, feature width for latents.
  int obs_dim = 81;

  bool is_ngram_layer(int layer) const {
    return std::find(ngram_positions.begin(), ngram_positions.end(), layer) != ngram_positions.end();
  }
  bool uses_ngram() const { return !ngram_positions.empty(); }

  /// Throws std::invalid_argument naming the first violated constraint.
  /// `episode_len` > 0 also enforces room for two episodes.
  void validate(int episode_len = 0) const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("transformer config: " + m); };
    if (layers < 1) fail("layers must be >= 1");
    if (hidden < 1 || heads < 1 || hidden % heads != 0) fail("hidden must be a positive multiple of heads");
    if (context_len < 1) fail("context_len must be >= 1");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (embed_dropout < 0 || embed_dropout >= 1 || resid_dropout < 0 || resid_dropout >= 1) {
      fail("dropout rates must be in [0, 1)");
    }
    if (num_actions < 2) fail("num_actions must be >= 2");
    if (obs_dim < 1) fail("obs_dim must be >= 1");
    if (uses_ngram() && ngram_max < 1) fail("ngram_max must be >= 1");
    for (std::size_t i = 0; i < ngram_positions.size(); ++i) {
      int p = ngram_positions[i];
      if (p < 0 || p >= layers) fail("ngram position " + std::to_string(p) + " outside [0, " + std::to_string(layers - 1) + "]");
      if (interior_ngram_only && (p == 0 || p == layers - 1)) {
        fail("ngram position " + std::to_string(p) + " must be an interior layer in [1, " + std::to_string(layers - 2) + "]");
      }
      for (std::size_t j = 0; j < i; ++j)
        if (ngram_positions[j] == p) fail("duplicate ngram position " + std::to_string(p));
    }
    if (episode_len > 0 && context_len < 2 * episode_len) {
      fail("context_len " + std::to_string(context_len) + " must hold two episodes of " + std::to_string(episode_len));
    }
  }
};

}  // namespace icrl::model
