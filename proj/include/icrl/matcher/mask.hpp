#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "icrl/matcher/keys.hpp"

namespace icrl::match {

/// Row-normalized n-gram attention pattern over T positions. Entry (i, j)
/// is the weight query position i puts on position j.
struct NGramMask {
  int order = 1;
  std::size_t length = 0;
  std::vector<float> weights;           // length x length, row-major
  std::vector<std::uint32_t> matches;   // positive entries per row

  float at(std::size_t i, std::size_t j) const { return weights[i * length + j]; }
  friend bool operator==(const NGramMask&, const NGramMask&) = default;
};

/// Dense integer ids so that id equality is key equality.
inline std::vector<std::int32_t> intern_keys(const std::vector<MatchKey>& keys) {
  std::unordered_map<MatchKey, std::int32_t, MatchKeyHash> ids;
  std::vector<std::int32_t> out;
  out.reserve(keys.size());
  for (const auto& k : keys) {
    auto [it, inserted] = ids.emplace(k, std::int32_t(ids.size()));
    out.push_back(it->second);
  }
  return out;
}

/// Position i attends to j when the n keys preceding i equal the n keys
/// preceding j - 1: keys[i-k] == keys[j-k-1] for k = 1..n, with j <= i.
/// Rows are normalized by their match count; rows without matches are zero.
inline NGramMask ngram_mask_from_ids(const std::vector<std::int32_t>& ids, int n) {
  if (n < 1) throw std::invalid_argument("n-gram order must be >= 1, got " + std::to_string(n));
  const std::size_t T = ids.size();
  NGramMask m;
  m.order = n;
  m.length = T;
  m.weights.assign(T * T, 0.f);
  m.matches.assign(T, 0);
  const std::size_t un = std::size_t(n);
  for (std::size_t i = un; i < T; ++i) {
    float* row = m.weights.data() + i * T;
    std::uint32_t count = 0;
    for (std::size_t j = un + 1; j <= i; ++j) {
      bool hit = true;
      for (std::size_t k = 1; k <= un && hit; ++k) hit = ids[i - k] == ids[j - k - 1];
      if (hit) {
        row[j] = 1.f;
        ++count;
      }
    }
    m.matches[i] = count;
    if (count > 0) {
      const float w = 1.f / float(count);
      for (std::size_t j = un + 1; j <= i; ++j)
        if (row[j] != 0.f) row[j] = w;
    }
  }
  return m;
}

inline NGramMask ngram_mask(const std::vector<MatchKey>& keys, int n) {
  return ngram_mask_from_ids(intern_keys(keys), n);
}

/// Moves each row's positive entries to uniformly random distinct columns in
/// [n + 1, i], keeping their count and weights.
inline NGramMask permute_mask(const NGramMask& mask, std::uint64_t seed) {
  NGramMask out = mask;
  std::fill(out.weights.begin(), out.weights.end(), 0.f);
  std::mt19937_64 rng(seed);
  const std::size_t T = mask.length;
  const std::size_t lo = std::size_t(mask.order) + 1;
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < T; ++i) {
    const std::uint32_t c = mask.matches[i];
    if (c == 0) continue;
    if (i < lo || i - lo + 1 < c) throw std::invalid_argument("permute_mask: row has more matches than slots");
    float w = 0.f;
    for (std::size_t j = 0; j < T; ++j)
      if (mask.at(i, j) > 0.f) w = mask.at(i, j);
    cols.resize(i - lo + 1);
    std::iota(cols.begin(), cols.end(), lo);
    for (std::uint32_t k = 0; k < c; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, cols.size() - 1);
      std::swap(cols[k], cols[pick(rng)]);
      out.weights[i * T + cols[k]] = w;
    }
  }
  return out;
}

}  // namespace icrl::match
