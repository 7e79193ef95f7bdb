#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "icrl/common/binary_io.hpp"
#include "icrl/diffcore/ops.hpp"
#include "icrl/matcher/mask.hpp"
#include "icrl/model/config.hpp"

namespace icrl::model {

using diff::Graph;
using diff::Parameter;
using diff::Shape;
using diff::Tensor;
using diff::Var;
using match::Token;

/// Reward embedding rows: 0, 1 and padding.
inline constexpr int kRewardRows = 3;

inline std::uint64_t token_fingerprint(const std::vector<Token>& tokens) {
  io::ByteWriter w;
  for (const auto& t : tokens) {
    w.u32(std::uint32_t(t.prev_action));
    w.u32(std::uint32_t(t.prev_reward));
    w.u32(t.obs);
  }
  return io::fnv1a(w.bytes().data(), w.size());
}

/// N-gram masks for a batch of windows, one [B, T, T] tensor per order
/// 1..ngram_max, tagged with the fingerprint of the tokens they came from.
template <typename T>
struct MaskSet {
  std::uint64_t fingerprint = 0;
  std::vector<std::shared_ptr<const Tensor<T>>> orders;
};

/// Builds masks window by window. A nonzero `permute_seed` shuffles every
/// mask (permuted-mask ablation); each window and order gets its own stream.
template <typename T>
MaskSet<T> build_masks(const std::vector<Token>& tokens, std::size_t batch, std::size_t len, match::MatchMode mode,
                       int ngram_max, const std::vector<match::IndexMatrix>* labels = nullptr,
                       std::uint64_t permute_seed = 0) {
  if (tokens.size() != batch * len) throw std::invalid_argument("build_masks: token count does not match batch x len");
  MaskSet<T> set;
  set.fingerprint = token_fingerprint(tokens);
  std::vector<Tensor<T>> out(std::size_t(ngram_max), Tensor<T>(Shape{batch, len, len}));
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<Token> window(tokens.begin() + std::ptrdiff_t(b * len), tokens.begin() + std::ptrdiff_t((b + 1) * len));
    auto ids = match::intern_keys(match::build_keys(window, mode, labels));
    for (int n = 1; n <= ngram_max; ++n) {
      auto m = match::ngram_mask_from_ids(ids, n);
      if (permute_seed != 0) m = match::permute_mask(m, permute_seed * 1000003ull + b * 131ull + std::uint64_t(n));
      T* dst = out[std::size_t(n - 1)].data() + b * len * len;
      for (std::size_t e = 0; e < len * len; ++e) dst[e] = T(m.weights[e]);
    }
  }
  for (auto& t : out) set.orders.push_back(std::make_shared<const Tensor<T>>(std::move(t)));
  return set;
}

/// W1 h[i] + W2 sum_j mask[i, j] h[j], in row-vector form.
template <typename T>
Var<T> ngram_head(Var<T> h, std::shared_ptr<const Tensor<T>> mask, Var<T> w1, Var<T> w2) {
  return diff::add(diff::matmul(h, w1), diff::matmul(diff::mask_aggregate(std::move(mask), h), w2));
}

template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  return diff::add_broadcast(diff::matmul(x, w), b);
}

/// Two affine maps with a GELU between.
template <typename T>
Var<T> mlp(Var<T> x, Var<T> w_fc, Var<T> b_fc, Var<T> w_proj, Var<T> b_proj) {
  return affine(diff::gelu(affine(x, w_fc, b_fc)), w_proj, b_proj);
}

/// h + MLP(sum_k NGH^k(h)) with independent (W1^k, W2^k) per order.
template <typename T>
Var<T> ngram_layer(Var<T> h, const std::vector<std::shared_ptr<const Tensor<T>>>& masks,
                   const std::vector<std::pair<Var<T>, Var<T>>>& heads, Var<T> w_fc, Var<T> b_fc, Var<T> w_proj,
                   Var<T> b_proj) {
  if (heads.empty()) throw std::invalid_argument("ngram_layer: no heads");
  if (masks.size() < heads.size()) {
    throw std::invalid_argument("ngram_layer: missing mask for order " + std::to_string(masks.size() + 1));
  }
  Var<T> acc = ngram_head(h, masks[0], heads[0].first, heads[0].second);
  for (std::size_t k = 1; k < heads.size(); ++k) acc = diff::add(acc, ngram_head(h, masks[k], heads[k].first, heads[k].second));
  return diff::add(h, mlp(acc, w_fc, b_fc, w_proj, b_proj));
}

/// Everything one forward pass needs besides the weights.
template <typename T>
struct ForwardInput {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<Token> tokens;
  /// Latent observation features [n_obs, obs_dim]; tokens index rows.
  std::shared_ptr<const Tensor<T>> obs_features;
  MaskSet<T> masks;
};

/// Decoder-only causal transformer over composite tokens whose layers are
/// either causal self-attention blocks or n-gram layers.
template <typename T>
class Transformer {
 public:
  Transformer(TransformerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = std::size_t(cfg_.hidden);
    const std::size_t A = std::size_t(cfg_.num_actions);
    const std::size_t F = std::size_t(cfg_.obs_dim);
    const std::size_t r = std::size_t(cfg_.mlp_ratio) * d;
    const double std0 = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * cfg_.layers);

    emb_action_ = add("embed.action", {A + 1, d}, std0, rng);
    emb_reward_ = add("embed.reward", {std::size_t(kRewardRows), d}, std0, rng);
    if (cfg_.obs_input == ObsInput::Discrete) {
      emb_obs_ = add("embed.obs", {F, d}, std0, rng);
    } else {
      emb_obs_ = add("embed.obs_w", {F, d}, 1.0 / std::sqrt(double(F)), rng);
      emb_obs_b_ = add_const("embed.obs_b", {d}, 0, false);
    }
    in_w_ = add("embed.fuse_w", {3 * d, d}, 1.0 / std::sqrt(3.0 * double(d)), rng);
    in_b_ = add_const("embed.fuse_b", {d}, 0, false);
    pos_ = add("embed.pos", {std::size_t(cfg_.context_len), d}, std0, rng);

    for (int l = 0; l < cfg_.layers; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      Layer L;
      L.ngram = cfg_.is_ngram_layer(l);
      if (L.ngram) {
        for (int k = 1; k <= cfg_.ngram_max; ++k) {
          std::string q = p + "ngh" + std::to_string(k) + ".";
          L.ngh.push_back({add(q + "w1", {d, d}, std0, rng), add(q + "w2", {d, d}, std0, rng)});
        }
      } else {
        L.ln1_g = add_const(p + "ln1_g", {d}, 1, false);
        L.ln1_b = add_const(p + "ln1_b", {d}, 0, false);
        L.wq = add(p + "attn.wq", {d, d}, std0, rng);
        L.bq = add_const(p + "attn.bq", {d}, 0, false);
        L.wk = add(p + "attn.wk", {d, d}, std0, rng);
        L.bk = add_const(p + "attn.bk", {d}, 0, false);
        L.wv = add(p + "attn.wv", {d, d}, std0, rng);
        L.bv = add_const(p + "attn.bv", {d}, 0, false);
        L.wo = add(p + "attn.wo", {d, d}, std_out, rng);
        L.bo = add_const(p + "attn.bo", {d}, 0, false);
        L.ln2_g = add_const(p + "ln2_g", {d}, 1, false);
        L.ln2_b = add_const(p + "ln2_b", {d}, 0, false);
      }
      L.w_fc = add(p + "mlp.w_fc", {d, r}, std0, rng);
      L.b_fc = add_const(p + "mlp.b_fc", {r}, 0, false);
      L.w_proj = add(p + "mlp.w_proj", {r, d}, std_out, rng);
      L.b_proj = add_const(p + "mlp.b_proj", {d}, 0, false);
      layers_.push_back(std::move(L));
    }
    if (cfg_.pre_norm) {
      lnf_g_ = add_const("final.ln_g", {d}, 1, false);
      lnf_b_ = add_const("final.ln_b", {d}, 0, false);
    }
    out_w_ = add("head.w", {d, A}, std0, rng);
    out_b_ = add_const("head.b", {A}, 0, false);
  }

  const TransformerConfig& config() const { return cfg_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Logits [B, T, A]. With `training` set, dropout draws from `rng`.
  Var<T> forward(Graph<T>& g, const ForwardInput<T>& in, std::mt19937_64* rng = nullptr, bool training = false) {
    const std::size_t B = in.batch, Tn = in.len, d = std::size_t(cfg_.hidden);
    if (B == 0 || Tn == 0) throw std::invalid_argument("forward: empty batch");
    if (Tn > std::size_t(cfg_.context_len)) {
      throw std::length_error("forward: " + std::to_string(Tn) + " tokens exceed context length " +
                              std::to_string(cfg_.context_len));
    }
    if (in.tokens.size() != B * Tn) throw std::invalid_argument("forward: token count does not match batch x len");
    if (training && rng == nullptr && (cfg_.embed_dropout > 0 || cfg_.resid_dropout > 0)) {
      throw std::invalid_argument("forward: training with dropout needs an rng");
    }
    if (cfg_.uses_ngram()) {
      if (in.masks.orders.size() < std::size_t(cfg_.ngram_max)) {
        throw std::invalid_argument("forward: missing mask for order " + std::to_string(in.masks.orders.size() + 1));
      }
      if (in.masks.fingerprint != token_fingerprint(in.tokens)) {
        throw std::invalid_argument("forward: masks were built from a different token slice");
      }
      for (const auto& m : in.masks.orders)
        if (m->shape() != Shape{B, Tn, Tn}) throw diff::ShapeError("forward: mask shape " + diff::shape_str(m->shape()));
    }
    std::mt19937_64 dummy(0);
    std::mt19937_64& drng = rng ? *rng : dummy;
    auto P = [&](int idx) { return g.parameter(params_[std::size_t(idx)]); };

    const int A = cfg_.num_actions;
    std::vector<int> act(B * Tn), rew(B * Tn);
    for (std::size_t i = 0; i < in.tokens.size(); ++i) {
      const auto& t = in.tokens[i];
      if (t.prev_action != Token::kPad && (t.prev_action < 0 || t.prev_action >= A)) {
        throw std::out_of_range("forward: action " + std::to_string(t.prev_action) + " out of range");
      }
      if (t.prev_reward != Token::kPad && t.prev_reward != 0 && t.prev_reward != 1) {
        throw std::out_of_range("forward: reward bucket " + std::to_string(t.prev_reward) + " not in {0, 1}");
      }
      act[i] = t.prev_action == Token::kPad ? A : t.prev_action;
      rew[i] = t.prev_reward == Token::kPad ? kRewardRows - 1 : t.prev_reward;
    }
    Var<T> ea = diff::embedding(P(emb_action_), act, Shape{B, Tn});
    Var<T> er = diff::embedding(P(emb_reward_), rew, Shape{B, Tn});
    Var<T> eo;
    if (cfg_.obs_input == ObsInput::Discrete) {
      std::vector<int> ob(B * Tn);
      for (std::size_t i = 0; i < ob.size(); ++i) ob[i] = int(in.tokens[i].obs);
      eo = diff::embedding(P(emb_obs_), ob, Shape{B, Tn});
    } else {
      if (!in.obs_features) throw std::invalid_argument("forward: latent observations need a feature table");
      const auto& Ft = *in.obs_features;
      const std::size_t F = std::size_t(cfg_.obs_dim);
      if (Ft.rank() != 2 || Ft.dim(1) != F) throw diff::ShapeError("forward: feature table " + diff::shape_str(Ft.shape()));
      Tensor<T> gathered(Shape{B, Tn, F});
      for (std::size_t i = 0; i < B * Tn; ++i) {
        std::size_t o = in.tokens[i].obs;
        if (o >= Ft.dim(0)) throw std::out_of_range("forward: observation " + std::to_string(o) + " has no features");
        std::copy_n(Ft.data() + o * F, F, gathered.data() + i * F);
      }
      eo = affine(g.constant(std::move(gathered)), P(emb_obs_), P(emb_obs_b_));
    }
    Var<T> x = affine(diff::concat_last<T>({ea, er, eo}), P(in_w_), P(in_b_));
    std::vector<int> pos(Tn);
    for (std::size_t t = 0; t < Tn; ++t) pos[t] = int(t);
    x = diff::add_broadcast(x, diff::embedding(P(pos_), pos, Shape{Tn}));
    x = diff::dropout(x, cfg_.embed_dropout, drng, training);

    const std::size_t H = std::size_t(cfg_.heads), dh = d / H;
    for (const auto& L : layers_) {
      if (L.ngram) {
        std::vector<std::pair<Var<T>, Var<T>>> heads;
        for (auto [w1, w2] : L.ngh) heads.push_back({P(w1), P(w2)});
        x = ngram_layer(x, in.masks.orders, heads, P(L.w_fc), P(L.b_fc), P(L.w_proj), P(L.b_proj));
        continue;
      }
      auto attn = [&](Var<T> h) {
        Var<T> q = affine(h, P(L.wq), P(L.bq));
        Var<T> k = affine(h, P(L.wk), P(L.bk));
        Var<T> v = affine(h, P(L.wv), P(L.bv));
        T s = T(1.0 / std::sqrt(double(dh)));
        if (cfg_.qk_norm) {
          auto per_head = [&](Var<T> x) {
            return diff::reshape(diff::l2_normalize(diff::reshape(x, Shape{B, Tn, H, dh})), Shape{B, Tn, d});
          };
          q = per_head(q);
          k = per_head(k);
          s = T(std::sqrt(double(dh)));
        }
        Var<T> o = diff::causal_attention(q, k, v, H, s);
        return diff::dropout(affine(o, P(L.wo), P(L.bo)), cfg_.resid_dropout, drng, training);
      };
      auto ff = [&](Var<T> h) {
        return diff::dropout(mlp(h, P(L.w_fc), P(L.b_fc), P(L.w_proj), P(L.b_proj)), cfg_.resid_dropout, drng, training);
      };
      if (cfg_.pre_norm) {
        x = diff::add(x, attn(diff::layer_norm(x, P(L.ln1_g), P(L.ln1_b))));
        x = diff::add(x, ff(diff::layer_norm(x, P(L.ln2_g), P(L.ln2_b))));
      } else {
        x = diff::layer_norm(diff::add(x, attn(x)), P(L.ln1_g), P(L.ln1_b));
        x = diff::layer_norm(diff::add(x, ff(x)), P(L.ln2_g), P(L.ln2_b));
      }
    }
    if (cfg_.pre_norm) x = diff::layer_norm(x, P(lnf_g_), P(lnf_b_));
    return affine(x, P(out_w_), P(out_b_));
  }

 private:
  struct Layer {
    bool ngram = false;
    std::vector<std::pair<int, int>> ngh;
    int ln1_g = -1, ln1_b = -1, wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
    int ln2_g = -1, ln2_b = -1;
    int w_fc = -1, b_fc = -1, w_proj = -1, b_proj = -1;
  };

  int add(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> v(shape);
    std::normal_distribution<double> nd(0.0, stddev);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(nd(rng));
    params_.emplace_back(name, std::move(v), true);
    return int(params_.size()) - 1;
  }

  int add_const(const std::string& name, Shape shape, double fill, bool decay) {
    params_.emplace_back(name, Tensor<T>(shape, T(fill)), decay);
    return int(params_.size()) - 1;
  }

  TransformerConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<Layer> layers_;
  int emb_action_ = -1, emb_reward_ = -1, emb_obs_ = -1, emb_obs_b_ = -1;
  int in_w_ = -1, in_b_ = -1, pos_ = -1, lnf_g_ = -1, lnf_b_ = -1, out_w_ = -1, out_b_ = -1;
};

}  // namespace icrl::model
