#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "icrl/datagen/history.hpp"
#include "icrl/diffcore/optim.hpp"
#include "icrl/model/transformer.hpp"

namespace icrl::model {

struct TrainConfig {
  int steps = 10000;
  int batch = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double label_smoothing = 0.0;
  double grad_clip = 1.0;
  int warmup = 0;
  /// Keep every k-th episode of each learning history.
  int subsample = 1;
  bool permute_masks = false;
  std::uint64_t seed = 0;
};

/// Reward bucket for matching and embedding; rewards in these envs are 0 or 1.
inline int reward_bucket(float r) {
  if (r == 0.0f) return 0;
  if (r == 1.0f) return 1;
  throw std::out_of_range("reward " + std::to_string(r) + " has no bucket");
}

/// A learning history flattened into tokens (a_{t-1}, r_{t-1}, o_t) with
/// target a_t. Only the very first token carries padding.
struct TokenStream {
  std::vector<Token> tokens;
  std::vector<int> targets;
};

inline TokenStream tokenize(const data::LearningHistory& h) {
  TokenStream s;
  s.tokens.reserve(h.num_transitions());
  Token next;
  for (const auto& ep : h.episodes) {
    for (const auto& t : ep) {
      next.obs = t.obs;
      s.tokens.push_back(next);
      s.targets.push_back(t.action);
      next.prev_action = t.action;
      next.prev_reward = reward_bucket(t.reward);
    }
  }
  return s;
}

/// A batch of equal-length windows and their target actions.
template <typename T>
struct Batch {
  ForwardInput<T> input;
  std::vector<int> targets;
};

/// Draws contiguous windows: a history uniformly, then an offset uniformly.
class WindowSampler {
 public:
  WindowSampler(const std::vector<data::LearningHistory>& histories, int subsample, std::size_t len) : len_(len) {
    for (const auto& h : histories) {
      auto s = tokenize(subsample > 1 ? data::subsample_history(h, subsample) : h);
      if (s.tokens.size() >= len) streams_.push_back(std::move(s));
    }
    if (streams_.empty()) throw std::invalid_argument("window sampler: no history holds " + std::to_string(len) + " tokens");
  }

  std::size_t num_streams() const { return streams_.size(); }
  std::size_t window_len() const { return len_; }
  const TokenStream& stream(std::size_t i) const { return streams_.at(i); }

  /// Appends one window to `tokens`/`targets`.
  void sample_into(std::mt19937_64& rng, std::vector<Token>& tokens, std::vector<int>& targets) const {
    const auto& s = streams_[std::uniform_int_distribution<std::size_t>(0, streams_.size() - 1)(rng)];
    std::size_t off = std::uniform_int_distribution<std::size_t>(0, s.tokens.size() - len_)(rng);
    tokens.insert(tokens.end(), s.tokens.begin() + std::ptrdiff_t(off), s.tokens.begin() + std::ptrdiff_t(off + len_));
    targets.insert(targets.end(), s.targets.begin() + std::ptrdiff_t(off), s.targets.begin() + std::ptrdiff_t(off + len_));
  }

 private:
  std::vector<TokenStream> streams_;
  std::size_t len_;
};

/// Samples a batch and builds its masks from the same token slice.
template <typename T>
Batch<T> sample_batch(const WindowSampler& sampler, const TransformerConfig& cfg, std::size_t batch, std::mt19937_64& rng,
                      std::uint64_t permute_seed = 0, const std::vector<match::IndexMatrix>* labels = nullptr,
                      std::shared_ptr<const Tensor<T>> features = nullptr) {
  Batch<T> b;
  b.input.batch = batch;
  b.input.len = sampler.window_len();
  for (std::size_t i = 0; i < batch; ++i) sampler.sample_into(rng, b.input.tokens, b.targets);
  if (cfg.uses_ngram()) {
    b.input.masks = build_masks<T>(b.input.tokens, batch, b.input.len, cfg.match_mode, cfg.ngram_max, labels, permute_seed);
  }
  b.input.obs_features = std::move(features);
  return b;
}

/// Owns the optimizer for one model and performs update steps.
template <typename T>
class Trainer {
 public:
  Trainer(Transformer<T>& model, const TrainConfig& tc)
      : model_(model), tc_(tc), opt_(model.parameters(), diff::AdamWConfig{tc.lr, tc.weight_decay}), rng_(tc.seed ^ 0x5eedULL) {}

  /// One optimizer step on `batch`; returns the pre-update loss. A
  /// non-finite loss or gradient throws NumericError with the step number.
  double train_step(const Batch<T>& batch) {
    const std::size_t A = std::size_t(model_.config().num_actions);
    Graph<T> g;
    Var<T> logits = model_.forward(g, batch.input, &rng_, true);
    Var<T> flat = diff::reshape(logits, Shape{batch.input.batch * batch.input.len, A});
    Var<T> loss = diff::cross_entropy_label_smoothed(flat, batch.targets, tc_.label_smoothing);
    double value;
    try {
      value = double(g.forward(loss)[0]);
    } catch (const diff::NumericError& e) {
      throw diff::NumericError(diagnose(std::string("forward failed: ") + e.what()));
    }
    opt_.zero_grad();
    g.backward(loss);
    double norm = diff::clip_grad_norm(model_.parameters(), tc_.grad_clip);
    if (!std::isfinite(norm)) throw diff::NumericError(diagnose("non-finite gradient norm"));
    if (tc_.warmup > 0 && opt_.steps() < tc_.warmup) {
      opt_.set_lr(tc_.lr * double(opt_.steps() + 1) / double(tc_.warmup));
    } else {
      opt_.set_lr(tc_.lr);
    }
    opt_.step();
    last_grad_norm_ = norm;
    return value;
  }

  std::int64_t steps() const { return opt_.steps(); }
  double last_grad_norm() const { return last_grad_norm_; }
  diff::AdamW<T>& optimizer() { return opt_; }

 private:
  std::string diagnose(const std::string& what) const {
    std::ostringstream os;
    os << what << " at step " << opt_.steps() << " (lr " << opt_.config().lr << ", last grad norm " << last_grad_norm_ << ")";
    return os.str();
  }

  Transformer<T>& model_;
  TrainConfig tc_;
  diff::AdamW<T> opt_;
  std::mt19937_64 rng_;
  double last_grad_norm_ = 0;
};

enum class Decode : std::uint8_t { Greedy = 0, Sample = 1 };

struct DecodeConfig {
  Decode mode = Decode::Greedy;
  double temperature = 1.0;
};

/// Greedy takes the lowest-index maximum; sampling draws from
/// softmax(logits / temperature).
inline int choose_action(const std::vector<double>& logits, const DecodeConfig& dc, std::mt19937_64& rng) {
  if (logits.empty()) throw std::invalid_argument("choose_action: no logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  if (dc.mode == Decode::Greedy || dc.temperature <= 0) return int(best);
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((logits[i] - logits[best]) / dc.temperature);
  double u = std::uniform_real_distribution<double>(0.0, z)(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return int(i);
    u -= p[i];
  }
  return int(best);
}

/// Logits at the last position of a single context.
template <typename T>
std::vector<double> last_logits(Transformer<T>& model, const std::vector<Token>& context,
                                const std::vector<match::IndexMatrix>* labels = nullptr,
                                std::shared_ptr<const Tensor<T>> features = nullptr) {
  if (context.empty()) throw std::invalid_argument("predict: empty context");
  const auto& cfg = model.config();
  ForwardInput<T> in;
  in.batch = 1;
  in.len = context.size();
  in.tokens = context;
  in.obs_features = std::move(features);
  if (cfg.uses_ngram()) in.masks = build_masks<T>(context, 1, context.size(), cfg.match_mode, cfg.ngram_max, labels);
  Graph<T> g;
  const auto& out = g.forward(model.forward(g, in));
  const std::size_t A = std::size_t(cfg.num_actions);
  std::vector<double> r(A);
  for (std::size_t a = 0; a < A; ++a) r[a] = double(out[(context.size() - 1) * A + a]);
  return r;
}

template <typename T>
int predict_action(Transformer<T>& model, const std::vector<Token>& context, const DecodeConfig& dc, std::mt19937_64& rng,
                   const std::vector<match::IndexMatrix>* labels = nullptr,
                   std::shared_ptr<const Tensor<T>> features = nullptr) {
  return choose_action(last_logits(model, context, labels, std::move(features)), dc, rng);
}

}  // namespace icrl::model
