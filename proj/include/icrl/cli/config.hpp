#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icrl/datagen/generators.hpp"
#include "icrl/model/train.hpp"
#include "icrl/quantizer/vq.hpp"

namespace icrl::cli {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EnvSection {
  std::string kind = "darkroom";
  int grid_size = 9;
  int episode_len = 50;
  int image_size = 32;
  bool show_key = false;
  int train_tasks = 20;
  int eval_tasks = 10;
  std::uint64_t split_seed = 1234;

  template <typename F>
  void fields(F&& f) {
    f("kind", kind);
    f("grid_size", grid_size);
    f("episode_len", episode_len);
    f("image_size", image_size);
    f("show_key", show_key);
    f("train_tasks", train_tasks);
    f("eval_tasks", eval_tasks);
    f("split_seed", split_seed);
  }

  envs::EnvConfig env_config() const {
    envs::EnvConfig c;
    c.kind = envs::parse_env_kind(kind);
    c.grid_size = grid_size;
    c.episode_len = episode_len;
    c.image_size = image_size;
    c.show_key = show_key;
    return c;
  }
};

struct DataSection {
  std::string generator = "oracle";
  int histories = 1000;
  int oracle_episodes = 10;
  std::string sampling = "round_robin";
  int workers = 1;
  int q_episodes = 500;
  double q_alpha = 0.1;
  double q_gamma = 0.9;
  double q_eps_start = 1.0;
  double q_eps_end = 0.01;
  int q_decay_episodes = 0;
  double q_init = 1.0;

  template <typename F>
  void fields(F&& f) {
    f("generator", generator);
    f("histories", histories);
    f("oracle_episodes", oracle_episodes);
    f("sampling", sampling);
    f("workers", workers);
    f("q_episodes", q_episodes);
    f("q_alpha", q_alpha);
    f("q_gamma", q_gamma);
    f("q_eps_start", q_eps_start);
    f("q_eps_end", q_eps_end);
    f("q_decay_episodes", q_decay_episodes);
    f("q_init", q_init);
  }
};

struct VqSection {
  int codebook_size = 64;
  int latent_dim = 32;
  int grid = 4;
  int channels = 32;
  double beta = 0.25;
  double lr = 1e-3;
  int dead_after = 100;
  int steps = 2000;
  int batch = 16;

  template <typename F>
  void fields(F&& f) {
    f("codebook_size", codebook_size);
    f("latent_dim", latent_dim);
    f("grid", grid);
    f("channels", channels);
    f("beta", beta);
    f("lr", lr);
    f("dead_after", dead_after);
    f("steps", steps);
    f("batch", batch);
  }

  vq::VqConfig vq_config(int image_size) const {
    vq::VqConfig c;
    c.codebook_size = codebook_size;
    c.latent_dim = latent_dim;
    c.grid = grid;
    c.image_size = image_size;
    c.channels = channels;
    c.beta = beta;
    c.lr = lr;
    c.dead_after = dead_after;
    return c;
  }
};

struct ModelSection {
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
  std::string match_mode = "state";

  template <typename F>
  void fields(F&& f) {
    f("layers", layers);
    f("hidden", hidden);
    f("heads", heads);
    f("context_len", context_len);
    f("mlp_ratio", mlp_ratio);
    f("pre_norm", pre_norm);
    f("qk_norm", qk_norm);
    f("embed_dropout", embed_dropout);
    f("resid_dropout", resid_dropout);
    f("ngram_positions", ngram_positions);
    f("ngram_max", ngram_max);
    f("match_mode", match_mode);
  }
};

struct TrainSection {
  int steps = 10000;
  int batch = 16;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  double label_smoothing = 0.0;
  double grad_clip = 1.0;
  int warmup = 200;
  int subsample = 1;
  bool permute_masks = false;
  int log_every = 100;

  template <typename F>
  void fields(F&& f) {
    f("steps", steps);
    f("batch", batch);
    f("lr", lr);
    f("weight_decay", weight_decay);
    f("label_smoothing", label_smoothing);
    f("grad_clip", grad_clip);
    f("warmup", warmup);
    f("subsample", subsample);
    f("permute_masks", permute_masks);
    f("log_every", log_every);
  }
};

struct EvalSection {
  int episodes = 20;
  std::vector<std::uint64_t> seeds{1, 2};
  std::string decode = "sample";
  double temperature = 0.45;

  template <typename F>
  void fields(F&& f) {
    f("episodes", episodes);
    f("seeds", seeds);
    f("decode", decode);
    f("temperature", temperature);
  }

  model::DecodeConfig decode_config() const {
    model::DecodeConfig d;
    if (decode == "greedy") d.mode = model::Decode::Greedy;
    else if (decode == "sample") d.mode = model::Decode::Sample;
    else throw ConfigError("eval.decode: expected 'greedy' or 'sample', got '" + decode + "'");
    d.temperature = temperature;
    return d;
  }
};

struct SweepSection {
  /// "grid", "grid-ngram" or a path to a space file.
  std::string space = "grid";
  int assignments = 8;
  int workers = 1;
  /// Fixed-field overrides applied on top of the space, e.g. desk-scale
  /// batch and step budgets.
  json fixed = json::object();

  template <typename F>
  void fields(F&& f) {
    f("space", space);
    f("assignments", assignments);
    f("workers", workers);
    f("fixed", fixed);
  }
};

struct PathsSection {
  std::string out = "run";
  std::string dataset;
  std::string vq;
  std::string model;
  std::string records;

  template <typename F>
  void fields(F&& f) {
    f("out", out);
    f("dataset", dataset);
    f("vq", vq);
    f("model", model);
    f("records", records);
  }
};

struct RunConfig {
  EnvSection env;
  DataSection data;
  VqSection vq;
  ModelSection model;
  TrainSection train;
  EvalSection eval;
  SweepSection sweep;
  PathsSection paths;
  std::uint64_t seed = 0;

  template <typename F>
  void sections(F&& f) {
    f("env", env);
    f("data", data);
    f("vq", vq);
    f("model", model);
    f("train", train);
    f("eval", eval);
    f("sweep", sweep);
    f("paths", paths);
  }

  json to_json() const;
  static RunConfig from_json(const json& j);
  void validate() const;

  model::TransformerConfig transformer_config() const;
  model::TrainConfig train_config() const;
};

namespace detail {

template <typename Section>
json section_to_json(Section s) {
  json j = json::object();
  s.fields([&](const char* name, const auto& v) { j[name] = v; });
  return j;
}

template <typename Section>
void section_from_json(const std::string& sname, const json& j, Section& s) {
  if (!j.is_object()) throw ConfigError("section '" + sname + "' must be an object");
  std::set<std::string> known;
  s.fields([&](const char* name, auto& v) {
    known.insert(name);
    if (!j.contains(name)) return;
    try {
      j.at(name).get_to(v);
    } catch (const json::exception&) {
      throw ConfigError("bad value for " + sname + "." + name + ": " + j.at(name).dump());
    }
  });
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key '" + sname + "." + k + "'");
  }
}

}  // namespace detail

inline json RunConfig::to_json() const {
  RunConfig c = *this;
  json j = json::object();
  c.sections([&](const char* name, auto& s) { j[name] = detail::section_to_json(s); });
  j["seed"] = seed;
  return j;
}

inline RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::set<std::string> known{"seed"};
  c.sections([&](const char* name, auto& s) {
    known.insert(name);
    if (j.contains(name)) detail::section_from_json(name, j.at(name), s);
  });
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "'");
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.validate();
  return c;
}

inline model::TransformerConfig RunConfig::transformer_config() const {
  model::TransformerConfig mc;
  mc.layers = model.layers;
  mc.hidden = model.hidden;
  mc.heads = model.heads;
  mc.context_len = model.context_len;
  mc.mlp_ratio = model.mlp_ratio;
  mc.pre_norm = model.pre_norm;
  mc.qk_norm = model.qk_norm;
  mc.embed_dropout = model.embed_dropout;
  mc.resid_dropout = model.resid_dropout;
  mc.ngram_positions = model.ngram_positions;
  mc.ngram_max = model.ngram_max;
  mc.match_mode = match::parse_match_mode(model.match_mode);
  const auto kind = envs::parse_env_kind(env.kind);
  mc.obs_dim = env.grid_size * env.grid_size;
  if (envs::has_images(kind)) {
    mc.obs_input = model::ObsInput::Latent;
    mc.obs_dim = vq.grid * vq.grid * vq.latent_dim;
  }
  return mc;
}

inline model::TrainConfig RunConfig::train_config() const {
  model::TrainConfig tc;
  tc.steps = train.steps;
  tc.batch = train.batch;
  tc.lr = train.lr;
  tc.weight_decay = train.weight_decay;
  tc.label_smoothing = train.label_smoothing;
  tc.grad_clip = train.grad_clip;
  tc.warmup = train.warmup;
  tc.subsample = train.subsample;
  tc.permute_masks = train.permute_masks;
  tc.seed = seed;
  return tc;
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  try {
    auto ec = env.env_config();
    envs::GridEnv check(ec);
    (void)check;
    if (envs::has_images(ec.kind)) vq.vq_config(env.image_size).validate();
    transformer_config().validate(env.episode_len);
    eval.decode_config();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (env.train_tasks < 1) fail("env.train_tasks must be >= 1");
  if (env.eval_tasks < 1) fail("env.eval_tasks must be >= 1");
  if (data.generator != "oracle" && data.generator != "qlearning") fail("data.generator must be 'oracle' or 'qlearning'");
  if (data.sampling != "round_robin" && data.sampling != "with_replacement") {
    fail("data.sampling must be 'round_robin' or 'with_replacement'");
  }
  if (data.histories < 1) fail("data.histories must be >= 1");
  if (data.oracle_episodes < 1 || data.q_episodes < 1) fail("data episode counts must be >= 1");
  if (train.steps < 0 || train.batch < 1) fail("train.steps must be >= 0 and train.batch >= 1");
  if (train.lr <= 0 || train.weight_decay < 0) fail("train.lr must be > 0 and weight_decay >= 0");
  if (train.label_smoothing < 0 || train.label_smoothing >= 1) fail("train.label_smoothing must be in [0, 1)");
  if (train.subsample < 1) fail("train.subsample must be >= 1");
  if (train.log_every < 1) fail("train.log_every must be >= 1");
  if (vq.steps < 0 || vq.batch < 1) fail("vq.steps must be >= 0 and vq.batch >= 1");
  if (eval.episodes < 1) fail("eval.episodes must be >= 1");
  if (eval.seeds.empty()) fail("eval.seeds must not be empty");
  if (eval.temperature <= 0) fail("eval.temperature must be > 0");
  if (sweep.assignments < 1 || sweep.workers < 1) fail("sweep.assignments and sweep.workers must be >= 1");
  if (!sweep.fixed.is_object()) fail("sweep.fixed must be an object");
}

/// Sets `path` ("section.key" or "seed") in a JSON config from flag text.
/// The text is parsed as JSON when possible, otherwise kept as a string.
inline void set_override(json& cfg, const std::string& path, const std::string& text) {
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  auto dot = path.find('.');
  if (dot == std::string::npos) {
    cfg[path] = value;
  } else {
    cfg[path.substr(0, dot)][path.substr(dot + 1)] = value;
  }
}

/// Reads an optional config file (empty file = all defaults), applies
/// overrides in order, then validates.
inline RunConfig resolve_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides) {
  json j = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("config file not found: " + file);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
      try {
        j = json::parse(text);
      } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + file + ": " + e.what());
      }
    }
  }
  for (const auto& [path, text] : overrides) set_override(j, path, text);
  return RunConfig::from_json(j);
}

}  // namespace icrl::cli
