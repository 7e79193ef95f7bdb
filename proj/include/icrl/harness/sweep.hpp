#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "icrl/harness/emp.hpp"
#include "icrl/model/train.hpp"

namespace icrl::harness {

using nlohmann::json;

enum class DistKind { Categorical, Uniform, LogUniform };

struct Distribution {
  DistKind kind = DistKind::Categorical;
  std::vector<json> values;
  double lo = 0;
  double hi = 0;

  static Distribution categorical(std::vector<json> v) { return {DistKind::Categorical, std::move(v), 0, 0}; }
  static Distribution uniform(double lo, double hi) { return {DistKind::Uniform, {}, lo, hi}; }
  static Distribution log_uniform(double lo, double hi) { return {DistKind::LogUniform, {}, lo, hi}; }

  void validate(const std::string& name) const {
    auto fail = [&](const std::string& m) { throw std::invalid_argument("sweep axis '" + name + "': " + m); };
    if (kind == DistKind::Categorical) {
      if (values.empty()) fail("categorical list is empty");
      return;
    }
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) fail("bounds must satisfy lo <= hi");
    if (kind == DistKind::LogUniform && lo <= 0) fail("log-uniform bounds must be positive");
  }

  json sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    switch (kind) {
      case DistKind::Categorical:
        return values[std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng)];
      case DistKind::Uniform:
        return lo + (hi - lo) * unit(rng);
      case DistKind::LogUniform:
        return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * unit(rng));
    }
    return nullptr;
  }

  json to_json() const {
    switch (kind) {
      case DistKind::Categorical: return {{"categorical", values}};
      case DistKind::Uniform: return {{"uniform", {lo, hi}}};
      case DistKind::LogUniform: return {{"log_uniform", {lo, hi}}};
    }
    return nullptr;
  }

  static Distribution from_json(const std::string& name, const json& j) {
    if (!j.is_object() || j.size() != 1) {
      throw std::invalid_argument("sweep axis '" + name + "': expected one of {categorical|uniform|log_uniform}");
    }
    const auto& [kind, arg] = *j.items().begin();
    Distribution d;
    if (kind == "categorical") {
      if (!arg.is_array()) throw std::invalid_argument("sweep axis '" + name + "': categorical needs a list");
      d = categorical(arg.get<std::vector<json>>());
    } else if (kind == "uniform" || kind == "log_uniform") {
      if (!arg.is_array() || arg.size() != 2) throw std::invalid_argument("sweep axis '" + name + "': bounds need [lo, hi]");
      d = kind == "uniform" ? uniform(arg[0].get<double>(), arg[1].get<double>())
                            : log_uniform(arg[0].get<double>(), arg[1].get<double>());
    } else {
      throw std::invalid_argument("sweep axis '" + name + "': unknown distribution '" + std::string(kind) + "'");
    }
    d.validate(name);
    return d;
  }
};

/// Sampled axes plus fixed fields shared by every trial.
struct SweepSpace {
  std::map<std::string, Distribution> axes;
  json fixed = json::object();

  void validate() const {
    for (const auto& [name, d] : axes) {
      d.validate(name);
      if (fixed.contains(name)) throw std::invalid_argument("sweep axis '" + name + "' is also fixed");
    }
  }

  json to_json() const {
    json a = json::object();
    for (const auto& [name, d] : axes) a[name] = d.to_json();
    return {{"axes", a}, {"fixed", fixed}};
  }

  static SweepSpace from_json(const json& j) {
    SweepSpace s;
    for (const auto& [k, v] : j.items()) {
      if (k != "axes" && k != "fixed") throw std::invalid_argument("sweep space: unknown key '" + k + "'");
    }
    if (j.contains("axes"))
      for (const auto& [name, d] : j.at("axes").items()) s.axes.emplace(name, Distribution::from_json(name, d));
    if (j.contains("fixed")) s.fixed = j.at("fixed");
    s.validate();
    return s;
  }

  /// Assignment `index` of a sweep seeded with `seed`; axes are visited in
  /// name order so the draw depends only on (space, seed, index).
  json sample(std::uint64_t seed, std::uint64_t index) const {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), std::uint32_t(index >> 32)};
    std::mt19937_64 rng(seq);
    json out = fixed;
    for (const auto& [name, d] : axes) out[name] = d.sample(rng);
    return out;
  }
};

/// Grid-world search space. Sequence length 60 is left out because it
/// cannot hold two 50-step episodes.
inline SweepSpace grid_space() {
  SweepSpace s;
  s.axes["embed_dropout"] = Distribution::uniform(0.0, 0.9);
  s.axes["context_len"] = Distribution::categorical({100, 160, 200});
  s.axes["subsample"] = Distribution::categorical({4, 8, 10, 20, 50});
  s.axes["resid_dropout"] = Distribution::uniform(0.0, 0.5);
  s.axes["label_smoothing"] = Distribution::uniform(0.0, 0.8);
  s.axes["lr"] = Distribution::log_uniform(1e-4, 1e-2);
  s.axes["weight_decay"] = Distribution::log_uniform(1e-7, 2e-2);
  s.axes["pre_norm"] = Distribution::categorical({false, true});
  s.axes["qk_norm"] = Distribution::categorical({false, true});
  s.fixed = {{"batch", 1024}, {"hidden", 512}, {"steps", 10000}};
  return s;
}

/// Adds the n-gram axes to a baseline space.
inline SweepSpace with_ngram_axes(SweepSpace s) {
  s.axes["ngram_positions"] = Distribution::categorical({json::array({1}), json::array({2}), json::array({1, 2})});
  s.axes["ngram_max"] = Distribution::categorical({1, 2});
  return s;
}

/// Applies assignment fields onto model and training configs. Unknown
/// fields throw so typos in a space file cannot silently do nothing.
inline void apply_assignment(const json& a, model::TransformerConfig& mc, model::TrainConfig& tc) {
  for (const auto& [k, v] : a.items()) {
    if (k == "embed_dropout") mc.embed_dropout = v.get<double>();
    else if (k == "resid_dropout") mc.resid_dropout = v.get<double>();
    else if (k == "context_len") mc.context_len = v.get<int>();
    else if (k == "pre_norm") mc.pre_norm = v.get<bool>();
    else if (k == "qk_norm") mc.qk_norm = v.get<bool>();
    else if (k == "ngram_positions") mc.ngram_positions = v.get<std::vector<int>>();
    else if (k == "ngram_max") mc.ngram_max = v.get<int>();
    else if (k == "hidden") mc.hidden = v.get<int>();
    else if (k == "layers") mc.layers = v.get<int>();
    else if (k == "heads") mc.heads = v.get<int>();
    else if (k == "match_mode") mc.match_mode = match::parse_match_mode(v.get<std::string>());
    else if (k == "subsample") tc.subsample = v.get<int>();
    else if (k == "label_smoothing") tc.label_smoothing = v.get<double>();
    else if (k == "lr") tc.lr = v.get<double>();
    else if (k == "weight_decay") tc.weight_decay = v.get<double>();
    else if (k == "batch") tc.batch = v.get<int>();
    else if (k == "steps") tc.steps = v.get<int>();
    else if (k == "warmup") tc.warmup = v.get<int>();
    else if (k == "grad_clip") tc.grad_clip = v.get<double>();
    else if (k == "permute_masks") tc.permute_masks = v.get<bool>();
    else throw std::invalid_argument("sweep assignment: unknown field '" + k + "'");
  }
}

struct SweepRecord {
  int index = 0;
  json params;
  double score = 0;
  double seconds = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;

  json to_json() const {
    json j{{"index", index}, {"params", params}, {"score", score}, {"seconds", seconds}, {"seed", seed}, {"failed", failed}};
    if (!error.empty()) j["error"] = error;
    return j;
  }
  static SweepRecord from_json(const json& j) {
    SweepRecord r;
    r.index = j.at("index").get<int>();
    r.params = j.at("params");
    r.score = j.at("score").get<double>();
    r.seconds = j.value("seconds", 0.0);
    r.seed = j.value("seed", std::uint64_t(0));
    r.failed = j.value("failed", false);
    r.error = j.value("error", std::string());
    if (!std::isfinite(r.score)) throw std::invalid_argument("sweep record: non-finite score");
    return r;
  }
};

/// Appends one record as a single line and flushes.
inline void append_record(const std::string& path, const SweepRecord& r) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot open " + path + " for append");
  os << r.to_json().dump() << '\n';
  os.flush();
}

/// Loads complete records; unparseable or truncated lines are skipped.
inline std::vector<SweepRecord> load_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<SweepRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(SweepRecord::from_json(json::parse(line)));
    } catch (const std::exception&) {
    }
  }
  return out;
}

inline std::vector<double> record_scores(const std::vector<SweepRecord>& records) {
  std::vector<double> s;
  s.reserve(records.size());
  for (const auto& r : records) s.push_back(r.score);
  return s;
}

/// Trains and evaluates one assignment; returns the evaluation score.
using TrialFn = std::function<double(const json& params, std::uint64_t trial_seed)>;

struct SweepOptions {
  int assignments = 1;
  std::uint64_t seed = 0;
  int workers = 1;
  /// Score given to a trial that throws.
  double failure_score = 0;
  /// Called under a lock as each record completes, e.g. to append to a log.
  std::function<void(const SweepRecord&)> on_record;
  int bootstrap = 1000;
};

struct SweepResult {
  std::vector<SweepRecord> records;  // by assignment index
  EmpCurve curve;
};

inline std::uint64_t trial_seed(std::uint64_t seed, int index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * std::uint64_t(index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline SweepResult random_sweep(const SweepSpace& space, const TrialFn& trial, const SweepOptions& opt) {
  space.validate();
  if (opt.assignments < 1) throw std::invalid_argument("sweep: need at least one assignment");
  SweepResult res;
  res.records.resize(std::size_t(opt.assignments));
  std::atomic<int> next{0};
  std::mutex mu;
  auto work = [&]() {
    for (int i = next++; i < opt.assignments; i = next++) {
      SweepRecord r;
      r.index = i;
      r.params = space.sample(opt.seed, std::uint64_t(i));
      r.seed = trial_seed(opt.seed, i);
      auto t0 = std::chrono::steady_clock::now();
      try {
        r.score = trial(r.params, r.seed);
        if (!std::isfinite(r.score)) throw std::runtime_error("non-finite score");
      } catch (const std::exception& e) {
        r.failed = true;
        r.error = e.what();
        r.score = opt.failure_score;
      }
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard<std::mutex> lock(mu);
      if (opt.on_record) opt.on_record(r);
      res.records[std::size_t(i)] = std::move(r);
    }
  };
  const int n_workers = std::max(1, std::min(opt.workers, opt.assignments));
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  res.curve = emp_curve(record_scores(res.records), opt.assignments, opt.bootstrap, opt.seed);
  return res;
}

}  // namespace icrl::harness
