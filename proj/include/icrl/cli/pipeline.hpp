#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "icrl/cli/config.hpp"
#include "icrl/datagen/dataset_io.hpp"
#include "icrl/harness/emp.hpp"
#include "icrl/harness/pixel.hpp"
#include "icrl/harness/rollout.hpp"
#include "icrl/harness/sweep.hpp"
#include "icrl/model/checkpoint.hpp"
#include "icrl/quantizer/vq.hpp"

namespace icrl::cli {

namespace fs = std::filesystem;

struct Split {
  std::string env;
  std::vector<int> train;
  std::vector<int> eval;

  json to_json() const { return {{"env", env}, {"train", train}, {"eval", eval}}; }
  static Split from_json(const json& j) {
    return {j.at("env").get<std::string>(), j.at("train").get<std::vector<int>>(), j.at("eval").get<std::vector<int>>()};
  }
};

inline std::string split_path(const std::string& dataset) { return dataset + ".split.json"; }

inline void write_text(const std::string& path, const std::string& text) {
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("file not found: " + path);
  return json::parse(in);
}

inline Split read_split(const std::string& dataset) { return Split::from_json(read_json(split_path(dataset))); }

/// Writes the resolved config next to a run's outputs.
inline void echo_config(const RunConfig& cfg, const std::string& name = "config.json") {
  write_text((fs::path(cfg.paths.out) / name).string(), cfg.to_json().dump(2) + "\n");
}

inline std::string out_file(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.paths.out) / name).string(); }
inline std::string dataset_file(const RunConfig& cfg) {
  return cfg.paths.dataset.empty() ? out_file(cfg, "dataset.bin") : cfg.paths.dataset;
}
inline std::string vq_file(const RunConfig& cfg) { return cfg.paths.vq.empty() ? out_file(cfg, "vq.bin") : cfg.paths.vq; }
inline std::string model_file(const RunConfig& cfg) {
  return cfg.paths.model.empty() ? out_file(cfg, "model.bin") : cfg.paths.model;
}

inline data::GenerationSpec generation_spec(const RunConfig& cfg, const std::vector<envs::Task>& train) {
  data::GenerationSpec spec;
  spec.env = cfg.env.env_config();
  spec.tasks = train;
  spec.histories = cfg.data.histories;
  spec.generator = cfg.data.generator == "oracle" ? data::GeneratorTag::OracleNoise : data::GeneratorTag::QLearning;
  spec.oracle_episodes = cfg.data.oracle_episodes;
  spec.sampling = cfg.data.sampling == "round_robin" ? data::TaskSampling::RoundRobin : data::TaskSampling::WithReplacement;
  spec.seed = cfg.seed;
  spec.workers = cfg.data.workers;
  auto& q = spec.qlearning;
  q.episodes = cfg.data.q_episodes;
  q.alpha = cfg.data.q_alpha;
  q.gamma = cfg.data.q_gamma;
  q.eps_start = cfg.data.q_eps_start;
  q.eps_end = cfg.data.q_eps_end;
  q.decay_episodes = cfg.data.q_decay_episodes;
  q.q_init = cfg.data.q_init;
  return spec;
}

inline envs::TaskSplit make_split(const RunConfig& cfg) {
  auto ec = cfg.env.env_config();
  return envs::split_tasks(envs::enumerate_tasks(ec), cfg.env.train_tasks, cfg.env.split_seed, cfg.env.eval_tasks);
}

inline std::vector<int> task_ids(const std::vector<envs::Task>& ts) {
  std::vector<int> ids;
  for (const auto& t : ts) ids.push_back(t.id);
  return ids;
}

/// gen-data: dataset file, split manifest and resolved config.
inline data::Dataset run_gen_data(const RunConfig& cfg, std::ostream& log) {
  auto split = make_split(cfg);
  auto ds = data::generate_dataset(generation_spec(cfg, split.train));
  const auto path = dataset_file(cfg);
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  data::write_dataset(ds, path);
  Split s{cfg.env.kind, task_ids(split.train), task_ids(split.eval)};
  write_text(split_path(path), s.to_json().dump(2) + "\n");
  echo_config(cfg);
  log << "wrote " << ds.histories.size() << " histories over " << split.train.size() << " tasks to " << path << "\n";
  return ds;
}

/// Trains a VQ model on the distinct images of a dataset; logs every step.
inline vq::VqModel train_vq(const RunConfig& cfg, const data::ImageStore& images,
                            const std::function<void(int, const vq::VqLosses&)>& on_step = {}) {
  if (images.empty()) throw std::invalid_argument("train-vq: dataset has no images");
  vq::VqModel m(cfg.vq.vq_config(cfg.env.image_size), cfg.seed);
  vq::VqTrainer t(m);
  std::mt19937_64 rng(cfg.seed ^ 0x7651ull);
  std::uniform_int_distribution<std::uint32_t> pick(0, std::uint32_t(images.size() - 1));
  for (int s = 1; s <= cfg.vq.steps; ++s) {
    std::vector<const envs::Image*> batch;
    for (int i = 0; i < cfg.vq.batch; ++i) batch.push_back(&images.at(pick(rng)));
    auto l = t.step(batch);
    if (on_step) on_step(s, l);
  }
  return m;
}

inline vq::VqModel run_train_vq(const RunConfig& cfg, std::ostream& log) {
  auto ds = data::read_dataset(dataset_file(cfg));
  std::ostringstream csv;
  csv << "step,total,reconstruction,codebook,commitment\n" << std::setprecision(8);
  auto m = train_vq(cfg, ds.images, [&](int s, const vq::VqLosses& l) {
    csv << s << ',' << l.total << ',' << l.reconstruction << ',' << l.codebook << ',' << l.commitment << '\n';
  });
  vq::save_vq(vq_file(cfg), m);
  write_text(out_file(cfg, "vq_loss.csv"), csv.str());
  echo_config(cfg, "config_vq.json");
  log << "trained VQ on " << ds.images.size() << " distinct images, wrote " << vq_file(cfg) << "\n";
  return m;
}

/// Trains a transformer on dataset histories. `labels` must be given for
/// image datasets. `on_log` receives (step, mean loss since last report).
inline model::Transformer<float> train_transformer(const model::TransformerConfig& mc, const model::TrainConfig& tc,
                                                   const data::Dataset& ds, const vq::VqLabels* labels, int log_every,
                                                   const std::function<void(int, double)>& on_log = {}) {
  if (envs::has_images(ds.env_kind) && labels == nullptr) throw std::invalid_argument("train: image dataset needs VQ labels");
  model::Transformer<float> m(mc, tc.seed);
  model::Trainer<float> trainer(m, tc);
  model::WindowSampler sampler(ds.histories, tc.subsample, std::size_t(mc.context_len));
  std::mt19937_64 rng(tc.seed ^ 0xba7cull);
  double acc = 0;
  int n = 0;
  for (int s = 1; s <= tc.steps; ++s) {
    auto batch = model::sample_batch<float>(sampler, mc, std::size_t(tc.batch), rng,
                                            tc.permute_masks ? std::uint64_t(s) + (tc.seed << 20) : 0,
                                            labels ? &labels->index : nullptr, labels ? labels->features : nullptr);
    acc += trainer.train_step(batch);
    ++n;
    if (s % log_every == 0 || s == tc.steps) {
      if (on_log) on_log(s, acc / n);
      acc = 0;
      n = 0;
    }
  }
  return m;
}

inline std::optional<vq::VqLabels> labels_for(const RunConfig& cfg, const data::Dataset& ds, std::optional<vq::VqModel>& vqm) {
  if (!envs::has_images(ds.env_kind)) return std::nullopt;
  vqm = vq::load_vq(vq_file(cfg));
  return vq::vq_label_dataset(*vqm, ds, cfg.data.workers);
}

inline model::Transformer<float> run_train(const RunConfig& cfg, std::ostream& log) {
  auto ds = data::read_dataset(dataset_file(cfg));
  std::optional<vq::VqModel> vqm;
  auto labels = labels_for(cfg, ds, vqm);
  std::ostringstream csv;
  csv << "step,loss\n" << std::setprecision(9);
  auto m = train_transformer(cfg.transformer_config(), cfg.train_config(), ds, labels ? &*labels : nullptr,
                             cfg.train.log_every, [&](int s, double l) { csv << s << ',' << l << '\n'; });
  model::save_model(model_file(cfg), m, vqm ? vq_file(cfg) : "");
  write_text(out_file(cfg, "loss.csv"), csv.str());
  echo_config(cfg);
  log << "trained " << m.parameter_count() << " parameters for " << cfg.train.steps << " steps, wrote " << model_file(cfg)
      << "\n";
  return m;
}

inline std::vector<envs::Task> tasks_from_ids(const envs::EnvConfig& ec, const std::vector<int>& ids) {
  std::vector<envs::Task> ts;
  for (int id : ids) ts.push_back(envs::task_by_id(ec, id));
  return ts;
}

/// Evaluates on the held-out tasks of the split; refuses training ids.
inline harness::EvalResult evaluate_model(const RunConfig& cfg, model::Transformer<float>& m, const vq::VqModel* vqm,
                                          const Split& split) {
  auto ec = cfg.env.env_config();
  if (split.env != cfg.env.kind) throw std::invalid_argument("split was made for env '" + split.env + "'");
  auto tasks = tasks_from_ids(ec, split.eval);
  std::set<int> train(split.train.begin(), split.train.end());
  auto dc = cfg.eval.decode_config();
  if (envs::has_images(ec.kind)) {
    if (!vqm) throw std::invalid_argument("eval: pixel env needs a VQ model");
    harness::PixelModelPolicy pol(m, dc, *vqm);
    if (cfg.train.permute_masks) pol.permute_masks(cfg.seed + 1);
    return harness::evaluate(pol, ec, tasks, cfg.eval.episodes, cfg.eval.seeds, m.config().context_len, train, dc);
  }
  harness::ModelPolicy pol(m, dc);
  if (cfg.train.permute_masks) pol.permute_masks(cfg.seed + 1);
  return harness::evaluate(pol, ec, tasks, cfg.eval.episodes, cfg.eval.seeds, m.config().context_len, train, dc);
}

inline json record_json(const harness::RolloutRecord& r) {
  return {{"task", r.task_id},
          {"seed", r.seed},
          {"decode", r.decode.mode == model::Decode::Greedy ? "greedy" : "sample"},
          {"temperature", r.decode.temperature},
          {"returns", r.returns}};
}

inline harness::EvalResult run_eval(const RunConfig& cfg, std::ostream& log) {
  auto ck = model::load_model(model_file(cfg));
  std::optional<vq::VqModel> vqm;
  if (envs::has_images(envs::parse_env_kind(cfg.env.kind))) {
    vqm = vq::load_vq(cfg.paths.vq.empty() && !ck.vq_reference.empty() ? ck.vq_reference : vq_file(cfg));
  }
  auto split = read_split(dataset_file(cfg));
  auto res = evaluate_model(cfg, ck.model, vqm ? &*vqm : nullptr, split);
  std::ostringstream lines;
  for (const auto& r : res.records) lines << record_json(r).dump() << '\n';
  write_text(out_file(cfg, "eval.jsonl"), lines.str());
  json summary{{"score", res.score}, {"curve", res.curve}};
  for (const auto& [id, s] : res.per_task) summary["per_task"][std::to_string(id)] = s;
  write_text(out_file(cfg, "eval_summary.json"), summary.dump(2) + "\n");
  echo_config(cfg, "config_eval.json");
  log << "score " << res.score << " over " << split.eval.size() << " held-out tasks\n";
  return res;
}

inline harness::SweepSpace sweep_space(const RunConfig& cfg) {
  harness::SweepSpace s;
  if (cfg.sweep.space == "grid") s = harness::grid_space();
  else if (cfg.sweep.space == "grid-ngram") s = harness::with_ngram_axes(harness::grid_space());
  else s = harness::SweepSpace::from_json(read_json(cfg.sweep.space));
  for (const auto& [k, v] : cfg.sweep.fixed.items()) {
    s.axes.erase(k);
    s.fixed[k] = v;
  }
  s.validate();
  return s;
}

/// Runs the sweep over the configured dataset; each trial trains from the
/// run config with the assignment applied, then evaluates held-out tasks.
inline harness::SweepResult run_sweep(const RunConfig& cfg, std::ostream& log) {
  auto ds = data::read_dataset(dataset_file(cfg));
  auto split = read_split(dataset_file(cfg));
  std::optional<vq::VqModel> vqm;
  auto labels = labels_for(cfg, ds, vqm);
  auto space = sweep_space(cfg);
  const std::string records = cfg.paths.records.empty() ? out_file(cfg, "sweep.jsonl") : cfg.paths.records;
  fs::create_directories(cfg.paths.out);
  write_text(out_file(cfg, "space.json"), space.to_json().dump(2) + "\n");
  echo_config(cfg);
  std::ofstream(records, std::ios::trunc).close();

  auto trial = [&](const json& params, std::uint64_t seed) {
    auto mc = cfg.transformer_config();
    auto tc = cfg.train_config();
    harness::apply_assignment(params, mc, tc);
    tc.seed = seed;
    mc.validate(cfg.env.episode_len);
    auto m = train_transformer(mc, tc, ds, labels ? &*labels : nullptr, std::max(1, tc.steps));
    return evaluate_model(cfg, m, vqm ? &*vqm : nullptr, split).score;
  };
  harness::SweepOptions opt;
  opt.assignments = cfg.sweep.assignments;
  opt.seed = cfg.seed;
  opt.workers = cfg.sweep.workers;
  opt.failure_score = 0.0;  // both envs have minimum return 0
  opt.on_record = [&](const harness::SweepRecord& r) {
    harness::append_record(records, r);
    log << "assignment " << r.index << " score " << r.score << (r.failed ? " (failed: " + r.error + ")" : "") << "\n";
  };
  auto res = harness::random_sweep(space, trial, opt);
  std::ostringstream csv;
  res.curve.write_csv(csv);
  write_text(out_file(cfg, "emp.csv"), csv.str());
  return res;
}

inline harness::EmpCurve run_emp(const RunConfig& cfg, int budget, std::ostream& log) {
  if (cfg.paths.records.empty()) throw std::invalid_argument("emp: --records is required");
  auto recs = harness::load_records(cfg.paths.records);
  if (recs.empty()) throw std::runtime_error("emp: no complete records in " + cfg.paths.records);
  auto curve = harness::emp_curve(harness::record_scores(recs), budget, 1000, cfg.seed);
  std::ostringstream csv;
  curve.write_csv(csv);
  write_text(out_file(cfg, "emp.csv"), csv.str());
  log << "EMP over " << recs.size() << " records, budget " << budget << ", wrote " << out_file(cfg, "emp.csv") << "\n";
  return curve;
}

/// plot: CSV series for external plotting. Sweep records give return vs.
/// assignment (with running best); eval records give mean return per episode.
inline void run_plot(const RunConfig& cfg, std::ostream& log) {
  if (cfg.paths.records.empty()) throw std::invalid_argument("plot: --records is required");
  std::ifstream in(cfg.paths.records);
  if (!in) throw std::runtime_error("file not found: " + cfg.paths.records);
  std::string first;
  std::getline(in, first);
  json probe = json::parse(first, nullptr, false);
  if (!probe.is_discarded() && probe.contains("returns")) {
    std::vector<double> sum, sq;
    std::size_t n = 0;
    std::string line = first;
    do {
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("returns")) continue;
      auto r = j["returns"].get<std::vector<double>>();
      if (sum.size() < r.size()) sum.resize(r.size()), sq.resize(r.size());
      for (std::size_t e = 0; e < r.size(); ++e) sum[e] += r[e], sq[e] += r[e] * r[e];
      ++n;
    } while (std::getline(in, line));
    std::ostringstream csv;
    csv << "episode,mean_return,std\n" << std::setprecision(8);
    for (std::size_t e = 0; e < sum.size(); ++e) {
      double m = sum[e] / double(n);
      csv << e + 1 << ',' << m << ',' << std::sqrt(std::max(0.0, sq[e] / double(n) - m * m)) << '\n';
    }
    write_text(out_file(cfg, "episode_curve.csv"), csv.str());
    log << "wrote " << out_file(cfg, "episode_curve.csv") << "\n";
    return;
  }
  auto recs = harness::load_records(cfg.paths.records);
  std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  std::ostringstream csv;
  csv << "assignment,score,best_so_far\n" << std::setprecision(8);
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : recs) {
    best = std::max(best, r.score);
    csv << r.index << ',' << r.score << ',' << best << '\n';
  }
  write_text(out_file(cfg, "return_vs_assignments.csv"), csv.str());
  log << "wrote " << out_file(cfg, "return_vs_assignments.csv") << "\n";
}

}  // namespace icrl::cli
