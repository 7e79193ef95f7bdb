#include <CLI11.hpp>

#include <deque>
#include <iostream>
#include <memory>

#include "icrl/cli/pipeline.hpp"

using namespace icrl;

namespace {

struct Command {
  CLI::App* app = nullptr;
  std::string config;
  std::vector<std::string> sets;
  // Flag text keyed by the config path it overrides, in declaration order.
  std::vector<std::pair<std::string, std::string>> flags;
  std::deque<std::string> values;

  void flag(const std::string& name, const std::string& path, const std::string& help) {
    values.emplace_back();
    flags.emplace_back(path, "");
    app->add_option(name, values.back(), help);
  }
};

Command& add_command(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds, const std::string& name,
                     const std::string& help) {
  auto c = std::make_unique<Command>();
  c->app = root.add_subcommand(name, help);
  c->app->add_option("--config", c->config, "JSON run config (empty file = defaults)");
  c->app->add_option("--set", c->sets, "override any config field: section.key=value");
  c->flag("--out", "paths.out", "output directory");
  c->flag("--seed", "seed", "global seed");
  cmds.push_back(std::move(c));
  return *cmds.back();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context RL toolkit: data generation, training, evaluation and sweeps"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> cmds;

  auto& gen = add_command(app, cmds, "gen-data", "generate learning histories");
  gen.flag("--env", "env.kind", "darkroom | keytodoor | pixel");
  gen.flag("--tasks", "env.train_tasks", "number of training tasks");
  gen.flag("--eval-tasks", "env.eval_tasks", "number of held-out tasks");
  gen.flag("--histories", "data.histories", "number of learning histories");
  gen.flag("--generator", "data.generator", "oracle | qlearning");
  gen.flag("--episodes", "data.oracle_episodes", "episodes per oracle-noise history");
  gen.flag("--workers", "data.workers", "generation threads");
  gen.flag("--dataset", "paths.dataset", "dataset path");

  auto& tvq = add_command(app, cmds, "train-vq", "train the VQ encoder on dataset images");
  tvq.flag("--dataset", "paths.dataset", "dataset path");
  tvq.flag("--steps", "vq.steps", "training steps");
  tvq.flag("--codebook-size", "vq.codebook_size", "codebook vectors");
  tvq.flag("--latent-dim", "vq.latent_dim", "codebook vector width");
  tvq.flag("--grid", "vq.grid", "index matrix side");
  tvq.flag("--vq", "paths.vq", "VQ checkpoint path");
  tvq.flag("--env", "env.kind", "env kind of the dataset");

  auto& tr = add_command(app, cmds, "train", "train a transformer on a dataset");
  tr.flag("--dataset", "paths.dataset", "dataset path");
  tr.flag("--vq", "paths.vq", "VQ checkpoint (pixel env)");
  tr.flag("--model", "paths.model", "output checkpoint path");
  tr.flag("--env", "env.kind", "env kind of the dataset");
  tr.flag("--steps", "train.steps", "update steps");
  tr.flag("--batch", "train.batch", "batch size");
  tr.flag("--lr", "train.lr", "learning rate");
  tr.flag("--ngram", "model.ngram_positions", "n-gram layer positions, e.g. [1]");

  auto& ev = add_command(app, cmds, "eval", "evaluate a checkpoint on held-out tasks");
  ev.flag("--model", "paths.model", "checkpoint path");
  ev.flag("--dataset", "paths.dataset", "dataset whose split manifest names the held-out tasks");
  ev.flag("--vq", "paths.vq", "VQ checkpoint (pixel env)");
  ev.flag("--env", "env.kind", "env kind");
  ev.flag("--episodes", "eval.episodes", "episodes per rollout");
  ev.flag("--decode", "eval.decode", "greedy | sample");
  ev.flag("--temperature", "eval.temperature", "sampling temperature");

  auto& sw = add_command(app, cmds, "sweep", "random hyperparameter sweep");
  sw.flag("--dataset", "paths.dataset", "dataset path");
  sw.flag("--vq", "paths.vq", "VQ checkpoint (pixel env)");
  sw.flag("--env", "env.kind", "env kind");
  sw.flag("--space", "sweep.space", "grid | grid-ngram | space file");
  sw.flag("--assignments", "sweep.assignments", "number of assignments");
  sw.flag("--workers", "sweep.workers", "parallel trials");
  sw.flag("--records", "paths.records", "record log path");

  auto& em = add_command(app, cmds, "emp", "expected maximum performance from sweep records");
  em.flag("--records", "paths.records", "record log");
  int budget = 0;
  em.app->add_option("--budget", budget, "largest budget")->required();

  auto& pl = add_command(app, cmds, "plot", "CSV series from sweep or eval records");
  pl.flag("--records", "paths.records", "sweep.jsonl or eval.jsonl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (auto& c : cmds) {
      if (!c->app->parsed()) continue;
      std::vector<std::pair<std::string, std::string>> ov;
      for (const auto& s : c->sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw cli::ConfigError("--set expects key=value, got '" + s + "'");
        ov.emplace_back(s.substr(0, eq), s.substr(eq + 1));
      }
      for (std::size_t i = 0; i < c->flags.size(); ++i)
        if (!c->values[i].empty()) ov.emplace_back(c->flags[i].first, c->values[i]);
      auto cfg = cli::resolve_config(c->config, ov);
      const std::string name = c->app->get_name();
      if (name == "gen-data") cli::run_gen_data(cfg, std::cout);
      else if (name == "train-vq") cli::run_train_vq(cfg, std::cout);
      else if (name == "train") cli::run_train(cfg, std::cout);
      else if (name == "eval") cli::run_eval(cfg, std::cout);
      else if (name == "sweep") cli::run_sweep(cfg, std::cout);
      else if (name == "emp") cli::run_emp(cfg, budget, std::cout);
      else if (name == "plot") cli::run_plot(cfg, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
