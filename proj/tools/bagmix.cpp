// bagmix: synth | pretrain | finetune | al | eval
//
//   bagmix synth    --config run.json --out data/
//   bagmix pretrain --config run.json --out runs/pt [--epochs 50]
//   bagmix finetune --config run.json --out runs/ft --init runs/pt/checkpoint.pmck
//   bagmix al       --config run.json --out runs/al --strategy badge   (or --strategy all)
//   bagmix eval     --config run.json --checkpoint runs/ft/checkpoint.pmck [--split test]

#include "bagmix/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace bagmix;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed override");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.al.seed = *c.seed;
  }
  return cfg;
}

BagStore open_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw std::invalid_argument("config has no 'dataset' manifest path");
  return BagStore(load_manifest(cfg.dataset));
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void print_epoch(const MetricsRecord& r) {
  std::printf("%s epoch %3d  loss %.6f", r.phase.c_str(), r.epoch, r.loss);
  if (r.accuracy) std::printf("  acc %.4f", *r.accuracy);
  std::printf("\n");
  std::fflush(stdout);
}

int cmd_synth(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) cfg.synth.seed = *c.seed;
  const auto m = synth_dataset(cfg.synth, c.out);
  std::map<std::string, std::array<int, 3>> counts;  // split -> {n, tumor, normal}
  for (const auto& e : m.entries) {
    auto& k = counts[to_string(e.split)];
    ++k[0];
    ++k[*e.label == 1 ? 1 : 2];
  }
  for (const auto& [split, k] : counts)
    std::printf("%-8s %4d slides  (%d tumor, %d normal)\n", split.c_str(), k[0], k[1], k[2]);
  std::printf("manifest %s\n", (fs::path(c.out) / "manifest.json").c_str());
  return 0;
}

int cmd_pretrain(const Common& c, std::optional<int> epochs) {
  RunConfig cfg = resolve(c);
  if (epochs) cfg.pretrain.epochs = *epochs;
  cfg.validate();
  const BagStore store = open_dataset(cfg);
  fs::create_directories(c.out);
  const auto hash = config_hash(cfg);
  write_json(fs::path(c.out) / "config.json", to_json(cfg));
  MetricsLog log(fs::path(c.out) / "metrics.jsonl", hash);
  auto res = pretrain(cfg, store, [&](const MetricsRecord& r) {
    log.write(r);
    print_epoch(r);
  });
  save_checkpoint({std::move(res.params), cfg.pretrain.epochs, hash}, fs::path(c.out) / "checkpoint.pmck");
  std::printf("checkpoint %s  config %s\n", (fs::path(c.out) / "checkpoint.pmck").c_str(), hash.c_str());
  return 0;
}

int cmd_finetune(const Common& c, const std::string& init, std::optional<int> epochs) {
  RunConfig cfg = resolve(c);
  if (!init.empty()) cfg.init = init;
  if (epochs) cfg.finetune.epochs = *epochs;
  cfg.validate();
  const BagStore store = open_dataset(cfg);
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& id : store.ids(Split::kPool)) {
    const auto& label = store.at(id).label;
    if (!label) throw std::invalid_argument("finetune: pool slide '" + id + "' has no label");
    ids.push_back(id);
    labels.push_back(*label);
  }
  fs::create_directories(c.out);
  const auto hash = config_hash(cfg);
  write_json(fs::path(c.out) / "config.json", to_json(cfg));
  MetricsLog log(fs::path(c.out) / "metrics.jsonl", hash);
  auto res = finetune(cfg, store, initial_params(cfg), ids, labels, store.ids(Split::kTest),
                      fnv1a64("finetune", cfg.seed), [&](const MetricsRecord& r) {
                        log.write(r);
                        print_epoch(r);
                      });
  save_checkpoint({std::move(res.params), cfg.finetune.epochs, hash}, fs::path(c.out) / "checkpoint.pmck");
  std::printf("test accuracy %.4f  config %s\n", res.test_accuracy, hash.c_str());
  return 0;
}

int cmd_al(const Common& c, const std::string& init, const std::string& strategy, std::optional<int> epochs) {
  RunConfig cfg = resolve(c);
  if (!init.empty()) cfg.init = init;
  if (epochs) cfg.finetune.epochs = *epochs;
  cfg.finetune.eval_every_epoch = false;
  std::vector<Strategy> strategies;
  if (strategy == "all") {
    strategies = all_strategies();
  } else {
    if (!strategy.empty()) cfg.al.strategy = strategy_from_string(strategy);
    strategies = {cfg.al.strategy};
  }
  cfg.validate();
  const BagStore store = open_dataset(cfg);
  fs::create_directories(c.out);
  const auto hash = config_hash(cfg);
  write_json(fs::path(c.out) / "config.json", to_json(cfg));
  std::ofstream history(fs::path(c.out) / "history.jsonl", std::ios::trunc);
  const auto sweep = al_sweep(cfg, store, initial_params(cfg), strategies, [&](const ALRecord& r) {
    history << to_json(r).dump() << '\n' << std::flush;
    std::printf("%-9s iter %d  labeled %3zu  acc %.4f\n", r.strategy.c_str(), r.iter, r.labeled_count,
                r.test_accuracy);
    std::fflush(stdout);
  });
  nlohmann::json grid{{"config_hash", hash}, {"budgets", nlohmann::json::array()}, {"accuracy", sweep.grid}};
  for (int i = 0; i < cfg.al.iterations; ++i)
    grid["budgets"].push_back(cfg.al.initial + static_cast<std::size_t>(i) * cfg.al.budget);
  write_json(fs::path(c.out) / "grid.json", grid);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  const RunConfig cfg = resolve(c);
  const BagStore store = open_dataset(cfg);
  const auto ck = load_checkpoint(checkpoint, &cfg.arch);
  const auto& ids = store.ids(split_from_string(split));
  const double acc = accuracy(ck.params, store, ids);
  const nlohmann::json out{{"split", split}, {"slides", ids.size()}, {"accuracy", acc},
                           {"checkpoint_config_hash", ck.config_hash}, {"config_hash", config_hash(cfg)}};
  std::printf("%s\n", out.dump().c_str());
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "eval.json", out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slide-mixing pre-training, mixup fine-tuning and active learning on feature bags"};
  app.require_subcommand(1);

  Common synth_c, pre_c, ft_c, al_c, eval_c;
  std::optional<int> pre_epochs, ft_epochs, al_epochs;
  std::string ft_init, al_init, al_strategy, checkpoint, split = "test";

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(synth, synth_c);
  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
  add_common(pre, pre_c);
  pre->add_option("--epochs", pre_epochs, "pre-training epochs")->check(CLI::PositiveNumber);
  auto* ft = app.add_subcommand("finetune", "supervised fine-tuning on the labeled pool");
  add_common(ft, ft_c);
  ft->add_option("--init", ft_init, "checkpoint to start from (default: config 'init')");
  ft->add_option("--epochs", ft_epochs, "fine-tuning epochs")->check(CLI::PositiveNumber);
  auto* al = app.add_subcommand("al", "active-learning loop");
  add_common(al, al_c);
  al->add_option("--init", al_init, "checkpoint every iteration restarts from");
  al->add_option("--strategy", al_strategy, "random|entropy|kmeanspp|coreset|badge|cdal|all");
  al->add_option("--epochs", al_epochs, "fine-tuning epochs per iteration")->check(CLI::PositiveNumber);
  auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint on a split");
  add_common(ev, eval_c, false);
  ev->add_option("--checkpoint,--init", checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--split", split, "pretrain|pool|test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*synth) return cmd_synth(synth_c);
    if (*pre) return cmd_pretrain(pre_c, pre_epochs);
    if (*ft) return cmd_finetune(ft_c, ft_init, ft_epochs);
    if (*al) return cmd_al(al_c, al_init, al_strategy, al_epochs);
    if (*ev) return cmd_eval(eval_c, checkpoint, split);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bagmix: error: %s\n", e.what());
    return 1;
  }
  return 2;
}
