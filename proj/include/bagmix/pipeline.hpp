// Run configuration and the training / evaluation / active-learning drivers
// shared by the command-line tool and the end-to-end tests.
#pragma once

#include "bagmix/active.hpp"
#include "bagmix/aggregator.hpp"
#include "bagmix/augment.hpp"
#include "bagmix/bagio.hpp"
#include "bagmix/checkpoint.hpp"
#include "bagmix/losses.hpp"
#include "bagmix/mixing.hpp"
#include "bagmix/optim.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace bagmix {

enum class ViewMode { kAugment, kRandomQuarter };

struct PretrainConfig {
  int epochs = 300;
  int batch_size = 32;
  ViewMode view_mode = ViewMode::kAugment;
  AugmentConfig augment;  // noise_sigma is relative to the dataset feature std
  double beta_a = 1.0, beta_b = 1.0;
  LossWeights loss;
  double lr_weights = 0.2;
  double lr_biases = 0.0048;
  int warmup_epochs = 10;
  double final_factor = 1e-3;
  LarsConfig lars;
  bool include_pool = false;  // also pre-train on the (unlabeled) pool split

  ScheduleSpec schedule() const {
    ScheduleSpec s;
    s.base_lr_weights = lr_weights;
    s.base_lr_biases = lr_biases;
    s.batch_size = batch_size;
    s.warmup_epochs = std::min(warmup_epochs, epochs);
    s.total_epochs = epochs;
    s.final_factor = final_factor;
    return s;
  }
};

struct FinetuneConfig {
  int epochs = 50;
  int batch_size = 4;
  double lr = 2e-4;
  int step_size = 50;
  double gamma = 0.5;
  AdamConfig adam;
  MixConfig mix = MixConfig::all();
  bool eval_every_epoch = true;

  ScheduleSpec schedule() const {
    ScheduleSpec s;
    s.base_lr = lr;
    s.step_size = step_size;
    s.gamma = gamma;
    return s;
  }
};

struct RunConfig {
  std::string dataset;  // manifest path, relative to the config file
  SynthSpec synth;
  ArchConfig arch;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  ALConfig al;
  std::string init = "scratch";  // "scratch" or a checkpoint path
  std::uint64_t seed = 0;

  void validate() const {
    arch.validate();
    require(pretrain.epochs >= 1 && finetune.epochs >= 1, "epochs must be >= 1");
    require(pretrain.batch_size >= 2, "pretrain.batch_size must be >= 2");
    require(finetune.batch_size >= 1, "finetune.batch_size must be >= 1");
    pretrain.augment.validate();
    pretrain.loss.validate();
    pretrain.schedule().validate();
    require(finetune.mix.beta_a > 0 && finetune.mix.beta_b > 0, "mix Beta parameters must be > 0");
    require(al.initial >= 1 && al.budget >= 1 && al.iterations >= 1, "al sizes must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// JSON. Every object rejects keys it does not know so that typos fail loudly.

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw std::invalid_argument("config: unknown key '" + where + "." + k + "'");
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline std::string to_string(ViewMode m) { return m == ViewMode::kAugment ? "sa" : "rq"; }

inline ViewMode view_mode_from_string(const std::string& s) {
  if (s == "sa") return ViewMode::kAugment;
  if (s == "rq") return ViewMode::kRandomQuarter;
  throw std::invalid_argument("unknown view_mode '" + s + "' (expected sa|rq)");
}

inline nlohmann::json to_json(const AugmentConfig& a) {
  return {{"p_flip", a.p_flip},         {"p_crop", a.p_crop},       {"p_zero", a.p_zero},
          {"p_scale", a.p_scale},       {"p_noise", a.p_noise},     {"zero_rate", a.zero_rate},
          {"noise_sigma", a.noise_sigma}, {"scale_range", {a.scale_lo, a.scale_hi}},
          {"crop_keep_range", {a.crop_keep_lo, a.crop_keep_hi}}};
}

inline AugmentConfig augment_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"p_flip", "p_crop", "p_zero", "p_scale", "p_noise", "zero_rate", "noise_sigma",
                         "scale_range", "crop_keep_range"},
                     "augment");
  AugmentConfig a;
  detail::read(j, "p_flip", a.p_flip);
  detail::read(j, "p_crop", a.p_crop);
  detail::read(j, "p_zero", a.p_zero);
  detail::read(j, "p_scale", a.p_scale);
  detail::read(j, "p_noise", a.p_noise);
  detail::read(j, "zero_rate", a.zero_rate);
  detail::read(j, "noise_sigma", a.noise_sigma);
  if (j.contains("scale_range")) {
    const auto r = j.at("scale_range").get<std::array<double, 2>>();
    a.scale_lo = r[0];
    a.scale_hi = r[1];
  }
  if (j.contains("crop_keep_range")) {
    const auto r = j.at("crop_keep_range").get<std::array<double, 2>>();
    a.crop_keep_lo = r[0];
    a.crop_keep_hi = r[1];
  }
  return a;
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.pretrain;
  const auto& f = c.finetune;
  return {
      {"dataset", c.dataset},
      {"synth", to_json(c.synth)},
      {"arch", to_json(c.arch)},
      {"pretrain",
       {{"epochs", p.epochs},
        {"batch_size", p.batch_size},
        {"view_mode", to_string(p.view_mode)},
        {"augment", to_json(p.augment)},
        {"beta_a", p.beta_a},
        {"beta_b", p.beta_b},
        {"loss", {{"alpha", p.loss.alpha}, {"beta", p.loss.beta}, {"gamma", p.loss.gamma}, {"lambda_bt", p.loss.lambda_bt}}},
        {"lr_weights", p.lr_weights},
        {"lr_biases", p.lr_biases},
        {"warmup_epochs", p.warmup_epochs},
        {"final_factor", p.final_factor},
        {"weight_decay", p.lars.weight_decay},
        {"momentum", p.lars.momentum},
        {"trust_coeff", p.lars.trust_coeff},
        {"include_pool", p.include_pool}}},
      {"finetune",
       {{"epochs", f.epochs},
        {"batch_size", f.batch_size},
        {"lr", f.lr},
        {"weight_decay", f.adam.weight_decay},
        {"step_size", f.step_size},
        {"gamma", f.gamma},
        {"mix",
         {{"loc1", f.mix.loc_input}, {"loc2", f.mix.loc_inner}, {"loc3", f.mix.loc_output},
          {"beta_a", f.mix.beta_a}, {"beta_b", f.mix.beta_b}}},
        {"eval_every_epoch", f.eval_every_epoch}}},
      {"al",
       {{"strategy", to_string(c.al.strategy)},
        {"initial", c.al.initial},
        {"budget", c.al.budget},
        {"iterations", c.al.iterations}}},
      {"init", c.init},
      {"seed", c.seed}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"dataset", "synth", "arch", "pretrain", "finetune", "al", "init", "seed"}, "config");
  RunConfig c;
  detail::read(j, "dataset", c.dataset);
  detail::read(j, "init", c.init);
  detail::read(j, "seed", c.seed);
  if (j.contains("synth")) {
    detail::check_keys(j["synth"], {"n_pretrain", "n_pool", "n_test", "dim", "r_min", "r_max", "tumor_fraction",
                                    "signal_fraction", "shift", "noise", "seed"},
                       "synth");
    c.synth = synth_spec_from_json(j["synth"]);
  }
  if (j.contains("arch")) {
    detail::check_keys(j["arch"], {"input_dim", "hidden", "layers", "heads", "ff_ratio", "pool_dim", "projector",
                                   "identity_projector", "positional_encoding", "num_classes"},
                       "arch");
    c.arch = arch_from_json(j["arch"]);
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    detail::check_keys(p, {"epochs", "batch_size", "view_mode", "augment", "beta_a", "beta_b", "loss", "lr_weights",
                           "lr_biases", "warmup_epochs", "final_factor", "weight_decay", "momentum", "trust_coeff",
                           "include_pool"},
                       "pretrain");
    auto& o = c.pretrain;
    detail::read(p, "epochs", o.epochs);
    detail::read(p, "batch_size", o.batch_size);
    if (p.contains("view_mode")) o.view_mode = view_mode_from_string(p["view_mode"].get<std::string>());
    if (p.contains("augment")) o.augment = augment_from_json(p["augment"]);
    detail::read(p, "beta_a", o.beta_a);
    detail::read(p, "beta_b", o.beta_b);
    if (p.contains("loss")) {
      const auto& l = p["loss"];
      detail::check_keys(l, {"alpha", "beta", "gamma", "lambda_bt"}, "pretrain.loss");
      detail::read(l, "alpha", o.loss.alpha);
      detail::read(l, "beta", o.loss.beta);
      detail::read(l, "gamma", o.loss.gamma);
      detail::read(l, "lambda_bt", o.loss.lambda_bt);
    }
    detail::read(p, "lr_weights", o.lr_weights);
    detail::read(p, "lr_biases", o.lr_biases);
    detail::read(p, "warmup_epochs", o.warmup_epochs);
    detail::read(p, "final_factor", o.final_factor);
    detail::read(p, "weight_decay", o.lars.weight_decay);
    detail::read(p, "momentum", o.lars.momentum);
    detail::read(p, "trust_coeff", o.lars.trust_coeff);
    detail::read(p, "include_pool", o.include_pool);
  }
  if (j.contains("finetune")) {
    const auto& f = j["finetune"];
    detail::check_keys(f, {"epochs", "batch_size", "lr", "weight_decay", "step_size", "gamma", "mix",
                           "eval_every_epoch"},
                       "finetune");
    auto& o = c.finetune;
    detail::read(f, "epochs", o.epochs);
    detail::read(f, "batch_size", o.batch_size);
    detail::read(f, "lr", o.lr);
    detail::read(f, "weight_decay", o.adam.weight_decay);
    detail::read(f, "step_size", o.step_size);
    detail::read(f, "gamma", o.gamma);
    detail::read(f, "eval_every_epoch", o.eval_every_epoch);
    if (f.contains("mix")) {
      const auto& m = f["mix"];
      detail::check_keys(m, {"loc1", "loc2", "loc3", "beta_a", "beta_b"}, "finetune.mix");
      detail::read(m, "loc1", o.mix.loc_input);
      detail::read(m, "loc2", o.mix.loc_inner);
      detail::read(m, "loc3", o.mix.loc_output);
      detail::read(m, "beta_a", o.mix.beta_a);
      detail::read(m, "beta_b", o.mix.beta_b);
    }
  }
  if (j.contains("al")) {
    const auto& a = j["al"];
    detail::check_keys(a, {"strategy", "initial", "budget", "iterations"}, "al");
    if (a.contains("strategy")) c.al.strategy = strategy_from_string(a["strategy"].get<std::string>());
    detail::read(a, "initial", c.al.initial);
    detail::read(a, "budget", c.al.budget);
    detail::read(a, "iterations", c.al.iterations);
  }
  c.al.seed = c.seed;
  c.validate();
  return c;
}

/// Hex FNV-1a of the canonical JSON dump (nlohmann::json sorts keys). The
/// `init` field names an input artifact rather than a setting and is left out.
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("init");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  RunConfig c = run_config_from_json(nlohmann::json::parse(in));
  // Absolute, so the config hash does not depend on how the config was named.
  if (!c.dataset.empty() && std::filesystem::path(c.dataset).is_relative())
    c.dataset = std::filesystem::weakly_canonical(std::filesystem::absolute(path).parent_path() / c.dataset).string();
  return c;
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRecord {
  std::string phase;
  int epoch = 0;
  double loss = 0;
  std::map<std::string, double> components;
  double lr_weights = 0, lr_biases = 0;
  std::optional<double> accuracy;
};

inline nlohmann::json to_json(const MetricsRecord& r, const std::string& hash) {
  nlohmann::json j{{"phase", r.phase},  {"epoch", r.epoch}, {"loss", r.loss},
                   {"components", r.components}, {"lr", {{"weights", r.lr_weights}, {"bias_and_norm", r.lr_biases}}},
                   {"config_hash", hash}};
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  return j;
}

class MetricsLog {
 public:
  MetricsLog() = default;
  /// Appends to `path`. A log that already holds records from another
  /// configuration is rejected.
  MetricsLog(const std::filesystem::path& path, std::string hash) : hash_(std::move(hash)) {
    if (std::ifstream in(path); in) {
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto other = nlohmann::json::parse(line).value("config_hash", std::string());
        if (other != hash_)
          throw std::runtime_error("metrics log " + path.string() + " belongs to config " + other + ", not " + hash_);
      }
    }
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("cannot write metrics " + path.string());
  }
  void write(const MetricsRecord& r) {
    if (!std::isfinite(r.loss)) throw std::runtime_error("refusing to log a non-finite loss");
    if (out_.is_open()) out_ << to_json(r, hash_).dump() << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
  std::string hash_;
};

// ---------------------------------------------------------------------------
// Data.

/// All bags of a manifest held in memory, looked up by id.
class BagStore {
 public:
  explicit BagStore(const DatasetManifest& m) {
    for (const auto& e : m.entries) {
      bags_.emplace(e.id, m.load(e));
      splits_[e.split].push_back(e.id);
    }
  }
  explicit BagStore(std::vector<SynthSlide> slides) {
    for (auto& s : slides) {
      splits_[s.split].push_back(s.bag.slide_id);
      const auto id = s.bag.slide_id;
      bags_.emplace(id, std::move(s.bag));
    }
  }

  const FeatureBag& at(const std::string& id) const {
    const auto it = bags_.find(id);
    if (it == bags_.end()) throw std::invalid_argument("unknown slide id '" + id + "'");
    return it->second;
  }
  const std::vector<std::string>& ids(Split s) const {
    static const std::vector<std::string> none;
    const auto it = splits_.find(s);
    return it == splits_.end() ? none : it->second;
  }
  std::map<std::string, int> labels(Split s) const {
    std::map<std::string, int> out;
    for (const auto& id : ids(s))
      if (at(id).label) out[id] = *at(id).label;
    return out;
  }
  Eigen::Index dim() const { return bags_.empty() ? 0 : bags_.begin()->second.features.cols(); }

  /// Standard deviation of every feature value over the given slides.
  double feature_std(std::span<const std::string> ids) const {
    double sum = 0, sq = 0;
    long n = 0;
    for (const auto& id : ids) {
      const auto& f = at(id).features;
      sum += f.cast<double>().sum();
      sq += f.cast<double>().squaredNorm();
      n += f.size();
    }
    if (n == 0) return 0;
    const double mean = sum / n;
    return std::sqrt(std::max(0.0, sq / n - mean * mean));
  }

 private:
  std::map<std::string, FeatureBag> bags_;
  std::map<Split, std::vector<std::string>> splits_;
};

inline PaddedBatch<float> batch_of(const BagStore& store, std::span<const std::string> ids) {
  std::vector<FeatureBag> bags;
  bags.reserve(ids.size());
  for (const auto& id : ids) bags.push_back(store.at(id));
  return pad_batch<float>(bags);
}

// ---------------------------------------------------------------------------
// Pre-training.

struct PretrainResult {
  AggregatorParams<float> params;
  std::vector<MetricsRecord> history;
};

/// Shuffled mini-batches; a trailing batch smaller than `min_size` is dropped.
inline std::vector<std::vector<std::string>> make_batches(std::vector<std::string> ids, int batch_size, Rng& rng,
                                                          std::size_t min_size = 1) {
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    const auto end = std::min(ids.size(), i + static_cast<std::size_t>(batch_size));
    if (end - i >= min_size) out.emplace_back(ids.begin() + i, ids.begin() + end);
  }
  return out;
}

inline PretrainResult pretrain(const RunConfig& cfg, const BagStore& store,
                               const std::function<void(const MetricsRecord&)>& on_epoch = {}) {
  cfg.validate();
  const auto& pc = cfg.pretrain;
  std::vector<std::string> ids = store.ids(Split::kPretrain);
  if (pc.include_pool) {
    const auto& pool = store.ids(Split::kPool);
    ids.insert(ids.end(), pool.begin(), pool.end());
  }
  if (ids.size() < 2) throw std::invalid_argument("pretrain: need at least 2 slides in the pretrain split");
  std::sort(ids.begin(), ids.end());

  AugmentConfig aug = pc.augment;
  aug.noise_sigma = pc.augment.noise_sigma * store.feature_std(ids);

  Rng data_rng = substream(cfg.seed, "pretrain/data");
  Rng aug_rng = substream(cfg.seed, "pretrain/augment");
  Rng mix_rng = substream(cfg.seed, "pretrain/mixing");
  PretrainResult res{init_params<float>(cfg.seed, cfg.arch), {}};
  auto& p = res.params;
  auto grads = zeros_like(p);
  OptimState state;
  const auto schedule = pc.schedule();

  const auto view = [&](const FeatureBag& b) {
    return pc.view_mode == ViewMode::kAugment ? augment_view(b, aug_rng, aug) : random_quarter_view(b, aug_rng);
  };

  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    const GroupRates lr = warmup_cosine_lr(schedule, epoch);
    MetricsRecord rec{"pretrain", epoch + 1, 0, {{"source", 0}, {"mix_source", 0}, {"mix", 0}}, lr.weights,
                      lr.bias_and_norm, std::nullopt};
    const auto batches = make_batches(ids, pc.batch_size, data_rng, 2);
    for (const auto& batch_ids : batches) {
      std::vector<FeatureBag> va, vb;
      for (const auto& id : batch_ids) {
        va.push_back(view(store.at(id)));
        vb.push_back(view(store.at(id)));
      }
      const auto a = pad_batch<float>(va);
      const auto b = pad_batch<float>(vb);
      const auto lam_raw = sample_lambda(mix_rng, pc.beta_a, pc.beta_b, batch_ids.size());
      const auto plan_a = plan_span_mix(std::span<const Eigen::Index>(a.lengths), lam_raw, mix_rng);
      const auto plan_b = plan_span_mix(std::span<const Eigen::Index>(b.lengths), lam_raw, mix_rng);
      const std::array<PaddedBatch<float>, 4> views{a, b, apply_span_mix(a, plan_a), apply_span_mix(b, plan_b)};

      std::array<ForwardCache<float>, 4> caches;
      for (int v = 0; v < 4; ++v) caches[v] = forward(p, views[v], Head::kProjector);
      const auto loss = total_pretrain_loss(caches[0].output, caches[1].output, caches[2].output, caches[3].output,
                                            plan_b.lam, pc.loss);
      if (!std::isfinite(loss.total))
        throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1));

      for (auto& r : param_refs(grads)) r.map().setZero();
      backward(p, caches[0], loss.grad_a, grads);
      backward(p, caches[1], loss.grad_b, grads);
      backward(p, caches[2], loss.grad_a_mix, grads);
      backward(p, caches[3], loss.grad_b_mix, grads);
      lars_step(param_refs(p), param_refs(grads), state, lr, pc.lars);
      update_running_stats(p, caches[0].projector);
      update_running_stats(p, caches[1].projector);

      rec.loss += loss.total;
      rec.components["source"] += loss.source;
      rec.components["mix_source"] += loss.mix_source;
      rec.components["mix"] += loss.mix;
    }
    const double nb = static_cast<double>(batches.size());
    rec.loss /= nb;
    for (auto& [k, v] : rec.components) v /= nb;
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation.

/// Class predictions (argmax of the logits, ties to class 0) and slide
/// embeddings for `ids`.
struct Scores {
  Mat<float> logits;
  Mat<float> embeddings;
};

inline Scores score(const AggregatorParams<float>& p, const BagStore& store, std::span<const std::string> ids,
                    std::size_t chunk = 32) {
  Scores s{Mat<float>(ids.size(), p.arch.num_classes), Mat<float>(ids.size(), p.arch.hidden)};
  ForwardOptions opt;
  opt.train = false;
  for (std::size_t i = 0; i < ids.size(); i += chunk) {
    const auto n = std::min(chunk, ids.size() - i);
    const auto c = forward(p, batch_of(store, ids.subspan(i, n)), Head::kClassifier, opt);
    s.logits.middleRows(i, n) = c.output;
    s.embeddings.middleRows(i, n) = c.embedding;
  }
  return s;
}

inline double accuracy(const AggregatorParams<float>& p, const BagStore& store, std::span<const std::string> ids) {
  if (ids.empty()) throw std::invalid_argument("accuracy: empty split");
  const auto s = score(p, store, ids);
  long correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& label = store.at(ids[i]).label;
    if (!label) throw std::invalid_argument("accuracy: slide '" + ids[i] + "' has no label");
    Eigen::Index pred;
    s.logits.row(i).maxCoeff(&pred);
    correct += pred == *label;
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

struct FinetuneResult {
  AggregatorParams<float> params;
  std::vector<MetricsRecord> history;
  double test_accuracy = 0;
};

inline FinetuneResult finetune(const RunConfig& cfg, const BagStore& store, AggregatorParams<float> init,
                               std::span<const std::string> train_ids, std::span<const int> train_labels,
                               std::span<const std::string> test_ids, std::uint64_t seed,
                               const std::function<void(const MetricsRecord&)>& on_epoch = {}) {
  const auto& fc = cfg.finetune;
  if (train_ids.empty()) throw std::invalid_argument("finetune: no labeled slides");
  if (train_ids.size() != train_labels.size()) throw ShapeError("finetune: id/label count mismatch");
  if (!(init.arch == cfg.arch)) throw std::invalid_argument("finetune: initial weights do not match arch");
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < train_ids.size(); ++i) label_of[train_ids[i]] = train_labels[i];
  std::vector<std::string> ids(train_ids.begin(), train_ids.end());
  std::sort(ids.begin(), ids.end());

  Rng data_rng = substream(seed, "finetune/data");
  Rng mix_rng = substream(seed, "finetune/mixing");
  FinetuneResult res{std::move(init), {}, 0};
  auto& p = res.params;
  auto grads = zeros_like(p);
  OptimState state;
  const auto schedule = fc.schedule();

  for (int epoch = 0; epoch < fc.epochs; ++epoch) {
    const double lr = step_lr(schedule, epoch);
    MetricsRecord rec{"finetune", epoch + 1, 0, {{"ce", 0}}, lr, lr, std::nullopt};
    const auto batches = make_batches(ids, fc.batch_size, data_rng);
    for (const auto& batch_ids : batches) {
      const auto batch = batch_of(store, batch_ids);
      std::vector<int> y;
      for (const auto& id : batch_ids) y.push_back(label_of.at(id));
      ForwardOptions opt;
      opt.mix = fc.mix.pick(mix_rng);
      std::vector<int> y_b = y;
      if (opt.mix != MixLocation::kNone) {
        opt.lambda = sample_lambda(mix_rng, fc.mix.beta_a, fc.mix.beta_b, 1)[0];
        std::reverse(y_b.begin(), y_b.end());
      }
      const auto c = forward(p, batch, Head::kClassifier, opt);
      const auto loss = opt.mix == MixLocation::kNone ? cross_entropy<float>(c.output, y)
                                                      : cross_entropy_mixed<float>(c.output, y, y_b, opt.lambda);
      if (!std::isfinite(loss.value))
        throw std::runtime_error("finetune: non-finite loss at epoch " + std::to_string(epoch + 1));
      for (auto& r : param_refs(grads)) r.map().setZero();
      backward(p, c, loss.grad, grads);
      adam_step(param_refs(p), param_refs(grads), state, lr, fc.adam);
      rec.loss += loss.value;
    }
    rec.loss /= static_cast<double>(batches.size());
    rec.components["ce"] = rec.loss;
    if (!test_ids.empty() && (fc.eval_every_epoch || epoch + 1 == fc.epochs))
      rec.accuracy = accuracy(p, store, test_ids);
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!test_ids.empty()) res.test_accuracy = *res.history.back().accuracy;
  return res;
}

/// Initial weights for fine-tuning: a checkpoint, or a fresh draw.
inline AggregatorParams<float> initial_params(const RunConfig& cfg) {
  if (cfg.init.empty() || cfg.init == "scratch") return init_params<float>(cfg.seed, cfg.arch);
  return load_checkpoint(cfg.init, &cfg.arch).params;
}

// ---------------------------------------------------------------------------
// Active learning.

inline Mat<double> softmax_rows(const Mat<float>& logits) {
  Mat<double> p = logits.cast<double>();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Cold-starts from a fixed initialization at every AL iteration.
class FinetuneLearner : public Learner {
 public:
  FinetuneLearner(const RunConfig& cfg, const BagStore& store, AggregatorParams<float> init,
                  std::vector<std::string> test_ids)
      : cfg_(cfg), store_(store), init_(std::move(init)), current_(init_), test_(std::move(test_ids)) {}

  double fit_and_evaluate(int iteration, std::span<const std::string> ids, std::span<const int> labels) override {
    const std::uint64_t seed = fnv1a64("al/iter/" + std::to_string(iteration), cfg_.seed);
    auto res = finetune(cfg_, store_, init_, ids, labels, test_, seed);
    current_ = std::move(res.params);
    return res.test_accuracy;
  }

  PoolSnapshot snapshot(std::span<const std::string> ids) override {
    PoolSnapshot s;
    s.ids.assign(ids.begin(), ids.end());
    if (ids.empty()) {
      s.probs.resize(0, cfg_.arch.num_classes);
      s.embeddings.resize(0, cfg_.arch.hidden);
      return s;
    }
    const auto sc = score(current_, store_, ids);
    s.probs = softmax_rows(sc.logits);
    s.embeddings = sc.embeddings.cast<double>();
    return s;
  }

 private:
  const RunConfig& cfg_;
  const BagStore& store_;
  AggregatorParams<float> init_, current_;
  std::vector<std::string> test_;
};

/// strategy -> accuracy per iteration, plus every record in run order.
struct SweepResult {
  std::map<std::string, std::vector<double>> grid;
  std::map<std::string, std::vector<std::vector<std::string>>> labeled_after;  // labeled set after each iteration
  std::vector<ALRecord> records;
};

inline SweepResult al_sweep(const RunConfig& cfg, const BagStore& store, const AggregatorParams<float>& init,
                            std::span<const Strategy> strategies,
                            const std::function<void(const ALRecord&)>& on_record = {}) {
  const auto pool = store.ids(Split::kPool);
  const auto test = store.ids(Split::kTest);
  if (pool.empty() || test.empty()) throw std::invalid_argument("al: pool and test splits must be non-empty");
  const LabelOracle oracle(store.labels(Split::kPool));
  SweepResult out;
  for (auto s : strategies) {
    ALConfig al = cfg.al;
    al.strategy = s;
    al.seed = cfg.seed;
    FinetuneLearner learner(cfg, store, init, test);
    std::vector<std::string> labeled;
    auto& sets = out.labeled_after[to_string(s)];
    const auto st = al_loop(al, pool, oracle, learner, [&](const ALRecord& r) {
      labeled.insert(labeled.end(), r.selected_ids.begin(), r.selected_ids.end());
      sets.push_back(labeled);
      out.records.push_back(r);
      if (on_record) on_record(r);
    });
    for (const auto& r : st.history) out.grid[to_string(s)].push_back(r.test_accuracy);
  }
  return out;
}

}  // namespace bagmix
