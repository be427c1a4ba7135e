// LARS for pre-training, Adam for fine-tuning, and their epoch-granular
// learning-rate schedules.
#pragma once

#include "bagmix/aggregator.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace bagmix {

struct OptimState {
  std::vector<Vec<double>> first;   // momentum (LARS) or first moment (Adam)
  std::vector<Vec<double>> second;  // Adam second moment
  long step = 0;
};

struct LarsConfig {
  double weight_decay = 1e-6;
  double momentum = 0.9;
  double trust_coeff = 0.001;
};

struct AdamConfig {
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Learning rate for each parameter group.
struct GroupRates {
  double weights = 0;
  double bias_and_norm = 0;

  double operator[](ParamGroup g) const { return g == ParamGroup::kWeights ? weights : bias_and_norm; }
};

namespace detail {

template <typename T>
void check_pair(const std::vector<TensorRef<T>>& p, const std::vector<TensorRef<T>>& g) {
  if (p.size() != g.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].rows != g[i].rows || p[i].cols != g[i].cols)
      throw ShapeError("optimizer: gradient shape mismatch for " + p[i].name);
}

template <typename T>
void ensure_state(OptimState& s, const std::vector<TensorRef<T>>& p, bool second) {
  if (s.first.empty()) {
    for (const auto& r : p) s.first.push_back(Vec<double>::Zero(r.size()));
    if (second)
      for (const auto& r : p) s.second.push_back(Vec<double>::Zero(r.size()));
  }
  if (s.first.size() != p.size()) throw ShapeError("optimizer: state does not match parameters");
}

}  // namespace detail

/// One LARS step over tensors. Bias/norm tensors skip weight decay and trust
/// scaling (their local rate is 1).
template <typename T>
void lars_step(const std::vector<TensorRef<T>>& params, const std::vector<TensorRef<T>>& grads,
               OptimState& state, const GroupRates& lr, const LarsConfig& cfg) {
  detail::check_pair(params, grads);
  detail::ensure_state(state, params, false);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].flat();
    const Vec<double> wv = w.template cast<double>();
    Vec<double> g = grads[i].flat().template cast<double>();
    double local = 1.0;
    if (params[i].group == ParamGroup::kWeights) {
      g += cfg.weight_decay * wv;
      const double wn = wv.norm(), gn = g.norm();
      if (wn > 0 && gn > 0) local = cfg.trust_coeff * wn / gn;
    }
    auto& m = state.first[i];
    m = cfg.momentum * m + local * lr[params[i].group] * g;
    w = (wv - m).template cast<T>();
  }
  ++state.step;
}

/// Adam with bias correction; weight decay enters as an L2 term on the gradient.
template <typename T>
void adam_step(const std::vector<TensorRef<T>>& params, const std::vector<TensorRef<T>>& grads,
               OptimState& state, double lr, const AdamConfig& cfg) {
  detail::check_pair(params, grads);
  detail::ensure_state(state, params, true);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].flat();
    const Vec<double> wv = w.template cast<double>();
    Vec<double> g = grads[i].flat().template cast<double>();
    g += cfg.weight_decay * wv;
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g.cwiseProduct(g);
    const Vec<double> step = lr * (m / c1).array() / ((v / c2).array().sqrt() + cfg.eps);
    w = (wv - step).template cast<T>();
  }
}

struct ScheduleSpec {
  double base_lr_weights = 0.2;
  double base_lr_biases = 0.0048;
  int batch_size = 32;
  int warmup_epochs = 10;
  int total_epochs = 300;
  double final_factor = 1e-3;
  int step_size = 50;
  double gamma = 0.5;
  double base_lr = 2e-4;  // step schedule

  void validate() const {
    require(batch_size >= 1, "batch_size must be >= 1");
    require(total_epochs >= 1, "total_epochs must be >= 1");
    require(warmup_epochs >= 0 && warmup_epochs <= total_epochs, "warmup_epochs must lie in [0, total_epochs]");
    require(final_factor > 0 && gamma > 0 && step_size >= 1, "schedule factors must be positive");
  }
};

/// Linear warm-up from 0 to base over `warmup_epochs`, then cosine decay to
/// base * final_factor at the last epoch; base = group lr * batch / 256.
inline GroupRates warmup_cosine_lr(const ScheduleSpec& s, int epoch) {
  s.validate();
  if (epoch < 0 || epoch >= s.total_epochs) throw std::out_of_range("warmup_cosine_lr: epoch out of range");
  const double scale = static_cast<double>(s.batch_size) / 256.0;
  double factor;
  if (epoch < s.warmup_epochs) {
    factor = static_cast<double>(epoch) / s.warmup_epochs;
  } else {
    const int span = s.total_epochs - 1 - s.warmup_epochs;
    const double q = span > 0 ? static_cast<double>(epoch - s.warmup_epochs) / span : 1.0;
    factor = s.final_factor + (1.0 - s.final_factor) * 0.5 * (1.0 + std::cos(std::numbers::pi * q));
  }
  return {s.base_lr_weights * scale * factor, s.base_lr_biases * scale * factor};
}

inline double step_lr(const ScheduleSpec& s, int epoch) {
  require(epoch >= 0, "step_lr: epoch must be >= 0");
  return s.base_lr * std::pow(s.gamma, epoch / s.step_size);
}

}  // namespace bagmix
