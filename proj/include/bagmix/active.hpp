// Budgeted active learning: five acquisition functions plus random sampling,
// and the select -> label -> retrain -> evaluate loop that drives them.
//
// Every selector canonicalizes its pool to ascending slide-id order first, so
// ties resolve by id and results do not depend on input order.
#pragma once

#include "bagmix/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace bagmix {

enum class Strategy { kRandom, kEntropy, kKMeansPP, kCoreset, kBadge, kCdal };

inline const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> s{Strategy::kRandom,  Strategy::kEntropy, Strategy::kBadge,
                                       Strategy::kCoreset, Strategy::kKMeansPP, Strategy::kCdal};
  return s;
}

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kEntropy: return "entropy";
    case Strategy::kKMeansPP: return "kmeanspp";
    case Strategy::kCoreset: return "coreset";
    case Strategy::kBadge: return "badge";
    case Strategy::kCdal: return "cdal";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (auto st : all_strategies())
    if (to_string(st) == s) return st;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

/// Model outputs for a set of slides, one row per slide.
struct PoolSnapshot {
  std::vector<std::string> ids;
  Mat<double> probs;       // n x C, rows on the simplex
  Mat<double> embeddings;  // n x h pooled slide embeddings

  std::size_t size() const { return ids.size(); }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(ids.size());
    if (probs.rows() != n || embeddings.rows() != n) throw ShapeError("PoolSnapshot: row count mismatch");
    for (Eigen::Index i = 0; i < n; ++i) {
      if ((probs.row(i).array() < 0).any() || std::abs(probs.row(i).sum() - 1.0) > 1e-6)
        throw std::invalid_argument("PoolSnapshot: probabilities off the simplex for " + ids[i]);
    }
  }

  int predicted(Eigen::Index i) const {
    Eigen::Index arg;
    probs.row(i).maxCoeff(&arg);
    return static_cast<int>(arg);
  }
};

namespace detail {

inline std::vector<std::size_t> id_order(std::span<const std::string> ids) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  return order;
}

inline void check_request(std::size_t pool, std::size_t k) {
  if (pool == 0) throw std::invalid_argument("acquisition: empty pool");
  if (k > pool) throw std::invalid_argument("acquisition: k exceeds pool size");
}

inline std::vector<std::string> pick(std::span<const std::string> ids, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(ids[i]);
  return out;
}

/// Greedy k-center over an arbitrary distance: repeatedly take the candidate
/// whose distance to its nearest covered point is largest. `covered` starts
/// as the distances to the seed set (+inf when empty).
inline std::vector<std::size_t> k_center_greedy(std::size_t n, std::size_t k, std::vector<double> covered,
                                                const std::vector<std::size_t>& order,
                                                const std::function<double(std::size_t, std::size_t)>& dist) {
  std::vector<std::size_t> chosen;
  std::vector<char> taken(n, 0);
  for (std::size_t round = 0; round < k; ++round) {
    std::size_t best = n;
    for (auto i : order) {
      if (taken[i]) continue;
      if (best == n || covered[i] > covered[best]) best = i;
    }
    taken[best] = 1;
    chosen.push_back(best);
    for (std::size_t i = 0; i < n; ++i)
      if (!taken[i]) covered[i] = std::min(covered[i], dist(i, best));
  }
  return chosen;
}

}  // namespace detail

inline double entropy(const RowVec<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

/// Top-k by predictive entropy, ties by ascending id.
inline std::vector<std::string> entropy_select(const PoolSnapshot& snap, std::size_t k) {
  detail::check_request(snap.size(), k);
  std::vector<double> h(snap.size());
  for (std::size_t i = 0; i < snap.size(); ++i) h[i] = entropy(snap.probs.row(i));
  auto order = detail::id_order(snap.ids);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] > h[b]; });
  order.resize(k);
  return detail::pick(snap.ids, order);
}

/// k-means++ seeding: first center uniform, each next one drawn with
/// probability proportional to squared distance to the nearest center.
/// When every remaining point coincides with a center, the next one is drawn
/// uniformly among the remaining points.
inline std::vector<std::string> kmeanspp_select(const Mat<double>& points, std::span<const std::string> ids,
                                                std::size_t k, Rng& rng) {
  const std::size_t n = ids.size();
  detail::check_request(n, k);
  if (static_cast<std::size_t>(points.rows()) != n) throw ShapeError("kmeanspp_select: row count mismatch");
  const auto order = detail::id_order(ids);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> chosen;
  auto take = [&](std::size_t pos) {
    const std::size_t c = order[pos];
    taken[pos] = 1;
    chosen.push_back(c);
    for (std::size_t q = 0; q < n; ++q)
      d2[q] = std::min(d2[q], (points.row(order[q]) - points.row(c)).squaredNorm());
  };
  take(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  while (chosen.size() < k) {
    std::vector<double> w(n, 0.0);
    double total = 0;
    for (std::size_t q = 0; q < n; ++q)
      if (!taken[q]) total += (w[q] = d2[q]);
    if (total <= 0) {
      for (std::size_t q = 0; q < n; ++q) w[q] = taken[q] ? 0.0 : 1.0;
    }
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    take(dist(rng));
  }
  return detail::pick(ids, chosen);
}

/// Greedy k-center in Euclidean space against the labeled embeddings.
inline std::vector<std::string> coreset_select(const Mat<double>& points, std::span<const std::string> ids,
                                               const Mat<double>& labeled, std::size_t k) {
  const std::size_t n = ids.size();
  detail::check_request(n, k);
  if (static_cast<std::size_t>(points.rows()) != n) throw ShapeError("coreset_select: row count mismatch");
  std::vector<double> covered(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < labeled.rows(); ++j)
      covered[i] = std::min(covered[i], (points.row(i) - labeled.row(j)).norm());
  const auto chosen = detail::k_center_greedy(n, k, std::move(covered), detail::id_order(ids),
                                              [&](std::size_t a, std::size_t b) {
                                                return (points.row(a) - points.row(b)).norm();
                                              });
  return detail::pick(ids, chosen);
}

/// Last-layer cross-entropy gradient at the predicted label, flattened
/// class-major: g[c * h + j] = (p_c - [c == argmax p]) * e_j.
inline Mat<double> badge_embeddings(const PoolSnapshot& snap) {
  const Eigen::Index n = static_cast<Eigen::Index>(snap.size());
  const Eigen::Index c = snap.probs.cols(), h = snap.embeddings.cols();
  Mat<double> g(n, c * h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int yhat = snap.predicted(i);
    for (Eigen::Index cls = 0; cls < c; ++cls) {
      const double coef = snap.probs(i, cls) - (cls == yhat ? 1.0 : 0.0);
      g.row(i).segment(cls * h, h) = coef * snap.embeddings.row(i);
    }
  }
  return g;
}

inline std::vector<std::string> badge_select(const PoolSnapshot& snap, std::size_t k, Rng& rng) {
  detail::check_request(snap.size(), k);
  return kmeanspp_select(badge_embeddings(snap), snap.ids, k, rng);
}

inline constexpr double kProbFloor = 1e-12;

/// Symmetric KL divergence between two class distributions; probabilities
/// are floored at 1e-12 inside the logarithm.
inline double symmetric_kl(const RowVec<double>& p, const RowVec<double>& q) {
  double kl_pq = 0, kl_qp = 0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    const double lp = std::log(std::max(p(c), kProbFloor));
    const double lq = std::log(std::max(q(c), kProbFloor));
    kl_pq += p(c) * (lp - lq);
    kl_qp += q(c) * (lq - lp);
  }
  return 0.5 * (kl_pq + kl_qp);
}

/// Greedy k-center over symmetric-KL distance of predicted distributions,
/// seeded with the labeled slides' distributions.
inline std::vector<std::string> cdal_select(const PoolSnapshot& snap, const Mat<double>& labeled_probs,
                                            std::size_t k) {
  const std::size_t n = snap.size();
  detail::check_request(n, k);
  std::vector<double> covered(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < labeled_probs.rows(); ++j)
      covered[i] = std::min(covered[i], symmetric_kl(snap.probs.row(i), labeled_probs.row(j)));
  const auto chosen = detail::k_center_greedy(n, k, std::move(covered), detail::id_order(snap.ids),
                                              [&](std::size_t a, std::size_t b) {
                                                return symmetric_kl(snap.probs.row(a), snap.probs.row(b));
                                              });
  return detail::pick(snap.ids, chosen);
}

inline std::vector<std::string> random_select(std::span<const std::string> ids, std::size_t k, Rng& rng) {
  detail::check_request(ids.size(), k);
  std::vector<std::string> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  std::shuffle(sorted.begin(), sorted.end(), rng);
  sorted.resize(k);
  return sorted;
}

// ---------------------------------------------------------------------------
// The loop.

/// Reveals held labels; stands in for the pathologist.
class LabelOracle {
 public:
  explicit LabelOracle(std::map<std::string, int> labels) : labels_(std::move(labels)) {}

  int label(const std::string& id) const {
    const auto it = labels_.find(id);
    if (it == labels_.end()) throw std::runtime_error("oracle has no label for '" + id + "'");
    return it->second;
  }

 private:
  std::map<std::string, int> labels_;
};

/// A model that can be retrained from its initialization on a labeled set,
/// then scored on any slides.
class Learner {
 public:
  virtual ~Learner() = default;
  /// Cold-starts, fine-tunes on the labeled slides, returns test accuracy.
  virtual double fit_and_evaluate(int iteration, std::span<const std::string> ids, std::span<const int> labels) = 0;
  /// Scores slides with the most recently fitted model.
  virtual PoolSnapshot snapshot(std::span<const std::string> ids) = 0;
};

struct ALConfig {
  Strategy strategy = Strategy::kRandom;
  std::size_t initial = 20;
  std::size_t budget = 20;
  int iterations = 5;
  std::uint64_t seed = 0;
};

struct ALRecord {
  int iter = 0;
  std::string strategy;
  std::vector<std::string> selected_ids;
  std::size_t labeled_count = 0;
  double test_accuracy = 0;

  friend bool operator==(const ALRecord&, const ALRecord&) = default;
};

inline nlohmann::json to_json(const ALRecord& r) {
  return {{"iter", r.iter},
          {"strategy", r.strategy},
          {"selected_ids", r.selected_ids},
          {"labeled_count", r.labeled_count},
          {"test_accuracy", r.test_accuracy}};
}

inline ALRecord al_record_from_json(const nlohmann::json& j) {
  return {j.at("iter").get<int>(), j.at("strategy").get<std::string>(),
          j.at("selected_ids").get<std::vector<std::string>>(), j.at("labeled_count").get<std::size_t>(),
          j.at("test_accuracy").get<double>()};
}

struct ALState {
  std::vector<std::string> labeled;
  std::vector<int> labels;
  std::vector<std::string> unlabeled;
  std::size_t budget = 20;
  std::vector<ALRecord> history;
};

/// Selects `k` ids from the unlabeled pool with the configured strategy.
inline std::vector<std::string> acquire(Strategy strategy, Learner& learner, const ALState& state, std::size_t k,
                                        Rng& rng) {
  if (strategy == Strategy::kRandom) return random_select(state.unlabeled, k, rng);
  const PoolSnapshot pool = learner.snapshot(state.unlabeled);
  pool.validate();
  switch (strategy) {
    case Strategy::kEntropy: return entropy_select(pool, k);
    case Strategy::kKMeansPP: return kmeanspp_select(pool.embeddings, pool.ids, k, rng);
    case Strategy::kBadge: return badge_select(pool, k, rng);
    case Strategy::kCoreset: {
      const PoolSnapshot lab = learner.snapshot(state.labeled);
      return coreset_select(pool.embeddings, pool.ids, lab.embeddings, k);
    }
    case Strategy::kCdal: {
      const PoolSnapshot lab = learner.snapshot(state.labeled);
      return cdal_select(pool, lab.probs, k);
    }
    case Strategy::kRandom: break;
  }
  throw std::logic_error("unreachable strategy");
}

/// Iteration 1 draws `initial` slides uniformly (a draw that depends only on
/// the seed, so every strategy starts from the same set); later iterations
/// acquire `budget` slides each. Each iteration retrains from scratch.
inline ALState al_loop(const ALConfig& cfg, std::span<const std::string> pool, const LabelOracle& oracle,
                       Learner& learner,
                       const std::function<void(const ALRecord&)>& on_record = {}) {
  require(cfg.iterations >= 1, "al_loop: iterations must be >= 1");
  if (cfg.initial > pool.size()) throw std::invalid_argument("al_loop: initial size exceeds pool");
  ALState st;
  st.budget = cfg.budget;
  st.unlabeled.assign(pool.begin(), pool.end());
  std::sort(st.unlabeled.begin(), st.unlabeled.end());
  Rng init_rng = substream(cfg.seed, "al/initial");
  Rng select_rng = substream(cfg.seed, "al/select/" + to_string(cfg.strategy));

  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    std::vector<std::string> chosen;
    if (iter == 1) {
      chosen = random_select(st.unlabeled, cfg.initial, init_rng);
    } else {
      const std::size_t k = std::min(cfg.budget, st.unlabeled.size());
      if (k == 0) throw std::invalid_argument("al_loop: budget exceeds the remaining pool");
      chosen = acquire(cfg.strategy, learner, st, k, select_rng);
    }
    const std::set<std::string> picked(chosen.begin(), chosen.end());
    if (picked.size() != chosen.size()) throw std::logic_error("al_loop: duplicate selection");
    for (const auto& id : chosen) {
      if (!std::binary_search(st.unlabeled.begin(), st.unlabeled.end(), id))
        throw std::logic_error("al_loop: selection outside the pool");
      st.labeled.push_back(id);
      st.labels.push_back(oracle.label(id));
    }
    std::erase_if(st.unlabeled, [&](const std::string& id) { return picked.count(id) > 0; });
    const double acc = learner.fit_and_evaluate(iter, st.labeled, st.labels);
    st.history.push_back({iter, to_string(cfg.strategy), chosen, st.labeled.size(), acc});
    if (on_record) on_record(st.history.back());
  }
  return st;
}

}  // namespace bagmix
