// Intra-batch span mixing for pre-training and the Mixup / Manifold Mixup
// interpolation used during fine-tuning. The donor of sample i is always
// flip(i) = N-1-i, i.e. the same batch in reversed order.
#pragma once

#include "bagmix/bagio.hpp"

#include <random>
#include <vector>

namespace bagmix {

inline Eigen::Index flip_index(Eigen::Index i, Eigen::Index n) { return n - 1 - i; }

/// Beta(a, b) draws via the ratio of two Gamma variates.
inline std::vector<double> sample_lambda(Rng& rng, double a, double b, std::size_t n) {
  require(a > 0 && b > 0, "Beta shape parameters must be > 0");
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) {
    for (;;) {
      const double x = ga(rng), y = gb(rng);
      v = x / (x + y);
      if (v > 0 && v < 1) break;  // reject the measure-zero endpoints
    }
  }
  return out;
}

/// Fraction of the receiver's valid length handed over to the donor.
inline double mix_ratio(double lambda) {
  require(lambda >= 0 && lambda <= 1, "mix_ratio: lambda outside [0,1]");
  return std::sqrt(1.0 - (0.8 * lambda + 0.1));
}

struct MixPlan {
  std::vector<double> lambda_raw;
  std::vector<double> ratio;
  std::vector<Eigen::Index> non_pad_len;
  std::vector<Eigen::Index> cut_len;
  std::vector<double> center;
  std::vector<Eigen::Index> start_idx;
  std::vector<Eigen::Index> end_idx;
  std::vector<double> lam;

  std::size_t size() const { return lam.size(); }
};

/// Plans one span per sample. The span is clamped to the shorter of the
/// receiver's and donor's valid prefixes so it never touches padding in
/// either slide; lam still uses the receiver's own length.
inline MixPlan plan_span_mix(std::span<const Eigen::Index> lengths,
                             std::span<const double> lambdas, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(lengths.size());
  if (lambdas.size() != lengths.size()) throw ShapeError("plan_span_mix: lambda/batch size mismatch");
  MixPlan plan;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index own = lengths[i];
    const Eigen::Index donor = lengths[flip_index(i, n)];
    if (own < 1 || donor < 1) throw ShapeError("plan_span_mix: sample without valid regions");
    const Eigen::Index common = std::min(own, donor);
    const double ratio = mix_ratio(lambdas[i]);
    const Eigen::Index cut = std::clamp<Eigen::Index>(round_half_up(ratio * own), 1, common);
    const double lo = cut / 2.0, hi = common - cut / 2.0;
    const double cr = lo < hi ? std::uniform_real_distribution<double>(lo, hi)(rng) : lo;
    const Eigen::Index start = std::clamp<Eigen::Index>(round_half_up(cr - cut / 2.0), 0, common - cut);

    plan.lambda_raw.push_back(lambdas[i]);
    plan.ratio.push_back(ratio);
    plan.non_pad_len.push_back(own);
    plan.cut_len.push_back(cut);
    plan.center.push_back(cr);
    plan.start_idx.push_back(start);
    plan.end_idx.push_back(start + cut);
    plan.lam.push_back(1.0 - static_cast<double>(cut) / static_cast<double>(own));
  }
  return plan;
}

/// out[i, start:end] = in[flip(i), start:end]; everything else, including the
/// mask, is untouched.
template <typename T>
PaddedBatch<T> apply_span_mix(const PaddedBatch<T>& batch, const MixPlan& plan) {
  const Eigen::Index n = batch.size();
  if (static_cast<Eigen::Index>(plan.size()) != n) throw ShapeError("apply_span_mix: plan/batch size mismatch");
  PaddedBatch<T> out = batch;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = flip_index(i, n);
    const auto s = plan.start_idx[i], e = plan.end_idx[i];
    if (s < 0 || e > batch.lengths[i] || e > batch.lengths[j] || e - s != plan.cut_len[i])
      throw ShapeError("apply_span_mix: plan inconsistent with batch mask");
    out.data[i].middleRows(s, e - s) = batch.data[j].middleRows(s, e - s);
  }
  return out;
}

/// Convex interpolation with the reversed batch over the union of the two
/// valid prefixes, padding read as zero. Used for inputs (Mixup) and hidden
/// states (Manifold Mixup) alike.
template <typename T>
PaddedBatch<T> manifold_mix(const PaddedBatch<T>& hidden, double lambda) {
  require(lambda >= 0 && lambda <= 1, "mix lambda outside [0,1]");
  const Eigen::Index n = hidden.size();
  PaddedBatch<T> out = hidden;
  const T a = static_cast<T>(lambda), b = static_cast<T>(1.0 - lambda);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = flip_index(i, n);
    out.data[i] = a * hidden.data[i] + b * hidden.data[j];
    out.lengths[i] = std::max(hidden.lengths[i], hidden.lengths[j]);
  }
  return out;
}

/// Gradient of manifold_mix with respect to its input, given the gradient
/// on its output. Rows beyond each input sample's own prefix receive zero.
template <typename T>
std::vector<Mat<T>> manifold_mix_backward(const std::vector<Mat<T>>& grad_out,
                                          std::span<const Eigen::Index> in_lengths, double lambda) {
  const auto n = static_cast<Eigen::Index>(grad_out.size());
  const T a = static_cast<T>(lambda), b = static_cast<T>(1.0 - lambda);
  std::vector<Mat<T>> grad_in(grad_out.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = flip_index(i, n);
    grad_in[i] = a * grad_out[i] + b * grad_out[j];
    const auto len = in_lengths[i];
    grad_in[i].bottomRows(grad_in[i].rows() - len).setZero();
  }
  return grad_in;
}

struct MixedLabels {
  std::vector<int> y_a;  // own label
  std::vector<int> y_b;  // donor label
  double lambda;
};

template <typename T>
std::pair<PaddedBatch<T>, MixedLabels> mixup_pair(const PaddedBatch<T>& batch,
                                                  std::span<const int> labels, double lambda) {
  if (static_cast<Eigen::Index>(labels.size()) != batch.size())
    throw ShapeError("mixup_pair: label count mismatch");
  MixedLabels ml{{labels.begin(), labels.end()}, {}, lambda};
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    ml.y_b.push_back(labels[flip_index(i, batch.size())]);
  return {manifold_mix(batch, lambda), std::move(ml)};
}

/// Where fine-tuning interpolation happens: the input (Loc1), inside the first
/// encoder layer after the attention residual (Loc2), or on the encoder
/// output (Loc3).
enum class MixLocation { kNone = 0, kInput = 1, kEncoderInner = 2, kEncoderOutput = 3 };

struct MixConfig {
  bool loc_input = false;
  bool loc_inner = false;
  bool loc_output = false;
  double beta_a = 1.0, beta_b = 1.0;

  bool any() const { return loc_input || loc_inner || loc_output; }

  static MixConfig all() { return {true, true, true, 1.0, 1.0}; }

  /// One location per batch, uniformly among the enabled ones.
  MixLocation pick(Rng& rng) const {
    std::vector<MixLocation> enabled;
    if (loc_input) enabled.push_back(MixLocation::kInput);
    if (loc_inner) enabled.push_back(MixLocation::kEncoderInner);
    if (loc_output) enabled.push_back(MixLocation::kEncoderOutput);
    if (enabled.empty()) return MixLocation::kNone;
    std::uniform_int_distribution<std::size_t> pick(0, enabled.size() - 1);
    return enabled[pick(rng)];
  }
};

}  // namespace bagmix
