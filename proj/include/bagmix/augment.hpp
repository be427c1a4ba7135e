// Feature-space slide augmentations used to build two pre-training views of
// each slide. Every transform maps a valid bag to a valid bag.
#pragma once

#include "bagmix/bagio.hpp"

#include <random>

namespace bagmix {

struct AugmentConfig {
  double p_flip = 0.5;
  double p_crop = 0.5;
  double p_zero = 0.5;
  double p_scale = 0.5;
  double p_noise = 0.1;
  double zero_rate = 0.25;
  double noise_sigma = 0.1;
  double scale_lo = 0.8, scale_hi = 1.2;
  double crop_keep_lo = 0.5, crop_keep_hi = 1.0;

  void validate() const {
    for (double p : {p_flip, p_crop, p_zero, p_scale, p_noise})
      require(p >= 0 && p <= 1, "augmentation probabilities must lie in [0,1]");
    require(zero_rate >= 0 && zero_rate < 1, "zero_rate must lie in [0,1)");
    require(noise_sigma >= 0, "noise_sigma must be >= 0");
    require(scale_lo > 0 && scale_lo <= scale_hi, "scale range must satisfy 0 < lo <= hi");
    require(crop_keep_lo > 0 && crop_keep_lo <= crop_keep_hi && crop_keep_hi <= 1,
            "crop keep range must satisfy 0 < lo <= hi <= 1");
  }

  static AugmentConfig identity() {
    AugmentConfig c;
    c.p_flip = c.p_crop = c.p_zero = c.p_scale = c.p_noise = 0;
    return c;
  }
};

inline FeatureBag random_flip(const FeatureBag& bag, Rng& /*rng*/) {
  FeatureBag out = bag;
  out.features = bag.features.colwise().reverse();
  return out;
}

/// Zeros each region independently with probability `zero_rate`; a draw that
/// would zero every region is rejected and redrawn.
inline FeatureBag random_zero(const FeatureBag& bag, Rng& rng, double zero_rate) {
  require(zero_rate >= 0 && zero_rate < 1, "zero_rate must lie in [0,1)");
  FeatureBag out = bag;
  if (zero_rate == 0) return out;
  const auto r = bag.regions();
  std::bernoulli_distribution coin(zero_rate);
  std::vector<char> chosen(r);
  for (;;) {
    Eigen::Index count = 0;
    for (auto& c : chosen) count += (c = coin(rng));
    if (count < r) break;
  }
  for (Eigen::Index i = 0; i < r; ++i)
    if (chosen[i]) out.features.row(i).setZero();
  return out;
}

inline FeatureBag gaussian_noise(const FeatureBag& bag, Rng& rng, double sigma) {
  require(sigma >= 0, "noise sigma must be >= 0");
  FeatureBag out = bag;
  if (sigma == 0) return out;
  std::normal_distribution<double> normal(0.0, sigma);
  for (Eigen::Index i = 0; i < out.features.size(); ++i)
    out.features.data()[i] = static_cast<float>(out.features.data()[i] + normal(rng));
  return out;
}

inline FeatureBag random_scale(const FeatureBag& bag, Rng& rng, double lo, double hi) {
  require(lo > 0 && lo <= hi, "scale range must satisfy 0 < lo <= hi");
  FeatureBag out = bag;
  if (lo == hi && lo == 1.0) return out;
  const double s = lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  out.features *= static_cast<float>(s);
  return out;
}

/// Keeps a contiguous run of max(1, round(keep * R)) regions, keep ~ U[lo, hi].
inline FeatureBag random_crop(const FeatureBag& bag, Rng& rng, double keep_lo, double keep_hi) {
  require(keep_lo > 0 && keep_lo <= keep_hi && keep_hi <= 1, "crop keep range must lie in (0,1]");
  const auto r = bag.regions();
  const double keep = keep_lo == keep_hi ? keep_lo
                                         : std::uniform_real_distribution<double>(keep_lo, keep_hi)(rng);
  const Eigen::Index n = std::clamp<Eigen::Index>(round_half_up(keep * r), 1, r);
  if (n == r) return bag;
  const auto start = std::uniform_int_distribution<Eigen::Index>(0, r - n)(rng);
  FeatureBag out = bag;
  out.features = bag.features.middleRows(start, n);
  return out;
}

/// One augmented view: flip -> crop -> zero -> scale -> noise, each gated by
/// its own probability. The gate coin is drawn even for probability 0 so the
/// stream position does not depend on the configuration.
inline FeatureBag augment_view(const FeatureBag& bag, Rng& rng, const AugmentConfig& cfg) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FeatureBag out = bag;
  if (unit(rng) < cfg.p_flip) out = random_flip(out, rng);
  if (unit(rng) < cfg.p_crop) out = random_crop(out, rng, cfg.crop_keep_lo, cfg.crop_keep_hi);
  if (unit(rng) < cfg.p_zero) out = random_zero(out, rng, cfg.zero_rate);
  if (unit(rng) < cfg.p_scale) out = random_scale(out, rng, cfg.scale_lo, cfg.scale_hi);
  if (unit(rng) < cfg.p_noise) out = gaussian_noise(out, rng, cfg.noise_sigma);
  return out;
}

/// Random-quarter view: a contiguous run covering `fraction` of the regions
/// at a random start, so two views of one slide overlap by chance.
inline FeatureBag random_quarter_view(const FeatureBag& bag, Rng& rng, double fraction = 0.25) {
  return random_crop(bag, rng, fraction, fraction);
}

}  // namespace bagmix
