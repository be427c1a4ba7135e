// Barlow Twins cross-correlation loss, the slide-mixing loss built from it,
// and mixed-label cross-entropy. Every loss returns its value together with
// the gradient with respect to each embedding it consumed.
#pragma once

#include "bagmix/core.hpp"

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

namespace bagmix {

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.5;
  double gamma = 0.5;
  double lambda_bt = 0.0051;

  void validate() const {
    require(alpha >= 0 && beta >= 0 && gamma >= 0, "loss weights must be >= 0");
    require(lambda_bt > 0, "lambda_bt must be > 0");
  }
};

struct BarlowOptions {
  double eps = 1e-5;
  bool strict = false;  // reject zero-variance columns instead of relying on eps
};

template <typename T>
struct PairLoss {
  T value = 0;
  Mat<T> grad_a, grad_b;
};

template <typename T>
Mat<T> flip_rows(const Mat<T>& z) {
  return z.colwise().reverse();
}

namespace detail {

template <typename T>
struct ColumnNorm {
  Mat<T> zhat;
  RowVec<T> rstd;
};

template <typename T>
ColumnNorm<T> normalize_columns(const Mat<T>& z, const BarlowOptions& opt) {
  const RowVec<T> mean = z.colwise().mean();
  const Mat<T> centered = z.rowwise() - mean;
  const RowVec<T> var = centered.array().square().colwise().mean();
  if (opt.strict && (var.array() == T(0)).any())
    throw std::domain_error("original_loss: zero-variance embedding column");
  ColumnNorm<T> out;
  out.rstd = (var.array() + static_cast<T>(opt.eps)).rsqrt();
  out.zhat = centered.array().rowwise() * out.rstd.array();
  return out;
}

template <typename T>
Mat<T> normalize_columns_backward(const ColumnNorm<T>& c, const Mat<T>& dzhat) {
  const RowVec<T> m1 = dzhat.colwise().mean();
  const RowVec<T> m2 = (dzhat.array() * c.zhat.array()).colwise().mean();
  return ((dzhat.rowwise() - m1).array() - c.zhat.array().rowwise() * m2.array()).rowwise() *
         c.rstd.array();
}

}  // namespace detail

/// Normalized cross-correlation of two views (each column standardized over
/// the batch), then sum of squared diagonal deviations from 1 plus lambda_bt
/// times the sum of squared off-diagonal entries.
template <typename T>
PairLoss<T> original_loss(const Mat<T>& za, const Mat<T>& zb, double lambda_bt,
                          const BarlowOptions& opt = {}) {
  if (za.rows() != zb.rows() || za.cols() != zb.cols())
    throw ShapeError("original_loss: embedding shapes differ");
  if (za.rows() < 2) throw std::invalid_argument("original_loss: batch size must be >= 2");
  const T n = static_cast<T>(za.rows());
  const auto na = detail::normalize_columns(za, opt);
  const auto nb = detail::normalize_columns(zb, opt);
  const Mat<T> c = na.zhat.transpose() * nb.zhat / n;
  const T lam = static_cast<T>(lambda_bt);

  Mat<T> dc = T(2) * lam * c;
  T off = 0, on = 0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (i == j) {
        on += (c(i, i) - 1) * (c(i, i) - 1);
        dc(i, i) = T(2) * (c(i, i) - 1);
      } else {
        off += c(i, j) * c(i, j);
      }
    }
  PairLoss<T> out;
  out.value = on + lam * off;
  out.grad_a = detail::normalize_columns_backward<T>(na, nb.zhat * dc.transpose() / n);
  out.grad_b = detail::normalize_columns_backward<T>(nb, na.zhat * dc / n);
  return out;
}

/// mean_i(lam_a[i] * L(zx, zy) + lam_b[i] * L(zx, flip(zy))). The two inner
/// losses are scalars, so this equals mean(lam_a) * L + mean(lam_b) * L_flip.
template <typename T>
PairLoss<T> mix_loss(const Mat<T>& zx, const Mat<T>& zy, std::span<const double> lam_a,
                     std::span<const double> lam_b, double lambda_bt, const BarlowOptions& opt = {}) {
  if (static_cast<Eigen::Index>(lam_a.size()) != zx.rows() || lam_b.size() != lam_a.size())
    throw ShapeError("mix_loss: weight vectors must match the batch size");
  const auto o = original_loss(zx, zy, lambda_bt, opt);
  const auto f = original_loss<T>(zx, flip_rows(zy), lambda_bt, opt);
  T mix_sum = 0, wa = 0, wb = 0;
  for (std::size_t i = 0; i < lam_a.size(); ++i) {
    mix_sum += static_cast<T>(lam_a[i]) * o.value + static_cast<T>(lam_b[i]) * f.value;
    wa += static_cast<T>(lam_a[i]);
    wb += static_cast<T>(lam_b[i]);
  }
  const T n = static_cast<T>(lam_a.size());
  wa /= n;
  wb /= n;
  PairLoss<T> out;
  out.value = mix_sum / n;
  out.grad_a = wa * o.grad_a + wb * f.grad_a;
  out.grad_b = wa * o.grad_b + wb * flip_rows<T>(f.grad_b);
  return out;
}

template <typename T>
struct PretrainLoss {
  T total = 0;
  T source = 0;
  T mix_source = 0;
  T mix = 0;
  Mat<T> grad_a, grad_b, grad_a_mix, grad_b_mix;
};

/// Overlap weight between sample i and its donor, elementwise over the batch.
inline std::vector<double> mix_overlap(std::span<const double> lam) {
  const std::size_t n = lam.size();
  std::vector<double> com(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = lam[n - 1 - i];
    com[i] = std::min(lam[i], 1.0 - f) + std::min(1.0 - lam[i], f);
  }
  return com;
}

/// alpha * L(Z_A, Z_B) + beta * Mix(Z_BMix, Z_A; lam, 1-lam)
///   + gamma * Mix(Z_BMix, Z_AMix; 1/(1+com), com/(1+com)).
template <typename T>
PretrainLoss<T> total_pretrain_loss(const Mat<T>& za, const Mat<T>& zb, const Mat<T>& za_mix,
                                    const Mat<T>& zb_mix, std::span<const double> lam,
                                    const LossWeights& w, const BarlowOptions& opt = {}) {
  w.validate();
  const std::size_t n = lam.size();
  for (double l : lam) require(l >= 0 && l <= 1, "total_pretrain_loss: lam outside [0,1]");
  std::vector<double> one_minus(n), keep(n), give(n);
  const auto com = mix_overlap(lam);
  for (std::size_t i = 0; i < n; ++i) {
    one_minus[i] = 1.0 - lam[i];
    keep[i] = 1.0 / (1.0 + com[i]);
    give[i] = com[i] / (1.0 + com[i]);
  }
  const auto src = original_loss(za, zb, w.lambda_bt, opt);
  const auto ms = mix_loss(zb_mix, za, lam, std::span<const double>(one_minus), w.lambda_bt, opt);
  const auto mx = mix_loss(zb_mix, za_mix, std::span<const double>(keep), std::span<const double>(give),
                           w.lambda_bt, opt);
  const T a = static_cast<T>(w.alpha), b = static_cast<T>(w.beta), g = static_cast<T>(w.gamma);
  PretrainLoss<T> out;
  out.source = src.value;
  out.mix_source = ms.value;
  out.mix = mx.value;
  out.total = a * src.value + b * ms.value + g * mx.value;
  out.grad_a = a * src.grad_a + b * ms.grad_b;
  out.grad_b = a * src.grad_b;
  out.grad_a_mix = g * mx.grad_b;
  out.grad_b_mix = b * ms.grad_a + g * mx.grad_a;
  return out;
}

template <typename T>
struct ClassLoss {
  T value = 0;
  Mat<T> grad;  // with respect to the logits
};

/// mean_i [lambda * CE(logits_i, y_a_i) + (1 - lambda) * CE(logits_i, y_b_i)].
template <typename T>
ClassLoss<T> cross_entropy_mixed(const Mat<T>& logits, std::span<const int> y_a, std::span<const int> y_b,
                                 double lambda) {
  require(lambda >= 0 && lambda <= 1, "cross_entropy_mixed: lambda outside [0,1]");
  const Eigen::Index n = logits.rows(), k = logits.cols();
  if (static_cast<Eigen::Index>(y_a.size()) != n || static_cast<Eigen::Index>(y_b.size()) != n)
    throw ShapeError("cross_entropy_mixed: label count mismatch");
  const T lam = static_cast<T>(lambda);
  ClassLoss<T> out;
  out.grad = Mat<T>::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y_a[i] < 0 || y_a[i] >= k || y_b[i] < 0 || y_b[i] >= k)
      throw std::invalid_argument("cross_entropy_mixed: invalid class index");
    const T mx = logits.row(i).maxCoeff();
    const RowVec<T> shifted = logits.row(i).array() - mx;
    const T lse = std::log(shifted.array().exp().sum());
    const RowVec<T> logp = shifted.array() - lse;
    out.value -= lam * logp(y_a[i]) + (1 - lam) * logp(y_b[i]);
    RowVec<T> g = logp.array().exp();
    g(y_a[i]) -= lam;
    g(y_b[i]) -= 1 - lam;
    out.grad.row(i) = g / static_cast<T>(n);
  }
  out.value /= static_cast<T>(n);
  return out;
}

template <typename T>
ClassLoss<T> cross_entropy(const Mat<T>& logits, std::span<const int> y) {
  return cross_entropy_mixed(logits, y, y, 1.0);
}

}  // namespace bagmix
