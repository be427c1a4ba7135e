// Shared numeric types, error types and seeded random streams.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bagmix {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

/// Thrown when a file or payload does not match its declared format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when shapes of cooperating tensors disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Independent generator for a named component ("data", "augment", "mixing",
/// "init", "al", ...). Changing how many draws one component makes never
/// shifts the draws of another.
inline Rng substream(std::uint64_t master_seed, std::string_view name) {
  const std::uint64_t h = fnv1a64(name);
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(h),
                    static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

/// Round half away from zero for non-negative values, i.e. floor(x + 0.5).
inline long round_half_up(double x) {
  return static_cast<long>(std::floor(x + 0.5));
}

template <typename T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

}  // namespace bagmix
