// Feature bags: one slide's ragged region-feature matrix, the PMX1 bag file
// format, zero-padded batching with validity masks, the JSON dataset
// manifest, and a seeded synthetic dataset generator.
#pragma once

#include "bagmix/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bagmix {

inline constexpr int kDefaultFeatureDim = 192;

struct FeatureBag {
  std::string slide_id;
  Mat<float> features;       // R x d
  std::optional<int> label;  // 0 = normal, 1 = tumor

  Eigen::Index regions() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }

  void validate() const {
    if (features.rows() < 1 || features.cols() < 1)
      throw std::invalid_argument("bag '" + slide_id + "' has no regions");
    if (!features.allFinite())
      throw std::invalid_argument("bag '" + slide_id + "' has non-finite features");
    if (label && *label != 0 && *label != 1)
      throw std::invalid_argument("bag '" + slide_id + "' has label outside {0,1}");
  }

  friend bool operator==(const FeatureBag& a, const FeatureBag& b) {
    return a.slide_id == b.slide_id && a.label == b.label &&
           a.features.rows() == b.features.rows() &&
           a.features.cols() == b.features.cols() &&
           std::memcmp(a.features.data(), b.features.data(),
                       sizeof(float) * a.features.size()) == 0;
  }
};

// ---------------------------------------------------------------------------
// PMX1 bag file: "PMX1", u32 version=1, u32 R, u32 d, R*d float32 row-major,
// all little-endian.

namespace detail {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::vector<char>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

inline constexpr std::array<char, 4> kBagMagic{'P', 'M', 'X', '1'};
inline constexpr std::uint32_t kBagVersion = 1;

inline std::vector<char> encode_bag(const Mat<float>& features) {
  if (!features.allFinite()) throw std::invalid_argument("non-finite feature value");
  std::vector<char> out(kBagMagic.begin(), kBagMagic.end());
  out.reserve(16 + 4 * static_cast<std::size_t>(features.size()));
  detail::put_u32(out, kBagVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(features.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index i = 0; i < features.size(); ++i) detail::put_f32(out, features.data()[i]);
  return out;
}

inline Mat<float> decode_bag(std::span<const char> bytes) {
  if (bytes.size() < 16) throw FormatError("truncated bag header");
  if (!std::equal(kBagMagic.begin(), kBagMagic.end(), bytes.begin()))
    throw FormatError("bad magic: expected PMX1");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kBagVersion) throw FormatError("unsupported bag version " + std::to_string(version));
  const auto rows = detail::get_u32(bytes.data() + 8);
  const auto cols = detail::get_u32(bytes.data() + 12);
  if (rows == 0 || cols == 0) throw FormatError("bag header declares an empty matrix");
  const std::size_t expected = 16 + 4ULL * rows * cols;
  if (bytes.size() < expected) throw FormatError("truncated bag payload");
  if (bytes.size() > expected) throw FormatError("bag payload larger than header shape");
  Mat<float> m(rows, cols);
  const char* p = bytes.data() + 16;
  for (Eigen::Index i = 0; i < m.size(); ++i, p += 4) m.data()[i] = detail::get_f32(p);
  if (!m.allFinite()) throw FormatError("bag payload contains non-finite values");
  return m;
}

/// Writes only the feature matrix; identity and label live in the manifest.
inline void save_bag(const FeatureBag& bag, const std::filesystem::path& path) {
  bag.validate();
  detail::write_file(path, encode_bag(bag.features));
}

inline FeatureBag load_bag(const std::filesystem::path& path, std::string slide_id = {},
                           std::optional<int> label = std::nullopt) {
  const auto bytes = detail::read_file(path);
  FeatureBag bag{slide_id.empty() ? path.stem().string() : std::move(slide_id),
                 decode_bag(bytes), label};
  bag.validate();
  return bag;
}

// ---------------------------------------------------------------------------
// Padded batches. Real regions occupy a prefix of each sample; padding is
// trailing and exactly zero.

template <typename T>
struct PaddedBatch {
  std::vector<Mat<T>> data;  // N entries, each R_max x d
  std::vector<Eigen::Index> lengths;  // valid prefix length per sample

  Eigen::Index size() const { return static_cast<Eigen::Index>(data.size()); }
  Eigen::Index r_max() const { return data.empty() ? 0 : data.front().rows(); }
  Eigen::Index dim() const { return data.empty() ? 0 : data.front().cols(); }
  bool valid(Eigen::Index i, Eigen::Index t) const { return t < lengths[i]; }

  /// N x R_max validity mask.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask() const {
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(size(), r_max());
    for (Eigen::Index i = 0; i < size(); ++i)
      for (Eigen::Index t = 0; t < r_max(); ++t) m(i, t) = valid(i, t);
    return m;
  }

  void validate() const {
    if (data.empty()) throw ShapeError("empty batch");
    if (lengths.size() != data.size()) throw ShapeError("lengths/data size mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].rows() != r_max() || data[i].cols() != dim())
        throw ShapeError("ragged sample inside padded batch");
      if (lengths[i] < 1 || lengths[i] > r_max())
        throw ShapeError("sample without a valid region");
      if (!data[i].bottomRows(r_max() - lengths[i]).isZero(0))
        throw ShapeError("non-zero padding");
    }
  }

  /// Builds a batch from a validity mask whose rows must be contiguous prefixes.
  static std::vector<Eigen::Index> lengths_from_mask(
      const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m) {
    std::vector<Eigen::Index> out(m.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      Eigen::Index n = 0;
      while (n < m.cols() && m(i, n)) ++n;
      for (Eigen::Index t = n; t < m.cols(); ++t)
        if (m(i, t)) throw ShapeError("validity mask is not a contiguous prefix");
      out[i] = n;
    }
    return out;
  }
};

template <typename T = float>
PaddedBatch<T> pad_batch(std::span<const FeatureBag> bags) {
  if (bags.empty()) throw std::invalid_argument("pad_batch: empty bag list");
  const Eigen::Index d = bags.front().dim();
  Eigen::Index r_max = 0;
  for (const auto& b : bags) {
    if (b.dim() != d) throw ShapeError("pad_batch: mixed feature dimensions");
    if (b.regions() < 1) throw ShapeError("pad_batch: bag without regions");
    r_max = std::max(r_max, b.regions());
  }
  PaddedBatch<T> out;
  out.data.reserve(bags.size());
  for (const auto& b : bags) {
    Mat<T> m = Mat<T>::Zero(r_max, d);
    m.topRows(b.regions()) = b.features.template cast<T>();
    out.data.push_back(std::move(m));
    out.lengths.push_back(b.regions());
  }
  return out;
}

template <typename T>
std::vector<Mat<T>> unpad(const PaddedBatch<T>& batch) {
  std::vector<Mat<T>> out;
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    out.push_back(batch.data[i].topRows(batch.lengths[i]));
  return out;
}

/// Copy of `batch` with `extra` all-padding positions appended.
template <typename T>
PaddedBatch<T> extend_padding(const PaddedBatch<T>& batch, Eigen::Index extra) {
  PaddedBatch<T> out = batch;
  for (auto& m : out.data) {
    Mat<T> grown = Mat<T>::Zero(m.rows() + extra, m.cols());
    grown.topRows(m.rows()) = m;
    m = std::move(grown);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest.

enum class Split { kPretrain, kPool, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kPretrain: return "pretrain";
    case Split::kPool: return "pool";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "pretrain") return Split::kPretrain;
  if (s == "pool") return Split::kPool;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory, or absolute
  std::optional<int> label;
  Split split;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory that relative paths resolve against

  std::vector<const ManifestEntry*> split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }

  const ManifestEntry* find(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return &e;
    return nullptr;
  }

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return p.is_absolute() ? p : root / p;
  }

  FeatureBag load(const ManifestEntry& e) const { return load_bag(resolve(e), e.id, e.label); }

  void validate() const {
    std::vector<std::string> ids;
    for (const auto& e : entries) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw FormatError("manifest has duplicate slide ids");
  }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  auto arr = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j;
    j["id"] = e.id;
    j["path"] = e.path;
    j["label"] = e.label ? nlohmann::json(*e.label) : nlohmann::json(nullptr);
    j["split"] = to_string(e.split);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& arr,
                                          std::filesystem::path root) {
  if (!arr.is_array()) throw FormatError("manifest must be a JSON array");
  DatasetManifest m;
  m.root = std::move(root);
  for (const auto& j : arr) {
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    if (!j.at("label").is_null()) {
      const int label = j.at("label").get<int>();
      if (label != 0 && label != 1) throw FormatError("label outside {0,1} for " + e.id);
      e.label = label;
    }
    e.split = split_from_string(j.at("split").get<std::string>());
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest_to_json(m).dump(1) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const auto m = manifest_from_json(nlohmann::json::parse(in), path.parent_path());
  for (const auto& e : m.entries)
    if (!std::filesystem::exists(m.resolve(e)))
      throw std::runtime_error("manifest path not found: " + m.resolve(e).string());
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic slides. Normal regions ~ N(base, noise^2 I); a tumor slide
// replaces a contiguous run of ceil(signal_fraction * R) regions with
// N(base + shift * u, noise^2 I) for a fixed unit direction u.

struct SynthSpec {
  int n_pretrain = 300;
  int n_pool = 100;
  int n_test = 128;
  int dim = 32;
  int r_min = 8;
  int r_max = 32;
  double tumor_fraction = 0.4;  // per-split share of tumor slides
  double signal_fraction = 0.25;
  double shift = 2.0;
  double noise = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_pretrain >= 0 && n_pool >= 0 && n_test >= 0, "split sizes must be >= 0");
    require(dim >= 1, "dim must be >= 1");
    require(r_min >= 1 && r_min <= r_max, "bag size range must satisfy 1 <= r_min <= r_max");
    require(tumor_fraction >= 0 && tumor_fraction <= 1, "tumor_fraction must lie in [0,1]");
    require(signal_fraction > 0 && signal_fraction <= 1, "signal_fraction must lie in (0,1]");
    require(shift > 0, "shift must be > 0");
    require(noise > 0, "noise must be > 0");
  }

  int tumor_quota(int n) const { return static_cast<int>(round_half_up(tumor_fraction * n)); }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"n_pretrain", s.n_pretrain}, {"n_pool", s.n_pool},   {"n_test", s.n_test},
          {"dim", s.dim},               {"r_min", s.r_min},     {"r_max", s.r_max},
          {"tumor_fraction", s.tumor_fraction},
          {"signal_fraction", s.signal_fraction},
          {"shift", s.shift},           {"noise", s.noise},     {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.n_pretrain = j.value("n_pretrain", s.n_pretrain);
  s.n_pool = j.value("n_pool", s.n_pool);
  s.n_test = j.value("n_test", s.n_test);
  s.dim = j.value("dim", s.dim);
  s.r_min = j.value("r_min", s.r_min);
  s.r_max = j.value("r_max", s.r_max);
  s.tumor_fraction = j.value("tumor_fraction", s.tumor_fraction);
  s.signal_fraction = j.value("signal_fraction", s.signal_fraction);
  s.shift = j.value("shift", s.shift);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

struct SynthSlide {
  FeatureBag bag;
  Split split;
};

/// Unit direction along which tumor regions are shifted.
inline Vec<double> synth_signal_direction(const SynthSpec& spec) {
  Rng rng = substream(spec.seed, "synth/direction");
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec<double> u(spec.dim);
  for (auto& v : u) v = normal(rng);
  return u / u.norm();
}

inline Vec<double> synth_base_mean(const SynthSpec& spec) {
  Rng rng = substream(spec.seed, "synth/base");
  std::normal_distribution<double> normal(0.0, 0.5);
  Vec<double> m(spec.dim);
  for (auto& v : m) v = normal(rng);
  return m;
}

/// In-memory generation; a pure function of `spec`.
inline std::vector<SynthSlide> synth_slides(const SynthSpec& spec) {
  spec.validate();
  const Vec<double> u = synth_signal_direction(spec);
  const Vec<double> base = synth_base_mean(spec);
  std::vector<SynthSlide> out;
  const auto make_split = [&](Split split, int n) {
    Rng rng = substream(spec.seed, "synth/" + to_string(split));
    std::vector<int> labels(n, 0);
    std::fill(labels.begin(), labels.begin() + spec.tumor_quota(n), 1);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::uniform_int_distribution<int> size_dist(spec.r_min, spec.r_max);
    std::normal_distribution<double> normal(0.0, spec.noise);
    for (int k = 0; k < n; ++k) {
      const int r = size_dist(rng);
      Mat<double> x(r, spec.dim);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
      x.rowwise() += base.transpose();
      if (labels[k] == 1) {
        const int tumor = static_cast<int>(std::ceil(spec.signal_fraction * r));
        std::uniform_int_distribution<int> start_dist(0, r - tumor);
        const int start = start_dist(rng);
        x.middleRows(start, tumor).rowwise() += (spec.shift * u).transpose();
      }
      char id[32];
      std::snprintf(id, sizeof id, "%s_%04d", to_string(split).c_str(), k);
      out.push_back({FeatureBag{id, x.cast<float>(), labels[k]}, split});
    }
  };
  make_split(Split::kPretrain, spec.n_pretrain);
  make_split(Split::kPool, spec.n_pool);
  make_split(Split::kTest, spec.n_test);
  return out;
}

/// Writes bags under `out_dir/bags/` and `out_dir/manifest.json`.
inline DatasetManifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  const auto slides = synth_slides(spec);
  std::filesystem::create_directories(out_dir / "bags");
  DatasetManifest m;
  m.root = out_dir;
  for (const auto& s : slides) {
    const std::string rel = "bags/" + s.bag.slide_id + ".pmx";
    save_bag(s.bag, out_dir / rel);
    m.entries.push_back({s.bag.slide_id, rel, s.bag.label, s.split});
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace bagmix
