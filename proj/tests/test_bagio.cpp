#include "bagmix/bagio.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

using namespace bagmix;
using bagmix::testing::random_bag;
using bagmix::testing::TempDir;

TEST(BagFile, RoundTripIsBitExact) {
  TempDir dir("bagio");
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto bag = random_bag(rng, 1 + trial % 9, 1 + trial % 5, "s" + std::to_string(trial));
    bag.label = trial % 2;
    save_bag(bag, dir / "b.pmx");
    EXPECT_EQ(load_bag(dir / "b.pmx", bag.slide_id, bag.label), bag);
  }
}

TEST(BagFile, LayoutMatchesHeaderPlusPayload) {
  TempDir dir("bagio");
  Mat<float> m(3, 2);
  m << 1, 2, 3, 4, 5, 6;
  save_bag({"x", m, std::nullopt}, dir / "b.pmx");
  const auto bytes = detail::read_file(dir / "b.pmx");
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 24);
  EXPECT_EQ(std::string(bytes.data(), 4), "PMX1");
  EXPECT_EQ(detail::get_u32(bytes.data() + 4), 1u);
  EXPECT_EQ(detail::get_u32(bytes.data() + 8), 3u);
  EXPECT_EQ(detail::get_u32(bytes.data() + 12), 2u);
  EXPECT_EQ(detail::get_f32(bytes.data() + 16 + 4 * 3), 4.0f);  // row-major
}

TEST(BagFile, RepeatedSavesAreByteIdentical) {
  TempDir dir("bagio");
  Rng rng(3);
  const auto bag = random_bag(rng, 17, 8);
  save_bag(bag, dir / "a.pmx");
  save_bag(bag, dir / "b.pmx");
  const auto a = detail::read_file(dir / "a.pmx"), b = detail::read_file(dir / "b.pmx");
  EXPECT_EQ(fnv1a64({a.data(), a.size()}), fnv1a64({b.data(), b.size()}));
  EXPECT_EQ(a, b);
}

TEST(BagFile, RejectsNonFiniteFeatures) {
  TempDir dir("bagio");
  Mat<float> m = Mat<float>::Ones(2, 2);
  m(1, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(save_bag({"nan", m, std::nullopt}, dir / "n.pmx"), std::invalid_argument);
}

TEST(BagFile, RejectsBadMagic) {
  auto bytes = encode_bag(Mat<float>::Ones(2, 2));
  std::copy_n("XXXX", 4, bytes.begin());
  EXPECT_THROW(decode_bag(bytes), FormatError);
}

TEST(BagFile, RejectsTruncatedPayload) {
  auto bytes = encode_bag(Mat<float>::Ones(4, 3));
  bytes[8] = 5;  // header now claims R=5 while the payload holds 4 rows
  EXPECT_THROW(decode_bag(bytes), FormatError);
  auto short_bytes = encode_bag(Mat<float>::Ones(4, 3));
  short_bytes.resize(short_bytes.size() - 1);
  EXPECT_THROW(decode_bag(short_bytes), FormatError);
}

TEST(PadBatch, ShapesAndMask) {
  Rng rng(1);
  std::vector<FeatureBag> bags{random_bag(rng, 3, 4), random_bag(rng, 5, 4)};
  const auto b = pad_batch<float>(bags);
  EXPECT_EQ(b.r_max(), 5);
  EXPECT_EQ(b.lengths, (std::vector<Eigen::Index>{3, 5}));
  const auto mask = b.mask();
  EXPECT_EQ(mask.row(0).count(), 3);
  EXPECT_EQ(mask.row(1).count(), 5);
  EXPECT_NO_THROW(b.validate());
}

TEST(PadBatch, SingleBagHasNoPadding) {
  Rng rng(2);
  std::vector<FeatureBag> bags{random_bag(rng, 4, 3)};
  const auto b = pad_batch<float>(bags);
  EXPECT_EQ(b.r_max(), 4);
  EXPECT_TRUE(b.mask().all());
}

TEST(PadBatch, ValidCountEqualsTotalRegionsAndUnpadRecovers) {
  Rng rng(5);
  std::uniform_int_distribution<int> size(1, 40);
  std::vector<FeatureBag> bags;
  long total = 0;
  for (int i = 0; i < 32; ++i) {
    bags.push_back(random_bag(rng, size(rng), 6));
    total += bags.back().regions();
  }
  const auto b = pad_batch<float>(bags);
  EXPECT_EQ(b.mask().count(), total);
  const auto back = unpad(b);
  for (std::size_t i = 0; i < bags.size(); ++i) {
    EXPECT_EQ(back[i], bags[i].features);
    EXPECT_TRUE(b.data[i].bottomRows(b.r_max() - bags[i].regions()).isZero(0));
  }
}

TEST(PadBatch, Errors) {
  Rng rng(9);
  EXPECT_THROW(pad_batch<float>(std::vector<FeatureBag>{}), std::invalid_argument);
  std::vector<FeatureBag> mixed{random_bag(rng, 3, 4), random_bag(rng, 3, 5)};
  EXPECT_THROW(pad_batch<float>(mixed), ShapeError);
}

TEST(PadBatch, MaskMustBeAPrefix) {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(1, 3);
  m << true, false, true;
  EXPECT_THROW(PaddedBatch<float>::lengths_from_mask(m), ShapeError);
  m << true, true, false;
  EXPECT_EQ(PaddedBatch<float>::lengths_from_mask(m).front(), 2);
}

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.n_pretrain = 12;
  s.n_pool = 10;
  s.n_test = 8;
  s.dim = 6;
  s.r_min = 2;
  s.r_max = 9;
  s.seed = 11;
  return s;
}

}  // namespace

TEST(Synth, SameSeedGivesByteIdenticalDatasets) {
  TempDir a("synth"), b("synth");
  synth_dataset(small_spec(), a.path());
  synth_dataset(small_spec(), b.path());
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    EXPECT_EQ(detail::read_file(entry.path()), detail::read_file(b.path() / rel)) << rel;
  }
}

TEST(Synth, LabelQuotasAndDisjointSplits) {
  const auto spec = small_spec();
  const auto slides = synth_slides(spec);
  std::map<Split, std::pair<int, int>> counts;  // total, tumor
  std::set<std::string> ids;
  for (const auto& s : slides) {
    auto& c = counts[s.split];
    ++c.first;
    c.second += *s.bag.label;
    EXPECT_TRUE(ids.insert(s.bag.slide_id).second);
    EXPECT_GE(s.bag.regions(), spec.r_min);
    EXPECT_LE(s.bag.regions(), spec.r_max);
  }
  EXPECT_EQ(counts[Split::kPretrain], std::make_pair(12, spec.tumor_quota(12)));
  EXPECT_EQ(counts[Split::kPool], std::make_pair(10, spec.tumor_quota(10)));
  EXPECT_EQ(counts[Split::kTest], std::make_pair(8, spec.tumor_quota(8)));
}

TEST(Synth, StrongSignalIsSeparableByMeanThreshold) {
  SynthSpec spec;
  spec.n_pretrain = 0;
  spec.n_pool = 200;
  spec.n_test = 200;
  spec.dim = 16;
  spec.signal_fraction = 1.0;
  spec.shift = 6.0;
  spec.seed = 21;
  const Vec<double> u = synth_signal_direction(spec);
  const Vec<double> base = synth_base_mean(spec);
  const double threshold = base.dot(u) + spec.shift / 2;
  int correct = 0, total = 0;
  for (const auto& s : synth_slides(spec)) {
    const Vec<double> mean = s.bag.features.cast<double>().colwise().mean().transpose();
    correct += (mean.dot(u) > threshold) == (*s.bag.label == 1);
    ++total;
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.99);
}

TEST(Synth, InvalidSpecRejected) {
  auto s = small_spec();
  s.r_min = 0;
  EXPECT_THROW(synth_slides(s), std::invalid_argument);
  s = small_spec();
  s.shift = 0;
  EXPECT_THROW(synth_slides(s), std::invalid_argument);
}

TEST(Manifest, JsonRoundTripAndLoad) {
  TempDir dir("manifest");
  const auto m = synth_dataset(small_spec(), dir.path());
  const auto loaded = load_manifest(dir / "manifest.json");
  ASSERT_EQ(loaded.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    EXPECT_EQ(loaded.entries[i].id, m.entries[i].id);
    EXPECT_EQ(loaded.entries[i].label, m.entries[i].label);
    EXPECT_EQ(loaded.entries[i].split, m.entries[i].split);
  }
  const auto bag = loaded.load(loaded.entries.front());
  EXPECT_EQ(bag.slide_id, loaded.entries.front().id);
  EXPECT_EQ(loaded.split(Split::kTest).size(), 8u);
}

TEST(Manifest, DuplicateIdsAndNullLabels) {
  auto j = nlohmann::json::parse(R"([{"id":"a","path":"a.pmx","label":null,"split":"pool"},
                                     {"id":"a","path":"b.pmx","label":1,"split":"test"}])");
  EXPECT_THROW(manifest_from_json(j, "."), FormatError);
  j[1]["id"] = "b";
  const auto m = manifest_from_json(j, ".");
  EXPECT_FALSE(m.entries[0].label.has_value());
  EXPECT_EQ(m.entries[1].label, 1);
  j[1]["split"] = "train";
  EXPECT_THROW(manifest_from_json(j, "."), FormatError);
}
