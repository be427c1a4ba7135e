#include "bagmix/aggregator.hpp"
#include "bagmix/checkpoint.hpp"

#include "gradcheck.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace bagmix;
using bagmix::testing::check_param_gradients;
using bagmix::testing::numeric_input_gradient;
using bagmix::testing::random_batch;
using bagmix::testing::relative_error;
using bagmix::testing::TempDir;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.input_dim = 6;
  a.hidden = 8;
  a.layers = 1;
  a.heads = 2;
  a.ff_ratio = 2;
  a.pool_dim = 5;
  a.projector = {7, 7, 5};
  return a;
}

/// Perturbs every tensor away from its structured init so no gradient is
/// accidentally zero (e.g. zero biases, unit norms).
AggregatorParams<double> jittered(const ArchConfig& arch, std::uint64_t seed) {
  auto p = init_params<double>(seed, arch);
  Rng rng(seed + 100);
  std::normal_distribution<double> n(0, 0.1);
  for (auto& r : param_refs(p))
    for (Eigen::Index k = 0; k < r.size(); ++k) r.data[k] += n(rng);
  return p;
}

double weighted_sum(const Mat<double>& out, const Mat<double>& w) { return (out.array() * w.array()).sum(); }

}  // namespace

TEST(InitParams, DeterministicAndZeroBiases) {
  const auto a = init_params<double>(5, tiny_arch());
  const auto b = init_params<double>(5, tiny_arch());
  const auto ra = param_refs(a), rb = param_refs(b);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].map(), rb[i].map()) << ra[i].name;
    if (ra[i].name.ends_with(".bias")) { EXPECT_TRUE(ra[i].map().isZero(0)) << ra[i].name; }
    if (ra[i].name.ends_with(".gamma")) { EXPECT_TRUE(ra[i].map().isOnes(0)) << ra[i].name; }
  }
  const auto c = init_params<double>(6, tiny_arch());
  EXPECT_NE(param_refs(c)[0].map(), ra[0].map());
}

TEST(InitParams, CountMatchesClosedForm) {
  ArchConfig a;  // d=192, h=192, 2 layers, 3 heads
  a.input_dim = 192;
  const auto p = allocate_params<float>(a);
  EXPECT_EQ(param_count(p), expected_param_count(a));
  // Independent hand count for the default architecture.
  const std::size_t h = 192, f = 768;
  const std::size_t per_layer = 4 * h + 4 * (h * h + h) + h * f + f + f * h + h;
  const std::size_t hand = (192 * h + h) + 2 * per_layer + (h * 128 + 128 + 128) +
                           (h * 512 + 512 + 2 * 512) + (512 * 512 + 512 + 2 * 512) + (512 * 256 + 256) +
                           (h * 2 + 2);
  EXPECT_EQ(param_count(p), hand);
  EXPECT_EQ(param_count(allocate_params<float>(tiny_arch())), expected_param_count(tiny_arch()));
}

TEST(InitParams, InvalidDims) {
  auto a = tiny_arch();
  a.heads = 3;  // 8 not divisible by 3
  EXPECT_THROW(init_params<double>(0, a), std::invalid_argument);
}

TEST(MaskedSoftmax, Examples) {
  Vec<double> s(3);
  s << 1, 1, 1;
  Eigen::Array<bool, Eigen::Dynamic, 1> v(3);
  v << true, true, false;
  const auto w = masked_softmax<double>(s, v);
  EXPECT_DOUBLE_EQ(w(0), 0.5);
  EXPECT_DOUBLE_EQ(w(1), 0.5);
  EXPECT_DOUBLE_EQ(w(2), 0.0);
  v << false, true, false;
  EXPECT_DOUBLE_EQ(masked_softmax<double>(s, v)(1), 1.0);
  v.setConstant(false);
  EXPECT_THROW(masked_softmax<double>(s, v), std::invalid_argument);
}

TEST(MaskedSoftmax, ShiftInvariantDistribution) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    Vec<double> s = Vec<double>::Random(7) * 5;
    Eigen::Array<bool, Eigen::Dynamic, 1> v = (Eigen::ArrayXd::Random(7) > 0);
    v(t % 7) = true;
    const auto w = masked_softmax<double>(s, v);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
    for (int i = 0; i < 7; ++i) EXPECT_EQ(w(i) > 0, v(i));
    const Vec<double> shifted = s.array() + 3.7;
    EXPECT_TRUE(masked_softmax<double>(shifted, v).isApprox(w, 1e-12));
  }
}

TEST(Encoder, PaddingExtensionDoesNotChangeRealOutputs) {
  Rng rng(3);
  const auto p = jittered(tiny_arch(), 1);
  for (auto mix : {MixLocation::kNone, MixLocation::kInput, MixLocation::kEncoderInner, MixLocation::kEncoderOutput}) {
    const auto batch = random_batch<double>(rng, {4, 2, 3}, 6);
    const auto wide = extend_padding(batch, 3);
    const ForwardOptions opt{mix, 0.4, true};
    EncoderCache<double> c1, c2;
    const auto h1 = encoder_forward(p, batch, opt, c1);
    const auto h2 = encoder_forward(p, wide, opt, c2);
    for (Eigen::Index i = 0; i < 3; ++i) {
      EXPECT_LE((h1.data[i] - h2.data[i].topRows(4)).cwiseAbs().maxCoeff(), 1e-6);
      EXPECT_TRUE(h2.data[i].bottomRows(7 - h2.lengths[i]).isZero(0));
    }
    const auto f1 = forward(p, batch, Head::kClassifier, opt);
    const auto f2 = forward(p, wide, Head::kClassifier, opt);
    EXPECT_LE((f1.output - f2.output).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Encoder, ZeroValueAndOutputProjectionsLeaveOnlyFeedForward) {
  auto arch = tiny_arch();
  auto p = jittered(arch, 2);
  auto& L = p.layers[0];
  L.value.weight.setZero();
  L.value.bias.setZero();
  L.out.weight.setZero();
  L.out.bias.setZero();
  Rng rng(4);
  const auto batch = random_batch<double>(rng, {3, 4}, 6);
  EncoderCache<double> cache;
  const auto hidden = encoder_forward(p, batch, {}, cache);

  for (int i = 0; i < 2; ++i) {
    for (Eigen::Index t = 0; t < batch.lengths[i]; ++t) {
      // x0 = x W_e + b_e + sinusoid(t)
      std::vector<double> x0(8), ln(8), out(8);
      for (int k = 0; k < 8; ++k) {
        double acc = p.embed.bias(k);
        for (int c = 0; c < 6; ++c) acc += batch.data[i](t, c) * p.embed.weight(c, k);
        const double freq = std::pow(10000.0, -(2.0 * (k / 2)) / 8.0);
        x0[k] = acc + (k % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq));
      }
      double mean = 0, var = 0;
      for (double v : x0) mean += v / 8;
      for (double v : x0) var += (v - mean) * (v - mean) / 8;
      for (int k = 0; k < 8; ++k)
        ln[k] = (x0[k] - mean) / std::sqrt(var + 1e-5) * L.ln2.gamma(k) + L.ln2.beta(k);
      std::vector<double> act(16);
      for (int j = 0; j < 16; ++j) {
        double acc = L.ff1.bias(j);
        for (int k = 0; k < 8; ++k) acc += ln[k] * L.ff1.weight(k, j);
        act[j] = 0.5 * acc * (1 + std::erf(acc / std::sqrt(2.0)));
      }
      for (int k = 0; k < 8; ++k) {
        double acc = L.ff2.bias(k);
        for (int j = 0; j < 16; ++j) acc += act[j] * L.ff2.weight(j, k);
        out[k] = x0[k] + acc;
        EXPECT_NEAR(hidden.data[i](t, k), out[k], 1e-12);
      }
    }
  }
}

TEST(Encoder, IdenticalSamplesGiveIdenticalRows) {
  Rng rng(5);
  const auto p = jittered(tiny_arch(), 3);
  auto batch = random_batch<double>(rng, {3, 3, 2}, 6);
  batch.data[1] = batch.data[0];
  EncoderCache<double> cache;
  const auto h = encoder_forward(p, batch, {}, cache);
  EXPECT_EQ(h.data[0], h.data[1]);
}

TEST(AttentionPool, ConvexCombinationCases) {
  const auto p = jittered(tiny_arch(), 4);
  PaddedBatch<double> h;
  RowVec<double> row = RowVec<double>::LinSpaced(8, -1, 1);
  h.data.push_back(Mat<double>::Zero(4, 8));
  h.data[0].topRows(3).rowwise() = row;
  h.data.push_back(Mat<double>::Zero(4, 8));
  h.data[1].row(0) = row * 2;
  h.lengths = {3, 1};
  PoolCache<double> cache;
  const auto emb = attention_pool(p, h, cache);
  EXPECT_TRUE(emb.row(0).isApprox(row, 1e-12));
  EXPECT_TRUE(emb.row(1).isApprox(2 * row, 1e-12));
  h.lengths = {3, 0};
  EXPECT_THROW(attention_pool(p, h, cache), std::invalid_argument);
}

TEST(AttentionPool, PermutationInvariantWithoutPositions) {
  auto arch = tiny_arch();
  arch.positional_encoding = false;
  const auto p = jittered(arch, 5);
  Rng rng(6);
  const auto batch = random_batch<double>(rng, {5}, 6);
  auto permuted = batch;
  const std::vector<int> perm{3, 0, 4, 1, 2};
  for (int t = 0; t < 5; ++t) permuted.data[0].row(t) = batch.data[0].row(perm[t]);
  const auto a = forward(p, batch, Head::kNone);
  const auto b = forward(p, permuted, Head::kNone);
  EXPECT_TRUE(a.output.isApprox(b.output, 1e-12));
  arch.positional_encoding = true;
  const auto q = jittered(arch, 5);
  EXPECT_FALSE(forward(q, batch, Head::kNone).output.isApprox(forward(q, permuted, Head::kNone).output, 1e-6));
}

TEST(Projector, IdentityConfigurationAndShapes) {
  auto arch = tiny_arch();
  arch.identity_projector = true;
  const auto p = init_params<double>(7, arch);
  const Mat<double> emb = Mat<double>::Random(3, 8);
  ProjectorCache<double> cache;
  EXPECT_EQ(project(p, emb, true, cache), emb);
  const auto q = jittered(tiny_arch(), 7);
  const auto z = project(q, emb, true, cache);
  EXPECT_EQ(z.rows(), 3);
  EXPECT_EQ(z.cols(), 5);
  ProjectorCache<double> c1, c2;
  EXPECT_EQ(project(q, emb, false, c1), project(q, emb, false, c2));
  EXPECT_THROW(project(q, Mat<double>(emb.topRows(1)), true, cache), std::invalid_argument);
  EXPECT_NO_THROW(project(q, Mat<double>(emb.topRows(1)), false, cache));
}

TEST(Projector, RunningStatsMoveTowardBatchStats) {
  auto p = jittered(tiny_arch(), 8);
  const Mat<double> emb = Mat<double>::Random(6, 8);
  ProjectorCache<double> cache;
  project(p, emb, true, cache);
  const RowVec<double> before = p.proj_stats[0].mean;
  update_running_stats(p, cache);
  EXPECT_TRUE(p.proj_stats[0].mean.isApprox(0.9 * before + 0.1 * cache.batch_mean[0]));
}

TEST(Classifier, ZeroWeightsAndBiasShift) {
  auto p = jittered(tiny_arch(), 9);
  const Mat<double> emb = Mat<double>::Random(4, 8);
  p.classifier.weight.setZero();
  p.classifier.bias.setZero();
  const auto logits = classify(p, emb);
  EXPECT_EQ(logits.rows(), 4);
  EXPECT_EQ(logits.cols(), 2);
  EXPECT_TRUE(logits.isZero(0));
  auto q = jittered(tiny_arch(), 9);
  const auto a = classify(q, emb);
  q.classifier.bias.array() += 3.0;
  const auto b = classify(q, emb);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(a(i, 0) - a(i, 1), b(i, 0) - b(i, 1), 1e-12);
}

class BackwardFD : public ::testing::TestWithParam<std::tuple<Head, MixLocation>> {};

TEST_P(BackwardFD, MatchesCentralDifferences) {
  const auto [head, mix] = GetParam();
  const auto arch = tiny_arch();
  const auto p = jittered(arch, 10);
  Rng rng(11);
  const auto batch = random_batch<double>(rng, {4, 2, 3}, 6);
  const ForwardOptions opt{mix, 0.35, true};
  const auto cache = forward(p, batch, head, opt);
  const Mat<double> w = Mat<double>::Random(cache.output.rows(), cache.output.cols());
  auto grads = zeros_like(p);
  const auto dinput = backward(p, cache, w, grads);

  const auto loss = [&](const AggregatorParams<double>& q) { return weighted_sum(forward(q, batch, head, opt).output, w); };
  for (const auto& c : check_param_gradients(p, grads, loss))
    EXPECT_LE(c.rel_error, 1e-4) << c.name << " analytic=" << c.analytic_norm << " numeric=" << c.numeric_norm;

  const auto numeric = numeric_input_gradient(batch, [&](const PaddedBatch<double>& b) {
    return weighted_sum(forward(p, b, head, opt).output, w);
  });
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    EXPECT_LE(relative_error(dinput[i].reshaped(), numeric[i].reshaped()), 1e-4);
    EXPECT_TRUE(dinput[i].bottomRows(4 - batch.lengths[i]).isZero(0));
  }
}

INSTANTIATE_TEST_SUITE_P(
    HeadsAndMixing, BackwardFD,
    ::testing::Values(std::make_tuple(Head::kNone, MixLocation::kNone),
                      std::make_tuple(Head::kProjector, MixLocation::kNone),
                      std::make_tuple(Head::kClassifier, MixLocation::kNone),
                      std::make_tuple(Head::kClassifier, MixLocation::kInput),
                      std::make_tuple(Head::kClassifier, MixLocation::kEncoderInner),
                      std::make_tuple(Head::kClassifier, MixLocation::kEncoderOutput)));

TEST(Backward, LinearInOutputGradientAndShapeChecked) {
  const auto p = jittered(tiny_arch(), 12);
  Rng rng(13);
  const auto batch = random_batch<double>(rng, {3, 4}, 6);
  const auto cache = forward(p, batch, Head::kClassifier);
  const Mat<double> w = Mat<double>::Random(2, 2);
  auto g1 = zeros_like(p), g2 = zeros_like(p);
  backward(p, cache, w, g1);
  backward(p, cache, Mat<double>(2 * w), g2);
  const auto r1 = param_refs(g1), r2 = param_refs(g2);
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_TRUE(r2[i].map().isApprox(2 * r1[i].map(), 1e-12)) << r1[i].name;
  EXPECT_THROW(backward(p, cache, Mat<double>(Mat<double>::Zero(3, 2)), g1), ShapeError);
}

TEST(Forward, DeterministicForSameInputs) {
  const auto p = jittered(tiny_arch(), 14);
  Rng rng(15);
  const auto batch = random_batch<double>(rng, {3, 4, 1}, 6);
  const ForwardOptions opt{MixLocation::kEncoderInner, 0.6, true};
  EXPECT_EQ(forward(p, batch, Head::kProjector, opt).output, forward(p, batch, Head::kProjector, opt).output);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  auto p = init_params<float>(16, tiny_arch());
  p.proj_stats[0].mean.setConstant(0.25f);
  const Checkpoint ck{p, 7, "abc123"};
  save_checkpoint(ck, dir / "m.pmck");
  const auto arch = tiny_arch();
  const auto back = load_checkpoint(dir / "m.pmck", &arch);
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.config_hash, "abc123");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  const auto a = param_refs(ck.params), b = param_refs(back.params);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].map(), b[i].map());
}

TEST(Checkpoint, RejectsMismatchedArchitectureAndBadMagic) {
  TempDir dir("ckpt");
  save_checkpoint({init_params<float>(17, tiny_arch()), 0, ""}, dir / "m.pmck");
  auto other = tiny_arch();
  other.hidden = 10;
  EXPECT_THROW(load_checkpoint(dir / "m.pmck", &other), FormatError);
  auto bytes = detail::read_file(dir / "m.pmck");
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  auto cut = detail::read_file(dir / "m.pmck");
  cut.resize(cut.size() - 8);
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
}
