// MIL aggregator: token embedding + sinusoidal positions, a pre-norm masked
// transformer encoder with optional Manifold Mixup points, gated-free global
// attention pooling, and two heads (projector for pre-training, linear
// classifier for slide labels). Forward passes record a cache from which
// backward() computes exact gradients for every parameter and the input.
//
// Only the valid prefix of each sample is ever computed on, so padded rows of
// every hidden state are exactly zero and receive exactly zero gradient.
#pragma once

#include "bagmix/mixing.hpp"

#include <numbers>
#include <string>
#include <vector>

namespace bagmix {

struct ArchConfig {
  int input_dim = kDefaultFeatureDim;
  int hidden = 192;
  int layers = 2;
  int heads = 3;
  int ff_ratio = 4;
  int pool_dim = 128;
  std::vector<int> projector{512, 512, 256};  // widths; the last one is the output
  bool identity_projector = false;  // single affine h -> h, identity-initialized, no norms
  bool positional_encoding = true;
  int num_classes = 2;

  int head_dim() const { return hidden / heads; }
  int ff_dim() const { return hidden * ff_ratio; }
  int projector_out() const { return identity_projector ? hidden : projector.back(); }

  void validate() const {
    require(input_dim >= 1 && hidden >= 1 && pool_dim >= 1, "dimensions must be >= 1");
    require(layers >= 1, "at least one encoder layer is required");
    require(heads >= 1 && hidden % heads == 0, "hidden size must be divisible by heads");
    require(ff_ratio >= 1, "ff_ratio must be >= 1");
    require(num_classes >= 2, "num_classes must be >= 2");
    if (!identity_projector) {
      require(!projector.empty(), "projector needs at least one layer");
      for (int w : projector) require(w >= 1, "projector widths must be >= 1");
    }
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class ParamGroup { kWeights, kBiasAndNorm };

template <typename T>
struct Linear {
  Mat<T> weight;  // in x out; y = x W + b
  RowVec<T> bias;
};

template <typename T>
struct Norm {
  RowVec<T> gamma;
  RowVec<T> beta;
};

template <typename T>
struct EncoderLayerParams {
  Norm<T> ln1;
  Linear<T> query, key, value, out;
  Norm<T> ln2;
  Linear<T> ff1, ff2;
};

template <typename T>
struct RunningStats {
  RowVec<T> mean;
  RowVec<T> var;
};

template <typename T>
struct AggregatorParams {
  ArchConfig arch;
  Linear<T> embed;
  std::vector<EncoderLayerParams<T>> layers;
  Linear<T> pool_proj;    // h -> a
  RowVec<T> pool_score;   // a
  std::vector<Linear<T>> proj;
  std::vector<Norm<T>> proj_norm;
  std::vector<RunningStats<T>> proj_stats;  // buffers, not trained
  Linear<T> classifier;
};

/// Named view of one tensor inside AggregatorParams.
template <typename T>
struct TensorRef {
  std::string name;
  T* data;
  Eigen::Index rows, cols;
  ParamGroup group;

  Eigen::Map<Mat<T>> map() const { return {data, rows, cols}; }
  Eigen::Map<Vec<T>> flat() const { return {data, rows * cols}; }
  Eigen::Index size() const { return rows * cols; }
};

namespace detail {

template <typename T, typename M>
void add_ref(std::vector<TensorRef<T>>& out, std::string name, M& m, ParamGroup g) {
  out.push_back({std::move(name), m.data(), m.rows(), m.cols(), g});
}

template <typename T>
void add_linear(std::vector<TensorRef<T>>& out, const std::string& name, Linear<T>& l) {
  add_ref(out, name + ".weight", l.weight, ParamGroup::kWeights);
  add_ref(out, name + ".bias", l.bias, ParamGroup::kBiasAndNorm);
}

template <typename T>
void add_norm(std::vector<TensorRef<T>>& out, const std::string& name, Norm<T>& n) {
  add_ref(out, name + ".gamma", n.gamma, ParamGroup::kBiasAndNorm);
  add_ref(out, name + ".beta", n.beta, ParamGroup::kBiasAndNorm);
}

}  // namespace detail

/// Trainable tensors in a fixed order.
template <typename T>
std::vector<TensorRef<T>> param_refs(AggregatorParams<T>& p) {
  std::vector<TensorRef<T>> out;
  detail::add_linear(out, "embed", p.embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string base = "encoder." + std::to_string(l);
    detail::add_norm(out, base + ".ln1", L.ln1);
    detail::add_linear(out, base + ".query", L.query);
    detail::add_linear(out, base + ".key", L.key);
    detail::add_linear(out, base + ".value", L.value);
    detail::add_linear(out, base + ".out", L.out);
    detail::add_norm(out, base + ".ln2", L.ln2);
    detail::add_linear(out, base + ".ff1", L.ff1);
    detail::add_linear(out, base + ".ff2", L.ff2);
  }
  detail::add_linear(out, "pool.proj", p.pool_proj);
  detail::add_ref(out, "pool.score", p.pool_score, ParamGroup::kWeights);
  for (std::size_t k = 0; k < p.proj.size(); ++k) {
    detail::add_linear(out, "projector." + std::to_string(k), p.proj[k]);
    if (k < p.proj_norm.size()) detail::add_norm(out, "projector.bn" + std::to_string(k), p.proj_norm[k]);
  }
  detail::add_linear(out, "classifier", p.classifier);
  return out;
}

/// Non-trained state (projector running statistics).
template <typename T>
std::vector<TensorRef<T>> buffer_refs(AggregatorParams<T>& p) {
  std::vector<TensorRef<T>> out;
  for (std::size_t k = 0; k < p.proj_stats.size(); ++k) {
    detail::add_ref(out, "projector.bn" + std::to_string(k) + ".running_mean", p.proj_stats[k].mean,
                    ParamGroup::kBiasAndNorm);
    detail::add_ref(out, "projector.bn" + std::to_string(k) + ".running_var", p.proj_stats[k].var,
                    ParamGroup::kBiasAndNorm);
  }
  return out;
}

template <typename T>
std::vector<TensorRef<T>> param_refs(const AggregatorParams<T>& p) {
  return param_refs(const_cast<AggregatorParams<T>&>(p));
}

template <typename T>
std::size_t param_count(const AggregatorParams<T>& p) {
  std::size_t n = 0;
  for (const auto& r : param_refs(p)) n += static_cast<std::size_t>(r.size());
  return n;
}

/// Closed-form trainable parameter count for an architecture.
inline std::size_t expected_param_count(const ArchConfig& a) {
  const std::size_t d = a.input_dim, h = a.hidden, f = a.ff_dim(), pa = a.pool_dim;
  std::size_t n = d * h + h;
  n += a.layers * (2 * 2 * h + 4 * (h * h + h) + (h * f + f) + (f * h + h));
  n += h * pa + pa + pa;
  if (a.identity_projector) {
    n += h * h + h;
  } else {
    std::size_t in = h;
    for (std::size_t k = 0; k < a.projector.size(); ++k) {
      const std::size_t w = a.projector[k];
      n += in * w + w;
      if (k + 1 < a.projector.size()) n += 2 * w;
      in = w;
    }
  }
  n += h * a.num_classes + a.num_classes;
  return n;
}

template <typename T>
AggregatorParams<T> zeros_like(const AggregatorParams<T>& p) {
  AggregatorParams<T> z = p;
  for (auto& r : param_refs(z)) r.map().setZero();
  for (auto& r : buffer_refs(z)) r.map().setZero();
  return z;
}

/// Shapes only; weights zero, norm scales one, running variance one.
template <typename T>
AggregatorParams<T> allocate_params(const ArchConfig& arch) {
  arch.validate();
  const auto lin = [](int in, int out) {
    return Linear<T>{Mat<T>::Zero(in, out), RowVec<T>::Zero(out)};
  };
  const auto norm = [](int n) { return Norm<T>{RowVec<T>::Ones(n), RowVec<T>::Zero(n)}; };
  AggregatorParams<T> p;
  p.arch = arch;
  const int h = arch.hidden;
  p.embed = lin(arch.input_dim, h);
  for (int l = 0; l < arch.layers; ++l) {
    p.layers.push_back({norm(h), lin(h, h), lin(h, h), lin(h, h), lin(h, h), norm(h),
                        lin(h, arch.ff_dim()), lin(arch.ff_dim(), h)});
  }
  p.pool_proj = lin(h, arch.pool_dim);
  p.pool_score = RowVec<T>::Zero(arch.pool_dim);
  if (arch.identity_projector) {
    p.proj.push_back(lin(h, h));
    p.proj.back().weight.setIdentity();
  } else {
    int in = h;
    for (std::size_t k = 0; k < arch.projector.size(); ++k) {
      const int w = arch.projector[k];
      p.proj.push_back(lin(in, w));
      if (k + 1 < arch.projector.size()) {
        p.proj_norm.push_back(norm(w));
        p.proj_stats.push_back({RowVec<T>::Zero(w), RowVec<T>::Ones(w)});
      }
      in = w;
    }
  }
  p.classifier = lin(h, arch.num_classes);
  return p;
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero; norm scales one.
template <typename T>
AggregatorParams<T> init_params(std::uint64_t seed, const ArchConfig& arch) {
  AggregatorParams<T> p = allocate_params<T>(arch);
  Rng rng = substream(seed, "init");
  const auto fill = [&](auto& m, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  };
  fill(p.embed.weight, arch.input_dim);
  for (auto& L : p.layers) {
    for (auto* lin : {&L.query, &L.key, &L.value, &L.out, &L.ff1, &L.ff2})
      fill(lin->weight, lin->weight.rows());
  }
  fill(p.pool_proj.weight, arch.hidden);
  fill(p.pool_score, arch.pool_dim);
  if (!arch.identity_projector)
    for (auto& lin : p.proj) fill(lin.weight, lin.weight.rows());
  fill(p.classifier.weight, arch.hidden);
  return p;
}

template <typename T, typename U>
AggregatorParams<U> cast_params(const AggregatorParams<T>& p) {
  AggregatorParams<U> out = allocate_params<U>(p.arch);
  auto src = param_refs(p), dst = param_refs(out);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].map() = src[i].map().template cast<U>();
  auto sb = buffer_refs(const_cast<AggregatorParams<T>&>(p)), db = buffer_refs(out);
  for (std::size_t i = 0; i < sb.size(); ++i) db[i].map() = sb[i].map().template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise pieces.

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Softmax over the entries marked valid; invalid entries get weight 0.
template <typename T>
Vec<T> masked_softmax(const Vec<T>& scores, const Eigen::Array<bool, Eigen::Dynamic, 1>& valid) {
  if (scores.size() != valid.size()) throw ShapeError("masked_softmax: mask size mismatch");
  if (!valid.any()) throw std::invalid_argument("masked_softmax: no valid entry");
  T mx = -std::numeric_limits<T>::infinity();
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    if (valid(i)) mx = std::max(mx, scores(i));
  Vec<T> w = Vec<T>::Zero(scores.size());
  T sum = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    if (valid(i)) sum += (w(i) = std::exp(scores(i) - mx));
  return w / sum;
}

template <typename T>
void softmax_rows_inplace(Mat<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

/// Sinusoidal position table, n x h.
template <typename T>
Mat<T> positional_table(Eigen::Index n, Eigen::Index h) {
  Mat<T> pe(n, h);
  for (Eigen::Index pos = 0; pos < n; ++pos)
    for (Eigen::Index k = 0; k < h; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / static_cast<double>(h));
      pe(pos, k) = static_cast<T>(k % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
  return pe;
}

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Norm<T>& p, LayerNormCache<T>& cache) {
  const Eigen::Index h = x.cols();
  const Vec<T> mean = x.rowwise().mean();
  Mat<T> centered = x.colwise() - mean;
  const Vec<T> var = centered.array().square().rowwise().sum() / static_cast<T>(h);
  cache.rstd = (var.array() + static_cast<T>(kNormEps)).rsqrt();
  cache.xhat = centered.array().colwise() * cache.rstd.array();
  return (cache.xhat.array().rowwise() * p.gamma.array()).rowwise() + p.beta.array();
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Norm<T>& p, const LayerNormCache<T>& c, Norm<T>& g) {
  g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * p.gamma.array();
  const T h = static_cast<T>(dy.cols());
  const Vec<T> m1 = dxhat.rowwise().sum() / h;
  const Vec<T> m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / h;
  Mat<T> dx = (dxhat.colwise() - m1).array() - c.xhat.array().colwise() * m2.array();
  return dx.array().colwise() * c.rstd.array();
}

template <typename T>
Mat<T> linear(const Mat<T>& x, const Linear<T>& l) {
  return (x * l.weight).rowwise() + l.bias;
}

template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& dy, const Linear<T>& l, Linear<T>& g) {
  g.weight.noalias() += x.transpose() * dy;
  g.bias += dy.colwise().sum();
  return dy * l.weight.transpose();
}

// ---------------------------------------------------------------------------
// Encoder.

struct ForwardOptions {
  MixLocation mix = MixLocation::kNone;
  double lambda = 1.0;  // weight of the sample's own content when mixing
  bool train = true;    // projector norm: batch statistics vs running statistics
};

template <typename T>
struct AttentionCache {
  Eigen::Index n = 0;
  LayerNormCache<T> ln1;
  Mat<T> a, q, k, v;
  std::vector<Mat<T>> probs;  // per head, n x n
  Mat<T> ctx;
};

template <typename T>
struct FeedForwardCache {
  Eigen::Index n = 0;
  LayerNormCache<T> ln2;
  Mat<T> b, pre, act;
};

template <typename T>
struct LayerCache {
  std::vector<AttentionCache<T>> attn;
  std::vector<FeedForwardCache<T>> ffn;
  std::vector<Eigen::Index> lengths_before_mix;
  bool mixed = false;
};

template <typename T>
struct EncoderCache {
  MixLocation mix = MixLocation::kNone;
  double lambda = 1.0;
  std::vector<Eigen::Index> input_lengths;  // before any input mixing
  PaddedBatch<T> embed_input;               // after input mixing
  std::vector<LayerCache<T>> layers;
  std::vector<Eigen::Index> lengths_before_output_mix;
};

template <typename T>
void attention_sublayer(const EncoderLayerParams<T>& L, int heads, Mat<T>& x, Eigen::Index n,
                        AttentionCache<T>& c) {
  c.n = n;
  const Mat<T> xin = x.topRows(n);
  c.a = layer_norm(xin, L.ln1, c.ln1);
  c.q = linear(c.a, L.query);
  c.k = linear(c.a, L.key);
  c.v = linear(c.a, L.value);
  const Eigen::Index h = x.cols(), hd = h / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  c.ctx.resize(n, h);
  c.probs.resize(heads);
  for (int hh = 0; hh < heads; ++hh) {
    const auto cols = Eigen::seqN(hh * hd, hd);
    Mat<T> s = scale * (c.q(Eigen::all, cols) * c.k(Eigen::all, cols).transpose());
    softmax_rows_inplace(s);
    c.ctx(Eigen::all, cols) = s * c.v(Eigen::all, cols);
    c.probs[hh] = std::move(s);
  }
  x.topRows(n) += linear(c.ctx, L.out);
}

template <typename T>
Mat<T> attention_sublayer_backward(const EncoderLayerParams<T>& L, int heads, const Mat<T>& dx_out,
                                   const AttentionCache<T>& c, EncoderLayerParams<T>& g) {
  const Eigen::Index n = c.n, h = dx_out.cols(), hd = h / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> dx = dx_out;
  const Mat<T> dattn = dx_out.topRows(n);
  const Mat<T> dctx = linear_backward(c.ctx, dattn, L.out, g.out);
  Mat<T> dq(n, h), dk(n, h), dv(n, h);
  for (int hh = 0; hh < heads; ++hh) {
    const auto cols = Eigen::seqN(hh * hd, hd);
    const Mat<T>& p = c.probs[hh];
    const Mat<T> dctx_h = dctx(Eigen::all, cols);
    const Mat<T> dp = dctx_h * c.v(Eigen::all, cols).transpose();
    dv(Eigen::all, cols) = p.transpose() * dctx_h;
    const Vec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
    const Mat<T> ds = scale * (p.array() * (dp.colwise() - rowdot).array()).matrix();
    dq(Eigen::all, cols) = ds * c.k(Eigen::all, cols);
    dk(Eigen::all, cols) = ds.transpose() * c.q(Eigen::all, cols);
  }
  Mat<T> da = linear_backward(c.a, dq, L.query, g.query);
  da += linear_backward(c.a, dk, L.key, g.key);
  da += linear_backward(c.a, dv, L.value, g.value);
  dx.topRows(n) += layer_norm_backward(da, L.ln1, c.ln1, g.ln1);
  return dx;
}

template <typename T>
void feedforward_sublayer(const EncoderLayerParams<T>& L, Mat<T>& x, Eigen::Index n, FeedForwardCache<T>& c) {
  c.n = n;
  const Mat<T> xin = x.topRows(n);
  c.b = layer_norm(xin, L.ln2, c.ln2);
  c.pre = linear(c.b, L.ff1);
  c.act = c.pre.unaryExpr([](T v) { return gelu(v); });
  x.topRows(n) += linear(c.act, L.ff2);
}

template <typename T>
Mat<T> feedforward_sublayer_backward(const EncoderLayerParams<T>& L, const Mat<T>& dx_out,
                                     const FeedForwardCache<T>& c, EncoderLayerParams<T>& g) {
  Mat<T> dx = dx_out;
  const Mat<T> dff = dx_out.topRows(c.n);
  const Mat<T> dact = linear_backward(c.act, dff, L.ff2, g.ff2);
  const Mat<T> dpre = dact.array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
  const Mat<T> db = linear_backward(c.b, dpre, L.ff1, g.ff1);
  dx.topRows(c.n) += layer_norm_backward(db, L.ln2, c.ln2, g.ln2);
  return dx;
}

/// Hidden states N x R_max x h with the validity of each row. Loc2 mixing is
/// applied after the attention residual of the first layer, Loc3 on the final
/// hidden states; Loc1 mixes the raw inputs before embedding.
template <typename T>
PaddedBatch<T> encoder_forward(const AggregatorParams<T>& p, const PaddedBatch<T>& batch,
                               const ForwardOptions& opt, EncoderCache<T>& cache) {
  batch.validate();
  const auto& arch = p.arch;
  if (batch.dim() != arch.input_dim) throw ShapeError("encoder_forward: feature dimension mismatch");
  cache.mix = opt.mix;
  cache.lambda = opt.lambda;
  cache.input_lengths = batch.lengths;
  cache.embed_input = opt.mix == MixLocation::kInput ? manifold_mix(batch, opt.lambda) : batch;

  const Eigen::Index n = batch.size(), r = batch.r_max(), h = arch.hidden;
  PaddedBatch<T> x;
  x.lengths = cache.embed_input.lengths;
  const Mat<T> pe = arch.positional_encoding ? positional_table<T>(r, h) : Mat<T>::Zero(r, h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto len = x.lengths[i];
    Mat<T> xi = Mat<T>::Zero(r, h);
    xi.topRows(len) = linear<T>(cache.embed_input.data[i].topRows(len), p.embed) + pe.topRows(len);
    x.data.push_back(std::move(xi));
  }

  cache.layers.assign(p.layers.size(), {});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& lc = cache.layers[l];
    lc.attn.resize(n);
    lc.ffn.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) attention_sublayer(L, arch.heads, x.data[i], x.lengths[i], lc.attn[i]);
    if (l == 0 && opt.mix == MixLocation::kEncoderInner) {
      lc.mixed = true;
      lc.lengths_before_mix = x.lengths;
      x = manifold_mix(x, opt.lambda);
    }
    for (Eigen::Index i = 0; i < n; ++i) feedforward_sublayer(L, x.data[i], x.lengths[i], lc.ffn[i]);
  }
  if (opt.mix == MixLocation::kEncoderOutput) {
    cache.lengths_before_output_mix = x.lengths;
    x = manifold_mix(x, opt.lambda);
  }
  return x;
}

/// Returns the gradient with respect to the raw (pre-mixing) input batch.
template <typename T>
std::vector<Mat<T>> encoder_backward(const AggregatorParams<T>& p, const EncoderCache<T>& cache,
                                     std::vector<Mat<T>> dx, AggregatorParams<T>& g) {
  const auto& arch = p.arch;
  if (cache.mix == MixLocation::kEncoderOutput)
    dx = manifold_mix_backward<T>(dx, cache.lengths_before_output_mix, cache.lambda);
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& L = p.layers[l];
    const auto& lc = cache.layers[l];
    auto& gl = g.layers[l];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = feedforward_sublayer_backward(L, dx[i], lc.ffn[i], gl);
    if (lc.mixed) dx = manifold_mix_backward<T>(dx, lc.lengths_before_mix, cache.lambda);
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = attention_sublayer_backward(L, arch.heads, dx[i], lc.attn[i], gl);
  }
  std::vector<Mat<T>> dinput(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const auto len = cache.embed_input.lengths[i];
    dinput[i] = Mat<T>::Zero(dx[i].rows(), arch.input_dim);
    dinput[i].topRows(len) =
        linear_backward<T>(cache.embed_input.data[i].topRows(len), dx[i].topRows(len), p.embed, g.embed);
  }
  if (cache.mix == MixLocation::kInput)
    dinput = manifold_mix_backward<T>(dinput, cache.input_lengths, cache.lambda);
  return dinput;
}

// ---------------------------------------------------------------------------
// Global attention pooling: score_t = w . tanh(V h_t + c), weights = masked
// softmax of the scores, embedding = sum_t weight_t h_t.

template <typename T>
struct PoolCache {
  PaddedBatch<T> hidden;
  std::vector<Mat<T>> u;      // n x a
  std::vector<Vec<T>> alpha;  // n
};

template <typename T>
Mat<T> attention_pool(const AggregatorParams<T>& p, const PaddedBatch<T>& hidden, PoolCache<T>& cache) {
  const Eigen::Index n = hidden.size();
  Mat<T> emb(n, p.arch.hidden);
  cache.hidden = hidden;
  cache.u.resize(n);
  cache.alpha.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto len = hidden.lengths[i];
    if (len < 1) throw std::invalid_argument("attention_pool: all-padding sample");
    const Mat<T> hi = hidden.data[i].topRows(len);
    cache.u[i] = linear(hi, p.pool_proj).array().tanh();
    const Vec<T> scores = cache.u[i] * p.pool_score.transpose();
    cache.alpha[i] = masked_softmax<T>(scores, Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(len, true));
    emb.row(i) = cache.alpha[i].transpose() * hi;
  }
  return emb;
}

template <typename T>
std::vector<Mat<T>> attention_pool_backward(const AggregatorParams<T>& p, const PoolCache<T>& c,
                                            const Mat<T>& demb, AggregatorParams<T>& g) {
  const Eigen::Index n = c.hidden.size();
  std::vector<Mat<T>> dh(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto len = c.hidden.lengths[i];
    const Mat<T> hi = c.hidden.data[i].topRows(len);
    const Vec<T>& alpha = c.alpha[i];
    dh[i] = Mat<T>::Zero(c.hidden.r_max(), p.arch.hidden);
    dh[i].topRows(len) = alpha * demb.row(i);
    const Vec<T> dalpha = hi * demb.row(i).transpose();
    const Vec<T> ds = alpha.array() * (dalpha.array() - alpha.dot(dalpha));
    g.pool_score += ds.transpose() * c.u[i];
    const Mat<T> du = ds * p.pool_score;
    const Mat<T> dpre = du.array() * (T(1) - c.u[i].array().square());
    dh[i].topRows(len) += linear_backward(hi, dpre, p.pool_proj, g.pool_proj);
  }
  return dh;
}

// ---------------------------------------------------------------------------
// Heads.

template <typename T>
struct ProjectorCache {
  bool train = true;
  std::vector<Mat<T>> inputs;  // input of each affine
  std::vector<Mat<T>> xhat;    // normalized pre-activations
  std::vector<RowVec<T>> rstd;
  std::vector<Mat<T>> normed;  // gamma * xhat + beta, before ReLU
  std::vector<RowVec<T>> batch_mean, batch_var;
};

/// Affine -> norm -> ReLU for every hidden width, then a final affine.
template <typename T>
Mat<T> project(const AggregatorParams<T>& p, const Mat<T>& emb, bool train, ProjectorCache<T>& c) {
  const std::size_t hidden_layers = p.proj_norm.size();
  if (train && hidden_layers > 0 && emb.rows() < 2)
    throw std::invalid_argument("project: batch of size 1 in training mode");
  c = {};
  c.train = train;
  Mat<T> z = emb;
  for (std::size_t k = 0; k < p.proj.size(); ++k) {
    c.inputs.push_back(z);
    Mat<T> y = linear(z, p.proj[k]);
    if (k < hidden_layers) {
      RowVec<T> mean, var;
      if (train) {
        mean = y.colwise().mean();
        var = (y.rowwise() - mean).array().square().colwise().mean();
      } else {
        mean = p.proj_stats[k].mean;
        var = p.proj_stats[k].var;
      }
      const RowVec<T> rstd = (var.array() + static_cast<T>(kNormEps)).rsqrt();
      Mat<T> xhat = (y.rowwise() - mean).array().rowwise() * rstd.array();
      Mat<T> normed = (xhat.array().rowwise() * p.proj_norm[k].gamma.array()).rowwise() +
                      p.proj_norm[k].beta.array();
      z = normed.cwiseMax(T(0));
      c.xhat.push_back(std::move(xhat));
      c.rstd.push_back(rstd);
      c.normed.push_back(std::move(normed));
      c.batch_mean.push_back(mean);
      c.batch_var.push_back(var);
    } else {
      z = std::move(y);
    }
  }
  return z;
}

template <typename T>
Mat<T> project_backward(const AggregatorParams<T>& p, const ProjectorCache<T>& c, const Mat<T>& dz_out,
                        AggregatorParams<T>& g) {
  Mat<T> dz = dz_out;
  for (std::size_t k = p.proj.size(); k-- > 0;) {
    if (k < p.proj_norm.size()) {
      const Mat<T> dnormed = (c.normed[k].array() > T(0)).select(dz, Mat<T>::Zero(dz.rows(), dz.cols()));
      g.proj_norm[k].gamma += (dnormed.array() * c.xhat[k].array()).colwise().sum().matrix();
      g.proj_norm[k].beta += dnormed.colwise().sum();
      const Mat<T> dxhat = dnormed.array().rowwise() * p.proj_norm[k].gamma.array();
      Mat<T> dy;
      if (c.train) {
        const RowVec<T> m1 = dxhat.colwise().mean();
        const RowVec<T> m2 = (dxhat.array() * c.xhat[k].array()).colwise().mean();
        dy = ((dxhat.rowwise() - m1).array() - c.xhat[k].array().rowwise() * m2.array()).rowwise() *
             c.rstd[k].array();
      } else {
        dy = dxhat.array().rowwise() * c.rstd[k].array();
      }
      dz = dy;
    }
    dz = linear_backward(c.inputs[k], dz, p.proj[k], g.proj[k]);
  }
  return dz;
}

/// Folds the batch statistics of a training-mode projector pass into the
/// running statistics (momentum 0.1, unbiased variance).
template <typename T>
void update_running_stats(AggregatorParams<T>& p, const ProjectorCache<T>& c, T momentum = T(0.1)) {
  if (!c.train) return;
  for (std::size_t k = 0; k < c.batch_mean.size(); ++k) {
    const T n = static_cast<T>(c.inputs[k].rows());
    const RowVec<T> unbiased = c.batch_var[k] * (n / std::max(n - 1, T(1)));
    p.proj_stats[k].mean = (1 - momentum) * p.proj_stats[k].mean + momentum * c.batch_mean[k];
    p.proj_stats[k].var = (1 - momentum) * p.proj_stats[k].var + momentum * unbiased;
  }
}

template <typename T>
Mat<T> classify(const AggregatorParams<T>& p, const Mat<T>& emb) {
  return linear(emb, p.classifier);
}

// ---------------------------------------------------------------------------
// Whole-model pass.

enum class Head { kNone, kProjector, kClassifier };

template <typename T>
struct ForwardCache {
  Head head = Head::kNone;
  EncoderCache<T> encoder;
  PoolCache<T> pool;
  Mat<T> embedding;  // N x h pooled slide embeddings
  ProjectorCache<T> projector;
  Mat<T> output;     // embedding, projector output Z, or logits
};

template <typename T>
ForwardCache<T> forward(const AggregatorParams<T>& p, const PaddedBatch<T>& batch, Head head,
                        const ForwardOptions& opt = {}) {
  ForwardCache<T> c;
  c.head = head;
  const PaddedBatch<T> hidden = encoder_forward(p, batch, opt, c.encoder);
  c.embedding = attention_pool(p, hidden, c.pool);
  switch (head) {
    case Head::kNone: c.output = c.embedding; break;
    case Head::kProjector: c.output = project(p, c.embedding, opt.train, c.projector); break;
    case Head::kClassifier: c.output = classify(p, c.embedding); break;
  }
  return c;
}

/// Accumulates parameter gradients into `grads` and returns the gradient with
/// respect to the input batch (N entries of R_max x d).
template <typename T>
std::vector<Mat<T>> backward(const AggregatorParams<T>& p, const ForwardCache<T>& c, const Mat<T>& dout,
                             AggregatorParams<T>& grads) {
  if (dout.rows() != c.output.rows() || dout.cols() != c.output.cols())
    throw ShapeError("backward: output gradient shape does not match the cached forward");
  Mat<T> demb;
  switch (c.head) {
    case Head::kNone: demb = dout; break;
    case Head::kProjector: demb = project_backward(p, c.projector, dout, grads); break;
    case Head::kClassifier: demb = linear_backward(c.embedding, dout, p.classifier, grads.classifier); break;
  }
  auto dh = attention_pool_backward(p, c.pool, demb, grads);
  return encoder_backward(p, c.encoder, std::move(dh), grads);
}

}  // namespace bagmix
