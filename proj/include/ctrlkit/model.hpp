#pragma once

// Decoder-only transformer in the CTRL layout: scaled token embeddings plus
// sinusoidal positions, pre-norm blocks (multi-head causal attention and a
// GELU feed-forward), a final layer norm, and an output projection tied to
// the token embedding (with its own bias).
//
// Everything is templated on the scalar type so that training runs in float
// and gradient checks in double.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <string>
#include <vector>

#include "ctrlkit/tensor.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t model_dim = 8;
  std::size_t inner_dim = 16;
  std::size_t context = 16;
  std::size_t vocab_size = 50;

  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (layers == 0 || heads == 0 || model_dim == 0 || inner_dim == 0 || vocab_size == 0)
      throw std::invalid_argument("model config: all dimensions must be positive");
    if (model_dim % heads != 0)
      throw std::invalid_argument("model config: model_dim " + std::to_string(model_dim) +
                                  " is not divisible by heads " + std::to_string(heads));
    if (model_dim % 2 != 0) throw std::invalid_argument("model config: model_dim must be even");
    if (context < 2) throw std::invalid_argument("model config: context must be at least 2");
  }

  /// Released-model dimensions: 48 blocks, 16 heads, d=640, f=4096, n=256.
  static ModelConfig swectrl_mini(std::size_t vocab_size) { return {48, 16, 640, 4096, 256, vocab_size}; }
  /// Original English CTRL dimensions with the same depth, heads and context.
  static ModelConfig ctrl_original(std::size_t vocab_size) { return {48, 16, 1280, 8192, 256, vocab_size}; }

  bool operator==(const ModelConfig&) const = default;
};

/// Exact number of trainable scalars; the tied embedding is counted once.
inline std::uint64_t param_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = c.model_dim, f = c.inner_dim, v = c.vocab_size;
  const std::uint64_t per_layer = 2 * d           // ln1
                                  + 4 * (d * d + d)  // q, k, v, o
                                  + 2 * d           // ln2
                                  + d * f + f       // ff in
                                  + f * d + d;      // ff out
  return v * d      // token embedding == output projection
         + v        // output bias
         + c.layers * per_layer + 2 * d;  // final layer norm
}

template <class Real>
struct LayerWeights {
  std::vector<Real> ln1_g, ln1_b;
  std::vector<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<Real> ln2_g, ln2_b;
  std::vector<Real> w1, b1, w2, b2;
};

template <class Real>
struct Weights {
  std::vector<Real> tok_emb;   // [vocab, d]; also the output projection
  std::vector<Real> out_bias;  // [vocab]
  std::vector<LayerWeights<Real>> layers;
  std::vector<Real> lnf_g, lnf_b;

  /// Zero-filled weights with the shapes implied by `c`.
  static Weights zeros(const ModelConfig& c) {
    Weights w;
    const std::size_t d = c.model_dim, f = c.inner_dim, v = c.vocab_size;
    w.tok_emb.assign(v * d, 0);
    w.out_bias.assign(v, 0);
    w.layers.resize(c.layers);
    for (auto& l : w.layers) {
      for (auto* p : {&l.ln1_g, &l.ln1_b, &l.bq, &l.bk, &l.bv, &l.bo, &l.ln2_g, &l.ln2_b, &l.b2}) p->assign(d, 0);
      for (auto* p : {&l.wq, &l.wk, &l.wv, &l.wo}) p->assign(d * d, 0);
      l.w1.assign(d * f, 0);
      l.b1.assign(f, 0);
      l.w2.assign(f * d, 0);
    }
    w.lnf_g.assign(d, 0);
    w.lnf_b.assign(d, 0);
    return w;
  }
};

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
};

/// Name of the output projection, stored as an alias of the embedding.
inline const std::string kTiedOutputName = "lm_head.weight";
inline const std::string kEmbeddingName = "tok_embeddings.weight";

/// Visits every stored tensor (the tied output projection is not repeated)
/// in a fixed order with its name and shape.
template <class W, class F>
void for_each_tensor(const ModelConfig& c, W& w, F&& f) {
  const std::size_t d = c.model_dim, fi = c.inner_dim, v = c.vocab_size;
  f(TensorInfo{kEmbeddingName, {v, d}}, w.tok_emb);
  f(TensorInfo{"lm_head.bias", {v}}, w.out_bias);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(TensorInfo{p + "ln1.weight", {d}}, l.ln1_g);
    f(TensorInfo{p + "ln1.bias", {d}}, l.ln1_b);
    f(TensorInfo{p + "attn.wq", {d, d}}, l.wq);
    f(TensorInfo{p + "attn.bq", {d}}, l.bq);
    f(TensorInfo{p + "attn.wk", {d, d}}, l.wk);
    f(TensorInfo{p + "attn.bk", {d}}, l.bk);
    f(TensorInfo{p + "attn.wv", {d, d}}, l.wv);
    f(TensorInfo{p + "attn.bv", {d}}, l.bv);
    f(TensorInfo{p + "attn.wo", {d, d}}, l.wo);
    f(TensorInfo{p + "attn.bo", {d}}, l.bo);
    f(TensorInfo{p + "ln2.weight", {d}}, l.ln2_g);
    f(TensorInfo{p + "ln2.bias", {d}}, l.ln2_b);
    f(TensorInfo{p + "ff.w1", {d, fi}}, l.w1);
    f(TensorInfo{p + "ff.b1", {fi}}, l.b1);
    f(TensorInfo{p + "ff.w2", {fi, d}}, l.w2);
    f(TensorInfo{p + "ff.b2", {d}}, l.b2);
  }
  f(TensorInfo{"ln_f.weight", {d}}, w.lnf_g);
  f(TensorInfo{"ln_f.bias", {d}}, w.lnf_b);
}

template <class Real>
struct BasicCheckpoint {
  ModelConfig config;
  Weights<Real> weights;
  std::int64_t step = 0;
  std::uint64_t seed = 0;

  std::size_t vocab_size() const { return config.vocab_size; }
  std::size_t context_size() const { return config.context; }

  /// Named tensor lookup. The output projection name resolves to the
  /// embedding storage.
  std::vector<Real>& tensor(const std::string& name) {
    return const_cast<std::vector<Real>&>(std::as_const(*this).tensor(name));
  }
  const std::vector<Real>& tensor(const std::string& name) const {
    const std::string& target = name == kTiedOutputName ? kEmbeddingName : name;
    const std::vector<Real>* found = nullptr;
    for_each_tensor(config, weights, [&](const TensorInfo& info, const std::vector<Real>& t) {
      if (info.name == target) found = &t;
    });
    if (!found) throw std::out_of_range("no tensor named " + name);
    return *found;
  }

  Matrix<Real> logits(std::span<const TokenId> ids) const;

  template <class To>
  BasicCheckpoint<To> cast() const {
    BasicCheckpoint<To> out;
    out.config = config;
    out.step = step;
    out.seed = seed;
    out.weights = Weights<To>::zeros(config);
    std::vector<const std::vector<Real>*> src;
    for_each_tensor(config, weights, [&](const TensorInfo&, const std::vector<Real>& t) { src.push_back(&t); });
    std::size_t i = 0;
    for_each_tensor(config, out.weights, [&](const TensorInfo&, std::vector<To>& t) {
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<To>((*src[i])[j]);
      ++i;
    });
    return out;
  }
};

using Checkpoint = BasicCheckpoint<float>;

/// Weights ~ N(0, 0.02), biases zero, layer-norm gains one.
template <class Real = float>
BasicCheckpoint<Real> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  BasicCheckpoint<Real> ck;
  ck.config = config;
  ck.seed = seed;
  ck.weights = Weights<Real>::zeros(config);
  NormalStream rng(seed);
  auto normal_fill = [&](std::vector<Real>& t) {
    for (auto& x : t) x = static_cast<Real>(0.02 * rng.normal());
  };
  normal_fill(ck.weights.tok_emb);
  for (auto& l : ck.weights.layers) {
    for (auto* p : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) normal_fill(*p);
    std::fill(l.ln1_g.begin(), l.ln1_g.end(), Real(1));
    std::fill(l.ln2_g.begin(), l.ln2_g.end(), Real(1));
  }
  std::fill(ck.weights.lnf_g.begin(), ck.weights.lnf_g.end(), Real(1));
  return ck;
}

/// Grows the vocabulary to `new_vocab_size`, drawing the new embedding rows
/// from N(0, 0.02) with `seed`. Existing rows are unchanged.
template <class Real>
void extend_vocab(BasicCheckpoint<Real>& ck, std::size_t new_vocab_size, std::uint64_t seed) {
  const std::size_t old = ck.config.vocab_size, d = ck.config.model_dim;
  if (new_vocab_size < old) throw std::invalid_argument("extend_vocab: cannot shrink vocabulary");
  NormalStream rng(seed);
  ck.weights.tok_emb.resize(new_vocab_size * d);
  for (std::size_t i = old * d; i < new_vocab_size * d; ++i)
    ck.weights.tok_emb[i] = static_cast<Real>(0.02 * rng.normal());
  ck.weights.out_bias.resize(new_vocab_size, Real(0));
  ck.config.vocab_size = new_vocab_size;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-6;

template <class Real>
Real positional_encoding(std::size_t pos, std::size_t i, std::size_t d) {
  const std::size_t half = d / 2;
  const std::size_t j = i < half ? i : i - half;
  const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(d));
  return static_cast<Real>(i < half ? std::sin(angle) : std::cos(angle));
}

// y[t, :] = b + x[t, :] W   with W row-major [in, out].
template <class Real>
void linear(const Matrix<Real>& x, const std::vector<Real>& w, const std::vector<Real>& b, std::size_t out,
            Matrix<Real>& y) {
  const std::size_t in = x.cols();
  y.resize(x.rows(), out);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    Real* yr = y.row(t).data();
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
    const Real* xr = x.row(t).data();
    for (std::size_t i = 0; i < in; ++i) {
      const Real xv = xr[i];
      const Real* wr = w.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
}

// Accumulates dW, db and writes dx for y = b + x W.
template <class Real>
void linear_backward(const Matrix<Real>& x, const std::vector<Real>& w, const Matrix<Real>& dy, Matrix<Real>& dx,
                     std::vector<Real>& dw, std::vector<Real>& db) {
  const std::size_t in = x.cols(), out = dy.cols();
  dx.resize(x.rows(), in);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const Real* dyr = dy.row(t).data();
    const Real* xr = x.row(t).data();
    Real* dxr = dx.row(t).data();
    for (std::size_t o = 0; o < out; ++o) db[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const Real* wr = w.data() + i * out;
      Real* dwr = dw.data() + i * out;
      const Real xv = xr[i];
      Real acc = 0;
      for (std::size_t o = 0; o < out; ++o) {
        acc += dyr[o] * wr[o];
        dwr[o] += xv * dyr[o];
      }
      dxr[i] = acc;
    }
  }
}

template <class Real>
struct NormCache {
  Matrix<Real> xhat;
  std::vector<Real> rstd;
};

template <class Real>
void layer_norm(const Matrix<Real>& x, const std::vector<Real>& g, const std::vector<Real>& b, Matrix<Real>& y,
                NormCache<Real>& cache) {
  const std::size_t n = x.cols();
  y.resize(x.rows(), n);
  cache.xhat.resize(x.rows(), n);
  cache.rstd.assign(x.rows(), 0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto xr = x.row(t);
    Real mean = 0;
    for (Real v : xr) mean += v;
    mean /= static_cast<Real>(n);
    Real var = 0;
    for (Real v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<Real>(n);
    const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    cache.rstd[t] = rstd;
    for (std::size_t i = 0; i < n; ++i) {
      const Real xh = (xr[i] - mean) * rstd;
      cache.xhat(t, i) = xh;
      y(t, i) = xh * g[i] + b[i];
    }
  }
}

template <class Real>
void layer_norm_backward(const NormCache<Real>& cache, const std::vector<Real>& g, const Matrix<Real>& dy,
                         Matrix<Real>& dx, std::vector<Real>& dg, std::vector<Real>& db) {
  const std::size_t n = dy.cols();
  dx.resize(dy.rows(), n);
  std::vector<Real> dxhat(n);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    Real mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Real dyv = dy(t, i), xh = cache.xhat(t, i);
      dg[i] += dyv * xh;
      db[i] += dyv;
      dxhat[i] = dyv * g[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xh;
    }
    mean_dxhat /= static_cast<Real>(n);
    mean_dxhat_xhat /= static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i)
      dx(t, i) = cache.rstd[t] * (dxhat[i] - mean_dxhat - cache.xhat(t, i) * mean_dxhat_xhat);
  }
}

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> / std::numbers::sqrt2_v<Real>;
  return cdf + x * pdf;
}

template <class Real>
struct LayerCache {
  Matrix<Real> x_in;
  NormCache<Real> norm1;
  Matrix<Real> a1;  // ln1 output
  Matrix<Real> q, k, v;
  std::vector<Real> probs;  // [heads, T, T], zero above the diagonal
  Matrix<Real> ctx;         // concatenated head outputs
  Matrix<Real> x_mid;
  NormCache<Real> norm2;
  Matrix<Real> a2;  // ln2 output
  Matrix<Real> h1;  // pre-activation
  Matrix<Real> g1;  // gelu(h1)
};

}  // namespace detail

/// Activations kept by the forward pass for backpropagation.
template <class Real>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::vector<detail::LayerCache<Real>> layers;
  Matrix<Real> x_final;
  detail::NormCache<Real> norm_f;
  Matrix<Real> hf;
  Matrix<Real> logits;
};

/// Runs the model on `ids` (1 <= |ids| <= context). Row i of the returned
/// logits scores the token following ids[i] and depends only on ids[0..i].
template <class Real>
const Matrix<Real>& forward(const BasicCheckpoint<Real>& ck, std::span<const TokenId> ids, ForwardCache<Real>& cache) {
  using namespace detail;
  const auto& c = ck.config;
  const auto& w = ck.weights;
  const std::size_t T = ids.size(), d = c.model_dim, H = c.heads, hd = c.head_dim(), V = c.vocab_size;
  if (T == 0) throw std::invalid_argument("forward: empty input");
  if (T > c.context)
    throw std::invalid_argument("forward: sequence of length " + std::to_string(T) + " exceeds context " +
                                std::to_string(c.context));
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw std::out_of_range("forward: token id out of range");

  cache.ids.assign(ids.begin(), ids.end());
  cache.layers.resize(c.layers);

  Matrix<Real> x(T, d);
  const Real emb_scale = std::sqrt(static_cast<Real>(d));
  for (std::size_t t = 0; t < T; ++t) {
    const Real* e = w.tok_emb.data() + static_cast<std::size_t>(ids[t]) * d;
    for (std::size_t i = 0; i < d; ++i) x(t, i) = e[i] * emb_scale + positional_encoding<Real>(t, i, d);
  }

  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  for (std::size_t li = 0; li < c.layers; ++li) {
    const auto& lw = w.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;
    layer_norm(lc.x_in, lw.ln1_g, lw.ln1_b, lc.a1, lc.norm1);
    linear(lc.a1, lw.wq, lw.bq, d, lc.q);
    linear(lc.a1, lw.wk, lw.bk, d, lc.k);
    linear(lc.a1, lw.wv, lw.bv, d, lc.v);
    lc.probs.assign(H * T * T, 0);
    lc.ctx.resize(T, d);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < T; ++i) {
        Real* p = lc.probs.data() + (h * T + i) * T;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          Real s = 0;
          for (std::size_t e = 0; e < hd; ++e) s += lc.q(i, off + e) * lc.k(j, off + e);
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        Real sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[j] /= sum;
        for (std::size_t e = 0; e < hd; ++e) {
          Real acc = 0;
          for (std::size_t j = 0; j <= i; ++j) acc += p[j] * lc.v(j, off + e);
          lc.ctx(i, off + e) = acc;
        }
      }
    }
    Matrix<Real> attn_out;
    linear(lc.ctx, lw.wo, lw.bo, d, attn_out);
    lc.x_mid = lc.x_in;
    for (std::size_t i = 0; i < lc.x_mid.data().size(); ++i) lc.x_mid.data()[i] += attn_out.data()[i];

    layer_norm(lc.x_mid, lw.ln2_g, lw.ln2_b, lc.a2, lc.norm2);
    linear(lc.a2, lw.w1, lw.b1, c.inner_dim, lc.h1);
    lc.g1.resize(T, c.inner_dim);
    for (std::size_t i = 0; i < lc.h1.data().size(); ++i) lc.g1.data()[i] = gelu(lc.h1.data()[i]);
    Matrix<Real> ff_out;
    linear(lc.g1, lw.w2, lw.b2, d, ff_out);
    x = lc.x_mid;
    for (std::size_t i = 0; i < x.data().size(); ++i) x.data()[i] += ff_out.data()[i];
  }

  cache.x_final = x;
  layer_norm(cache.x_final, w.lnf_g, w.lnf_b, cache.hf, cache.norm_f);
  cache.logits.resize(T, V);
  for (std::size_t t = 0; t < T; ++t) {
    const Real* hr = cache.hf.row(t).data();
    Real* lr = cache.logits.row(t).data();
    for (std::size_t v = 0; v < V; ++v) {
      const Real* e = w.tok_emb.data() + v * d;
      Real acc = w.out_bias[v];
      for (std::size_t i = 0; i < d; ++i) acc += hr[i] * e[i];
      lr[v] = acc;
    }
  }
  return cache.logits;
}

template <class Real>
Matrix<Real> forward(const BasicCheckpoint<Real>& ck, std::span<const TokenId> ids) {
  ForwardCache<Real> cache;
  forward(ck, ids, cache);
  return std::move(cache.logits);
}

template <class Real>
Matrix<Real> BasicCheckpoint<Real>::logits(std::span<const TokenId> ids) const {
  return forward(*this, ids);
}

/// Backpropagates d(loss)/d(logits) through the cached forward pass and
/// accumulates parameter gradients into `grads` (same layout as weights).
template <class Real>
void backward(const BasicCheckpoint<Real>& ck, const ForwardCache<Real>& cache, const Matrix<Real>& dlogits,
              Weights<Real>& grads) {
  using namespace detail;
  const auto& c = ck.config;
  const auto& w = ck.weights;
  const std::size_t T = cache.ids.size(), d = c.model_dim, H = c.heads, hd = c.head_dim(), V = c.vocab_size;

  // Output projection (tied to the embedding).
  Matrix<Real> dhf(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const Real* dl = dlogits.row(t).data();
    const Real* hr = cache.hf.row(t).data();
    Real* dh = dhf.row(t).data();
    for (std::size_t v = 0; v < V; ++v) {
      const Real g = dl[v];
      if (g == Real(0)) continue;
      grads.out_bias[v] += g;
      const Real* e = w.tok_emb.data() + v * d;
      Real* de = grads.tok_emb.data() + v * d;
      for (std::size_t i = 0; i < d; ++i) {
        dh[i] += g * e[i];
        de[i] += g * hr[i];
      }
    }
  }
  Matrix<Real> dx;
  layer_norm_backward(cache.norm_f, w.lnf_g, dhf, dx, grads.lnf_g, grads.lnf_b);

  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  for (std::size_t li = c.layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lg = grads.layers[li];
    const auto& lc = cache.layers[li];

    // Feed-forward branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid)).
    Matrix<Real> dg1;
    linear_backward(lc.g1, lw.w2, dx, dg1, lg.w2, lg.b2);
    for (std::size_t i = 0; i < dg1.data().size(); ++i) dg1.data()[i] *= gelu_grad(lc.h1.data()[i]);
    Matrix<Real> da2;
    linear_backward(lc.a2, lw.w1, dg1, da2, lg.w1, lg.b1);
    Matrix<Real> dmid_ln;
    layer_norm_backward(lc.norm2, lw.ln2_g, da2, dmid_ln, lg.ln2_g, lg.ln2_b);
    Matrix<Real> dmid = dx;
    for (std::size_t i = 0; i < dmid.data().size(); ++i) dmid.data()[i] += dmid_ln.data()[i];

    // Attention branch: x_mid = x_in + Wo attn(ln1(x_in)).
    Matrix<Real> dctx;
    linear_backward(lc.ctx, lw.wo, dmid, dctx, lg.wo, lg.bo);
    Matrix<Real> dq(T, d), dk(T, d), dv(T, d);
    std::vector<Real> dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < T; ++i) {
        const Real* p = lc.probs.data() + (h * T + i) * T;
        Real dot = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          Real s = 0;
          for (std::size_t e = 0; e < hd; ++e) {
            s += dctx(i, off + e) * lc.v(j, off + e);
            dv(j, off + e) += p[j] * dctx(i, off + e);
          }
          dp[j] = s;
          dot += s * p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const Real ds = p[j] * (dp[j] - dot) * scale;
          if (ds == Real(0)) continue;
          for (std::size_t e = 0; e < hd; ++e) {
            dq(i, off + e) += ds * lc.k(j, off + e);
            dk(j, off + e) += ds * lc.q(i, off + e);
          }
        }
      }
    }
    Matrix<Real> da1(T, d), tmp;
    linear_backward(lc.a1, lw.wq, dq, tmp, lg.wq, lg.bq);
    for (std::size_t i = 0; i < tmp.data().size(); ++i) da1.data()[i] += tmp.data()[i];
    linear_backward(lc.a1, lw.wk, dk, tmp, lg.wk, lg.bk);
    for (std::size_t i = 0; i < tmp.data().size(); ++i) da1.data()[i] += tmp.data()[i];
    linear_backward(lc.a1, lw.wv, dv, tmp, lg.wv, lg.bv);
    for (std::size_t i = 0; i < tmp.data().size(); ++i) da1.data()[i] += tmp.data()[i];
    Matrix<Real> din_ln;
    layer_norm_backward(lc.norm1, lw.ln1_g, da1, din_ln, lg.ln1_g, lg.ln1_b);
    dx = std::move(dmid);
    for (std::size_t i = 0; i < dx.data().size(); ++i) dx.data()[i] += din_ln.data()[i];
  }

  const Real emb_scale = std::sqrt(static_cast<Real>(d));
  for (std::size_t t = 0; t < T; ++t) {
    Real* de = grads.tok_emb.data() + static_cast<std::size_t>(cache.ids[t]) * d;
    for (std::size_t i = 0; i < d; ++i) de[i] += dx(t, i) * emb_scale;
  }
}

}  // namespace ctrlkit
