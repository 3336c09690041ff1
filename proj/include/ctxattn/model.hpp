#pragma once

// Pre-LayerNorm encoder-decoder transformer with sinusoidal positions and
// untied output projection. Every attention head exposes its pre-softmax
// scores H and post-softmax weights Z, and any head can be rewritten by an
// InterventionPlan between the two.
//
//   encoder layer:  x += SelfAttn(LN(x));  x += FFN(LN(x))
//   decoder layer:  y += CausalSelfAttn(LN(y));  y += CrossAttn(LN(y), enc);
//                   y += FFN(LN(y))
//
// Sequences are processed one example at a time; <pad> keys are masked.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxattn/intervention.hpp"
#include "ctxattn/numerics.hpp"
#include "ctxattn/relations.hpp"
#include "ctxattn/vocab.hpp"

namespace ctxattn {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 128;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 4) throw Error("config: vocab_size must cover the reserved tokens");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw Error("config: d_model must be a positive multiple of n_heads");
    if (d_ff == 0 || max_len == 0) throw Error("config: d_ff and max_len must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("config: dropout must lie in [0, 1)");
  }

  std::size_t layers(ModuleKind k) const {
    return k == ModuleKind::EncoderSelf ? n_enc_layers : n_dec_layers;
  }

  void check_address(const HeadAddress& a) const {
    if (a.layer < 1 || static_cast<std::size_t>(a.layer) > layers(a.kind) || a.head < 1 ||
        static_cast<std::size_t>(a.head) > n_heads)
      throw Error("head " + a.str() + " is outside the model configuration");
  }

  std::vector<HeadAddress> all_heads() const {
    std::vector<HeadAddress> out;
    for (ModuleKind k : {ModuleKind::EncoderSelf, ModuleKind::Cross, ModuleKind::DecoderSelf})
      for (std::size_t l = 1; l <= layers(k); ++l)
        for (std::size_t h = 1; h <= n_heads; ++h)
          out.push_back({k, static_cast<int>(l), static_cast<int>(h)});
    return out;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_heads", c.n_heads},
       {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},
       {"max_len", c.max_len},       {"dropout", c.dropout},     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
  c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_len = j.value("max_len", d.max_len);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Parameters

struct AttentionParams {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;

  template <typename F>
  void visit(const std::string& p, F&& f) {
    f(p + ".wq", wq); f(p + ".bq", bq); f(p + ".wk", wk); f(p + ".bk", bk);
    f(p + ".wv", wv); f(p + ".bv", bv); f(p + ".wo", wo); f(p + ".bo", bo);
  }
};

struct NormParams {
  Matrix gamma, beta;

  template <typename F>
  void visit(const std::string& p, F&& f) {
    f(p + ".gamma", gamma);
    f(p + ".beta", beta);
  }
};

struct FeedForwardParams {
  Matrix w1, b1, w2, b2;

  template <typename F>
  void visit(const std::string& p, F&& f) {
    f(p + ".w1", w1); f(p + ".b1", b1); f(p + ".w2", w2); f(p + ".b2", b2);
  }
};

struct EncoderLayerParams {
  NormParams ln1;
  AttentionParams self;
  NormParams ln2;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  NormParams ln1;
  AttentionParams self;
  NormParams ln2;
  AttentionParams cross;
  NormParams ln3;
  FeedForwardParams ffn;
};

struct Weights {
  Matrix embedding;  // vocab x d, shared by encoder and decoder inputs
  std::vector<EncoderLayerParams> enc;
  NormParams enc_norm;
  std::vector<DecoderLayerParams> dec;
  NormParams dec_norm;
  Matrix out_w, out_b;  // untied output projection

  // Every tensor zero: gradient and optimiser-state buffers.
  static Weights zeros(const ModelConfig& c) { return shaped(c, 0.0); }
  // Zero except layer-norm gains, which start at one.
  static Weights neutral(const ModelConfig& c) { return shaped(c, 1.0); }

  static Weights shaped(const ModelConfig& c, double gain) {
    const std::size_t d = c.d_model;
    auto attn = [&] {
      return AttentionParams{Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d),
                             Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d)};
    };
    auto norm = [&] { return NormParams{Matrix(1, d, gain), Matrix(1, d)}; };
    auto ffn = [&] {
      return FeedForwardParams{Matrix(d, c.d_ff), Matrix(1, c.d_ff), Matrix(c.d_ff, d),
                               Matrix(1, d)};
    };
    Weights w;
    w.embedding = Matrix(c.vocab_size, d);
    for (std::size_t l = 0; l < c.n_enc_layers; ++l)
      w.enc.push_back({norm(), attn(), norm(), ffn()});
    w.enc_norm = norm();
    for (std::size_t l = 0; l < c.n_dec_layers; ++l)
      w.dec.push_back({norm(), attn(), norm(), attn(), norm(), ffn()});
    w.dec_norm = norm();
    w.out_w = Matrix(d, c.vocab_size);
    w.out_b = Matrix(1, c.vocab_size);
    return w;
  }

  template <typename F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    for (std::size_t l = 0; l < enc.size(); ++l) {
      const std::string p = "enc." + std::to_string(l + 1);
      enc[l].ln1.visit(p + ".ln1", f);
      enc[l].self.visit(p + ".self", f);
      enc[l].ln2.visit(p + ".ln2", f);
      enc[l].ffn.visit(p + ".ffn", f);
    }
    enc_norm.visit("enc_norm", f);
    for (std::size_t l = 0; l < dec.size(); ++l) {
      const std::string p = "dec." + std::to_string(l + 1);
      dec[l].ln1.visit(p + ".ln1", f);
      dec[l].self.visit(p + ".self", f);
      dec[l].ln2.visit(p + ".ln2", f);
      dec[l].cross.visit(p + ".cross", f);
      dec[l].ln3.visit(p + ".ln3", f);
      dec[l].ffn.visit(p + ".ffn", f);
    }
    dec_norm.visit("dec_norm", f);
    f(std::string("out_w"), out_w);
    f(std::string("out_b"), out_b);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<Weights*>(this)->visit([&](const std::string& n, Matrix& m) {
      f(n, static_cast<const Matrix&>(m));
    });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  AttentionParams& attention(const HeadAddress& a) {
    const auto l = static_cast<std::size_t>(a.layer - 1);
    switch (a.kind) {
      case ModuleKind::EncoderSelf: return enc.at(l).self;
      case ModuleKind::Cross: return dec.at(l).cross;
      case ModuleKind::DecoderSelf: return dec.at(l).self;
    }
    throw Error("unreachable module kind");
  }
  const AttentionParams& attention(const HeadAddress& a) const {
    return const_cast<Weights*>(this)->attention(a);
  }

  friend bool operator==(const Weights& a, const Weights& b) {
    bool eq = true;
    std::vector<const Matrix*> mb;
    b.visit([&](const std::string&, const Matrix& m) { mb.push_back(&m); });
    std::size_t i = 0;
    a.visit([&](const std::string&, const Matrix& m) {
      eq = eq && i < mb.size() && m == *mb[i];
      ++i;
    });
    return eq && i == mb.size();
  }
};

inline Matrix sinusoidal_positions(std::size_t max_len, std::size_t d) {
  Matrix pe(max_len, d);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, Vocabulary vocab) : config_(config), vocab_(std::move(vocab)) {
    if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
    if (config_.vocab_size != vocab_.size())
      throw Error("config vocab_size does not match vocabulary");
    config_.validate();
    weights_ = Weights::neutral(config_);
    positions_ = sinusoidal_positions(config_.max_len, config_.d_model);
  }

  // Random initialisation from the config seed ("init" substream).
  static Model initialized(ModelConfig config, Vocabulary vocab) {
    Model m(config, std::move(vocab));
    Rng rng = Rng(m.config_.seed).substream("init");
    m.weights_.visit([&](const std::string& name, Matrix& w) {
      const bool is_bias = name.ends_with(".bq") || name.ends_with(".bk") ||
                           name.ends_with(".bv") || name.ends_with(".bo") ||
                           name.ends_with(".b1") || name.ends_with(".b2") || name == "out_b";
      if (is_bias || name.ends_with(".beta") || name.ends_with(".gamma")) return;
      const double scale = name == "embedding" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(w.rows()));
      for (double& v : w.values()) v = scale * rng.normal();
    });
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Weights& weights() const { return weights_; }
  Weights& weights() { return weights_; }
  const Matrix& positions() const { return positions_; }

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  Weights weights_;
  Matrix positions_;
};

// ---------------------------------------------------------------------------
// Traces

struct HeadTrace {
  Matrix scores;     // H as computed from queries and keys
  Matrix rewritten;  // H after any intervention (equals `scores` otherwise)
  Matrix weights;    // Z = masked softmax of `rewritten`
  KeyMask mask;
};

using AttentionTrace = std::map<HeadAddress, HeadTrace>;

struct ForwardOptions {
  const InterventionPlan* plan = nullptr;
  const RelationAnnotation* annotation = nullptr;
  bool capture = false;
};

struct ForwardResult {
  Matrix logits;  // target positions x vocab
  std::optional<AttentionTrace> trace;
};

// ---------------------------------------------------------------------------
// Layer kernels and caches (used by forward and by training's backward pass).

namespace detail {

inline constexpr double kNormEps = 1e-5;

struct NormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, const NormParams& p, NormCache* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  if (cache) {
    cache->xhat.resize(n, d);
    cache->inv_std.assign(n, 0.0);
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (xr[c] - mean) * inv;
      if (cache) cache->xhat(r, c) = xh;
      y(r, c) = p.gamma(0, c) * xh + p.beta(0, c);
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const NormParams& p, const NormCache& cache,
                                  NormParams& g) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxh(d);
  for (std::size_t r = 0; r < n; ++r) {
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g.gamma(0, c) += dy(r, c) * cache.xhat(r, c);
      g.beta(0, c) += dy(r, c);
      dxh[c] = dy(r, c) * p.gamma(0, c);
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * cache.xhat(r, c);
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c)
      dx(r, c) = cache.inv_std[r] * (dxh[c] - mean_dxh - cache.xhat(r, c) * mean_dxh_xh);
  }
  return dx;
}

struct FeedForwardCache {
  Matrix x, pre, h;
};

inline Matrix feed_forward(const Matrix& x, const FeedForwardParams& p, FeedForwardCache* cache) {
  Matrix pre = matmul(x, p.w1);
  add_row_bias(pre, p.b1);
  Matrix h = pre;
  for (double& v : h.values()) v = v > 0.0 ? v : 0.0;
  Matrix out = matmul(h, p.w2);
  add_row_bias(out, p.b2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->h = std::move(h);
  }
  return out;
}

inline Matrix feed_forward_backward(const Matrix& dout, const FeedForwardParams& p,
                                    const FeedForwardCache& c, FeedForwardParams& g) {
  matmul_tn_acc(c.h, dout, g.w2);
  column_sums_acc(dout, g.b2);
  Matrix dh = matmul_nt(dout, p.w2);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (c.pre.data()[i] <= 0.0) dh.data()[i] = 0.0;
  matmul_tn_acc(c.x, dh, g.w1);
  column_sums_acc(dh, g.b1);
  return matmul_nt(dh, p.w1);
}

struct AttentionCache {
  Matrix xq, xkv, q, k, v, ctx;
  std::vector<Matrix> probs;  // per head
};

// Scaled dot-product scores of one head: q[:, slice] * k[:, slice]^T / sqrt(dk).
inline Matrix head_scores(const Matrix& q, const Matrix& k, std::size_t offset, std::size_t dk) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix s(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const double* qi = q.data() + i * q.cols() + offset;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const double* kj = k.data() + j * k.cols() + offset;
      double acc = 0.0;
      for (std::size_t p = 0; p < dk; ++p) acc += qi[p] * kj[p];
      s(i, j) = acc * scale;
    }
  }
  return s;
}

struct AttentionHooks {
  HeadAddress base;  // kind and layer; head filled per head
  const ResolvedPlan* plan = nullptr;
  AttentionTrace* trace = nullptr;
};

inline Matrix attention(const Matrix& xq, const Matrix& xkv, const AttentionParams& p,
                        std::size_t n_heads, const KeyMask& mask, const AttentionHooks& hooks,
                        AttentionCache* cache) {
  const std::size_t d = xq.cols(), dk = d / n_heads, nq = xq.rows(), nk = xkv.rows();
  Matrix q = matmul(xq, p.wq);
  add_row_bias(q, p.bq);
  Matrix k = matmul(xkv, p.wk);
  add_row_bias(k, p.bk);
  Matrix v = matmul(xkv, p.wv);
  add_row_bias(v, p.bv);
  Matrix ctx(nq, d);
  if (cache) cache->probs.assign(n_heads, Matrix());
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dk;
    Matrix s = head_scores(q, k, off, dk);
    HeadAddress addr = hooks.base;
    addr.head = static_cast<int>(h + 1);
    Matrix original;
    const bool rewritten = hooks.plan && hooks.plan->touches(addr);
    if (hooks.trace && rewritten) original = s;
    if (rewritten) hooks.plan->apply(addr, s, mask);
    Matrix z(nq, nk);
    for (std::size_t i = 0; i < nq; ++i) softmax_masked(s.row(i), mask.row(i), z.row(i));
    for (std::size_t i = 0; i < nq; ++i) {
      double* ci = ctx.data() + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const double w = z(i, j);
        if (w == 0.0) continue;
        const double* vj = v.data() + j * d + off;
        for (std::size_t t = 0; t < dk; ++t) ci[t] += w * vj[t];
      }
    }
    if (hooks.trace) {
      HeadTrace ht;
      ht.rewritten = s;
      ht.scores = rewritten ? std::move(original) : std::move(s);
      ht.weights = z;
      ht.mask = mask;
      (*hooks.trace)[addr] = std::move(ht);
    }
    if (cache) cache->probs[h] = std::move(z);
  }
  Matrix out = matmul(ctx, p.wo);
  add_row_bias(out, p.bo);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->ctx = std::move(ctx);
  }
  return out;
}

// Returns (d xq, d xkv).
inline std::pair<Matrix, Matrix> attention_backward(const Matrix& dout, const AttentionParams& p,
                                                    std::size_t n_heads, const AttentionCache& c,
                                                    AttentionParams& g) {
  const std::size_t d = c.xq.cols(), dk = d / n_heads, nq = c.xq.rows(), nk = c.xkv.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  matmul_tn_acc(c.ctx, dout, g.wo);
  column_sums_acc(dout, g.bo);
  Matrix dctx = matmul_nt(dout, p.wo);
  Matrix dq(nq, d), dk_(nk, d), dv(nk, d);
  Matrix dp(nq, nk);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dk;
    const Matrix& z = c.probs[h];
    for (std::size_t i = 0; i < nq; ++i) {
      const double* gi = dctx.data() + i * d + off;
      double dot = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        const double w = z(i, j);
        if (w == 0.0) {
          dp(i, j) = 0.0;
          continue;
        }
        const double* vj = c.v.data() + j * d + off;
        double acc = 0.0;
        for (std::size_t t = 0; t < dk; ++t) acc += gi[t] * vj[t];
        dp(i, j) = acc;
        dot += acc * w;
        double* dvj = dv.data() + j * d + off;
        for (std::size_t t = 0; t < dk; ++t) dvj[t] += w * gi[t];
      }
      for (std::size_t j = 0; j < nk; ++j) dp(i, j) = z(i, j) * (dp(i, j) - dot) * scale;
    }
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qi = c.q.data() + i * d + off;
      double* dqi = dq.data() + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const double s = dp(i, j);
        if (s == 0.0) continue;
        const double* kj = c.k.data() + j * d + off;
        double* dkj = dk_.data() + j * d + off;
        for (std::size_t t = 0; t < dk; ++t) {
          dqi[t] += s * kj[t];
          dkj[t] += s * qi[t];
        }
      }
    }
  }
  matmul_tn_acc(c.xq, dq, g.wq);
  column_sums_acc(dq, g.bq);
  matmul_tn_acc(c.xkv, dk_, g.wk);
  column_sums_acc(dk_, g.bk);
  matmul_tn_acc(c.xkv, dv, g.wv);
  column_sums_acc(dv, g.bv);
  Matrix dxq = matmul_nt(dq, p.wq);
  Matrix dxkv = matmul_nt(dk_, p.wk);
  matmul_nt_acc(dv, p.wv, dxkv);
  return {std::move(dxq), std::move(dxkv)};
}

struct EncoderLayerCache {
  NormCache ln1;
  AttentionCache self;
  Matrix drop1;
  NormCache ln2;
  FeedForwardCache ffn;
  Matrix drop2;
};

struct DecoderLayerCache {
  NormCache ln1;
  AttentionCache self;
  Matrix drop1;
  NormCache ln2;
  AttentionCache cross;
  Matrix drop2;
  NormCache ln3;
  FeedForwardCache ffn;
  Matrix drop3;
};

struct Tape {
  std::vector<TokenId> src, tgt_in;
  std::vector<EncoderLayerCache> enc;
  NormCache enc_norm;
  std::vector<DecoderLayerCache> dec;
  NormCache dec_norm;
  Matrix dec_final;  // normalised decoder output fed to the projection
};

// Inverted dropout; the mask is kept so backward can reuse it.
inline void dropout(Matrix& x, double rate, Rng* rng, Matrix* mask_out) {
  if (!rng || rate <= 0.0) return;
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask.data()[i] = rng->uniform() < rate ? 0.0 : keep;
    x.data()[i] *= mask.data()[i];
  }
  if (mask_out) *mask_out = std::move(mask);
}

inline void dropout_backward(Matrix& g, const Matrix& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= mask.data()[i];
}

inline Matrix embed(const Model& m, std::span<const TokenId> tokens) {
  const auto& c = m.config();
  if (tokens.size() > c.max_len) throw Error("sequence longer than max_len");
  Matrix x(tokens.size(), c.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab_size) throw Error("token id " + std::to_string(tokens[i]) + " >= vocab_size");
    auto row = x.row(i);
    auto e = m.weights().embedding.row(tokens[i]);
    auto p = m.positions().row(i);
    for (std::size_t j = 0; j < c.d_model; ++j) row[j] = e[j] + p[j];
  }
  return x;
}

inline KeyMask padding_mask(std::size_t nq, std::span<const TokenId> keys) {
  KeyMask mask(nq, keys.size());
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < keys.size(); ++j)
      mask.valid[i * keys.size() + j] = keys[j] != Vocabulary::kPad;
  return mask;
}

inline KeyMask causal_mask(std::span<const TokenId> tokens) {
  const std::size_t n = tokens.size();
  KeyMask mask(n, n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.valid[i * n + j] = tokens[j] != Vocabulary::kPad;
  return mask;
}

struct RunContext {
  const ResolvedPlan* plan = nullptr;
  AttentionTrace* trace = nullptr;
  Tape* tape = nullptr;
  Rng* dropout_rng = nullptr;
};

inline Matrix encode(const Model& m, std::span<const TokenId> src, const RunContext& ctx) {
  const auto& c = m.config();
  const auto& w = m.weights();
  Matrix x = embed(m, src);
  const KeyMask mask = padding_mask(src.size(), src);
  if (ctx.tape) {
    ctx.tape->src.assign(src.begin(), src.end());
    ctx.tape->enc.assign(c.n_enc_layers, {});
  }
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    auto* lc = ctx.tape ? &ctx.tape->enc[l] : nullptr;
    const auto& p = w.enc[l];
    AttentionHooks hooks{{ModuleKind::EncoderSelf, static_cast<int>(l + 1), 0}, ctx.plan, ctx.trace};
    Matrix a = layer_norm(x, p.ln1, lc ? &lc->ln1 : nullptr);
    Matrix att = attention(a, a, p.self, c.n_heads, mask, hooks, lc ? &lc->self : nullptr);
    dropout(att, c.dropout, ctx.dropout_rng, lc ? &lc->drop1 : nullptr);
    add_inplace(x, att);
    Matrix b = layer_norm(x, p.ln2, lc ? &lc->ln2 : nullptr);
    Matrix f = feed_forward(b, p.ffn, lc ? &lc->ffn : nullptr);
    dropout(f, c.dropout, ctx.dropout_rng, lc ? &lc->drop2 : nullptr);
    add_inplace(x, f);
  }
  return layer_norm(x, w.enc_norm, ctx.tape ? &ctx.tape->enc_norm : nullptr);
}

inline Matrix decode(const Model& m, const Matrix& memory, std::span<const TokenId> src,
                     std::span<const TokenId> tgt_in, const RunContext& ctx) {
  const auto& c = m.config();
  const auto& w = m.weights();
  Matrix y = embed(m, tgt_in);
  const KeyMask self_mask = causal_mask(tgt_in);
  const KeyMask cross_mask = padding_mask(tgt_in.size(), src);
  if (ctx.tape) {
    ctx.tape->tgt_in.assign(tgt_in.begin(), tgt_in.end());
    ctx.tape->dec.assign(c.n_dec_layers, {});
  }
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    auto* lc = ctx.tape ? &ctx.tape->dec[l] : nullptr;
    const auto& p = w.dec[l];
    const int layer = static_cast<int>(l + 1);
    Matrix a = layer_norm(y, p.ln1, lc ? &lc->ln1 : nullptr);
    Matrix sa = attention(a, a, p.self, c.n_heads, self_mask,
                          {{ModuleKind::DecoderSelf, layer, 0}, ctx.plan, ctx.trace},
                          lc ? &lc->self : nullptr);
    dropout(sa, c.dropout, ctx.dropout_rng, lc ? &lc->drop1 : nullptr);
    add_inplace(y, sa);
    Matrix b = layer_norm(y, p.ln2, lc ? &lc->ln2 : nullptr);
    Matrix ca = attention(b, memory, p.cross, c.n_heads, cross_mask,
                          {{ModuleKind::Cross, layer, 0}, ctx.plan, ctx.trace},
                          lc ? &lc->cross : nullptr);
    dropout(ca, c.dropout, ctx.dropout_rng, lc ? &lc->drop2 : nullptr);
    add_inplace(y, ca);
    Matrix e = layer_norm(y, p.ln3, lc ? &lc->ln3 : nullptr);
    Matrix f = feed_forward(e, p.ffn, lc ? &lc->ffn : nullptr);
    dropout(f, c.dropout, ctx.dropout_rng, lc ? &lc->drop3 : nullptr);
    add_inplace(y, f);
  }
  Matrix yf = layer_norm(y, w.dec_norm, ctx.tape ? &ctx.tape->dec_norm : nullptr);
  Matrix logits = matmul(yf, w.out_w);
  add_row_bias(logits, w.out_b);
  if (ctx.tape) ctx.tape->dec_final = std::move(yf);
  return logits;
}

// Accumulates parameter gradients for d(loss)/d(logits) = dlogits.
inline void backward(const Model& m, const Tape& t, const Matrix& dlogits, Weights& g) {
  const auto& c = m.config();
  const auto& w = m.weights();
  matmul_tn_acc(t.dec_final, dlogits, g.out_w);
  column_sums_acc(dlogits, g.out_b);
  Matrix dy = layer_norm_backward(matmul_nt(dlogits, w.out_w), w.dec_norm, t.dec_norm, g.dec_norm);
  Matrix dmemory(t.src.size(), c.d_model);
  for (std::size_t l = c.n_dec_layers; l-- > 0;) {
    const auto& p = w.dec[l];
    const auto& lc = t.dec[l];
    auto& gp = g.dec[l];
    Matrix df = dy;
    dropout_backward(df, lc.drop3);
    add_inplace(dy, layer_norm_backward(feed_forward_backward(df, p.ffn, lc.ffn, gp.ffn), p.ln3,
                                        lc.ln3, gp.ln3));
    Matrix dca = dy;
    dropout_backward(dca, lc.drop2);
    auto [dq, dmem] = attention_backward(dca, p.cross, c.n_heads, lc.cross, gp.cross);
    add_inplace(dmemory, dmem);
    add_inplace(dy, layer_norm_backward(dq, p.ln2, lc.ln2, gp.ln2));
    Matrix dsa = dy;
    dropout_backward(dsa, lc.drop1);
    auto [dq2, dkv2] = attention_backward(dsa, p.self, c.n_heads, lc.self, gp.self);
    add_inplace(dq2, dkv2);
    add_inplace(dy, layer_norm_backward(dq2, p.ln1, lc.ln1, gp.ln1));
  }
  for (std::size_t i = 0; i < t.tgt_in.size(); ++i) {
    auto gr = g.embedding.row(t.tgt_in[i]);
    auto d = dy.row(i);
    for (std::size_t j = 0; j < c.d_model; ++j) gr[j] += d[j];
  }
  Matrix dx = layer_norm_backward(dmemory, w.enc_norm, t.enc_norm, g.enc_norm);
  for (std::size_t l = c.n_enc_layers; l-- > 0;) {
    const auto& p = w.enc[l];
    const auto& lc = t.enc[l];
    auto& gp = g.enc[l];
    Matrix df = dx;
    dropout_backward(df, lc.drop2);
    add_inplace(dx, layer_norm_backward(feed_forward_backward(df, p.ffn, lc.ffn, gp.ffn), p.ln2,
                                        lc.ln2, gp.ln2));
    Matrix da = dx;
    dropout_backward(da, lc.drop1);
    auto [dq, dkv] = attention_backward(da, p.self, c.n_heads, lc.self, gp.self);
    add_inplace(dq, dkv);
    add_inplace(dx, layer_norm_backward(dq, p.ln1, lc.ln1, gp.ln1));
  }
  for (std::size_t i = 0; i < t.src.size(); ++i) {
    auto gr = g.embedding.row(t.src[i]);
    auto d = dx.row(i);
    for (std::size_t j = 0; j < c.d_model; ++j) gr[j] += d[j];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public inference API

// Decoder input for a gold target: <bos> followed by all but the last token.
inline std::vector<TokenId> shift_right(std::span<const TokenId> target) {
  std::vector<TokenId> in;
  in.reserve(target.size());
  in.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i + 1 < target.size(); ++i) in.push_back(target[i]);
  return in;
}

inline std::optional<ResolvedPlan> resolve_plan(const Model& model, const ForwardOptions& opt) {
  if (!opt.plan || opt.plan->empty()) return std::nullopt;
  if (!opt.annotation) throw Error("an intervention plan needs the example's relation annotation");
  for (const auto& e : opt.plan->entries()) model.config().check_address(e.address);
  return ResolvedPlan(*opt.plan, *opt.annotation);
}

inline ForwardResult forward(const Model& model, std::span<const TokenId> src,
                             std::span<const TokenId> tgt_in, const ForwardOptions& opt = {}) {
  if (src.empty() || tgt_in.empty()) throw Error("forward: empty sequence");
  const auto plan = resolve_plan(model, opt);
  ForwardResult out;
  if (opt.capture) out.trace.emplace();
  detail::RunContext ctx{plan ? &*plan : nullptr, out.trace ? &*out.trace : nullptr, nullptr,
                         nullptr};
  const Matrix memory = detail::encode(model, src, ctx);
  out.logits = detail::decode(model, memory, src, tgt_in, ctx);
  require_finite(out.logits, "forward logits");
  return out;
}

// Sum over target positions of log softmax(logits)[target], teacher-forced.
inline double log_likelihood_from_logits(const Matrix& logits, std::span<const TokenId> target) {
  double total = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (target[t] >= logits.cols()) throw Error("target token out of range");
    total += logits(t, target[t]) - log_sum_exp(logits.row(t));
  }
  return total;
}

inline double sequence_log_likelihood(const Model& model, std::span<const TokenId> src,
                                      std::span<const TokenId> target,
                                      const InterventionPlan* plan = nullptr,
                                      const RelationAnnotation* ann = nullptr) {
  const auto in = shift_right(target);
  const auto res = forward(model, src, in, {plan, ann, false});
  return log_likelihood_from_logits(res.logits, target);
}

// Greedy continuation of `prefix` (target tokens without <bos>). Ties go to
// the lower token id. The returned tokens exclude the final <eos>.
inline std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> src,
                                          std::span<const TokenId> prefix, std::size_t max_new) {
  std::vector<TokenId> out;
  if (!prefix.empty() && prefix.back() == Vocabulary::kEos) return out;
  const Matrix memory = detail::encode(model, src, {});
  std::vector<TokenId> in{Vocabulary::kBos};
  in.insert(in.end(), prefix.begin(), prefix.end());
  for (std::size_t step = 0; step < max_new && in.size() <= model.config().max_len; ++step) {
    const Matrix logits = detail::decode(model, memory, src, in, {});
    auto last = logits.row(logits.rows() - 1);
    TokenId best = 0;
    for (TokenId v = 1; v < last.size(); ++v)
      if (last[v] > last[best]) best = v;
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
    in.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 version, u64 header length, JSON header
// (config, vocabulary, tensor table), then every tensor as little-endian
// IEEE-754 doubles in header order.

inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'X', 'A', 'T', 'T', 'N', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = model.config();
  header["vocab"] = model.vocab().tokens();
  auto tensors = nlohmann::json::array();
  model.weights().visit([&](const std::string& n, const Matrix& m) {
    tensors.push_back({{"name", n}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  header["tensors"] = tensors;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  model.weights().visit([&](const std::string&, const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw Error("not a checkpoint file: " + path);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw Error("checkpoint version " + std::to_string(version) + " does not match expected " +
                std::to_string(kCheckpointVersion));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint header: " + path);
  const auto header = nlohmann::json::parse(text);
  Model model(header.at("config").get<ModelConfig>(),
              Vocabulary(header.at("vocab").get<std::vector<std::string>>()));
  const auto& table = header.at("tensors");
  std::size_t idx = 0;
  model.weights().visit([&](const std::string& n, Matrix& m) {
    if (idx >= table.size() || table[idx].at("name") != n ||
        table[idx].at("rows").get<std::size_t>() != m.rows() ||
        table[idx].at("cols").get<std::size_t>() != m.cols())
      throw Error("checkpoint tensor table does not match its config at " + n);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    ++idx;
  });
  if (!in) throw Error("truncated checkpoint payload: " + path);
  return model;
}

}  // namespace ctxattn
