// Copyright (c) 2026 the lrc authors
// SPDX-License-Identifier: Apache-2.0
//
// Llama-style decoder: RMSNorm -> attention (rotary, grouped-query, causal)
// -> residual -> RMSNorm -> SwiGLU FFN -> residual, final norm, tied or
// untied LM head. The forward pass captures the per-layer linear outputs and
// module outputs that the clone loss aligns.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lrc/common.hpp"
#include "lrc/tensor.hpp"

namespace lrc {

struct ModelConfig {
  int num_layers = 0;
  int hidden_size = 0;
  int num_q_heads = 0;
  int num_kv_heads = 0;
  int head_dim = 0;
  int ffn_size = 0;
  int vocab_size = 0;
  double rms_eps = 1e-5;
  bool tie_embeddings = true;
  double rope_base = 10000.0;

  int d_q() const { return num_q_heads * head_dim; }
  int d_kv() const { return num_kv_heads * head_dim; }

  void validate() const {
    if (num_layers < 1 || hidden_size < 1 || num_q_heads < 1 || num_kv_heads < 1 ||
        head_dim < 1 || ffn_size < 1 || vocab_size < 1)
      throw ConfigError("all model dimensions must be >= 1");
    if (num_q_heads % num_kv_heads != 0)
      throw ConfigError("num_q_heads (" + std::to_string(num_q_heads) +
                        ") must be divisible by num_kv_heads (" + std::to_string(num_kv_heads) +
                        ")");
    if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary embedding");
    if (rms_eps <= 0) throw ConfigError("rms_eps must be positive");
  }
};

// Token id matrix, batch x seq. Not a differentiable tensor.
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> ids;  // row-major

  int32_t at(int64_t b, int64_t t) const { return ids[static_cast<size_t>(b * seq + t)]; }
};

template <typename S>
struct WeightSet {
  struct Layer {
    Tensor<S> w_q, w_k, w_v;    // [d_q|d_kv, d], applied as x W^T
    Tensor<S> w_o;              // [d_q, d], applied by right-multiplication
    Tensor<S> w_gate, w_up;     // [d_mid, d], applied as x W^T
    Tensor<S> w_down;           // [d_mid, d], applied by right-multiplication
    Tensor<S> g_attn, g_ffn;    // RMSNorm gains, [d]
  };
  std::vector<Layer> layers;
  Tensor<S> g_final;  // [d]
  Tensor<S> w_emb;    // [V, d]
  Tensor<S> w_lm;     // [V, d]; same storage as w_emb when tied

  bool tied() const { return w_lm.same_storage(w_emb); }

  // All distinct weight tensors in a fixed order (w_lm omitted when tied).
  std::vector<std::pair<std::string, Tensor<S>>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("emb", w_emb);
    if (!tied()) out.emplace_back("lm", w_lm);
    out.emplace_back("final_gain", g_final);
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      std::string p = "layers." + std::to_string(i) + ".";
      out.emplace_back(p + "w_q", L.w_q);
      out.emplace_back(p + "w_k", L.w_k);
      out.emplace_back(p + "w_v", L.w_v);
      out.emplace_back(p + "w_o", L.w_o);
      out.emplace_back(p + "w_gate", L.w_gate);
      out.emplace_back(p + "w_up", L.w_up);
      out.emplace_back(p + "w_down", L.w_down);
      out.emplace_back(p + "g_attn", L.g_attn);
      out.emplace_back(p + "g_ffn", L.g_ffn);
    }
    return out;
  }

  void set_requires_grad(bool v) {
    for (auto& [name, t] : named_tensors()) t.set_requires_grad(v);
  }

  uint64_t content_hash() const {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& [name, t] : named_tensors()) {
      h = fnv1a64(name.data(), name.size(), h);
      for (S v : t.value()) {
        float f = static_cast<float>(v);
        h = fnv1a64(&f, sizeof(f), h);
      }
    }
    return h;
  }
};

// Random initialization; entry scale 1/sqrt(fan_in) keeps activations O(1).
template <typename S>
WeightSet<S> init_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  int64_t d = cfg.hidden_size;
  double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  double sd_q = 1.0 / std::sqrt(static_cast<double>(cfg.d_q()));
  double sd_mid = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_size));
  WeightSet<S> w;
  w.w_emb = Tensor<S>::randn({cfg.vocab_size, d}, rng, sd_d);
  w.w_lm = cfg.tie_embeddings ? w.w_emb : Tensor<S>::randn({cfg.vocab_size, d}, rng, sd_d);
  w.g_final = Tensor<S>::full({d}, S(1));
  w.layers.resize(static_cast<size_t>(cfg.num_layers));
  for (auto& L : w.layers) {
    L.w_q = Tensor<S>::randn({cfg.d_q(), d}, rng, sd_d);
    L.w_k = Tensor<S>::randn({cfg.d_kv(), d}, rng, sd_d);
    L.w_v = Tensor<S>::randn({cfg.d_kv(), d}, rng, sd_d);
    L.w_o = Tensor<S>::randn({cfg.d_q(), d}, rng, sd_q);
    L.w_gate = Tensor<S>::randn({cfg.ffn_size, d}, rng, sd_d);
    L.w_up = Tensor<S>::randn({cfg.ffn_size, d}, rng, sd_d);
    L.w_down = Tensor<S>::randn({cfg.ffn_size, d}, rng, sd_mid);
    L.g_attn = Tensor<S>::full({d}, S(1));
    L.g_ffn = Tensor<S>::full({d}, S(1));
  }
  return w;
}

template <typename S>
struct ActivationBundle {
  struct Layer {
    Tensor<S> h_q, h_k, h_v;    // raw linear outputs, pre-rotary
    Tensor<S> h_gate, h_up;
    Tensor<S> o_attn, o_ffn;    // module outputs after W_o / W_down, pre-residual
  };
  std::vector<Layer> layers;
  Tensor<S> logits;  // batch x seq x V

  // 7 captures per layer plus logits.
  int64_t entry_count() const { return 7 * static_cast<int64_t>(layers.size()) + 1; }

  bool all_finite() const {
    for (const auto& L : layers)
      for (const Tensor<S>* t : {&L.h_q, &L.h_k, &L.h_v, &L.h_gate, &L.h_up, &L.o_attn, &L.o_ffn})
        if (!t->all_finite()) return false;
    return logits.all_finite();
  }
};

// x / sqrt(mean(x^2) + eps) * g over the last dimension.
template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& g, double eps) {
  if (g.rank() != 1 || x.shape().back() != g.dim(0))
    throw ShapeError("rmsnorm: gain " + shape_str(g.shape()) + " does not match last dim of " +
                     shape_str(x.shape()));
  int64_t d = g.dim(0);
  int64_t rows = x.numel() / d;
  std::vector<S> out(static_cast<size_t>(x.numel()));
  std::vector<S> rstd(static_cast<size_t>(rows));
  const S* xp = x.data();
  const S* gp = g.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = xp + r * d;
    S ms = S(0);
    for (int64_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms /= static_cast<S>(d);
    S rs = S(1) / std::sqrt(ms + static_cast<S>(eps));
    rstd[static_cast<size_t>(r)] = rs;
    S* orow = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = row[j] * rs * gp[j];
  }
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(
      x.shape(), std::move(out), {x, g}, [rows, d, rstd = std::move(rstd)](Node& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        S* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
        S* gg = pg.requires_grad ? pg.ensure_grad().data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
          const S* xrow = px.value.data() + r * d;
          const S* dy = o.grad.data() + r * d;
          S rs = rstd[static_cast<size_t>(r)];
          if (gg)
            for (int64_t j = 0; j < d; ++j) gg[j] += dy[j] * xrow[j] * rs;
          if (gx) {
            S dot = S(0);
            for (int64_t j = 0; j < d; ++j) dot += dy[j] * pg.value[static_cast<size_t>(j)] * xrow[j];
            S c = rs * rs * rs * dot / static_cast<S>(d);
            S* gxr = gx + r * d;
            for (int64_t j = 0; j < d; ++j)
              gxr[j] += rs * pg.value[static_cast<size_t>(j)] * dy[j] - c * xrow[j];
          }
        }
      });
}

// up (x) elementwise-gated by SiLU(gate).
template <typename S>
Tensor<S> swiglu(const Tensor<S>& up, const Tensor<S>& gate) {
  if (up.shape() != gate.shape())
    throw ShapeError("swiglu: " + shape_str(up.shape()) + " vs " + shape_str(gate.shape()));
  return mul(up, silu(gate));
}

// Embedding row gather; gradients scatter-add into the table.
template <typename S>
Tensor<S> embedding_lookup(const TokenBatch& tokens, const Tensor<S>& table) {
  int64_t vocab = table.dim(0);
  int64_t d = table.dim(1);
  for (size_t i = 0; i < tokens.ids.size(); ++i)
    if (tokens.ids[i] < 0 || tokens.ids[i] >= vocab)
      throw InputError("token id " + std::to_string(tokens.ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
  std::vector<S> out(static_cast<size_t>(tokens.batch * tokens.seq * d));
  for (int64_t i = 0; i < tokens.batch * tokens.seq; ++i)
    std::copy_n(table.data() + static_cast<int64_t>(tokens.ids[static_cast<size_t>(i)]) * d, d,
                out.data() + i * d);
  using Node = typename Tensor<S>::Node;
  std::vector<int32_t> ids = tokens.ids;
  return Tensor<S>::make_op({tokens.batch, tokens.seq, d}, std::move(out), {table},
                            [ids = std::move(ids), d](Node& o) {
                              auto& p = *o.parents[0];
                              if (!p.requires_grad) return;
                              S* g = p.ensure_grad().data();
                              for (size_t i = 0; i < ids.size(); ++i) {
                                const S* dy = o.grad.data() + static_cast<int64_t>(i) * d;
                                S* grow = g + static_cast<int64_t>(ids[i]) * d;
                                for (int64_t j = 0; j < d; ++j) grow[j] += dy[j];
                              }
                            });
}

namespace detail {

// In-place rotary rotation of one head vector (adjacent pairs); dir=-1 undoes it.
template <typename S>
void rope_rotate(S* h, int head_dim, double pos, double base, int dir) {
  for (int j = 0; j < head_dim / 2; ++j) {
    double freq = std::pow(base, -2.0 * j / head_dim);
    double theta = pos * freq;
    S c = static_cast<S>(std::cos(theta));
    S s = static_cast<S>(std::sin(theta)) * static_cast<S>(dir);
    S x0 = h[2 * j], x1 = h[2 * j + 1];
    h[2 * j] = x0 * c - x1 * s;
    h[2 * j + 1] = x0 * s + x1 * c;
  }
}

}  // namespace detail

// Causal multi-head attention over the raw q/k/v linear outputs. Applies
// rotary embedding (unless disabled), repeats kv heads across query groups by
// index mapping, scales by 1/sqrt(head_dim), and concatenates heads. The
// output projection W_o is the caller's right-multiplication.
template <typename S>
Tensor<S> attention_forward(const Tensor<S>& h_q, const Tensor<S>& h_k, const Tensor<S>& h_v,
                            std::span<const int> positions, const ModelConfig& cfg,
                            bool use_rope = true) {
  cfg.validate();
  if (h_q.rank() != 3 || h_k.rank() != 3 || h_v.rank() != 3)
    throw ShapeError("attention: expects batch x seq x dim inputs, got q " +
                     shape_str(h_q.shape()));
  int64_t B = h_q.dim(0), T = h_q.dim(1);
  int hd = cfg.head_dim, Hq = cfg.num_q_heads, Hkv = cfg.num_kv_heads;
  int group = Hq / Hkv;
  if (h_q.shape() != Shape{B, T, cfg.d_q()} || h_k.shape() != Shape{B, T, cfg.d_kv()} ||
      h_v.shape() != Shape{B, T, cfg.d_kv()})
    throw ShapeError("attention: got q " + shape_str(h_q.shape()) + ", k " +
                     shape_str(h_k.shape()) + ", v " + shape_str(h_v.shape()));
  if (static_cast<int64_t>(positions.size()) != T)
    throw ShapeError("attention: positions length " + std::to_string(positions.size()) +
                     " != seq " + std::to_string(T));

  const S inv_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  int64_t dq = cfg.d_q(), dkv = cfg.d_kv();

  // Rotated copies of q/k; probabilities per (b, head): row t holds weights
  // over keys 0..t.
  std::vector<S> qr(h_q.value()), kr(h_k.value());
  if (use_rope) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < T; ++t) {
        double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (int h = 0; h < Hq; ++h)
          detail::rope_rotate(qr.data() + (b * T + t) * dq + h * hd, hd, pos, cfg.rope_base, 1);
        for (int h = 0; h < Hkv; ++h)
          detail::rope_rotate(kr.data() + (b * T + t) * dkv + h * hd, hd, pos, cfg.rope_base, 1);
      }
  }

  std::vector<S> probs(static_cast<size_t>(B * Hq * T * T), S(0));
  std::vector<S> out(static_cast<size_t>(B * T * dq), S(0));
  const S* vp = h_v.data();
  for (int64_t b = 0; b < B; ++b) {
    for (int h = 0; h < Hq; ++h) {
      int hkv = h / group;
      S* pmat = probs.data() + ((b * Hq + h) * T) * T;
      for (int64_t t = 0; t < T; ++t) {
        const S* qv = qr.data() + (b * T + t) * dq + h * hd;
        S* prow = pmat + t * T;
        S mx = -std::numeric_limits<S>::infinity();
        for (int64_t u = 0; u <= t; ++u) {
          const S* kv = kr.data() + (b * T + u) * dkv + hkv * hd;
          S acc = S(0);
          for (int j = 0; j < hd; ++j) acc += qv[j] * kv[j];
          acc *= inv_scale;
          prow[u] = acc;
          mx = std::max(mx, acc);
        }
        S total = S(0);
        for (int64_t u = 0; u <= t; ++u) {
          S e = std::exp(prow[u] - mx);
          prow[u] = e;
          total += e;
        }
        S* orow = out.data() + (b * T + t) * dq + h * hd;
        for (int64_t u = 0; u <= t; ++u) {
          prow[u] /= total;
          const S* vrow = vp + (b * T + u) * dkv + hkv * hd;
          for (int j = 0; j < hd; ++j) orow[j] += prow[u] * vrow[j];
        }
      }
    }
  }

  using Node = typename Tensor<S>::Node;
  std::vector<int> pos_copy(positions.begin(), positions.end());
  double rope_base = cfg.rope_base;
  return Tensor<S>::make_op(
      {B, T, dq}, std::move(out), {h_q, h_k, h_v},
      [B, T, Hq, Hkv, hd, group, dq, dkv, inv_scale, use_rope, rope_base,
       qr = std::move(qr), kr = std::move(kr), probs = std::move(probs),
       pos_copy = std::move(pos_copy)](Node& o) {
        auto& pq = *o.parents[0];
        auto& pk = *o.parents[1];
        auto& pv = *o.parents[2];
        S* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        S* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        S* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        // Gradients w.r.t. rotated q/k; un-rotated at the end.
        std::vector<S> dqr, dkr;
        if (gq) dqr.assign(qr.size(), S(0));
        if (gk) dkr.assign(kr.size(), S(0));
        std::vector<S> dprow(static_cast<size_t>(T));
        for (int64_t b = 0; b < B; ++b) {
          for (int h = 0; h < Hq; ++h) {
            int hkv = h / group;
            const S* pmat = probs.data() + ((b * Hq + h) * T) * T;
            for (int64_t t = 0; t < T; ++t) {
              const S* prow = pmat + t * T;
              const S* dy = o.grad.data() + (b * T + t) * dq + h * hd;
              S dot = S(0);
              for (int64_t u = 0; u <= t; ++u) {
                const S* vrow = pv.value.data() + (b * T + u) * dkv + hkv * hd;
                S dp = S(0);
                for (int j = 0; j < hd; ++j) dp += dy[j] * vrow[j];
                dprow[static_cast<size_t>(u)] = dp;
                dot += dp * prow[u];
                if (gv) {
                  S* gvrow = gv + (b * T + u) * dkv + hkv * hd;
                  for (int j = 0; j < hd; ++j) gvrow[j] += prow[u] * dy[j];
                }
              }
              for (int64_t u = 0; u <= t; ++u) {
                S ds = prow[u] * (dprow[static_cast<size_t>(u)] - dot) * inv_scale;
                if (gq) {
                  const S* kv = kr.data() + (b * T + u) * dkv + hkv * hd;
                  S* gqrow = dqr.data() + (b * T + t) * dq + h * hd;
                  for (int j = 0; j < hd; ++j) gqrow[j] += ds * kv[j];
                }
                if (gk) {
                  const S* qv = qr.data() + (b * T + t) * dq + h * hd;
                  S* gkrow = dkr.data() + (b * T + u) * dkv + hkv * hd;
                  for (int j = 0; j < hd; ++j) gkrow[j] += ds * qv[j];
                }
              }
            }
          }
        }
        if (gq) {
          if (use_rope)
            for (int64_t b = 0; b < B; ++b)
              for (int64_t t = 0; t < T; ++t)
                for (int h = 0; h < Hq; ++h)
                  detail::rope_rotate(dqr.data() + (b * T + t) * dq + h * hd, hd,
                                      static_cast<double>(pos_copy[static_cast<size_t>(t)]),
                                      rope_base, -1);
          for (size_t i = 0; i < dqr.size(); ++i) gq[i] += dqr[i];
        }
        if (gk) {
          if (use_rope)
            for (int64_t b = 0; b < B; ++b)
              for (int64_t t = 0; t < T; ++t)
                for (int h = 0; h < Hkv; ++h)
                  detail::rope_rotate(dkr.data() + (b * T + t) * dkv + h * hd, hd,
                                      static_cast<double>(pos_copy[static_cast<size_t>(t)]),
                                      rope_base, -1);
          for (size_t i = 0; i < dkr.size(); ++i) gk[i] += dkr[i];
        }
      });
}

// Full decoder pass; captures the activation bundle at every layer.
template <typename S>
ActivationBundle<S> model_forward(const TokenBatch& tokens, const WeightSet<S>& w,
                                  const ModelConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(w.layers.size()) != cfg.num_layers)
    throw ConfigError("weight set has " + std::to_string(w.layers.size()) + " layers, config " +
                      std::to_string(cfg.num_layers));
  std::vector<int> positions(static_cast<size_t>(tokens.seq));
  for (int64_t t = 0; t < tokens.seq; ++t) positions[static_cast<size_t>(t)] = static_cast<int>(t);

  ActivationBundle<S> bundle;
  bundle.layers.resize(w.layers.size());
  Tensor<S> x = embedding_lookup(tokens, w.w_emb);
  for (size_t i = 0; i < w.layers.size(); ++i) {
    const auto& L = w.layers[i];
    auto& cap = bundle.layers[i];

    Tensor<S> xa = rmsnorm(x, L.g_attn, cfg.rms_eps);
    cap.h_q = linear(xa, L.w_q);
    cap.h_k = linear(xa, L.w_k);
    cap.h_v = linear(xa, L.w_v);
    Tensor<S> attn = attention_forward(cap.h_q, cap.h_k, cap.h_v, positions, cfg);
    cap.o_attn = matmul(attn, L.w_o);
    x = add(x, cap.o_attn);

    Tensor<S> xf = rmsnorm(x, L.g_ffn, cfg.rms_eps);
    cap.h_gate = linear(xf, L.w_gate);
    cap.h_up = linear(xf, L.w_up);
    cap.o_ffn = matmul(swiglu(cap.h_up, cap.h_gate), L.w_down);
    x = add(x, cap.o_ffn);
  }
  Tensor<S> xn = rmsnorm(x, w.g_final, cfg.rms_eps);
  bundle.logits = linear(xn, w.w_lm);
  return bundle;
}

}  // namespace lrc
