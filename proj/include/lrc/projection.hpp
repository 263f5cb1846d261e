// Copyright (c) 2026 the lrc authors
// SPDX-License-Identifier: Apache-2.0
//
// Trainable low-rank projections. Student weights are generated inside the
// training graph as W_m^S = W_m^T * W_m^p so gradients reach the projections;
// embeddings and LM head project the same way. Sharing modes tie the
// per-layer input projections (q/k/v share one matrix, gate/up share one).
// materialize_student applies the projections once and emits a standalone
// weight set that needs none of this machinery.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrc/common.hpp"
#include "lrc/model.hpp"
#include "lrc/tensor.hpp"

namespace lrc {

enum class Sharing { All, IO };

struct SharingMode {
  Sharing attn = Sharing::All;
  Sharing ffn = Sharing::All;

  std::string str() const {
    auto one = [](Sharing s) { return s == Sharing::All ? "all" : "io"; };
    return std::string(one(attn)) + "," + one(ffn);
  }

  static SharingMode parse(const std::string& s) {
    auto bad = [&] { return ConfigError("sharing must be all,all|io,all|all,io|io,io, got " + s); };
    auto comma = s.find(',');
    if (comma == std::string::npos) throw bad();
    auto one = [&](const std::string& part) {
      if (part == "all") return Sharing::All;
      if (part == "io") return Sharing::IO;
      throw bad();
    };
    return SharingMode{one(s.substr(0, comma)), one(s.substr(comma + 1))};
  }
};

template <typename S>
struct ProjectionSet {
  struct LayerProj {
    // q/k/v alias one tensor under attn IO sharing; gate/up under ffn IO.
    Tensor<S> q, k, v, o, gate, up, down;
    Tensor<S> a_o, a_down;        // alignment matrices, only when !alignment_free
    Tensor<S> g_attn, g_ffn;      // student RMSNorm gains, length d_s
  };
  std::vector<LayerProj> layers;
  Tensor<S> emb;      // [d_t, d_s]
  Tensor<S> lm;       // same storage as emb unless the teacher is untied (or overridden)
  Tensor<S> g_final;  // [d_s]
  SharingMode sharing;
  bool alignment_free = true;
  int64_t teacher_hidden = 0;
  int64_t student_hidden = 0;

  bool lm_shared() const { return lm.same_storage(emb); }

  // Distinct trainable tensors in a fixed canonical order. Aliased storage
  // appears once, under its tied name.
  std::vector<std::pair<std::string, Tensor<S>>> named_trainable() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("p_emb", emb);
    if (!lm_shared()) out.emplace_back("p_lm", lm);
    out.emplace_back("g_final", g_final);
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      std::string p = "layers." + std::to_string(i) + ".";
      if (sharing.attn == Sharing::IO) {
        out.emplace_back(p + "p_qkv", L.q);
      } else {
        out.emplace_back(p + "p_q", L.q);
        out.emplace_back(p + "p_k", L.k);
        out.emplace_back(p + "p_v", L.v);
      }
      out.emplace_back(p + "p_o", L.o);
      if (sharing.ffn == Sharing::IO) {
        out.emplace_back(p + "p_gateup", L.gate);
      } else {
        out.emplace_back(p + "p_gate", L.gate);
        out.emplace_back(p + "p_up", L.up);
      }
      out.emplace_back(p + "p_down", L.down);
      if (!alignment_free) {
        out.emplace_back(p + "a_o", L.a_o);
        out.emplace_back(p + "a_down", L.a_down);
      }
      out.emplace_back(p + "g_attn", L.g_attn);
      out.emplace_back(p + "g_ffn", L.g_ffn);
    }
    return out;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_trainable()) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : named_trainable()) t.zero_grad();
  }

  uint64_t content_hash() const {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& [name, t] : named_trainable()) {
      h = fnv1a64(name.data(), name.size(), h);
      for (S v : t.value()) {
        float f = static_cast<float>(v);
        h = fnv1a64(&f, sizeof(f), h);
      }
    }
    return h;
  }
};

struct ProjectionOptions {
  SharingMode sharing;
  bool alignment_free = true;
  // Train a separate LM-head projection even when the teacher ties embeddings.
  bool separate_lm_projection = false;
};

// Entries ~ N(0, 1/sqrt(d_t)); student gains start at ones.
template <typename S>
ProjectionSet<S> init_projections(const ModelConfig& teacher_cfg, int64_t student_hidden,
                                  const ProjectionOptions& opts, uint64_t seed) {
  teacher_cfg.validate();
  int64_t d_t = teacher_cfg.hidden_size;
  if (student_hidden < 1 || student_hidden > d_t)
    throw ConfigError("student hidden size " + std::to_string(student_hidden) +
                      " must be in [1, teacher hidden " + std::to_string(d_t) + "]");
  Rng rng(seed);
  double sd = 1.0 / std::sqrt(static_cast<double>(d_t));
  auto fresh = [&] { return Tensor<S>::randn({d_t, student_hidden}, rng, sd, true); };

  ProjectionSet<S> proj;
  proj.sharing = opts.sharing;
  proj.alignment_free = opts.alignment_free;
  proj.teacher_hidden = d_t;
  proj.student_hidden = student_hidden;
  proj.emb = fresh();
  bool share_lm = teacher_cfg.tie_embeddings && !opts.separate_lm_projection;
  proj.lm = share_lm ? proj.emb : fresh();
  proj.g_final = Tensor<S>::full({student_hidden}, S(1), true);
  proj.layers.resize(static_cast<size_t>(teacher_cfg.num_layers));
  for (auto& L : proj.layers) {
    L.q = fresh();
    if (opts.sharing.attn == Sharing::IO) {
      L.k = L.q;
      L.v = L.q;
    } else {
      L.k = fresh();
      L.v = fresh();
    }
    L.o = fresh();
    L.gate = fresh();
    L.up = opts.sharing.ffn == Sharing::IO ? L.gate : fresh();
    L.down = fresh();
    if (!opts.alignment_free) {
      L.a_o = fresh();
      L.a_down = fresh();
    }
    L.g_attn = Tensor<S>::full({student_hidden}, S(1), true);
    L.g_ffn = Tensor<S>::full({student_hidden}, S(1), true);
  }
  return proj;
}

// One layer of Eq.-style weight generation, recorded on the tape.
template <typename S>
typename WeightSet<S>::Layer project_layer_weights(const WeightSet<S>& teacher,
                                                   const ProjectionSet<S>& proj, size_t layer) {
  const auto& T = teacher.layers.at(layer);
  const auto& P = proj.layers.at(layer);
  typename WeightSet<S>::Layer out;
  out.w_q = matmul(T.w_q, P.q);
  out.w_k = matmul(T.w_k, P.k);
  out.w_v = matmul(T.w_v, P.v);
  out.w_o = matmul(T.w_o, P.o);
  out.w_gate = matmul(T.w_gate, P.gate);
  out.w_up = matmul(T.w_up, P.up);
  out.w_down = matmul(T.w_down, P.down);
  out.g_attn = P.g_attn;
  out.g_ffn = P.g_ffn;
  return out;
}

// Embedding/LM-head generation. A tied teacher yields a single projected
// table aliased to both roles.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> project_embeddings(const WeightSet<S>& teacher,
                                                   const ProjectionSet<S>& proj) {
  if (teacher.w_emb.dim(1) != proj.emb.dim(0))
    throw ConfigError("teacher hidden " + std::to_string(teacher.w_emb.dim(1)) +
                      " does not match projection rows " + std::to_string(proj.emb.dim(0)));
  if (!teacher.tied() && teacher.w_lm.dim(0) != teacher.w_emb.dim(0))
    throw ConfigError("teacher embedding and LM head vocabularies disagree");
  Tensor<S> emb_s = matmul(teacher.w_emb, proj.emb);
  if (teacher.tied() && proj.lm_shared()) return {emb_s, emb_s};
  Tensor<S> lm_s = matmul(teacher.w_lm, proj.lm);
  return {emb_s, lm_s};
}

// Full on-the-fly student weight set for one forward pass.
template <typename S>
WeightSet<S> project_weights(const WeightSet<S>& teacher, const ProjectionSet<S>& proj) {
  WeightSet<S> student;
  student.layers.resize(teacher.layers.size());
  for (size_t i = 0; i < teacher.layers.size(); ++i)
    student.layers[i] = project_layer_weights(teacher, proj, i);
  auto [emb_s, lm_s] = project_embeddings(teacher, proj);
  student.w_emb = emb_s;
  student.w_lm = lm_s;
  student.g_final = proj.g_final;
  return student;
}

// Exact closed-form count of trainable parameters under sharing and tying.
inline int64_t count_trainable_params(const ModelConfig& teacher_cfg, int64_t student_hidden,
                                      SharingMode sharing, bool tie_embeddings,
                                      bool alignment_free = true) {
  int64_t d_t = teacher_cfg.hidden_size;
  int64_t l = teacher_cfg.num_layers;
  int64_t mat = d_t * student_hidden;
  int64_t attn_mats = sharing.attn == Sharing::IO ? 2 : 4;  // {qkv,o} vs {q,k,v,o}
  int64_t ffn_mats = sharing.ffn == Sharing::IO ? 2 : 3;    // {gateup,down} vs {gate,up,down}
  int64_t per_layer = (attn_mats + ffn_mats) * mat;
  if (!alignment_free) per_layer += 2 * mat;  // a_o, a_down
  int64_t emb = tie_embeddings ? mat : 2 * mat;
  int64_t gains = l * 2 * student_hidden + student_hidden;
  return l * per_layer + emb + gains;
}

struct Provenance {
  uint64_t teacher_hash = 0;
  uint64_t projection_hash = 0;
  int64_t train_steps = 0;
};

template <typename S>
struct StudentCheckpoint {
  ModelConfig config;
  WeightSet<S> weights;
  Provenance provenance;
};

// Applies the projections once, outside any tape, and snapshots the result.
// The emitted weights are the same kernel products the on-the-fly path
// computes, so forwards agree bitwise at equal precision.
template <typename S>
StudentCheckpoint<S> materialize_student(const WeightSet<S>& teacher,
                                         const ModelConfig& teacher_cfg,
                                         const ProjectionSet<S>& proj, int64_t train_steps = 0) {
  StudentCheckpoint<S> out;
  out.config = teacher_cfg;
  out.config.hidden_size = static_cast<int>(proj.student_hidden);
  out.config.tie_embeddings = proj.lm_shared();

  WeightSet<S> detached_teacher;
  detached_teacher.layers.resize(teacher.layers.size());
  for (size_t i = 0; i < teacher.layers.size(); ++i) {
    const auto& T = teacher.layers[i];
    auto& D = detached_teacher.layers[i];
    D.w_q = T.w_q.detach();
    D.w_k = T.w_k.detach();
    D.w_v = T.w_v.detach();
    D.w_o = T.w_o.detach();
    D.w_gate = T.w_gate.detach();
    D.w_up = T.w_up.detach();
    D.w_down = T.w_down.detach();
  }
  detached_teacher.w_emb = teacher.w_emb.detach();
  detached_teacher.w_lm = teacher.tied() ? detached_teacher.w_emb : teacher.w_lm.detach();

  ProjectionSet<S> detached_proj;
  detached_proj.sharing = proj.sharing;
  detached_proj.alignment_free = true;
  detached_proj.teacher_hidden = proj.teacher_hidden;
  detached_proj.student_hidden = proj.student_hidden;
  detached_proj.emb = proj.emb.detach();
  detached_proj.lm = proj.lm_shared() ? detached_proj.emb : proj.lm.detach();
  detached_proj.g_final = proj.g_final.detach();
  detached_proj.layers.resize(proj.layers.size());
  for (size_t i = 0; i < proj.layers.size(); ++i) {
    const auto& P = proj.layers[i];
    auto& D = detached_proj.layers[i];
    D.q = P.q.detach();
    D.k = P.k.same_storage(P.q) ? D.q : P.k.detach();
    D.v = P.v.same_storage(P.q) ? D.q : P.v.detach();
    D.o = P.o.detach();
    D.gate = P.gate.detach();
    D.up = P.up.same_storage(P.gate) ? D.gate : P.up.detach();
    D.down = P.down.detach();
    D.g_attn = P.g_attn.detach();
    D.g_ffn = P.g_ffn.detach();
  }

  out.weights = project_weights(detached_teacher, detached_proj);
  out.provenance.teacher_hash = teacher.content_hash();
  out.provenance.projection_hash = proj.content_hash();
  out.provenance.train_steps = train_steps;
  return out;
}

}  // namespace lrc
