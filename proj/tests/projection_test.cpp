// Copyright (c) 2026 the lrc authors
// SPDX-License-Identifier: Apache-2.0

#include "lrc/projection.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

namespace lrc {
namespace {

using Td = Tensor<double>;

ModelConfig tiny_cfg(int layers = 4) {
  ModelConfig cfg;
  cfg.num_layers = layers;
  cfg.hidden_size = 64;
  cfg.num_q_heads = 4;
  cfg.num_kv_heads = 2;
  cfg.head_dim = 16;
  cfg.ffn_size = 128;
  cfg.vocab_size = 256;
  cfg.rms_eps = 1e-5;
  return cfg;
}

ModelConfig lrc15b_geometry() {
  ModelConfig cfg;
  cfg.num_layers = 28;
  cfg.num_q_heads = 24;
  cfg.num_kv_heads = 8;
  cfg.head_dim = 128;
  cfg.hidden_size = 3072;
  cfg.ffn_size = 8192;
  cfg.vocab_size = 128256;
  cfg.rms_eps = 1e-5;
  cfg.tie_embeddings = true;
  return cfg;
}

template <typename S>
void set_identity(Tensor<S>& t) {
  std::fill(t.value().begin(), t.value().end(), S(0));
  int64_t n = t.dim(1);
  for (int64_t i = 0; i < std::min(t.dim(0), n); ++i)
    t.value()[static_cast<size_t>(i * n + i)] = S(1);
}

template <typename S>
void make_identity_projection(ProjectionSet<S>& proj) {
  for (auto& L : proj.layers) {
    for (Tensor<S>* m : {&L.q, &L.k, &L.v, &L.o, &L.gate, &L.up, &L.down}) set_identity(*m);
  }
  set_identity(proj.emb);
  if (!proj.lm_shared()) set_identity(proj.lm);
}

TEST(InitProjections, DeterministicUnderSeed) {
  ModelConfig cfg = tiny_cfg();
  ProjectionOptions opts;
  auto a = init_projections<double>(cfg, 32, opts, 77);
  auto b = init_projections<double>(cfg, 32, opts, 77);
  auto an = a.named_trainable();
  auto bn = b.named_trainable();
  ASSERT_EQ(an.size(), bn.size());
  for (size_t i = 0; i < an.size(); ++i) {
    EXPECT_EQ(an[i].first, bn[i].first);
    EXPECT_EQ(an[i].second.value(), bn[i].second.value());
  }
}

TEST(InitProjections, IoSharingLeavesFourMatricesPerLayer) {
  ModelConfig cfg = tiny_cfg(2);
  ProjectionOptions opts;
  opts.sharing = SharingMode{Sharing::IO, Sharing::IO};
  auto proj = init_projections<double>(cfg, 32, opts, 1);
  for (const auto& L : proj.layers) {
    EXPECT_TRUE(L.k.same_storage(L.q));
    EXPECT_TRUE(L.v.same_storage(L.q));
    EXPECT_TRUE(L.up.same_storage(L.gate));
    EXPECT_FALSE(L.o.same_storage(L.q));
    EXPECT_FALSE(L.down.same_storage(L.gate));
    // Distinct storage groups per layer: {qkv}, {o}, {gateup}, {down}.
    std::vector<uintptr_t> ids{L.q.node_id(), L.o.node_id(), L.gate.node_id(), L.down.node_id()};
    std::sort(ids.begin(), ids.end());
    EXPECT_EQ(std::unique(ids.begin(), ids.end()), ids.end());
  }
}

TEST(InitProjections, ColumnNormsConcentrateAroundOne) {
  ModelConfig cfg = tiny_cfg(1);
  cfg.hidden_size = 512;
  cfg.num_q_heads = 8;
  cfg.num_kv_heads = 8;
  cfg.head_dim = 64;
  auto proj = init_projections<double>(cfg, 64, ProjectionOptions{}, 1234);
  const Td& w = proj.layers[0].q;
  double mean_norm = 0.0;
  for (int64_t c = 0; c < 64; ++c) {
    double s = 0;
    for (int64_t r = 0; r < 512; ++r) {
      double v = w.value()[static_cast<size_t>(r * 64 + c)];
      s += v * v;
    }
    mean_norm += std::sqrt(s);
  }
  mean_norm /= 64.0;
  EXPECT_NEAR(mean_norm, 1.0, 0.1);
}

TEST(InitProjections, StudentWiderThanTeacherRejected) {
  EXPECT_THROW(init_projections<double>(tiny_cfg(), 65, ProjectionOptions{}, 1), ConfigError);
  EXPECT_THROW(init_projections<double>(tiny_cfg(), 0, ProjectionOptions{}, 1), ConfigError);
}

TEST(ProjectWeights, IdentityProjectionCopiesTeacherBitwise) {
  ModelConfig cfg = tiny_cfg(2);
  auto teacher = init_weights<double>(cfg, 42);
  auto proj = init_projections<double>(cfg, 64, ProjectionOptions{}, 43);
  make_identity_projection(proj);
  auto student = project_weights(teacher, proj);
  EXPECT_EQ(student.layers[0].w_q.value(), teacher.layers[0].w_q.value());
  EXPECT_EQ(student.layers[1].w_down.value(), teacher.layers[1].w_down.value());
  EXPECT_EQ(student.w_emb.value(), teacher.w_emb.value());
}

TEST(ProjectWeights, ZeroProjectionGivesZeroWeights) {
  ModelConfig cfg = tiny_cfg(1);
  auto teacher = init_weights<double>(cfg, 4);
  auto proj = init_projections<double>(cfg, 16, ProjectionOptions{}, 5);
  for (auto& [name, t] : proj.named_trainable())
    if (name.find("p_") != std::string::npos)
      std::fill(t.value().begin(), t.value().end(), 0.0);
  auto student = project_weights(teacher, proj);
  for (double v : student.layers[0].w_gate.value()) EXPECT_EQ(v, 0.0);
  for (double v : student.w_emb.value()) EXPECT_EQ(v, 0.0);
}

// SVD oracle: projected weights cannot exceed rank d_s.
TEST(ProjectWeights, RankBoundedByStudentHidden) {
  ModelConfig cfg = tiny_cfg(1);
  const int64_t d_s = 24;
  auto teacher = init_weights<double>(cfg, 7);
  auto proj = init_projections<double>(cfg, d_s, ProjectionOptions{}, 8);
  auto student = project_weights(teacher, proj);
  // W_q^S is d_q x d_s (trivially rank <= d_s); the informative check is the
  // product W^T W^p embedded back into a wide matrix: pad to d_q x d_t.
  const Td& w = student.layers[0].w_q;
  Eigen::MatrixXd m(w.dim(0), w.dim(1));
  for (int64_t r = 0; r < w.dim(0); ++r)
    for (int64_t c = 0; c < w.dim(1); ++c)
      m(r, c) = w.value()[static_cast<size_t>(r * w.dim(1) + c)];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  int64_t nonzero = 0;
  for (int64_t i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-8) ++nonzero;
  EXPECT_LE(nonzero, d_s);

  // Rank of the full-width composite [W^T * W^p] against teacher rank:
  // multiply back against a random d_s x d_t lift and confirm singular values
  // beyond index d_s vanish.
  Rng rng(9);
  Eigen::MatrixXd lift(d_s, cfg.hidden_size);
  for (int64_t r = 0; r < d_s; ++r)
    for (int64_t c = 0; c < cfg.hidden_size; ++c) lift(r, c) = rng.normal();
  Eigen::MatrixXd wide = m * lift;  // d_q x d_t, rank <= d_s
  Eigen::JacobiSVD<Eigen::MatrixXd> svd2(wide);
  const auto& sv2 = svd2.singularValues();
  for (int64_t i = d_s; i < sv2.size(); ++i) EXPECT_LE(sv2(i), 1e-8);
}

TEST(ProjectEmbeddings, TiedTeacherSharesProjectedTable) {
  ModelConfig cfg = tiny_cfg(1);
  cfg.tie_embeddings = true;
  auto teacher = init_weights<double>(cfg, 10);
  auto proj = init_projections<double>(cfg, 32, ProjectionOptions{}, 11);
  auto [emb_s, lm_s] = project_embeddings(teacher, proj);
  EXPECT_TRUE(lm_s.same_storage(emb_s));
}

TEST(ProjectEmbeddings, UntiedTeacherGetsTwoProjections) {
  ModelConfig cfg = tiny_cfg(1);
  cfg.tie_embeddings = false;
  auto teacher = init_weights<double>(cfg, 12);
  auto proj = init_projections<double>(cfg, 32, ProjectionOptions{}, 13);
  EXPECT_FALSE(proj.lm_shared());
  auto [emb_s, lm_s] = project_embeddings(teacher, proj);
  EXPECT_FALSE(lm_s.same_storage(emb_s));
  EXPECT_NE(lm_s.value(), emb_s.value());
}

TEST(ProjectEmbeddings, SeparateLmOverrideOnTiedTeacher) {
  ModelConfig cfg = tiny_cfg(1);
  cfg.tie_embeddings = true;
  ProjectionOptions opts;
  opts.separate_lm_projection = true;
  auto proj = init_projections<double>(cfg, 32, opts, 14);
  EXPECT_FALSE(proj.lm_shared());
}

// Independent hand-count oracle: sum the blocks the data model declares,
// written out term by term rather than through the library formula.
int64_t hand_count(int64_t layers, int64_t d_t, int64_t d_s, int attn_mats, int ffn_mats,
                   bool tied) {
  int64_t total = 0;
  for (int64_t i = 0; i < layers; ++i) {
    total += attn_mats * d_t * d_s;
    total += ffn_mats * d_t * d_s;
    total += d_s;  // g_attn
    total += d_s;  // g_ffn
  }
  total += d_t * d_s;            // embedding projection
  if (!tied) total += d_t * d_s; // separate LM head projection
  total += d_s;                  // final gain
  return total;
}

TEST(CountParams, TinyTwoLayerHandCount) {
  ModelConfig cfg = tiny_cfg(2);
  int64_t expect = hand_count(2, 64, 32, 4, 3, true);
  EXPECT_EQ(expect, 7 * 2 * (64 * 32) + 64 * 32 + (2 * 2 * 32 + 32));
  EXPECT_EQ(expect, 30880);
  EXPECT_EQ(count_trainable_params(cfg, 32, SharingMode{}, true), expect);
  auto proj = init_projections<double>(cfg, 32, ProjectionOptions{}, 1);
  EXPECT_EQ(proj.trainable_count(), expect);
}

TEST(CountParams, MatchesRuntimeSetAcrossModes) {
  ModelConfig cfg = tiny_cfg(3);
  for (Sharing attn : {Sharing::All, Sharing::IO}) {
    for (Sharing ffn : {Sharing::All, Sharing::IO}) {
      for (bool tied : {true, false}) {
        for (bool af : {true, false}) {
          cfg.tie_embeddings = tied;
          ProjectionOptions opts;
          opts.sharing = SharingMode{attn, ffn};
          opts.alignment_free = af;
          auto proj = init_projections<double>(cfg, 24, opts, 3);
          EXPECT_EQ(proj.trainable_count(),
                    count_trainable_params(cfg, 24, opts.sharing, tied, af))
              << "attn=" << static_cast<int>(attn) << " ffn=" << static_cast<int>(ffn)
              << " tied=" << tied << " af=" << af;
        }
      }
    }
  }
}

TEST(CountParams, ReproducesPublishedCellsWithinTwoPercent) {
  ModelConfig cfg = lrc15b_geometry();
  struct Cell {
    SharingMode mode;
    double expect;
  };
  const Cell cells[] = {
      {{Sharing::All, Sharing::All}, 0.93e9},
      {{Sharing::IO, Sharing::All}, 0.67e9},
      {{Sharing::All, Sharing::IO}, 0.80e9},
      {{Sharing::IO, Sharing::IO}, 0.53e9},
  };
  for (const auto& c : cells) {
    double got = static_cast<double>(count_trainable_params(cfg, 1536, c.mode, true));
    EXPECT_NEAR(got / c.expect, 1.0, 0.02) << c.mode.str() << " -> " << got;
  }
}

TEST(CountParams, MonotoneAcrossSharingModes) {
  ModelConfig cfg = lrc15b_geometry();
  auto n = [&](Sharing a, Sharing f) {
    return count_trainable_params(cfg, 1536, SharingMode{a, f}, true);
  };
  int64_t all_all = n(Sharing::All, Sharing::All);
  int64_t all_io = n(Sharing::All, Sharing::IO);
  int64_t io_all = n(Sharing::IO, Sharing::All);
  int64_t io_io = n(Sharing::IO, Sharing::IO);
  EXPECT_GE(all_all, all_io);
  EXPECT_GE(all_io, io_io);
  EXPECT_GE(all_all, io_all);
  EXPECT_GE(io_all, io_io);
}

// Tied projections accumulate gradient from every use: grad(tied qkv) equals
// the sum of the three untied copies' gradients at the same point.
TEST(Sharing, TiedGradientEqualsSumOfUntiedGradients) {
  ModelConfig cfg = tiny_cfg(1);
  auto teacher = init_weights<double>(cfg, 20);
  teacher.set_requires_grad(false);

  ProjectionOptions all_opts;
  auto all_proj = init_projections<double>(cfg, 16, all_opts, 21);
  // Force q = k = v values.
  all_proj.layers[0].k.value() = all_proj.layers[0].q.value();
  all_proj.layers[0].v.value() = all_proj.layers[0].q.value();

  ProjectionOptions io_opts;
  io_opts.sharing = SharingMode{Sharing::IO, Sharing::All};
  auto io_proj = init_projections<double>(cfg, 16, io_opts, 22);
  io_proj.layers[0].q.value() = all_proj.layers[0].q.value();
  io_proj.layers[0].o.value() = all_proj.layers[0].o.value();
  io_proj.layers[0].gate.value() = all_proj.layers[0].gate.value();
  io_proj.layers[0].up.value() = all_proj.layers[0].up.value();
  io_proj.layers[0].down.value() = all_proj.layers[0].down.value();
  io_proj.emb.value() = all_proj.emb.value();

  auto loss_of = [&](ProjectionSet<double>& proj) {
    proj.zero_grads();
    auto student = project_weights(teacher, proj);
    Td acc = Td::scalar(0.0);
    for (auto& [name, t] : student.named_tensors()) acc = add(acc, sum(mul(t, t)));
    backward(acc);
  };
  loss_of(all_proj);
  loss_of(io_proj);

  const auto& gq = all_proj.layers[0].q.grad();
  const auto& gk = all_proj.layers[0].k.grad();
  const auto& gv = all_proj.layers[0].v.grad();
  const auto& tied = io_proj.layers[0].q.grad();
  for (size_t i = 0; i < tied.size(); ++i)
    EXPECT_NEAR(tied[i], gq[i] + gk[i] + gv[i], 1e-10 * (1.0 + std::abs(tied[i])));
}

TEST(Materialize, ForwardMatchesOnTheFlyProjection) {
  ModelConfig cfg = tiny_cfg(2);
  auto teacher = init_weights<float>(cfg, 30);
  auto proj = init_projections<float>(cfg, 32, ProjectionOptions{}, 31);
  auto ckpt = materialize_student(teacher, cfg, proj);

  ModelConfig student_cfg = ckpt.config;
  EXPECT_EQ(student_cfg.hidden_size, 32);

  auto on_the_fly = project_weights(teacher, proj);
  TokenBatch tokens{2, 6, {}};
  Rng rng(32);
  tokens.ids.resize(12);
  for (auto& id : tokens.ids) id = static_cast<int32_t>(rng.below(256));
  auto b1 = model_forward(tokens, ckpt.weights, student_cfg);
  auto b2 = model_forward(tokens, on_the_fly, student_cfg);
  float max_diff = 0;
  for (size_t i = 0; i < b1.logits.value().size(); ++i)
    max_diff = std::max(max_diff, std::abs(b1.logits.value()[i] - b2.logits.value()[i]));
  EXPECT_LE(max_diff, 1e-6f);
}

TEST(Materialize, IdentityProjectionReproducesTeacher) {
  ModelConfig cfg = tiny_cfg(2);
  auto teacher = init_weights<double>(cfg, 33);
  auto proj = init_projections<double>(cfg, 64, ProjectionOptions{}, 34);
  make_identity_projection(proj);
  for (auto& L : proj.layers) {
    L.g_attn.value() = teacher.layers[0].g_attn.value();
    L.g_ffn.value() = teacher.layers[0].g_ffn.value();
  }
  auto ckpt = materialize_student(teacher, cfg, proj);
  EXPECT_EQ(ckpt.weights.layers[0].w_q.value(), teacher.layers[0].w_q.value());
  EXPECT_EQ(ckpt.weights.layers[1].w_up.value(), teacher.layers[1].w_up.value());
  EXPECT_EQ(ckpt.weights.w_emb.value(), teacher.w_emb.value());
}

TEST(Materialize, ProvenanceHashTracksProjectionContent) {
  ModelConfig cfg = tiny_cfg(1);
  auto teacher = init_weights<double>(cfg, 35);
  auto proj = init_projections<double>(cfg, 16, ProjectionOptions{}, 36);
  auto c1 = materialize_student(teacher, cfg, proj);
  proj.layers[0].down.value()[5] += 1e-3;
  auto c2 = materialize_student(teacher, cfg, proj);
  EXPECT_NE(c1.provenance.projection_hash, c2.provenance.projection_hash);
  EXPECT_EQ(c1.provenance.teacher_hash, c2.provenance.teacher_hash);
}

TEST(SharingMode, ParseAndPrintRoundTrip) {
  for (const char* s : {"all,all", "io,all", "all,io", "io,io"})
    EXPECT_EQ(SharingMode::parse(s).str(), s);
  EXPECT_THROW(SharingMode::parse("both"), ConfigError);
  EXPECT_THROW(SharingMode::parse("io,sometimes"), ConfigError);
}

}  // namespace
}  // namespace lrc
