#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dape/errors.hpp"
#include "dape/faults.hpp"
#include "dape/grad_check.hpp"
#include "dape/kernels.hpp"
#include "dape/nfa.hpp"

using namespace dape;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

const Triple kMu{1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0};

// Rows drawn either near a shared direction (high cosine) or at random.
Tensor mixed_rows(std::size_t n, std::size_t d, std::uint64_t seed, double hot_fraction) {
  Rng rng(seed);
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const bool hot = rng.uniform() < hot_fraction;
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) = hot ? 1.0 + 0.6 * rng.uniform(-1, 1) : rng.uniform(-1, 1);
  }
  return t;
}

struct Instance {
  std::array<Tensor, 3> image, text;
  std::array<std::size_t, 3> offsets{0, 2, 6};
};

Instance random_instance(std::uint64_t seed, std::size_t n_img = 4, std::size_t n_txt = 2) {
  Rng rng(seed);
  const double hot = rng.uniform(0.1, 0.9);
  Instance in;
  const std::array<std::size_t, 3> widths{2, 4, 8};
  for (int k = 0; k < 3; ++k) {
    const std::size_t f = std::size_t{1} << k;
    in.image[k] = mixed_rows(f * n_img, widths[k], seed * 7 + k, hot);
    in.text[k] = mixed_rows(f * n_txt, 14, seed * 11 + k, 0.7);
  }
  return in;
}

// Materializes all three levels on every row, then removes the rows the
// density rule would never visit.
Tensor full_materialization(const Instance& in, const HierarchySettings& s, std::size_t* cosines) {
  std::array<Tensor, 3> masks;
  *cosines = 0;
  for (int k = 0; k < 3; ++k) {
    const Tensor& x = in.image[k];
    const Tensor& t = in.text[k];
    masks[k] = Tensor({x.rows(), t.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < t.rows(); ++j) {
        std::vector<double> tj(t.row(j).begin() + in.offsets[k], t.row(j).begin() + in.offsets[k] + x.cols());
        const double c = cosine(x.row(i), std::span<const double>(tj));
        masks[k].at(i, j) = c > s.k_thr ? s.mu[k] : 0.0;
        ++*cosines;
      }
  }
  auto dense_rows = [&](const Tensor& m) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double nnz = 0;
      for (double v : m.row(i)) nnz += v != 0.0;
      if (nnz / m.cols() > s.tau_d) out.insert(i);
    }
    return out;
  };
  const auto d1 = dense_rows(masks[0]);
  for (std::size_t i = 0; i < masks[1].rows(); ++i)
    if (!d1.count(i / 2))
      for (std::size_t j = 0; j < masks[1].cols(); ++j) masks[1].at(i, j) = 0.0;
  const auto d2 = dense_rows(masks[1]);
  for (std::size_t i = 0; i < masks[2].rows(); ++i)
    if (!d2.count(i / 2))
      for (std::size_t j = 0; j < masks[2].cols(); ++j) masks[2].at(i, j) = 0.0;
  const std::size_t rows = masks[2].rows(), cols = masks[2].cols();
  Tensor out({rows, cols});
  for (int k = 0; k < 3; ++k) {
    const std::size_t f = std::size_t{4} >> k;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(i, j) += masks[k].at(i / f, j / f);
  }
  return out;
}

}  // namespace

TEST(SplitChannels, Widths) {
  EXPECT_EQ(split_widths(7, kMu), (std::array<std::size_t, 3>{1, 2, 4}));
  EXPECT_EQ(split_widths(14, kMu), (std::array<std::size_t, 3>{2, 4, 8}));
  EXPECT_EQ(split_widths(48, kMu), (std::array<std::size_t, 3>{7, 14, 27}));
  EXPECT_EQ(split_widths(10, kMu), (std::array<std::size_t, 3>{1, 3, 6}));
  EXPECT_THROW(split_widths(2, kMu), ConfigError);
  EXPECT_THROW(split_widths(9, Triple{0.5, 0.5, 0.5}), ConfigError);
}

TEST(SplitChannels, IdentityKernelsCopyChannels) {
  const Tensor m = random_tensor({4, 4, 3}, 1);
  Tape tape;
  std::array<Var, 3> conv;
  for (int k = 0; k < 3; ++k) {
    Tensor w({3, 3, 1});
    w.at(1, 1, 0) = 1.0;
    conv[k] = tape.constant(w);
  }
  const auto split = split_channels(tape.constant(m), Triple{1.0 / 3, 1.0 / 3, 1.0 / 3}, {3, 3, 3}, conv);
  for (int k = 0; k < 3; ++k)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(split.branches[k].value().at(y, x, 0), m.at(y, x, k));
}

TEST(TokenizeMultiscale, CountsAndHierarchy) {
  for (int level = 1; level <= 3; ++level) {
    const TokenLayout l = hierarchical_layout(8, 8, 2, 2, level);
    EXPECT_EQ(l.size(), std::size_t{4} << (level - 1));
  }
  const TokenLayout l1 = hierarchical_layout(8, 8, 2, 2, 1);
  const TokenLayout l2 = hierarchical_layout(8, 8, 2, 2, 2);
  const TokenLayout l3 = hierarchical_layout(8, 8, 2, 2, 3);
  auto inside = [](const Provenance& c, const Provenance& p) {
    return c.row0 >= p.row0 && c.row1 <= p.row1 && c.col0 >= p.col0 && c.col1 <= p.col1;
  };
  for (std::size_t i = 0; i < 8; ++i) EXPECT_TRUE(inside(l2.provenance[i], l1.provenance[i / 2]));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_TRUE(inside(l3.provenance[i], l2.provenance[i / 2]));
  const auto raster = level3_raster_order(2, 2);
  const TokenLayout grid = image_grid_layout(8, 8, 4, 4);
  for (std::size_t r = 0; r < 16; ++r) EXPECT_EQ(l3.provenance[raster[r]], grid.provenance[r]);
  EXPECT_THROW(hierarchical_layout(6, 8, 2, 2, 1), DimensionError);
}

TEST(TokenizeMultiscale, BlockMeansOfProvenanceCells) {
  const Tensor m = random_tensor({8, 8, 7}, 2);
  Tape tape;
  Rng rng(3);
  const auto w = NfaWeights::init(7, kMu, {3, 5, 7}, rng);
  const auto split = split_channels(tape.constant(m), kMu, {3, 5, 7}, bind_constant(tape, w).conv);
  const auto ms = tokenize_multiscale(split, 2, 2);
  for (int k = 0; k < 3; ++k) {
    const Tensor& b = split.branches[k].value();
    for (std::size_t i = 0; i < ms.layouts[k].size(); ++i) {
      const auto& p = ms.layouts[k].provenance[i];
      for (std::size_t ch = 0; ch < b.dim(2); ++ch) {
        double acc = 0.0;
        for (std::size_t y = p.row0; y < p.row1; ++y)
          for (std::size_t x = p.col0; x < p.col1; ++x) acc += b.at(y, x, ch);
        EXPECT_NEAR(ms.x[k].value().at(i, ch), acc / double((p.row1 - p.row0) * (p.col1 - p.col0)), 1e-13);
      }
    }
  }
}

TEST(TokenizeMultiscale, ConstantImageGivesIdenticalTokens) {
  Tape tape;
  Rng rng(4);
  const auto w = NfaWeights::init(7, kMu, {1, 1, 1}, rng);
  const auto split = split_channels(tape.constant(Tensor({8, 8, 7}, 0.5)), kMu, {1, 1, 1}, bind_constant(tape, w).conv);
  const auto ms = tokenize_multiscale(split, 2, 2);
  for (int k = 0; k < 3; ++k) {
    const Tensor& x = ms.x[k].value();
    for (std::size_t i = 1; i < x.rows(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) EXPECT_EQ(x.at(i, c), x.at(0, c));
  }
}

TEST(RefineText, Examples) {
  const TokenLayout base = text_span_layout(8, 4);
  const TokenLayout same = refine_text(base, 1);
  EXPECT_EQ(same.provenance, base.provenance);
  const TokenLayout one = refine_text(text_span_layout(4, 1), 2);
  EXPECT_EQ(one.provenance, (std::vector<Provenance>{Provenance::span(0, 2), Provenance::span(2, 4)}));
  const Tensor t = random_tensor({16, 3}, 5);
  const TokenLayout l = refine_text(text_span_layout(16, 2), 2);
  const TokenSet ts = realize(l, t);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (std::size_t r = 4 * k; r < 4 * k + 4; ++r) acc += t.at(r, c);
      EXPECT_NEAR(ts.tokens.at(k, c), acc / 4.0, 1e-15);
    }
  EXPECT_THROW(refine_text(text_span_layout(4, 4), 2), ConfigError);
}

TEST(LevelMask, Examples) {
  const Tensor x = random_tensor({4, 3}, 6), t = random_tensor({2, 3}, 7);
  EXPECT_EQ(level_mask(x, t, 0.6, 1.0 / 7, {}, MaskLevel::kFine1).weights, Tensor::zeros({4, 2}));
  const AffinityMask m = level_mask(x, t, 0.1, 1.0 / 7, {0, 1, 2, 3}, MaskLevel::kFine1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_EQ(m.weights.at(i, j), cosine(x.row(i), t.row(j)) > 0.1 ? 1.0 / 7 : 0.0);
  const AffinityMask part = level_mask(x, t, -2.0, 0.5, {1, 3}, MaskLevel::kFine2);
  EXPECT_EQ(part.weights, Tensor({4, 2}, {0, 0, 0.5, 0.5, 0, 0, 0.5, 0.5}));
}

TEST(DensityFlag, Examples) {
  AffinityMask zero{Tensor({3, 4}), {0, 1}};
  EXPECT_TRUE(density_flag(zero, 0.25).empty());
  AffinityMask m{Tensor({3, 4}, {1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1}), {0, 1}};
  EXPECT_EQ(density_flag(m, 0.25), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(density_flag(m, 0.0), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(density_flag(m, 1.5), ConfigError);
}

TEST(UpscaleMask, Examples) {
  const AffinityMask one{Tensor({1, 1}, 1.0 / 7), {0, 1.0 / 7}};
  EXPECT_EQ(upscale_mask(one, 4, 4).weights, Tensor({4, 4}, 1.0 / 7));
  const AffinityMask four{random_tensor({4, 4}, 8), {}};
  EXPECT_EQ(upscale_mask(four, 4, 4).weights, four.weights);
  const AffinityMask two{Tensor({2, 2}, {1, 2, 3, 4}), {}};
  const Tensor up = upscale_mask(two, 4, 4).weights;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(up.at(i, j), two.weights.at(i / 2, j / 2));
  EXPECT_THROW(upscale_mask(two, 3, 4), DimensionError);
}

TEST(BuildHierarchy, SparseSceneKeepsLevelOneOnly) {
  Instance in = random_instance(9);
  HierarchySettings s;
  s.tau_d = 1.0;
  const auto h = build_hierarchy(in.image, in.text, in.offsets, s);
  EXPECT_EQ(h.combined.weights, h.upscaled[0].weights);
  EXPECT_EQ(h.native[1].weights, Tensor::zeros(h.native[1].weights.shape()));
  EXPECT_EQ(h.native[2].weights, Tensor::zeros(h.native[2].weights.shape()));
  EXPECT_EQ(h.total_cosines(), h.cosines[0]);
}

TEST(BuildHierarchy, SaturatedSceneGivesOnes) {
  Instance in;
  for (int k = 0; k < 3; ++k) {
    in.image[k] = Tensor({std::size_t{4} << k, k == 0 ? 2u : k == 1 ? 4u : 8u}, 1.0);
    in.text[k] = Tensor({std::size_t{2} << k, 14}, 1.0);
  }
  const auto h = build_hierarchy(in.image, in.text, in.offsets, {});
  for (double v : h.combined.weights.data()) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_EQ(h.total_cosines(), h.uniform_cosines());
}

TEST(BuildHierarchy, MatchesFullMaterialization) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const Instance in = random_instance(seed);
    HierarchySettings s;
    const auto h = build_hierarchy(in.image, in.text, in.offsets, s);
    std::size_t full_cos = 0;
    EXPECT_EQ(h.combined.weights, full_materialization(in, s, &full_cos)) << seed;
    EXPECT_LE(h.total_cosines(), full_cos);
    EXPECT_EQ(full_cos, h.uniform_cosines());
    EXPECT_TRUE(hierarchy_violations(h, s.mu).empty()) << seed;
    EXPECT_TRUE(h.combined.within_alphabet()) << seed;
    const bool all_dense = h.dense[0].size() == 4 && h.dense[1].size() == 8;
    EXPECT_EQ(h.total_cosines() == full_cos, all_dense) << seed;
  }
}

TEST(BuildHierarchy, MonotoneInThresholds) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const Instance in = random_instance(seed);
    HierarchySettings lo, hi;
    hi.tau_d = 0.6;
    const auto a = build_hierarchy(in.image, in.text, in.offsets, lo);
    const auto b = build_hierarchy(in.image, in.text, in.offsets, hi);
    EXPECT_TRUE(std::includes(a.dense[0].begin(), a.dense[0].end(), b.dense[0].begin(), b.dense[0].end()));
    HierarchySettings strict;
    strict.k_thr = 0.8;
    const auto c = build_hierarchy(in.image, in.text, in.offsets, strict);
    for (std::size_t i = 0; i < c.native[0].weights.size(); ++i)
      if (c.native[0].weights[i] != 0.0) EXPECT_NE(a.native[0].weights[i], 0.0);
  }
}

TEST(BuildHierarchy, DeterministicAndDropFineFaultIsDetected) {
  const Instance in = random_instance(42);
  HierarchySettings s;
  s.tau_d = 0.0;
  const auto a = build_hierarchy(in.image, in.text, in.offsets, s);
  const auto b = build_hierarchy(in.image, in.text, in.offsets, s);
  EXPECT_EQ(a.combined.weights, b.combined.weights);
  ASSERT_NE(a.upscaled[2].weights, Tensor::zeros(a.upscaled[2].weights.shape()));
  ScopedFault f(Fault::kDropFineLevel);
  const auto c = build_hierarchy(in.image, in.text, in.offsets, s);
  EXPECT_FALSE(hierarchy_violations(c, s.mu).empty());
}

TEST(NfaAttention, ZeroMaskAndExplicitLoop) {
  Tape tape;
  Rng rng(10);
  const auto pi = ProjectionSet::random(3, rng), pt = ProjectionSet::random(3, rng);
  const Tensor q = random_tensor({4, 3}, 11), t = random_tensor({4, 3}, 12);
  const auto out0 = nfa_attention(tape.constant(q), tape.constant(t), Tensor({4, 4}), bind_constant(tape, pi),
                                  bind_constant(tape, pt), false, MaskMode::kMatmul);
  EXPECT_EQ(out0.value(), Tensor::zeros({4, 3}));

  const Tensor a = random_tensor({4, 4}, 13, 0.0, 1.0);
  for (bool literal : {false, true}) {
    const auto out = nfa_attention(tape.constant(q), tape.constant(t), a, bind_constant(tape, pi),
                                   bind_constant(tape, pt), literal, MaskMode::kMatmul);
    const Tensor Q = matmul(q, pi.wq), K = matmul(t, literal ? pt.wv : pt.wk), V = matmul(t, pt.wv);
    for (std::size_t i = 0; i < 4; ++i) {
      double s[4], mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        s[j] = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s[j] += Q.at(i, k) * K.at(j, k);
        s[j] /= std::sqrt(3.0);
        mx = std::max(mx, s[j]);
      }
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < 3; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 4; ++j) acc += s[j] / z * a.at(i, j) * V.at(j, k);
        EXPECT_NEAR(out.value().at(i, k), acc, 1e-12);
      }
    }
  }
}

TEST(NfaForward, ShapesCostsAndGradient) {
  Rng rng(14);
  const std::size_t d = 7;
  const auto w = NfaWeights::init(d, kMu, {3, 5, 7}, rng);
  const Tensor map = random_tensor({8, 8, d}, 15, 0.0, 1.0);
  const Tensor text = random_tensor({4, d}, 16, 0.0, 1.0);
  NfaSettings s;
  s.grid_y = s.grid_x = 2;
  s.text_tokens = 1;
  Tape tape;
  const auto out = nfa_forward(tape.constant(map), tape.constant(text), bind_constant(tape, w), s);
  EXPECT_EQ(out.m2.shape(), (Shape{16, d}));
  EXPECT_EQ(tape.cost().containing("nfa").cosines, out.mask.total_cosines());
  EXPECT_EQ(pool_to_level1(out.m2).shape(), (Shape{4, d}));

  DecisionLog log;
  const ScalarFn f = [&](Tape&, const std::vector<Var>& p) {
    const NfaParams params{{p[2], p[3], p[4]}, {p[5], p[6], p[7]}, {p[8], p[9], p[10]}};
    const auto o = nfa_forward(p[0], p[1], params, s, &log);
    return sum(mul(o.m2, o.m2));
  };
  const std::vector<Tensor> params = {map,        text,       w.conv[0], w.conv[1], w.conv[2], w.image.wq,
                                      w.image.wk, w.image.wv, w.text.wq, w.text.wk, w.text.wv};
  tape_gradients(f, params);
  const ScalarFn replay = [&](Tape& t, const std::vector<Var>& p) {
    log.set_mode(DecisionLog::Mode::kReplay);
    return f(t, p);
  };
  GradCheckOptions opts;
  opts.samples_per_param = 12;
  EXPECT_LT(grad_check(replay, params, opts).max_rel_error, 1e-4);
}
