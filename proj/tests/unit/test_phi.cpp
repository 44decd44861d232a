#include <gtest/gtest.h>

#include "dape/errors.hpp"
#include "dape/grad_check.hpp"
#include "dape/kernels.hpp"
#include "dape/phi.hpp"

using namespace dape;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

struct PhiWeights {
  Tensor learnable, dw, db;
  ProjectionSet ci, ct;
  NfaWeights nfa;
  ProjectionSet q, m;
};

PhiWeights make_weights(std::size_t d, std::size_t p, std::uint64_t seed) {
  Rng rng(seed);
  PhiWeights w;
  w.learnable = random_tensor({p, d}, seed + 1);
  w.dw = random_tensor({d, d}, seed + 2);
  w.db = random_tensor({1, d}, seed + 3);
  w.ci = ProjectionSet::random(d, rng);
  w.ct = ProjectionSet::random(d, rng);
  w.nfa = NfaWeights::init(d, {1.0 / 7, 2.0 / 7, 4.0 / 7}, {3, 5, 7}, rng);
  w.q = ProjectionSet::random(d, rng);
  w.m = ProjectionSet::random(d, rng);
  return w;
}

PhiParams bind(Tape& tape, const PhiWeights& w) {
  return {tape.constant(w.learnable),   tape.constant(w.dw),          tape.constant(w.db),
          bind_constant(tape, w.ci),    bind_constant(tape, w.ct),    bind_constant(tape, w.nfa),
          bind_constant(tape, w.q),     bind_constant(tape, w.m)};
}

PhiSettings toy_settings() {
  PhiSettings s;
  s.period = 2;
  s.k0 = 0.0;
  s.nfa.grid_y = 1;
  s.nfa.grid_x = 2;
  s.nfa.text_tokens = 1;
  s.nfa.hierarchy.k_thr = 0.0;
  return s;
}

}  // namespace

TEST(PadWithLearnable, Examples) {
  const TokenSet real{random_tensor({4, 3}, 1), std::vector<Provenance>(4, Provenance::cell(0, 1, 0, 1)),
                      Modality::kImage};
  const TokenSet same = pad_with_learnable(real, LearnableTokens{});
  EXPECT_EQ(same.tokens, real.tokens);
  const Tensor lt = random_tensor({2, 3}, 2);
  const TokenSet padded = pad_with_learnable(real, LearnableTokens::of(lt));
  EXPECT_EQ(padded.size(), 6u);
  EXPECT_EQ(slot_positions(4, 2), (std::vector<std::size_t>{4, 5}));
  EXPECT_EQ(padded.provenance[5], Provenance::synthetic());
  EXPECT_EQ(extract_slots(padded.tokens, slot_positions(4, 2)), lt);
}

TEST(ExtractSlots, Examples) {
  const Tensor m = random_tensor({5, 3}, 3);
  EXPECT_EQ(extract_slots(m, {0, 1, 2, 3, 4}), m);
  const Tensor one = extract_slots(m, {3});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(one.at(0, c), m.at(3, c));
  const Tensor g = extract_slots(m, {4, 1});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(g.at(0, c), m.at(4, c));
    EXPECT_EQ(g.at(1, c), m.at(1, c));
  }
  EXPECT_THROW(extract_slots(m, {5}), IndexError);
}

TEST(MakeDetailTokens, ConstantImageGivesBias) {
  const Tensor bias = Tensor::matrix({{0.5, -1.0}});
  const Tensor t = make_detail_tokens(Tensor({8, 8, 2}, 3.0), 0.25, 2, 2, random_tensor({2, 2}, 4), bias);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(t.at(i, 0), 0.5, 1e-12);
    EXPECT_NEAR(t.at(i, 1), -1.0, 1e-12);
  }
}

TEST(MakeDetailTokens, MaximumCutoffLeavesOnlyBias) {
  const Tensor bias = Tensor::matrix({{0.25, 2.0, 0.0}});
  const Tensor t = make_detail_tokens(random_tensor({8, 8, 3}, 5), 1.0, 4, 4, random_tensor({3, 3}, 6), bias);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(t.at(i, c), bias[c], 1e-12);
}

TEST(MakeDetailTokens, MatchesHighpassThenProject) {
  const Tensor raw = random_tensor({8, 8, 1}, 7);
  const Tensor w = random_tensor({1, 2}, 8), b = random_tensor({1, 2}, 9);
  const Tensor hp = highpass_fourier(raw.reshaped({8, 8}), 0.25);
  const Tensor t = make_detail_tokens(raw, 0.25, 4, 4, w, b);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      const double cell = (hp.at(2 * r, 2 * c) + hp.at(2 * r + 1, 2 * c) + hp.at(2 * r, 2 * c + 1) +
                           hp.at(2 * r + 1, 2 * c + 1)) / 4.0;
      for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(t.at(r * 4 + c, k), cell * w[k] + b[k], 1e-12);
    }
}

TEST(PhiInject, WrongPhaseIsContractError) {
  const auto w = make_weights(7, 2, 10);
  Tape tape;
  const auto params = bind(tape, w);
  EXPECT_THROW(phi_inject(0, tape.constant(random_tensor({4, 7}, 11)), 4, random_tensor({4, 4, 7}, 12), {},
                          tape.constant(random_tensor({4, 7}, 13)), params, toy_settings()),
               ContractError);
}

TEST(PhiInject, ZeroDetailLeavesSlotsUnchanged) {
  const auto w = make_weights(7, 2, 14);
  PhiSettings s = toy_settings();
  s.nfa.hierarchy.k_thr = 1.0;  // no cosine exceeds 1: A' = 0, so M2 = 0
  Tape tape;
  const auto out = phi_inject(1, tape.constant(random_tensor({4, 7}, 15)), 4, random_tensor({4, 4, 7}, 16), {},
                              tape.constant(random_tensor({4, 7}, 17)), bind(tape, w), s);
  EXPECT_EQ(out.m2.value(), Tensor::zeros(out.m2.shape()));
  EXPECT_EQ(out.m3.value(), Tensor::zeros(out.m3.shape()));
  const Tensor m1_plus = out.stream.value();
  Tape t2;
  const auto coarse = coarse_align_tokens(t2.constant(pad_with_learnable(t2.constant(random_tensor({4, 7}, 15)),
                                                                         t2.constant(w.learnable))
                                                          .value()),
                                          t2.constant(random_tensor({4, 7}, 17)), bind_constant(t2, w.ci),
                                          bind_constant(t2, w.ct), s.k0, s.mode);
  EXPECT_EQ(m1_plus, coarse.m1.value());
}

TEST(PhiInject, ComposedPipelineAndDetailCarry) {
  const std::size_t d = 7;
  const auto w = make_weights(d, 2, 20);
  PhiSettings s = toy_settings();
  s.nfa.hierarchy.k_thr = -1.0;
  const Tensor stream = random_tensor({4, d}, 21, 0.0, 1.0);
  const Tensor hp = highpass_channels(random_tensor({8, 8, d}, 22, 0.0, 1.0), 0.25);
  const Tensor text = random_tensor({4, d}, 23, 0.0, 1.0);

  Tape tape;
  const auto params = bind(tape, w);
  const auto out = phi_inject(1, tape.constant(stream), 4, hp, {}, tape.constant(text), params, s);
  ASSERT_EQ(out.detail.generation, 1u);
  EXPECT_EQ(out.m2.shape(), (Shape{8, d}));
  EXPECT_EQ(out.detail.tokens.value(), out.m2.value());

  // Steps 1-5 rebuilt from the public pieces.
  Tape ref;
  const Var padded = pad_with_learnable(ref.constant(stream), ref.constant(w.learnable));
  const auto coarse = coarse_align_tokens(padded, ref.constant(text), bind_constant(ref, w.ci),
                                          bind_constant(ref, w.ct), s.k0, s.mode);
  const Var m_in = extract_slots(coarse.m1, {4, 5});
  const Var det = make_detail_tokens(hp, 2, 4, ref.constant(w.dw), ref.constant(w.db));
  const auto nfa = nfa_forward(reshape(det, {2, 4, d}), ref.constant(text), bind_constant(ref, w.nfa), s.nfa);
  const Tensor m3 = masked_cross_attention(m_in.value(), nfa.m2.value(), AffinityMask{Tensor({2, 8}, 1.0), {1}},
                                           MaskOrientation::kQueryByKv, w.q, w.m);
  Tensor expected = coarse.m1.value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < d; ++c) expected.at(4 + i, c) = m_in.value().at(i, c) + m3.at(i, c);
  EXPECT_LT(max_abs_diff(out.stream.value(), expected), 1e-13);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out.stream.value().at(i, c), coarse.m1.value().at(i, c));

  // Second injection reads the carried pool and the slots already in the stream.
  const auto again = phi_inject(3, out.stream, 4, hp, out.detail, tape.constant(text), params, s);
  EXPECT_EQ(again.detail.generation, 2u);
  EXPECT_EQ(again.stream.shape(), (Shape{6, d}));

  Tensor other_text = text;
  other_text.at(0, 0) += 0.5;
  const auto moved = phi_inject(3, out.stream, 4, hp, out.detail, tape.constant(other_text), params, s);
  EXPECT_GT(max_abs_diff(moved.detail.tokens.value(), again.detail.tokens.value()), 0.0);
}

TEST(PhiInject, ResidualFromM2UsesItsRowMean) {
  const std::size_t d = 7;
  const auto w = make_weights(d, 2, 30);
  PhiSettings s = toy_settings();
  s.residual = ResidualSource::kM2;
  Tape tape;
  const Tensor stream = random_tensor({4, d}, 31, 0.0, 1.0);
  const auto out = phi_inject(1, tape.constant(stream), 4, highpass_channels(random_tensor({8, 8, d}, 32), 0.25), {},
                              tape.constant(random_tensor({4, d}, 33, 0.0, 1.0)), bind(tape, w), s);
  const Tensor& m2 = out.m2.value();
  Tensor mean({1, d});
  for (std::size_t i = 0; i < m2.rows(); ++i)
    for (std::size_t c = 0; c < d; ++c) mean[c] += m2.at(i, c) / double(m2.rows());
  Tape t2;
  const auto coarse = coarse_align_tokens(pad_with_learnable(t2.constant(stream), t2.constant(w.learnable)),
                                          t2.constant(random_tensor({4, d}, 33, 0.0, 1.0)), bind_constant(t2, w.ci),
                                          bind_constant(t2, w.ct), s.k0, s.mode);
  for (std::size_t c = 0; c < d; ++c)
    EXPECT_NEAR(out.stream.value().at(5, c), coarse.m1.value().at(5, c) + mean[c], 1e-13);
}

TEST(PhiInject, GradientWithFrozenDecisions) {
  const std::size_t d = 7;
  const auto w = make_weights(d, 2, 40);
  const PhiSettings s = toy_settings();
  const Tensor stream = random_tensor({4, d}, 41, 0.0, 1.0);
  const Tensor hp = highpass_channels(random_tensor({8, 8, d}, 42, 0.0, 1.0), 0.25);
  const Tensor text = random_tensor({4, d}, 43, 0.0, 1.0);
  DecisionLog log;
  const ScalarFn f = [&](Tape& tape, const std::vector<Var>& p) {
    PhiParams params{p[2], p[3], p[4], bind_constant(tape, w.ci), bind_constant(tape, w.ct),
                     bind_constant(tape, w.nfa), {p[5], p[6], p[7]}, {p[8], p[9], p[10]}};
    const auto out = phi_inject(1, p[0], 4, hp, {}, p[1], params, s, &log);
    return sum(mul(out.stream, out.stream));
  };
  const std::vector<Tensor> params = {stream, text, w.learnable, w.dw,    w.db,   w.q.wq,
                                      w.q.wk, w.q.wv, w.m.wq,    w.m.wk, w.m.wv};
  tape_gradients(f, params);
  const ScalarFn replay = [&](Tape& t, const std::vector<Var>& p) {
    log.set_mode(DecisionLog::Mode::kReplay);
    return f(t, p);
  };
  GradCheckOptions opts;
  opts.samples_per_param = 10;
  EXPECT_LT(grad_check(replay, params, opts).max_rel_error, 1e-4);
}
