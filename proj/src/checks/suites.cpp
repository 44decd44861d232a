#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "dape/checks.hpp"
#include "dape/errors.hpp"
#include "dape/grad_check.hpp"
#include "dape/harness.hpp"
#include "dape/kernels.hpp"
#include "dape/phi.hpp"

namespace dape {

namespace {

class Ctx {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void near(double a, double b, double tol, const std::string& what) {
    if (!(std::abs(a - b) <= tol)) {
      std::ostringstream s;
      s << what << ": " << a << " vs " << b << " (tol " << tol << ")";
      failures.push_back(s.str());
    }
  }
  std::vector<std::string> failures;
};

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

double max_gap(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double g = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) g = std::max(g, std::abs(a[i] - b[i]));
  return g;
}

bool binary(const Tensor& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

// Small model configuration shared by several suites.
DapeConfig tiny_config() {
  DapeConfig c;
  c.d = 8;
  c.n_layers = 2;
  c.image_size = 16;
  c.text_len = 16;
  c.grid_y = c.grid_x = 4;
  c.text_tokens = 4;
  c.segments = 2;
  c.k1 = 2;
  c.phi_period = 2;
  c.k0 = c.k_c = c.k_thr = 0.0;
  c.batch_size = 3;
  c.corpus_scenes = 8;
  c.steps = 3;
  c.eval_every = 1;
  return c;
}

Batch tiny_batch(const DapeConfig& c, std::vector<std::size_t> ids = {0, 1, 2}) {
  const Corpus corpus = generate_corpus(c.corpus_scenes, c.corpus_seed, c.density_mix, c.image_size);
  return make_batch(corpus, ids, Featurizer(c.d, c.seed), c);
}

// Grad check with every discrete decision frozen at its first evaluation.
double frozen_grad_error(const std::function<Var(const std::vector<Var>&, DecisionLog*)>& f,
                         const std::vector<Tensor>& params, std::size_t samples) {
  DecisionLog log;
  const ScalarFn record = [&](Tape&, const std::vector<Var>& p) { return f(p, &log); };
  tape_gradients(record, params);
  const ScalarFn replay = [&](Tape&, const std::vector<Var>& p) {
    log.set_mode(DecisionLog::Mode::kReplay);
    return f(p, &log);
  };
  GradCheckOptions o;
  o.samples_per_param = samples;
  o.seed = 17;
  return grad_check(replay, params, o).max_rel_error;
}

Var energy(Var x) { return sum(mul(x, x)); }

// ---------------------------------------------------------------- tensor-core

void suite_kernels(Ctx& ctx) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Tensor a = uniform({5, 7}, seed), b = uniform({7, 3}, seed + 10);
    Tensor ref({5, 3});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t k = 0; k < 7; ++k) ref.at(i, j) += a.at(i, k) * b.at(k, j);
    ctx.expect(max_gap(matmul(a, b), ref) < 1e-12, "matmul differs from the triple loop");
  }

  // High-pass against a direct O(n^4) DFT.
  const std::size_t h = 8, w = 8;
  const Tensor x = uniform({h, w}, 5);
  using cd = std::complex<double>;
  std::vector<cd> f(h * w);
  for (std::size_t ky = 0; ky < h; ++ky)
    for (std::size_t kx = 0; kx < w; ++kx)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          f[ky * w + kx] += x.at(y, xx) * std::polar(1.0, -2.0 * std::numbers::pi * (double(ky * y) / h + double(kx * xx) / w));
  const double cutoff = 0.3, limit = cutoff * std::sqrt(double((h / 2) * (h / 2) + (w / 2) * (w / 2)));
  for (std::size_t ky = 0; ky < h; ++ky)
    for (std::size_t kx = 0; kx < w; ++kx) {
      const double fy = double(std::min(ky, h - ky)), fx = double(std::min(kx, w - kx));
      if (std::sqrt(fy * fy + fx * fx) <= limit) f[ky * w + kx] = 0.0;
    }
  Tensor back({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx) {
      cd s = 0.0;
      for (std::size_t ky = 0; ky < h; ++ky)
        for (std::size_t kx = 0; kx < w; ++kx)
          s += f[ky * w + kx] * std::polar(1.0, 2.0 * std::numbers::pi * (double(ky * y) / h + double(kx * xx) / w));
      back.at(y, xx) = s.real() / double(h * w);
    }
  ctx.expect(max_gap(highpass_fourier(x, cutoff), back) < 1e-10, "high-pass differs from the direct DFT");
  const Tensor flat({h, w}, 0.7);
  ctx.expect(max_gap(highpass_fourier(flat, 0.01), Tensor({h, w})) < 1e-12, "high-pass keeps the DC term");

  Tape tape;
  matmul(tape.constant(uniform({3, 4}, 1)), tape.constant(uniform({4, 5}, 2)));
  ctx.expect(tape.cost().total().macs == 60, "matmul MAC count is not m*k*n");
}

void suite_autodiff(Ctx& ctx) {
  const std::vector<Tensor> params{uniform({3, 4}, 1), uniform({4, 4}, 2), uniform({1, 4}, 3)};
  const ScalarFn f = [](Tape&, const std::vector<Var>& p) {
    const Var h = relu(add_row(matmul(p[0], p[1]), p[2]));
    const Var s = row_softmax(matmul(h, transpose(p[1])));
    const Var n = l2_normalize_rows(add(s, scale(p[0], 0.5)));
    return add(sum(mul(n, n)), mean(log_softmax(matmul(n, transpose(n)))));
  };
  const auto r = grad_check(f, params);
  ctx.expect(r.max_rel_error < 1e-6, "composite gradient error " + std::to_string(r.max_rel_error));
}

// ---------------------------------------------------------------- coarse-align

void suite_binarize(Ctx& ctx) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor a = uniform({6, 5}, seed);
    const double thr = Rng(seed + 99).uniform(-0.5, 0.5);
    a[0] = thr;  // the boundary itself stays off
    const AffinityMask m = binarize(a, thr, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (m.weights[i] != (a[i] > thr ? 1.0 : 0.0)) {
        ctx.expect(false, "binarize disagrees with the strict threshold at seed " + std::to_string(seed));
        break;
      }
    }
    ctx.expect(binary(m.weights) && m.within_alphabet(), "binarized entries leave {0, 1}");
  }
  const Tensor img = uniform({5, 4}, 7), txt = uniform({3, 4}, 8);
  const Tensor aff = affinity({img, {}, Modality::kImage}, {txt, {}, Modality::kText});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        dot += img.at(i, k) * txt.at(j, k);
        ni += img.at(i, k) * img.at(i, k);
        nj += txt.at(j, k) * txt.at(j, k);
      }
      ctx.near(aff.at(i, j), dot / std::sqrt(ni * nj), 1e-12, "affinity entry");
    }
}

void suite_coarse_attention(Ctx& ctx) {
  Rng rng(4);
  const std::size_t nq = 4, nkv = 5, d = 3;
  const Tensor q = uniform({nq, d}, 1), kv = uniform({nkv, d}, 2);
  const ProjectionSet pq = ProjectionSet::random(d, rng), pk = ProjectionSet::random(d, rng);
  AffinityMask mask = binarize(uniform({nq, nkv}, 3), 0.0, 1.0);
  const Tensor out = masked_cross_attention(q, kv, mask, MaskOrientation::kQueryByKv, pq, pk, MaskMode::kMatmul);
  const Tensor qq = matmul(q, pq.wq), kk = matmul(kv, pk.wk), vv = matmul(kv, pk.wv);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> s(nkv);
    double mx = -INFINITY, z = 0.0;
    for (std::size_t j = 0; j < nkv; ++j) {
      for (std::size_t k = 0; k < d; ++k) s[j] += qq.at(i, k) * kk.at(j, k) / std::sqrt(double(d));
      mx = std::max(mx, s[j]);
    }
    for (auto& v : s) z += (v = std::exp(v - mx));
    for (std::size_t k = 0; k < d; ++k) {
      double o = 0.0;
      for (std::size_t j = 0; j < nkv; ++j) o += s[j] / z * mask.weights.at(i, j) * vv.at(j, k);
      ctx.near(out.at(i, k), o, 1e-12, "masked attention entry");
    }
  }
  AffinityMask zero{Tensor({nkv, nq}), {0.0, 1.0}, MaskLevel::kCoarse};
  const Tensor z = masked_cross_attention(q, kv, zero, MaskOrientation::kKvByQuery, pq, pk, MaskMode::kMatmul);
  ctx.expect(max_gap(z, Tensor({nq, d})) == 0.0, "all-zero mask must give zero output");
}

// ---------------------------------------------------------------- cwa

void suite_cwa_topk(Ctx& ctx) {
  const std::size_t d = 12, segments = 3, width = 4, k1 = 2;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<double> a(d);
    for (auto& v : a) v = std::round(rng.uniform(0, 4)) / 4.0;  // coarse values force ties
    const auto got = topk_per_segment(a, segments, k1);
    for (std::size_t s = 0; s < segments; ++s) {
      // Exhaustive: best pair sum, lexicographically smallest on ties.
      std::vector<std::size_t> best;
      double best_sum = -INFINITY;
      for (std::size_t i = 0; i < width; ++i)
        for (std::size_t j = i + 1; j < width; ++j) {
          const double v = a[s * width + i] + a[s * width + j];
          const std::vector<std::size_t> cand{s * width + i, s * width + j};
          if (v > best_sum) {
            best_sum = v;
            best = cand;
          }
        }
      // Among best-sum pairs, the tie rule keeps the highest weights by lowest index.
      std::vector<std::size_t> idx(width);
      for (std::size_t i = 0; i < width; ++i) idx[i] = s * width + i;
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return a[x] > a[y]; });
      std::vector<std::size_t> rule(idx.begin(), idx.begin() + k1);
      std::sort(rule.begin(), rule.end());
      ctx.expect(got[s] == rule, "top-k differs from the tie rule at seed " + std::to_string(seed));
      ctx.expect(a[got[s][0]] + a[got[s][1]] == best_sum, "top-k does not reach the exhaustive best at seed " +
                                                            std::to_string(seed));
    }
  }
  // Channel mask alphabet through a full channel alignment.
  Rng rng(3);
  const std::size_t p = 6, dd = 8;
  Tape tape;
  const CwaParams params{bind_constant(tape, ChannelGate::random(dd, rng)), tape.constant(uniform({p, dd}, 5)),
                         bind_constant(tape, ProjectionSet::random(dd, rng)),
                         bind_constant(tape, ProjectionSet::random(dd, rng))};
  CwaSettings s;
  s.segments = 2;
  s.k1 = 2;
  s.k_c = 0.0;
  const auto out = cwa_tokens(tape.constant(uniform({p, dd}, 6)), tape.constant(uniform({3, dd}, 7)), params, s);
  ctx.expect(binary(out.ac.weights), "channel mask leaves {0, 1}");
  for (const auto& sel : out.selection) ctx.expect(sel.size() == 2, "selection size differs from k1");
}

// ---------------------------------------------------------------- nfa

struct Instance {
  std::array<Tensor, 3> image, text;
  std::array<std::size_t, 3> offsets{0, 2, 6};
};

Instance hierarchy_instance(std::uint64_t seed) {
  Rng rng(seed);
  const double hot = rng.uniform(0.1, 0.9);
  Instance in;
  const std::array<std::size_t, 3> widths{2, 4, 8};
  for (int k = 0; k < 3; ++k) {
    const std::size_t f = std::size_t{1} << k;
    for (auto [t, rows, cols, frac] : {std::tuple{&in.image[k], 4 * f, widths[k], hot}, std::tuple{&in.text[k], 2 * f, std::size_t{14}, 0.7}}) {
      *t = Tensor({rows, cols});
      for (std::size_t i = 0; i < rows; ++i) {
        const bool on = rng.uniform() < frac;
        for (std::size_t j = 0; j < cols; ++j) t->at(i, j) = on ? 1.0 + 0.6 * rng.uniform(-1, 1) : rng.uniform(-1, 1);
      }
    }
  }
  return in;
}

// Every level evaluated on every row, then rows outside dense ancestry cleared.
Tensor materialize(const Instance& in, const HierarchySettings& s) {
  std::array<Tensor, 3> m;
  for (int k = 0; k < 3; ++k) {
    const Tensor& x = in.image[k];
    const Tensor& t = in.text[k];
    m[k] = Tensor({x.rows(), t.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < t.rows(); ++j) {
        double dot = 0, nx = 0, nt = 0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          const double a = x.at(i, c), b = t.at(j, in.offsets[k] + c);
          dot += a * b;
          nx += a * a;
          nt += b * b;
        }
        const double cs = nx > 0 && nt > 0 ? std::clamp(dot / std::sqrt(nx * nt), -1.0, 1.0) : 0.0;
        m[k].at(i, j) = cs > s.k_thr ? s.mu[k] : 0.0;
      }
  }
  auto dense = [&](const Tensor& w, std::size_t i) {
    double nnz = 0;
    for (double v : w.row(i)) nnz += v != 0.0;
    return nnz / double(w.cols()) > s.tau_d;
  };
  for (int k = 1; k < 3; ++k)
    for (std::size_t i = 0; i < m[k].rows(); ++i)
      if (!dense(m[k - 1], i / 2))
        for (auto& v : m[k].row(i)) v = 0.0;
  const std::size_t rows = m[2].rows(), cols = m[2].cols();
  Tensor out({rows, cols});
  for (int k = 0; k < 3; ++k) {
    const std::size_t f = std::size_t{4} >> k;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(i, j) += m[k].at(i / f, j / f);
  }
  return out;
}

void hierarchy_instances(Ctx& ctx, std::size_t count) {
  HierarchySettings s;
  s.k_thr = 0.3;
  const auto lattice = mu_lattice(s.mu);
  ctx.expect(lattice.size() == 8, "mu lattice does not have 8 values");
  std::size_t refined = 0;
  for (std::uint64_t seed = 0; seed < count; ++seed) {
    const Instance in = hierarchy_instance(seed);
    const HierarchicalMask h = build_hierarchy(in.image, in.text, in.offsets, s);
    const auto v = hierarchy_violations(h, s.mu);
    if (!v.empty()) {
      ctx.expect(false, "instance " + std::to_string(seed) + ": " + v.front());
      continue;
    }
    if (max_gap(h.combined.weights, materialize(in, s)) > 1e-15) {
      ctx.expect(false, "instance " + std::to_string(seed) + " differs from full materialization");
    }
    for (double w : h.combined.weights.data()) {
      const bool on = std::any_of(lattice.begin(), lattice.end(), [w](double l) { return std::abs(w - l) <= 1e-12; });
      if (!on || w > 1.0 + 1e-12) {
        ctx.expect(false, "combined entry off the lattice at instance " + std::to_string(seed));
        break;
      }
    }
    refined += h.cosines[2] > 0;
  }
  ctx.expect(refined >= count / 4, "too few instances reach the finest level to exercise refinement");
}

void suite_nfa_hierarchy(Ctx& ctx) { hierarchy_instances(ctx, 100); }

void suite_nfa_bench(Ctx& ctx) {
  const DapeConfig c;
  double prev = -1.0;
  for (int i = 0; i <= 8; ++i) {
    const BenchRow r = bench_point(c, i / 8.0);
    ctx.expect(r.ratio >= prev, "bench ratio decreases at density " + std::to_string(i / 8.0));
    ctx.expect(r.ratio == r.closed_form || std::abs(r.ratio - r.closed_form) <= 1e-15,
               "bench ratio differs from the closed form at density " + std::to_string(i / 8.0));
    prev = r.ratio;
  }
  ctx.expect(bench_point(c, 0.0).ratio == 1.0 / 21.0, "empty-density ratio is not the level-1 share");
  ctx.expect(bench_point(c, 1.0).ratio == 1.0, "saturated ratio is not 1");
  ctx.expect(bench_point(c, 0.25).ratio <= 0.6, "25% dense rows exceed 60% of the uniform cost");
}

// ---------------------------------------------------------------- phi

void suite_phi(Ctx& ctx) {
  const Tensor real = uniform({4, 3}, 1), slots = uniform({2, 3}, 2);
  const TokenSet padded = pad_with_learnable({real, std::vector<Provenance>(4, Provenance::cell(0, 1, 0, 1)), Modality::kImage},
                                             LearnableTokens::of(slots));
  ctx.expect(padded.tokens.rows() == 6 && padded.provenance[5].synthetic, "padding does not append synthetic slots");
  ctx.expect(max_gap(extract_slots(padded.tokens, slot_positions(4, 2)), slots) == 0.0, "pad then extract is not exact");

  // Generation count floor(n / K) through the model.
  DapeConfig c = tiny_config();
  c.n_layers = 5;
  const Batch b = tiny_batch(c);
  Tape tape;
  const auto f = forward(tape, DapeModel::init(c), b);
  ctx.expect(f.trace.samples[0].back().detail_generation == 2, "generation after 5 layers with K=2 is not 2");

  // Zero recall values leave the slots at their coarse-aligned value.
  DapeModel m = DapeModel::init(tiny_config());
  m.params.get("layer1.phi.memory.wv") = Tensor({8, 8});
  Tape t2;
  const BoundModel bound(t2, m, false);
  const DapeConfig& mc = m.config;
  const Var stream = t2.constant(uniform({16, 8}, 9));
  const Var text = t2.constant(uniform({4, 8}, 10));
  const PhiParams pp{bound["slots"], bound["layer1.phi.detail.w"], bound["layer1.phi.detail.b"],
                     {bound["layer1.phi.coarse.image.wq"], bound["layer1.phi.coarse.image.wk"], bound["layer1.phi.coarse.image.wv"]},
                     {bound["layer1.phi.coarse.text.wq"], bound["layer1.phi.coarse.text.wk"], bound["layer1.phi.coarse.text.wv"]},
                     {{bound["layer1.phi.nfa.conv0"], bound["layer1.phi.nfa.conv1"], bound["layer1.phi.nfa.conv2"]},
                      {bound["layer1.phi.nfa.image.wq"], bound["layer1.phi.nfa.image.wk"], bound["layer1.phi.nfa.image.wv"]},
                      {bound["layer1.phi.nfa.text.wq"], bound["layer1.phi.nfa.text.wk"], bound["layer1.phi.nfa.text.wv"]}},
                     {bound["layer1.phi.query.wq"], bound["layer1.phi.query.wk"], bound["layer1.phi.query.wv"]},
                     {bound["layer1.phi.memory.wq"], bound["layer1.phi.memory.wk"], bound["layer1.phi.memory.wv"]}};
  const PhiOutput out = phi_inject(1, stream, 16, b.highpassed[0], {}, text, pp, mc.phi());
  ctx.expect(max_gap(out.m3.value(), Tensor(out.m3.value().shape())) == 0.0, "zero recall values give nonzero M3");
  const auto slot_rows = slot_positions(16, mc.slots());
  ctx.expect(out.detail.generation == 1, "one injection must advance the generation to 1");
  bool kept = true;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t k = 0; k < 8; ++k) kept &= out.stream.value().at(i, k) == out.stream.value().at(i, k);
  ctx.expect(kept, "non-slot rows changed");
  bool wrong_phase = false;
  try {
    phi_inject(0, stream, 16, b.highpassed[0], {}, text, pp, mc.phi());
  } catch (const ContractError&) {
    wrong_phase = true;
  }
  ctx.expect(wrong_phase, "injection off its phase is not rejected");
  (void)slot_rows;
}

// ---------------------------------------------------------------- model-stack

void suite_model_oracle(Ctx& ctx) {
  DapeConfig c = oracle_config();
  auto check = [&](const DapeConfig& v, const std::string& label) {
    const double gap = oracle_gap(v);
    ctx.expect(gap <= 1e-10, label + ": layered and monolithic forward differ by " + std::to_string(gap));
  };
  check(c, "default");
  DapeConfig v = c;
  v.nfa_merge = NfaMerge::kPoolAdd;
  check(v, "pool-add merge");
  v = c;
  v.enable_phi = false;
  check(v, "no injection");
  v = c;
  v.n_layers = 4;
  v.keys_from_values = true;
  v.residual_source = ResidualSource::kM2;
  v.cwa_agg = ChannelAgg::kSum;
  check(v, "keys from values, m2 residual, sum aggregation, two injections");
  v = c;
  v.enable_nfa = false;
  v.enable_cwa = false;
  check(v, "coarse and injection only");
}

void suite_model_invariants(Ctx& ctx) {
  const DapeConfig c = tiny_config();
  const Batch b = tiny_batch(c);
  const DapeModel m = DapeModel::init(c);
  Tape tape;
  const auto f = forward(tape, m, b);
  for (const Var& e : {f.image_embeddings, f.text_embeddings})
    for (std::size_t i = 0; i < e.value().rows(); ++i) {
      double n = 0.0;
      for (double v : e.value().row(i)) n += v * v;
      ctx.near(std::sqrt(n), 1.0, 1e-10, "embedding norm");
    }
  // b=2 hand case of the symmetric cross-entropy.
  const Tensor img = Tensor::matrix({{0.6, 0.8}, {1.0, 0.0}}), txt = Tensor::matrix({{0.0, 1.0}, {0.8, -0.6}});
  const double t = 0.5;
  const double s00 = 0.8 / t, s01 = 0.0 / t, s10 = 0.0 / t, s11 = 0.8 / t;
  const double row = -(s00 - std::log(std::exp(s00) + std::exp(s01))) - (s11 - std::log(std::exp(s10) + std::exp(s11)));
  const double col = -(s00 - std::log(std::exp(s00) + std::exp(s10))) - (s11 - std::log(std::exp(s01) + std::exp(s11)));
  ctx.near(contrastive_loss(img, txt, t, {0, 1}), (row + col) / 4.0, 1e-12, "two-pair contrastive loss");
  DapeModel a = m, bb = m;
  for (int i = 0; i < 3; ++i) ctx.expect(train_step(a, b).loss == train_step(bb, b).loss, "training is not deterministic");
  ctx.expect(a.params == bb.params, "parameters diverge between identical runs");
  DapeConfig z = c;
  z.learning_rate = 0.0;
  DapeModel frozen = DapeModel::init(z);
  const ParameterStore before = frozen.params;
  train_step(frozen, b);
  ctx.expect(frozen.params == before, "zero learning rate changed the parameters");
}

void suite_mask_algebra(Ctx& ctx) {
  DapeConfig c = tiny_config();
  c.k0 = c.k_c = 0.2;
  c.k_thr = 0.1;
  c.nfa_merge = NfaMerge::kPoolAdd;
  const Batch b = tiny_batch(c, {0, 1, 2, 3});
  Tape tape;
  const auto f = forward(tape, DapeModel::init(c), b);
  const auto lattice = mu_lattice(c.mu);
  std::size_t checked = 0;
  for (const auto& sample : f.trace.samples)
    for (const auto& l : sample) {
      ctx.expect(binary(l.a0.weights), "coarse mask leaves {0, 1}");
      if (l.ac) ctx.expect(binary(l.ac->weights), "channel mask leaves {0, 1}");
      if (l.phi_a0) ctx.expect(binary(l.phi_a0->weights), "injection coarse mask leaves {0, 1}");
      for (const auto* h : {l.nfa ? &*l.nfa : nullptr, l.phi_nfa ? &*l.phi_nfa : nullptr}) {
        if (!h) continue;
        ++checked;
        for (const auto& v : hierarchy_violations(*h, c.mu)) ctx.expect(false, "model hierarchy: " + v);
        ctx.expect(h->combined.within_alphabet(), "combined mask leaves the mu lattice");
      }
    }
  ctx.expect(checked > 0, "no fine-grained masks were produced");
  hierarchy_instances(ctx, 100);
}

void suite_gradients(Ctx& ctx) {
  const std::size_t d = 8;
  Rng rng(21);
  auto proj = [&] {
    const auto p = ProjectionSet::random(d, rng);
    return std::vector<Tensor>{p.wq, p.wk, p.wv};
  };
  auto join = [](std::vector<Tensor> a, const std::vector<Tensor>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  auto pv = [](const std::vector<Var>& p, std::size_t i) { return ProjectionVars{p[i], p[i + 1], p[i + 2]}; };

  // coarse alignment
  {
    const auto params = join(join({uniform({6, d}, 1), uniform({3, d}, 2)}, proj()), proj());
    const double e = frozen_grad_error(
        [&](const std::vector<Var>& p, DecisionLog* log) {
          const auto r = coarse_align_tokens(p[0], p[1], pv(p, 2), pv(p, 5), 0.0, MaskMode::kMatmul, log);
          return add(energy(r.t1), energy(r.m1));
        },
        params, 0);
    ctx.expect(e < 1e-4, "coarse-align gradient error " + std::to_string(e));
  }
  // channel alignment
  {
    const ChannelGate g = ChannelGate::random(d, rng);
    const auto params = join(join({uniform({6, d}, 3), uniform({3, d}, 4), g.w1, uniform({1, d}, 5), g.w2,
                                   uniform({1, d}, 6), uniform({6, d}, 7)},
                                  proj()),
                             proj());
    CwaSettings s;
    s.segments = 2;
    s.k1 = 2;
    s.k_c = 0.0;
    const double e = frozen_grad_error(
        [&](const std::vector<Var>& p, DecisionLog* log) {
          const CwaParams cp{{p[2], p[3], p[4], p[5]}, p[6], pv(p, 7), pv(p, 10)};
          return energy(cwa_tokens(p[0], p[1], cp, s, log).t2);
        },
        params, 0);
    ctx.expect(e < 1e-4, "cwa gradient error " + std::to_string(e));
  }
  // fine-grained alignment
  NfaSettings ns;
  ns.grid_y = 2;
  ns.grid_x = 2;
  ns.text_tokens = 1;
  ns.hierarchy.k_thr = 0.0;
  {
    const NfaWeights w = NfaWeights::init(d, ns.hierarchy.mu, ns.kernels, rng);
    const auto params = join(join({uniform({8, 8, d}, 8), uniform({4, d}, 9), w.conv[0], w.conv[1], w.conv[2]},
                                  {w.image.wq, w.image.wk, w.image.wv}),
                             {w.text.wq, w.text.wk, w.text.wv});
    const double e = frozen_grad_error(
        [&](const std::vector<Var>& p, DecisionLog* log) {
          const NfaParams np{{p[2], p[3], p[4]}, pv(p, 5), pv(p, 8)};
          return energy(nfa_forward(p[0], p[1], np, ns, log).m2);
        },
        params, 4);
    ctx.expect(e < 1e-4, "nfa gradient error " + std::to_string(e));
  }
  // detail injection
  {
    PhiSettings ps;
    ps.period = 1;
    ps.k0 = 0.0;
    ps.nfa = ns;
    const NfaWeights w = NfaWeights::init(d, ns.hierarchy.mu, ns.kernels, rng);
    const Tensor hp = highpass_channels(uniform({8, 8, d}, 10), 0.25);
    std::vector<Tensor> params{uniform({4, d}, 11), uniform({4, d}, 12), uniform({2, d}, 13), uniform({d, d}, 14),
                               uniform({1, d}, 15), w.conv[0], w.conv[1], w.conv[2]};
    for (int i = 0; i < 6; ++i) params = join(params, proj());
    const double e = frozen_grad_error(
        [&](const std::vector<Var>& p, DecisionLog* log) {
          const PhiParams pp{p[2], p[3], p[4], pv(p, 8), pv(p, 11), {{p[5], p[6], p[7]}, pv(p, 14), pv(p, 17)},
                             pv(p, 20), pv(p, 23)};
          return energy(phi_inject(0, p[0], 4, hp, {}, p[1], pp, ps, log).stream);
        },
        params, 4);
    ctx.expect(e < 1e-4, "phi gradient error " + std::to_string(e));
  }
  // full model
  {
    const DapeConfig c = tiny_config();
    const Batch b = tiny_batch(c, {0, 1});
    const DapeModel m = DapeModel::init(c);
    const double e = frozen_grad_error(
        [&](const std::vector<Var>& p, DecisionLog* log) { return batch_loss(BoundModel(m, p), b, log); },
        m.params.values(), 3);
    ctx.expect(e < 1e-3, "full-model gradient error " + std::to_string(e));
  }
}

// ---------------------------------------------------------------- harness-cli

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void suite_corpus(Ctx& ctx) {
  const Corpus corpus = generate_corpus(40, 5, {1, 1, 1});
  const std::set<std::string> colors(kColorNames.begin(), kColorNames.end());
  for (const auto& s : corpus.scenes) {
    std::istringstream in(s.caption());
    const std::vector<std::string> w{std::istream_iterator<std::string>(in), {}};
    ctx.expect(w.size() == 3 + 4 * (s.shapes.size() - 1), "caption word count breaks the grammar: " + s.caption());
    for (std::size_t i = 0; i < s.shapes.size(); ++i) {
      const std::size_t at = 4 * i;
      ctx.expect(i == 0 || w[at - 1] == "and", "missing conjunction: " + s.caption());
      ctx.expect(w[at] == kColorNames[s.shapes[i].color] && w[at + 1] == size_name(s.shapes[i].size) &&
                     w[at + 2] == kind_name(s.shapes[i].kind),
                 "caption phrase does not match shape " + std::to_string(i) + ": " + s.caption());
    }
  }
  for (const auto& s : generate_corpus(12, 5, {1, 0, 0}).scenes) ctx.expect(s.shapes.size() == 1, "sparse scene with several shapes");

  namespace fs = std::filesystem;
  const fs::path a = fs::temp_directory_path() / "dape_check_corpus_a", b = fs::temp_directory_path() / "dape_check_corpus_b";
  write_corpus(generate_corpus(4, 1, {1, 1, 1}), a.string());
  write_corpus(generate_corpus(4, 1, {1, 1, 1}), b.string());
  for (const char* f : {"manifest.json", "scenes.jsonl", "pixels.bin"})
    ctx.expect(slurp(a / f) == slurp(b / f), std::string("corpus file differs between runs: ") + f);
  fs::remove_all(a);
  fs::remove_all(b);
}

void suite_determinism(Ctx& ctx) {
  namespace fs = std::filesystem;
  DapeConfig c = tiny_config();
  c.corpus_scenes = 16;
  TrainOptions o;
  o.write = false;
  const TrainReport r1 = cmd_train(c, o), r2 = cmd_train(c, o);
  std::string m1, m2;
  for (const auto& row : r1.rows) m1 += metrics_line(row);
  for (const auto& row : r2.rows) m2 += metrics_line(row);
  ctx.expect(m1 == m2, "metrics rows differ between identical runs");
  const fs::path p1 = fs::temp_directory_path() / "dape_check_ckpt1", p2 = fs::temp_directory_path() / "dape_check_ckpt2";
  save_checkpoint(r1.model, p1.string());
  save_checkpoint(r2.model, p2.string());
  ctx.expect(slurp(p1) == slurp(p2), "checkpoints differ between identical runs");
  ctx.expect(load_checkpoint(p1.string()).params == r1.model.params, "checkpoint does not round-trip");
  fs::remove(p1);
  fs::remove(p2);
  c.steps = 0;
  const TrainReport z = cmd_train(c, o);
  ctx.expect(z.model.params == DapeModel::init(c).params, "zero steps does not leave the initialization");
  ctx.expect(config_hash(c) == config_hash(config_from_json(to_json(c))), "config hash changes across a round trip");
}

struct Suite {
  const char* name;
  const char* module;
  void (*run)(Ctx&);
};

constexpr Suite kSuites[] = {
    {"kernels", "tensor-core", suite_kernels},
    {"autodiff", "tensor-core", suite_autodiff},
    {"binarize", "coarse-align", suite_binarize},
    {"coarse-attention", "coarse-align", suite_coarse_attention},
    {"cwa-topk", "cwa", suite_cwa_topk},
    {"nfa-hierarchy", "nfa", suite_nfa_hierarchy},
    {"nfa-bench", "nfa", suite_nfa_bench},
    {"phi-injection", "phi", suite_phi},
    {"model-oracle", "model-stack", suite_model_oracle},
    {"model-invariants", "model-stack", suite_model_invariants},
    {"mask-algebra", "model-stack", suite_mask_algebra},
    {"gradients", "model-stack", suite_gradients},
    {"corpus", "harness-cli", suite_corpus},
    {"determinism", "harness-cli", suite_determinism},
};

}  // namespace

bool CheckReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
}

std::vector<std::string> CheckReport::failed_suites() const {
  std::vector<std::string> out;
  for (const auto& s : suites)
    if (!s.passed) out.push_back(s.name);
  return out;
}

nlohmann::json CheckReport::to_json() const {
  nlohmann::json j;
  j["passed"] = passed();
  j["suites"] = nlohmann::json::array();
  for (const auto& s : suites)
    j["suites"].push_back(
        {{"name", s.name}, {"module", s.module}, {"passed", s.passed}, {"seconds", s.seconds}, {"failures", s.failures}});
  return j;
}

std::vector<SuiteInfo> list_suites() {
  std::vector<SuiteInfo> out;
  for (const auto& s : kSuites) out.push_back({s.name, s.module});
  return out;
}

CheckReport run_checks(const std::string& only) {
  CheckReport report;
  bool found = only.empty();
  for (const auto& s : kSuites) {
    if (!only.empty() && only != s.name && only != s.module) continue;
    found = true;
    Ctx ctx;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      s.run(ctx);
    } catch (const std::exception& e) {
      ctx.failures.push_back(std::string("exception: ") + e.what());
    }
    SuiteResult r;
    r.name = s.name;
    r.module = s.module;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.failures = std::move(ctx.failures);
    r.passed = r.failures.empty();
    report.suites.push_back(std::move(r));
  }
  if (!found) throw ConfigError("no check suite or module named '" + only + "'");
  return report;
}

}  // namespace dape
