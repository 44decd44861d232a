#pragma once

#include <cstddef>
#include <vector>

#include "dape/autodiff.hpp"
#include "dape/coarse_align.hpp"
#include "dape/decisions.hpp"
#include "dape/nfa.hpp"

namespace dape {

/// Carried detail pool between injections.
struct DetailState {
  Var tokens;  // 4I×d in hierarchical order once generation >= 1
  std::size_t generation = 0;
};

/// Slot positions I, I+1, ..., I+P-1 of the padded sequence.
std::vector<std::size_t> slot_positions(std::size_t real_tokens, std::size_t slots);

/// P learnable rows; `values` is only read when count > 0.
struct LearnableTokens {
  std::size_t count = 0;
  Tensor values;  // count×d

  static LearnableTokens of(Tensor v) { return {v.rows(), std::move(v)}; }
};

/// Appends P learnable tokens after the real ones; they are marked synthetic.
TokenSet pad_with_learnable(const TokenSet& real, const LearnableTokens& learnable);
Var pad_with_learnable(Var real, Var learnable);

Tensor extract_slots(const Tensor& m1_plus, const std::vector<std::size_t>& slots);
Var extract_slots(Var m1_plus, const std::vector<std::size_t>& slots);

/// High-passed h×w×c features pooled to a gy×gx grid and projected to d:
/// (gy·gx)×d in row-major order.
Var make_detail_tokens(const Tensor& highpassed, std::size_t gy, std::size_t gx, Var weight, Var bias);
/// Same from raw features, applying the high-pass first.
Tensor make_detail_tokens(const Tensor& raw, double cutoff, std::size_t gy, std::size_t gx, const Tensor& weight,
                          const Tensor& bias);

enum class ResidualSource { kM3, kM2 };

struct PhiParams {
  Var learnable;              // P×d
  Var detail_weight, detail_bias;  // c×d, 1×d
  ProjectionVars coarse_image, coarse_text;
  NfaParams nfa;
  ProjectionVars query, memory;  // slots attend over M2
};

struct PhiSettings {
  std::size_t period = 4;
  double k0 = 0.5;
  MaskMode mode = MaskMode::kMatmul;
  NfaSettings nfa;
  ResidualSource residual = ResidualSource::kM3;
};

struct PhiOutput {
  Var stream;    // (I+P)×d
  Var m2, m3;
  DetailState detail;
  AffinityMask a0;
  HierarchicalMask nfa_mask;
};

/// One injection at `layer` (layer mod period == period-1). `stream` holds I
/// real tokens, optionally followed by the P slots of an earlier injection.
/// `highpassed` feeds the first injection; later ones read `detail`.
PhiOutput phi_inject(std::size_t layer, Var stream, std::size_t real_tokens, const Tensor& highpassed,
                     const DetailState& detail, Var t_prev, const PhiParams& params, const PhiSettings& settings,
                     DecisionLog* decisions = nullptr);

}  // namespace dape
