#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dape/autodiff.hpp"
#include "dape/coarse_align.hpp"
#include "dape/decisions.hpp"
#include "dape/rng.hpp"

namespace dape {

/// h×w×d -> d×(h·w); row c is channel c's spatial map in row-major order.
Tensor channelize(const Tensor& m);
Tensor dechannelize(const Tensor& c, std::size_t h, std::size_t w);

/// Two-layer MLP (affine, ReLU, affine) over the spatially pooled channels.
struct ChannelGate {
  Tensor w1, b1, w2, b2;  // d×d, 1×d, d×d, 1×d

  static ChannelGate zeros(std::size_t d);
  static ChannelGate random(std::size_t d, Rng& rng);
};

struct ChannelGateVars {
  Var w1, b1, w2, b2;
};

ChannelGateVars bind_constant(Tape& tape, const ChannelGate& g);

/// Softmax(MLP(mean over positions of C)); c: d×P -> 1×d.
Var gate_channels(Var c, const ChannelGateVars& gate);
Tensor gate_channels(const Tensor& c, const ChannelGate& gate);

enum class ChannelAgg { kMean, kSum };

struct ChannelTokenSet {
  Tensor b;                                         // L×P
  std::vector<std::vector<std::size_t>> segments;   // selected channel indices per row, ascending
};

/// Top-k1 channel indices by gate weight inside each of L equal segments.
/// Ties go to the lower channel index.
std::vector<std::vector<std::size_t>> topk_per_segment(std::span<const double> a, std::size_t segments,
                                                       std::size_t k1);

Var aggregate_channels(Var c, const std::vector<std::vector<std::size_t>>& selection, ChannelAgg agg);

ChannelTokenSet select_topk_segments(const Tensor& c, const Tensor& a, std::size_t segments, std::size_t k1,
                                     ChannelAgg agg = ChannelAgg::kMean);

struct CwaParams {
  ChannelGateVars gate;
  Var bridge;               // P×d, channel-token length to model width
  ProjectionVars text;      // query side
  ProjectionVars channel;   // key/value side
};

struct CwaSettings {
  std::size_t segments = 8;
  std::size_t k1 = 4;
  double k_c = 0.5;
  ChannelAgg agg = ChannelAgg::kMean;
  MaskMode mode = MaskMode::kMatmul;
};

struct CwaOutput {
  Var t2;                   // J×d
  Var channel_tokens;       // L×d after the bridge
  AffinityMask ac;          // L×J
  std::vector<std::vector<std::size_t>> selection;
  Tensor gate_weights;      // 1×d
};

/// image_tokens: P×d real image tokens in row-major grid order; t1: J×d.
CwaOutput cwa_tokens(Var image_tokens, Var t1, const CwaParams& params, const CwaSettings& settings,
                     DecisionLog* decisions = nullptr);

struct CwaBlockResult {
  Tensor t2;
  AffinityMask ac;
};

struct CwaWeights {
  ChannelGate gate;
  Tensor bridge;
  ProjectionSet text, channel;
};

CwaBlockResult cwa_block(const Tensor& m1_spatial, const Tensor& t1, const CwaWeights& weights,
                         const CwaSettings& settings);

/// T' = T1 + T2.
Var fuse_text(Var t1, Var t2);
Tensor fuse_text(const Tensor& t1, const Tensor& t2);

}  // namespace dape
