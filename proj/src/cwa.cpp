#include "dape/cwa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dape/errors.hpp"
#include "dape/faults.hpp"
#include "dape/kernels.hpp"

namespace dape {

Tensor channelize(const Tensor& m) {
  if (m.rank() != 3) throw DimensionError("channelize: expected h×w×d, got " + shape_string(m.shape()));
  return transpose(flatten_spatial(m));
}

Tensor dechannelize(const Tensor& c, std::size_t h, std::size_t w) {
  if (c.rank() != 2 || c.cols() != h * w) {
    throw DimensionError("dechannelize: " + shape_string(c.shape()) + " is not d×" + std::to_string(h * w));
  }
  return transpose(c).reshaped({h, w, c.rows()});
}

ChannelGate ChannelGate::zeros(std::size_t d) {
  return {Tensor({d, d}), Tensor({1, d}), Tensor({d, d}), Tensor({1, d})};
}

ChannelGate ChannelGate::random(std::size_t d, Rng& rng) {
  ChannelGate g = zeros(d);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : g.w1.storage()) v = rng.normal(0.0, sd);
  for (auto& v : g.w2.storage()) v = rng.normal(0.0, sd);
  return g;
}

ChannelGateVars bind_constant(Tape& tape, const ChannelGate& g) {
  return {tape.constant(g.w1), tape.constant(g.b1), tape.constant(g.w2), tape.constant(g.b2)};
}

Var gate_channels(Var c, const ChannelGateVars& gate) {
  const std::size_t d = c.value().rows();
  if (gate.w1.value().shape() != Shape{d, d} || gate.w2.value().shape() != Shape{d, d}) {
    throw DimensionError("gate_channels: gate weights " + shape_string(gate.w1.value().shape()) + " do not fit " +
                         std::to_string(d) + " channels");
  }
  const Var row = mean_rows(transpose(c));  // 1×d
  const Var hidden = relu(add_row(matmul(row, gate.w1), gate.b1));
  return row_softmax(add_row(matmul(hidden, gate.w2), gate.b2));
}

Tensor gate_channels(const Tensor& c, const ChannelGate& gate) {
  Tape tape;
  return gate_channels(tape.constant(c), bind_constant(tape, gate)).value();
}

std::vector<std::vector<std::size_t>> topk_per_segment(std::span<const double> a, std::size_t segments,
                                                       std::size_t k1) {
  const std::size_t d = a.size();
  if (segments == 0 || d % segments != 0) {
    throw ConfigError("channel segments " + std::to_string(segments) + " do not divide " + std::to_string(d) +
                      " channels");
  }
  const std::size_t width = d / segments;
  if (k1 == 0 || k1 > width) {
    throw ConfigError("k1 = " + std::to_string(k1) + " must lie in [1, " + std::to_string(width) + "]");
  }
  const bool ascending = fault_active(Fault::kTopkAscending);
  std::vector<std::vector<std::size_t>> out(segments);
  for (std::size_t l = 0; l < segments; ++l) {
    std::vector<std::size_t> idx(width);
    std::iota(idx.begin(), idx.end(), l * width);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
      return ascending ? a[x] < a[y] : a[x] > a[y];
    });
    idx.resize(k1);
    std::sort(idx.begin(), idx.end());
    out[l] = std::move(idx);
  }
  return out;
}

Var aggregate_channels(Var c, const std::vector<std::vector<std::size_t>>& selection, ChannelAgg agg) {
  Var b = group_mean(c, selection);
  if (agg == ChannelAgg::kSum) b = scale(b, static_cast<double>(selection.front().size()));
  return b;
}

ChannelTokenSet select_topk_segments(const Tensor& c, const Tensor& a, std::size_t segments, std::size_t k1,
                                     ChannelAgg agg) {
  if (a.size() != c.rows()) {
    throw DimensionError("select_topk_segments: " + std::to_string(a.size()) + " gate weights for " +
                         std::to_string(c.rows()) + " channels");
  }
  auto selection = topk_per_segment(a.data(), segments, k1);
  Tape tape;
  Tensor b = aggregate_channels(tape.constant(c), selection, agg).value();
  return {std::move(b), std::move(selection)};
}

CwaOutput cwa_tokens(Var image_tokens, Var t1, const CwaParams& params, const CwaSettings& settings,
                     DecisionLog* decisions) {
  Tape& tape = image_tokens.tape();
  const Var c = transpose(image_tokens);  // d×P
  const Var a = gate_channels(c, params.gate);
  auto selection = decide<std::vector<std::vector<std::size_t>>>(
      decisions, [&] { return topk_per_segment(a.value().data(), settings.segments, settings.k1); });
  const Var b = aggregate_channels(c, selection, settings.agg);
  const Var bridged = matmul(b, params.bridge);  // L×d

  const Tensor& bt = bridged.value();
  const Tensor& tt = t1.value();
  if (bt.cols() != tt.cols()) {
    throw DimensionError("cwa: channel tokens " + shape_string(bt.shape()) + " and text tokens " +
                         shape_string(tt.shape()) + " differ in width");
  }
  tape.cost().add_cosines(bt.rows() * tt.rows(), bt.cols());
  AffinityMask ac = decide<AffinityMask>(
      decisions, [&] { return binarize(cosine_matrix(bt, tt), settings.k_c, 1.0, MaskLevel::kChannel); });

  CwaOutput out;
  out.t2 = masked_cross_attention(t1, bridged, ac.weights, MaskOrientation::kKvByQuery, params.text, params.channel,
                                  settings.mode);
  out.channel_tokens = bridged;
  out.ac = std::move(ac);
  out.selection = std::move(selection);
  out.gate_weights = a.value();
  return out;
}

CwaBlockResult cwa_block(const Tensor& m1_spatial, const Tensor& t1, const CwaWeights& weights,
                         const CwaSettings& settings) {
  Tape tape;
  const CwaParams params{bind_constant(tape, weights.gate), tape.constant(weights.bridge),
                         bind_constant(tape, weights.text), bind_constant(tape, weights.channel)};
  auto out = cwa_tokens(tape.constant(flatten_spatial(m1_spatial)), tape.constant(t1), params, settings);
  return {out.t2.value(), std::move(out.ac)};
}

Var fuse_text(Var t1, Var t2) {
  if (t1.shape() != t2.shape()) {
    throw DimensionError("fuse_text: " + shape_string(t1.shape()) + " vs " + shape_string(t2.shape()));
  }
  return add(t1, t2);
}

Tensor fuse_text(const Tensor& t1, const Tensor& t2) {
  Tape tape;
  return fuse_text(tape.constant(t1), tape.constant(t2)).value();
}

}  // namespace dape
