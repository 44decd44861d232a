#include "dape/phi.hpp"

#include <numeric>

#include "dape/errors.hpp"
#include "dape/kernels.hpp"

namespace dape {

std::vector<std::size_t> slot_positions(std::size_t real_tokens, std::size_t slots) {
  std::vector<std::size_t> out(slots);
  std::iota(out.begin(), out.end(), real_tokens);
  return out;
}

TokenSet pad_with_learnable(const TokenSet& real, const LearnableTokens& slots) {
  if (slots.count == 0) return real;
  const Tensor& learnable = slots.values;
  if (learnable.rows() != slots.count || learnable.cols() != real.width()) {
    throw DimensionError("pad_with_learnable: " + shape_string(learnable.shape()) + " vs tokens " +
                         shape_string(real.tokens.shape()));
  }
  Tensor tokens({real.size() + learnable.rows(), real.width()});
  std::copy(real.tokens.data().begin(), real.tokens.data().end(), tokens.data().begin());
  std::copy(learnable.data().begin(), learnable.data().end(), tokens.data().begin() + real.tokens.size());
  TokenSet out{std::move(tokens), real.provenance, real.modality};
  out.provenance.resize(out.tokens.rows(), Provenance::synthetic());
  return out;
}

Var pad_with_learnable(Var real, Var learnable) { return concat_rows({real, learnable}); }

Tensor extract_slots(const Tensor& m1_plus, const std::vector<std::size_t>& slots) {
  Tensor out({slots.size(), m1_plus.cols()});
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] >= m1_plus.rows()) {
      throw IndexError("extract_slots: position " + std::to_string(slots[i]) + " outside " +
                       std::to_string(m1_plus.rows()) + " rows");
    }
    std::copy(m1_plus.row(slots[i]).begin(), m1_plus.row(slots[i]).end(), out.row(i).begin());
  }
  return out;
}

Var extract_slots(Var m1_plus, const std::vector<std::size_t>& slots) {
  for (std::size_t s : slots)
    if (s >= m1_plus.value().rows()) {
      throw IndexError("extract_slots: position " + std::to_string(s) + " outside " +
                       std::to_string(m1_plus.value().rows()) + " rows");
    }
  return gather_rows(m1_plus, slots);
}

Var make_detail_tokens(const Tensor& highpassed, std::size_t gy, std::size_t gx, Var weight, Var bias) {
  const TokenSet cells = tokenize_image(highpassed, gy, gx);
  Tape& tape = weight.tape();
  tape.cost().add_macs(highpassed.size());
  return add_row(matmul(tape.constant(cells.tokens), weight), bias);
}

Tensor make_detail_tokens(const Tensor& raw, double cutoff, std::size_t gy, std::size_t gx, const Tensor& weight,
                          const Tensor& bias) {
  Tape tape;
  return make_detail_tokens(highpass_channels(raw, cutoff), gy, gx, tape.constant(weight), tape.constant(bias))
      .value();
}

PhiOutput phi_inject(std::size_t layer, Var stream, std::size_t real_tokens, const Tensor& highpassed,
                     const DetailState& detail, Var t_prev, const PhiParams& params, const PhiSettings& settings,
                     DecisionLog* decisions) {
  if (settings.period == 0 || layer % settings.period != settings.period - 1) {
    throw ContractError("phi_inject called at layer " + std::to_string(layer) + " with period " +
                        std::to_string(settings.period));
  }
  Tape& tape = stream.tape();
  auto scope = tape.cost().scope("phi");
  const std::size_t p = params.learnable.value().rows();
  const std::size_t rows = stream.value().rows();
  Var padded;
  if (rows == real_tokens) {
    padded = pad_with_learnable(stream, params.learnable);
  } else if (rows == real_tokens + p) {
    padded = stream;
  } else {
    throw DimensionError("phi_inject: stream has " + std::to_string(rows) + " rows, expected " +
                         std::to_string(real_tokens) + " or " + std::to_string(real_tokens + p));
  }
  const auto slots = slot_positions(real_tokens, p);

  PhiOutput out;
  Var m1_plus;
  {
    auto s = tape.cost().scope("coarse");
    auto coarse = coarse_align_tokens(padded, t_prev, params.coarse_image, params.coarse_text, settings.k0,
                                      settings.mode, decisions);
    m1_plus = coarse.m1;
    out.a0 = std::move(coarse.a0);
  }
  const Var m_in = extract_slots(m1_plus, slots);

  const std::size_t gy = 2 * settings.nfa.grid_y, gx = 2 * settings.nfa.grid_x;
  Var detail_map;
  {
    auto s = tape.cost().scope("detail");
    Var raster;
    if (detail.generation == 0) {
      const std::size_t c = highpassed.dim(2);
      tape.cost().add_macs(highpass_macs(highpassed.dim(0), highpassed.dim(1)) * c);
      raster = make_detail_tokens(highpassed, gy, gx, params.detail_weight, params.detail_bias);
    } else {
      raster = gather_rows(detail.tokens, level3_raster_order(settings.nfa.grid_y, settings.nfa.grid_x));
    }
    detail_map = reshape(raster, {gy, gx, raster.value().cols()});
  }

  NfaOutput nfa = nfa_forward(detail_map, t_prev, params.nfa, settings.nfa, decisions);
  {
    auto s = tape.cost().scope("recall");
    const Tensor ones({p, nfa.m2.value().rows()}, 1.0);
    out.m3 = masked_cross_attention(m_in, nfa.m2, ones, MaskOrientation::kQueryByKv, params.query, params.memory,
                                    MaskMode::kMatmul);
    const Var update =
        settings.residual == ResidualSource::kM3 ? out.m3 : broadcast_rows(mean_rows(nfa.m2), p);
    out.stream = scatter_rows(m1_plus, slots, add(m_in, update));
  }
  out.m2 = nfa.m2;
  out.nfa_mask = std::move(nfa.mask);
  out.detail = DetailState{nfa.m2, detail.generation + 1};
  return out;
}

}  // namespace dape
