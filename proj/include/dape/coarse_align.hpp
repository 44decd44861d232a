#pragma once

#include <cstddef>
#include <vector>

#include "dape/autodiff.hpp"
#include "dape/decisions.hpp"
#include "dape/rng.hpp"
#include "dape/tensor.hpp"

namespace dape {

enum class Modality { kImage, kText };

/// Which part of the source a token aggregates: a half-open cell rectangle of
/// a spatial map, a half-open span of a text sequence, or a synthetic slot.
struct Provenance {
  enum class Kind { kCell, kSpan, kSynthetic };

  Kind kind = Kind::kSynthetic;
  std::size_t row0 = 0, row1 = 0, col0 = 0, col1 = 0;
  std::size_t begin = 0, end = 0;

  static Provenance cell(std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    return {Kind::kCell, r0, r1, c0, c1, 0, 0};
  }
  static Provenance span(std::size_t b, std::size_t e) { return {Kind::kSpan, 0, 0, 0, 0, b, e}; }
  static Provenance synthetic() { return {}; }

  bool operator==(const Provenance&) const = default;
};

/// Token geometry without values: provenance plus the source rows each token averages.
struct TokenLayout {
  Modality modality = Modality::kImage;
  std::vector<Provenance> provenance;
  IndexGroups groups;

  std::size_t size() const { return provenance.size(); }
};

struct TokenSet {
  Tensor tokens;  // N×d
  std::vector<Provenance> provenance;
  Modality modality = Modality::kImage;

  std::size_t size() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }
};

/// h×w×d -> (h·w)×d, row-major over cells.
Tensor flatten_spatial(const Tensor& m);

/// Row-major gy×gx grid over an h×w map.
TokenLayout image_grid_layout(std::size_t h, std::size_t w, std::size_t gy, std::size_t gx);
/// j contiguous spans over l positions; lengths differ by at most one, longer spans first.
TokenLayout text_span_layout(std::size_t l, std::size_t j);

TokenSet realize(const TokenLayout& layout, const Tensor& source_rows);

TokenSet tokenize_image(const Tensor& m0, std::size_t gy, std::size_t gx);
TokenSet tokenize_text(const Tensor& t, std::size_t j);

enum class MaskLevel { kCoarse, kChannel, kFine1, kFine2, kFine3, kCombined };

/// Non-negative mask whose entries are drawn from a declared finite alphabet.
struct AffinityMask {
  Tensor weights;
  std::vector<double> alphabet;  // sorted
  MaskLevel level = MaskLevel::kCoarse;

  /// Every weight is exactly one of the alphabet values.
  bool within_alphabet() const;
};

/// (i, j) = cosine(imgs[i], txts[j]).
Tensor affinity(const TokenSet& imgs, const TokenSet& txts);

/// Entries strictly above `threshold` become `hi`, all others 0.
AffinityMask binarize(const Tensor& a, double threshold, double hi, MaskLevel level = MaskLevel::kCoarse);

/// Query/key/value projections of one modality, each d×d.
struct ProjectionSet {
  Tensor wq, wk, wv;

  static ProjectionSet identity(std::size_t d);
  static ProjectionSet random(std::size_t d, Rng& rng);
};

struct ProjectionVars {
  Var wq, wk, wv;
};

ProjectionVars bind_constant(Tape& tape, const ProjectionSet& p);

/// kKvByQuery: the mask is stored N_kv×N_q and is transposed before use (T1 side).
/// kQueryByKv: the mask is stored N_q×N_kv (M1 side).
enum class MaskOrientation { kKvByQuery, kQueryByKv };

/// kMatmul: softmax(QKᵀ/√d) is multiplied by the mask after normalization, then by V.
/// kPreSoftmax: log(mask) is added to the scores before normalization.
enum class MaskMode { kMatmul, kPreSoftmax };

Var masked_cross_attention(Var q_side, Var kv_side, const Tensor& mask, MaskOrientation orientation,
                           const ProjectionVars& q_proj, const ProjectionVars& kv_proj, MaskMode mode);

Tensor masked_cross_attention(const Tensor& q_side, const Tensor& kv_side, const AffinityMask& mask,
                              MaskOrientation orientation, const ProjectionSet& q_proj, const ProjectionSet& kv_proj,
                              MaskMode mode = MaskMode::kMatmul);

struct CoarseAlignOutput {
  Var t1;  // J×d
  Var m1;  // I×d
  AffinityMask a0;
};

/// Core of the coarse stage on already-tokenized streams: affinity,
/// binarize at k0 with level 1, then the two masked cross-attentions.
CoarseAlignOutput coarse_align_tokens(Var image_tokens, Var text_tokens, const ProjectionVars& image_proj,
                                      const ProjectionVars& text_proj, double k0, MaskMode mode,
                                      DecisionLog* decisions = nullptr);

struct CoarseAlignConfig {
  std::size_t s = 2;
  std::size_t grid_y = 8, grid_x = 8;
  std::size_t text_tokens = 8;
  double k0 = 0.5;
  MaskMode mode = MaskMode::kMatmul;
};

struct CoarseAlignResult {
  Tensor t1;
  Tensor m1;
  AffinityMask a0;
};

/// downsample -> tokenize -> affinity -> binarize -> both attentions, on an
/// h×w×d feature map and an l×d text sequence.
CoarseAlignResult coarse_align_block(const Tensor& m, const Tensor& t, const CoarseAlignConfig& config,
                                     const ProjectionSet& image_proj, const ProjectionSet& text_proj);

}  // namespace dape
