#include "dape/coarse_align.hpp"

#include <algorithm>
#include <cmath>

#include "dape/errors.hpp"
#include "dape/faults.hpp"
#include "dape/kernels.hpp"

namespace dape {

Tensor flatten_spatial(const Tensor& m) {
  if (m.rank() != 3) throw DimensionError("expected an h×w×d map, got " + shape_string(m.shape()));
  return m.reshaped({m.dim(0) * m.dim(1), m.dim(2)});
}

TokenLayout image_grid_layout(std::size_t h, std::size_t w, std::size_t gy, std::size_t gx) {
  if (gy == 0 || gx == 0 || h % gy != 0 || w % gx != 0) {
    throw DimensionError("image grid " + std::to_string(gy) + "x" + std::to_string(gx) + " does not divide a " +
                         std::to_string(h) + "x" + std::to_string(w) + " map");
  }
  const std::size_t ch = h / gy, cw = w / gx;
  TokenLayout layout;
  layout.modality = Modality::kImage;
  for (std::size_t r = 0; r < gy; ++r) {
    for (std::size_t c = 0; c < gx; ++c) {
      layout.provenance.push_back(Provenance::cell(r * ch, (r + 1) * ch, c * cw, (c + 1) * cw));
      std::vector<std::size_t> rows;
      rows.reserve(ch * cw);
      for (std::size_t y = r * ch; y < (r + 1) * ch; ++y)
        for (std::size_t x = c * cw; x < (c + 1) * cw; ++x) rows.push_back(y * w + x);
      layout.groups.push_back(std::move(rows));
    }
  }
  return layout;
}

TokenLayout text_span_layout(std::size_t l, std::size_t j) {
  if (j == 0 || j > l) {
    throw ConfigError("cannot split " + std::to_string(l) + " text positions into " + std::to_string(j) + " tokens");
  }
  TokenLayout layout;
  layout.modality = Modality::kText;
  const std::size_t base = l / j, extra = l % j;
  std::size_t begin = 0;
  for (std::size_t k = 0; k < j; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    layout.provenance.push_back(Provenance::span(begin, begin + len));
    std::vector<std::size_t> rows(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = begin + i;
    layout.groups.push_back(std::move(rows));
    begin += len;
  }
  return layout;
}

TokenSet realize(const TokenLayout& layout, const Tensor& source_rows) {
  return TokenSet{group_mean(source_rows, layout.groups), layout.provenance, layout.modality};
}

TokenSet tokenize_image(const Tensor& m0, std::size_t gy, std::size_t gx) {
  if (m0.rank() != 3) throw DimensionError("tokenize_image: expected h×w×d, got " + shape_string(m0.shape()));
  return realize(image_grid_layout(m0.dim(0), m0.dim(1), gy, gx), flatten_spatial(m0));
}

TokenSet tokenize_text(const Tensor& t, std::size_t j) { return realize(text_span_layout(t.rows(), j), t); }

bool AffinityMask::within_alphabet() const {
  return std::all_of(weights.data().begin(), weights.data().end(), [&](double v) {
    return std::find(alphabet.begin(), alphabet.end(), v) != alphabet.end();
  });
}

Tensor affinity(const TokenSet& imgs, const TokenSet& txts) {
  if (imgs.width() != txts.width()) {
    throw DimensionError("affinity: image tokens " + shape_string(imgs.tokens.shape()) + " and text tokens " +
                         shape_string(txts.tokens.shape()) + " differ in width");
  }
  return cosine_matrix(imgs.tokens, txts.tokens);
}

AffinityMask binarize(const Tensor& a, double threshold, double hi, MaskLevel level) {
  if (!std::isfinite(threshold)) throw ConfigError("binarize: threshold must be finite");
  if (!(hi > 0.0)) throw ConfigError("binarize: mask level must be positive");
  const bool flipped = fault_active(Fault::kFlipThreshold);
  AffinityMask mask{Tensor(a.shape()), {0.0, hi}, level};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool on = flipped ? a[i] < threshold : a[i] > threshold;
    mask.weights[i] = on ? hi : 0.0;
  }
  return mask;
}

ProjectionSet ProjectionSet::identity(std::size_t d) {
  return {Tensor::identity(d), Tensor::identity(d), Tensor::identity(d)};
}

ProjectionSet ProjectionSet::random(std::size_t d, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto draw = [&] {
    Tensor t({d, d});
    for (auto& v : t.storage()) v = rng.normal(0.0, sd);
    return t;
  };
  ProjectionSet p;
  p.wq = draw();
  p.wk = draw();
  p.wv = draw();
  return p;
}

ProjectionVars bind_constant(Tape& tape, const ProjectionSet& p) {
  return {tape.constant(p.wq), tape.constant(p.wk), tape.constant(p.wv)};
}

Var masked_cross_attention(Var q_side, Var kv_side, const Tensor& mask, MaskOrientation orientation,
                           const ProjectionVars& q_proj, const ProjectionVars& kv_proj, MaskMode mode) {
  const std::size_t nq = q_side.value().rows(), nkv = kv_side.value().rows();
  const Shape expected = orientation == MaskOrientation::kKvByQuery ? Shape{nkv, nq} : Shape{nq, nkv};
  if (mask.shape() != expected) {
    throw DimensionError("masked_cross_attention: mask " + shape_string(mask.shape()) + " does not match orientation (expected " +
                         shape_string(expected) + ")");
  }
  const Tensor oriented = orientation == MaskOrientation::kKvByQuery ? transpose(mask) : mask;

  const Var q = matmul(q_side, q_proj.wq);
  const Var k = matmul(kv_side, kv_proj.wk);
  const Var v = matmul(kv_side, kv_proj.wv);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  const Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  const Var weights =
      mode == MaskMode::kMatmul ? mask_mul(row_softmax(scores), oriented) : masked_row_softmax(scores, oriented);
  return matmul(weights, v);
}

Tensor masked_cross_attention(const Tensor& q_side, const Tensor& kv_side, const AffinityMask& mask,
                              MaskOrientation orientation, const ProjectionSet& q_proj, const ProjectionSet& kv_proj,
                              MaskMode mode) {
  Tape tape;
  const Var out = masked_cross_attention(tape.constant(q_side), tape.constant(kv_side), mask.weights, orientation,
                                         bind_constant(tape, q_proj), bind_constant(tape, kv_proj), mode);
  return out.value();
}

CoarseAlignOutput coarse_align_tokens(Var image_tokens, Var text_tokens, const ProjectionVars& image_proj,
                                      const ProjectionVars& text_proj, double k0, MaskMode mode,
                                      DecisionLog* decisions) {
  const Tensor& img = image_tokens.value();
  const Tensor& txt = text_tokens.value();
  if (img.cols() != txt.cols()) {
    throw DimensionError("coarse align: image tokens " + shape_string(img.shape()) + " and text tokens " +
                         shape_string(txt.shape()) + " differ in width");
  }
  image_tokens.tape().cost().add_cosines(img.rows() * txt.rows(), img.cols());
  AffinityMask a0 = decide<AffinityMask>(decisions, [&] { return binarize(cosine_matrix(img, txt), k0, 1.0); });

  CoarseAlignOutput out;
  out.t1 = masked_cross_attention(text_tokens, image_tokens, a0.weights, MaskOrientation::kKvByQuery, text_proj,
                                  image_proj, mode);
  out.m1 = masked_cross_attention(image_tokens, text_tokens, a0.weights, MaskOrientation::kQueryByKv, image_proj,
                                  text_proj, mode);
  out.a0 = std::move(a0);
  return out;
}

CoarseAlignResult coarse_align_block(const Tensor& m, const Tensor& t, const CoarseAlignConfig& config,
                                     const ProjectionSet& image_proj, const ProjectionSet& text_proj) {
  const Tensor m0 = downsample_avg(m, config.s);
  const TokenSet imgs = tokenize_image(m0, config.grid_y, config.grid_x);
  const TokenSet txts = tokenize_text(t, config.text_tokens);
  Tape tape;
  auto out = coarse_align_tokens(tape.constant(imgs.tokens), tape.constant(txts.tokens), bind_constant(tape, image_proj),
                                 bind_constant(tape, text_proj), config.k0, config.mode);
  return {out.t1.value(), out.m1.value(), std::move(out.a0)};
}

}  // namespace dape
