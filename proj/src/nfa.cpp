#include "dape/nfa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dape/errors.hpp"
#include "dape/faults.hpp"
#include "dape/kernels.hpp"

namespace dape {

std::array<std::size_t, 3> split_widths(std::size_t c, const Triple& mu) {
  double total = 0.0;
  for (double m : mu) {
    if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("granularity ratios must be positive");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("granularity ratios must sum to 1");
  std::array<std::size_t, 3> widths{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = mu[k] * static_cast<double>(c);
    widths[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(widths[k]);
    used += widths[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < c; ++i, ++used) ++widths[order[i % 3]];
  for (int k = 0; k < 3; ++k) {
    if (widths[k] == 0) {
      throw ConfigError("granularity branch " + std::to_string(k + 1) + " gets no channels out of " +
                        std::to_string(c));
    }
  }
  return widths;
}

GranularitySplit split_channels(Var m, const Triple& mu, const Kernels& kernels, const std::array<Var, 3>& conv) {
  const Tensor& mv = m.value();
  if (mv.rank() != 3) throw DimensionError("split_channels: expected h×w×c, got " + shape_string(mv.shape()));
  const std::size_t h = mv.dim(0), w = mv.dim(1), c = mv.dim(2);
  GranularitySplit split;
  split.widths = split_widths(c, mu);
  split.kernels = kernels;
  const Var flat = reshape(m, {h * w, c});
  std::size_t offset = 0;
  for (int k = 0; k < 3; ++k) {
    split.offsets[k] = offset;
    const Var part = reshape(slice_cols(flat, offset, split.widths[k]), {h, w, split.widths[k]});
    split.branches[k] = conv2d_local(part, kernels[k], conv[k]);
    offset += split.widths[k];
  }
  return split;
}

TokenLayout hierarchical_layout(std::size_t h, std::size_t w, std::size_t gy, std::size_t gx, int level) {
  if (level < 1 || level > 3) throw ConfigError("granularity level must be 1, 2 or 3");
  if (gy == 0 || gx == 0 || h % (2 * gy) != 0 || w % (2 * gx) != 0) {
    throw DimensionError("multiscale grid " + std::to_string(gy) + "x" + std::to_string(gx) + " does not fit a " +
                         std::to_string(h) + "x" + std::to_string(w) + " map at the finest level");
  }
  const std::size_t ry = level == 3 ? 2 : 1, rx = level == 1 ? 1 : 2;
  const TokenLayout raster = image_grid_layout(h, w, gy * ry, gx * rx);
  const std::size_t n = raster.size();
  std::vector<std::size_t> slot(n);
  for (std::size_t y = 0; y < gy * ry; ++y)
    for (std::size_t x = 0; x < gx * rx; ++x) {
      const std::size_t parent = (y / ry) * gx + x / rx;
      std::size_t idx = parent;
      if (level == 2) idx = 2 * parent + x % 2;
      if (level == 3) idx = 4 * parent + 2 * (x % 2) + y % 2;
      slot[idx] = y * gx * rx + x;
    }
  TokenLayout out;
  out.modality = Modality::kImage;
  for (std::size_t i = 0; i < n; ++i) {
    out.provenance.push_back(raster.provenance[slot[i]]);
    out.groups.push_back(raster.groups[slot[i]]);
  }
  return out;
}

std::vector<std::size_t> level3_raster_order(std::size_t gy, std::size_t gx) {
  std::vector<std::size_t> order(4 * gy * gx);
  for (std::size_t y = 0; y < 2 * gy; ++y)
    for (std::size_t x = 0; x < 2 * gx; ++x)
      order[y * 2 * gx + x] = 4 * ((y / 2) * gx + x / 2) + 2 * (x % 2) + y % 2;
  return order;
}

MultiscaleTokens tokenize_multiscale(const GranularitySplit& split, std::size_t gy, std::size_t gx) {
  MultiscaleTokens out;
  for (int k = 0; k < 3; ++k) {
    const Tensor& b = split.branches[k].value();
    const std::size_t h = b.dim(0), w = b.dim(1);
    out.layouts[k] = hierarchical_layout(h, w, gy, gx, k + 1);
    out.x[k] = group_mean(reshape(split.branches[k], {h * w, b.dim(2)}), out.layouts[k].groups);
  }
  return out;
}

TokenLayout refine_text(const TokenLayout& spans, std::size_t factor) {
  if (factor == 0) throw ConfigError("refine_text: factor must be positive");
  TokenLayout out;
  out.modality = spans.modality;
  for (const auto& p : spans.provenance) {
    const std::size_t len = p.end - p.begin;
    if (len < factor) {
      throw ConfigError("refine_text: span [" + std::to_string(p.begin) + ", " + std::to_string(p.end) +
                        ") is too short for factor " + std::to_string(factor));
    }
    const TokenLayout sub = text_span_layout(len, factor);
    for (std::size_t k = 0; k < factor; ++k) {
      const auto& s = sub.provenance[k];
      out.provenance.push_back(Provenance::span(p.begin + s.begin, p.begin + s.end));
      std::vector<std::size_t> rows(s.end - s.begin);
      std::iota(rows.begin(), rows.end(), p.begin + s.begin);
      out.groups.push_back(std::move(rows));
    }
  }
  return out;
}

AffinityMask level_mask(const Tensor& x, const Tensor& t, double k_thr, double mu,
                        const std::vector<std::size_t>& active_rows, MaskLevel level) {
  if (x.cols() != t.cols()) {
    throw DimensionError("level_mask: image tokens " + shape_string(x.shape()) + " and text tokens " +
                         shape_string(t.shape()) + " differ in width");
  }
  Tensor a({x.rows(), t.rows()});
  Tensor keep({x.rows(), t.rows()});
  for (std::size_t i : active_rows) {
    if (i >= x.rows()) throw IndexError("level_mask: active row " + std::to_string(i) + " out of range");
    for (std::size_t j = 0; j < t.rows(); ++j) {
      a.at(i, j) = cosine(x.row(i), t.row(j));
      keep.at(i, j) = 1.0;
    }
  }
  AffinityMask m = binarize(a, k_thr, mu, level);
  for (std::size_t i = 0; i < m.weights.size(); ++i)
    if (keep[i] == 0.0) m.weights[i] = 0.0;
  return m;
}

std::vector<std::size_t> density_flag(const AffinityMask& mask, double tau_d) {
  if (!(tau_d >= 0.0 && tau_d <= 1.0)) throw ConfigError("density threshold must lie in [0, 1]");
  const Tensor& w = mask.weights;
  std::vector<std::size_t> dense;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    std::size_t nnz = 0;
    for (double v : w.row(i)) nnz += v != 0.0;
    if (static_cast<double>(nnz) / static_cast<double>(w.cols()) > tau_d) dense.push_back(i);
  }
  return dense;
}

AffinityMask upscale_mask(const AffinityMask& mask, std::size_t rows, std::size_t cols) {
  const Tensor& w = mask.weights;
  if (rows % w.rows() != 0 || cols % w.cols() != 0) {
    throw DimensionError("upscale_mask: " + shape_string(w.shape()) + " does not divide " +
                         shape_string({rows, cols}));
  }
  const std::size_t fy = rows / w.rows(), fx = cols / w.cols();
  AffinityMask out{Tensor({rows, cols}), mask.alphabet, mask.level};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.weights.at(i, j) = w.at(i / fy, j / fx);
  return out;
}

std::vector<std::size_t> child_rows(const std::vector<std::size_t>& parents) {
  std::vector<std::size_t> out;
  out.reserve(parents.size() * 2);
  for (std::size_t p : parents) {
    out.push_back(2 * p);
    out.push_back(2 * p + 1);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

Tensor slice_columns(const Tensor& t, std::size_t offset, std::size_t width) {
  Tensor out({t.rows(), width});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out.at(i, j) = t.at(i, offset + j);
  return out;
}

constexpr MaskLevel kLevels[3] = {MaskLevel::kFine1, MaskLevel::kFine2, MaskLevel::kFine3};

}  // namespace

std::vector<double> mu_lattice(const Triple& mu) {
  std::vector<double> out;
  for (int s = 0; s < 8; ++s) {
    double v = 0.0;
    for (int k = 0; k < 3; ++k) v += (s >> k) & 1 ? mu[k] : 0.0;
    out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

HierarchicalMask build_hierarchy(const std::array<Tensor, 3>& image, const std::array<Tensor, 3>& text,
                                 const std::array<std::size_t, 3>& offsets, const HierarchySettings& settings) {
  const std::size_t n_img = image[0].rows(), n_txt = text[0].rows();
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t f = std::size_t{1} << k;
    if (image[k].rows() != f * n_img || text[k].rows() != f * n_txt) {
      throw DimensionError("build_hierarchy: level " + std::to_string(k + 1) + " expects " +
                           std::to_string(f * n_img) + " image and " + std::to_string(f * n_txt) +
                           " text tokens, got " + shape_string(image[k].shape()) + " and " +
                           shape_string(text[k].shape()));
    }
  }
  HierarchicalMask h;
  h.image_tokens = n_img;
  h.text_tokens = n_txt;
  std::array<std::vector<std::size_t>, 3> active;
  active[0].resize(n_img);
  std::iota(active[0].begin(), active[0].end(), 0);
  for (int k = 0; k < 3; ++k) {
    if (k > 0) active[k] = settings.refine ? child_rows(h.dense[k - 1]) : std::vector<std::size_t>{};
    const Tensor t = slice_columns(text[k], offsets[k], image[k].cols());
    h.native[k] = level_mask(image[k], t, settings.k_thr, settings.mu[k], active[k], kLevels[k]);
    h.cosines[k] = active[k].size() * text[k].rows();
    if (k < 2) h.dense[k] = density_flag(h.native[k], settings.tau_d);
  }
  const std::size_t rows = 4 * n_img, cols = 4 * n_txt;
  const bool drop_fine = fault_active(Fault::kDropFineLevel);
  h.combined = AffinityMask{Tensor({rows, cols}), mu_lattice(settings.mu), MaskLevel::kCombined};
  for (int k = 0; k < 3; ++k) {
    h.upscaled[k] = upscale_mask(h.native[k], rows, cols);
    if (k == 2 && drop_fine) continue;
    for (std::size_t i = 0; i < h.combined.weights.size(); ++i) h.combined.weights[i] += h.upscaled[k].weights[i];
  }
  return h;
}

std::vector<std::string> hierarchy_violations(const HierarchicalMask& h, const Triple& mu) {
  std::vector<std::string> out;
  for (int k = 0; k < 3; ++k) {
    for (double v : h.native[k].weights.data())
      if (v != 0.0 && v != mu[k]) {
        out.push_back("level " + std::to_string(k + 1) + " entry outside {0, mu}");
        break;
      }
  }
  const Tensor& a = h.combined.weights;
  bool sum_ok = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += h.upscaled[k].weights[i];
    if (a[i] != s) sum_ok = false;
  }
  if (!sum_ok) out.push_back("combined mask differs from the sum of the upscaled levels");
  const auto lattice = mu_lattice(mu);
  for (double v : a.data()) {
    const bool on_lattice =
        std::any_of(lattice.begin(), lattice.end(), [v](double l) { return std::abs(l - v) <= 1e-12; });
    if (!on_lattice || v > 1.0 + 1e-12) {
      out.push_back("combined entry " + std::to_string(v) + " is off the mu lattice");
      break;
    }
  }
  for (int k = 1; k < 3; ++k) {
    const auto allowed = child_rows(h.dense[k - 1]);
    const Tensor& w = h.native[k].weights;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      const bool any = std::any_of(w.row(i).begin(), w.row(i).end(), [](double v) { return v != 0.0; });
      if (any && !std::binary_search(allowed.begin(), allowed.end(), i)) {
        out.push_back("level " + std::to_string(k + 1) + " row " + std::to_string(i) +
                      " lies outside every dense parent");
        break;
      }
    }
  }
  for (int k = 0; k < 2; ++k)
    if (density_flag(h.native[k], 0.0).size() < h.dense[k].size())
      out.push_back("dense set of level " + std::to_string(k + 1) + " contains empty rows");
  return out;
}

Var nfa_attention(Var image_tokens, Var text_tokens, const Tensor& combined, const ProjectionVars& image_proj,
                  const ProjectionVars& text_proj, bool literal, MaskMode mode) {
  const ProjectionVars kv = literal ? ProjectionVars{text_proj.wq, text_proj.wv, text_proj.wv} : text_proj;
  return masked_cross_attention(image_tokens, text_tokens, combined, MaskOrientation::kQueryByKv, image_proj, kv, mode);
}

NfaWeights NfaWeights::init(std::size_t d, const Triple& mu, const Kernels& kernels, Rng& rng) {
  const auto widths = split_widths(d, mu);
  NfaWeights w;
  for (int k = 0; k < 3; ++k) {
    const std::size_t ks = kernels[k];
    const double bound = 1.0 / static_cast<double>(ks * ks);
    w.conv[k] = Tensor({ks, ks, widths[k]});
    for (auto& v : w.conv[k].storage()) v = rng.uniform(-bound, bound);
    for (std::size_t ch = 0; ch < widths[k]; ++ch) w.conv[k].at(ks / 2, ks / 2, ch) += 1.0;
  }
  w.image = ProjectionSet::random(d, rng);
  w.text = ProjectionSet::random(d, rng);
  return w;
}

NfaParams bind_constant(Tape& tape, const NfaWeights& w) {
  return {{tape.constant(w.conv[0]), tape.constant(w.conv[1]), tape.constant(w.conv[2])},
          bind_constant(tape, w.image),
          bind_constant(tape, w.text)};
}

NfaOutput nfa_forward(Var map, Var text, const NfaParams& params, const NfaSettings& settings,
                      DecisionLog* decisions) {
  CostMeter& meter = map.tape().cost();
  auto scope = meter.scope("nfa");
  const GranularitySplit split = [&] {
    auto s = meter.scope("conv");
    return split_channels(map, settings.hierarchy.mu, settings.kernels, params.conv);
  }();
  const Tensor& mv = map.value();
  const std::size_t h = mv.dim(0), w = mv.dim(1);

  MultiscaleTokens xs;
  std::array<Var, 3> ts;
  TokenLayout fine;
  {
    auto s = meter.scope("tokens");
    xs = tokenize_multiscale(split, settings.grid_y, settings.grid_x);
    const TokenLayout t1 = text_span_layout(text.value().rows(), settings.text_tokens);
    ts[0] = group_mean(text, t1.groups);
    ts[1] = group_mean(text, refine_text(t1, 2).groups);
    ts[2] = group_mean(text, refine_text(t1, 4).groups);
    fine = hierarchical_layout(h, w, settings.grid_y, settings.grid_x, 3);
  }

  HierarchicalMask mask = decide<HierarchicalMask>(decisions, [&] {
    return build_hierarchy({xs.x[0].value(), xs.x[1].value(), xs.x[2].value()},
                           {ts[0].value(), ts[1].value(), ts[2].value()}, split.offsets, settings.hierarchy);
  });
  for (int k = 0; k < 3; ++k) {
    auto s = meter.scope("level" + std::to_string(k + 1));
    meter.add_cosines(mask.cosines[k], split.widths[k]);
  }

  auto s = meter.scope("attention");
  const Var joined = concat_cols({reshape(split.branches[0], {h * w, split.widths[0]}),
                                  reshape(split.branches[1], {h * w, split.widths[1]}),
                                  reshape(split.branches[2], {h * w, split.widths[2]})});
  const Var queries = group_mean(joined, fine.groups);
  NfaOutput out;
  out.m2 = nfa_attention(queries, ts[2], mask.combined.weights, params.image, params.text, settings.keys_from_values,
                         settings.mode);
  out.mask = std::move(mask);
  return out;
}

Var pool_to_level1(Var m2) {
  const std::size_t n = m2.value().rows();
  if (n % 4 != 0) throw DimensionError("pool_to_level1: " + std::to_string(n) + " rows are not a level-3 token set");
  IndexGroups groups(n / 4);
  for (std::size_t i = 0; i < n / 4; ++i) groups[i] = {4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3};
  return group_mean(m2, groups);
}

}  // namespace dape
