// Straight-line forward pass. Everything below uses its own loops so that a
// shared bug in the layered kernels cannot hide here.
#include <algorithm>
#include <cmath>
#include <numeric>

#include "dape/checks.hpp"
#include "dape/errors.hpp"
#include "dape/harness.hpp"

namespace dape {

namespace {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat of(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = t[i];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat o(a.r, b.c);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < b.c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.c; ++k) s += a(i, k) * b(k, j);
      o(i, j) = s;
    }
  return o;
}

Mat tr(const Mat& a) {
  Mat o(a.c, a.r);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) o(j, i) = a(i, j);
  return o;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat o = a;
  for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] += b.v[i];
  return o;
}

double cos_rows(const Mat& a, std::size_t i, const Mat& b, std::size_t j, std::size_t off = 0, std::size_t w = 0) {
  if (w == 0) w = a.c;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < w; ++k) {
    const double x = a(i, k), y = b(j, off + k);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// softmax(q Wq (kv Wk)ᵀ / √d) ∘ mask, times kv Wv. mask is nq×nkv.
Mat attend(const Mat& q_side, const Mat& kv_side, const Mat& mask, const Mat& wq, const Mat& wk, const Mat& wv) {
  const Mat q = mm(q_side, wq), k = mm(kv_side, wk), v = mm(kv_side, wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.c));
  Mat p(q.r, k.r);
  for (std::size_t i = 0; i < q.r; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k.r; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < q.c; ++t) s += q(i, t) * k(j, t);
      p(i, j) = s * inv;
      mx = std::max(mx, p(i, j));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k.r; ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
    for (std::size_t j = 0; j < k.r; ++j) p(i, j) = p(i, j) / z * mask(i, j);
  }
  return mm(p, v);
}

std::vector<std::pair<std::size_t, std::size_t>> spans(std::size_t begin, std::size_t len, std::size_t parts) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t at = begin;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t n = len / parts + (k < len % parts ? 1 : 0);
    out.emplace_back(at, at + n);
    at += n;
  }
  return out;
}

Mat span_means(const Mat& rows, const std::vector<std::pair<std::size_t, std::size_t>>& sp) {
  Mat o(sp.size(), rows.c);
  for (std::size_t s = 0; s < sp.size(); ++s) {
    for (std::size_t i = sp[s].first; i < sp[s].second; ++i)
      for (std::size_t k = 0; k < rows.c; ++k) o(s, k) += rows(i, k);
    for (std::size_t k = 0; k < rows.c; ++k) o(s, k) /= static_cast<double>(sp[s].second - sp[s].first);
  }
  return o;
}

// h×w×c map, channel-last.
struct Map {
  std::size_t h = 0, w = 0, c = 0;
  std::vector<double> v;
  double& at(std::size_t y, std::size_t x, std::size_t k) { return v[(y * w + x) * c + k]; }
  double at(std::size_t y, std::size_t x, std::size_t k) const { return v[(y * w + x) * c + k]; }
};

Map map_of(const Tensor& t) { return {t.dim(0), t.dim(1), t.dim(2), std::vector<double>(t.data().begin(), t.data().end())}; }

// Mean over each cell of a gy×gx grid, rows in raster order; channels [off, off+width).
Mat cell_means(const Map& m, std::size_t gy, std::size_t gx, std::size_t off = 0, std::size_t width = 0) {
  if (width == 0) width = m.c;
  const std::size_t ch = m.h / gy, cw = m.w / gx;
  Mat o(gy * gx, width);
  for (std::size_t cy = 0; cy < gy; ++cy)
    for (std::size_t cx = 0; cx < gx; ++cx)
      for (std::size_t y = cy * ch; y < (cy + 1) * ch; ++y)
        for (std::size_t x = cx * cw; x < (cx + 1) * cw; ++x)
          for (std::size_t k = 0; k < width; ++k) o(cy * gx + cx, k) += m.at(y, x, off + k) / static_cast<double>(ch * cw);
  return o;
}

// Hierarchical position of raster cell (y, x) at a level.
std::size_t hier_index(int level, std::size_t y, std::size_t x, std::size_t gx) {
  if (level == 1) return y * gx + x;
  if (level == 2) return 2 * (y * gx + x / 2) + x % 2;
  return 4 * ((y / 2) * gx + x / 2) + 2 * (x % 2) + y % 2;
}

struct Weights {
  const DapeModel& m;
  Mat operator()(const std::string& name) const { return of(m.params.get(name)); }
};

std::array<std::size_t, 3> widths_of(std::size_t d, const Triple& mu) {
  std::array<std::size_t, 3> w{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (int k = 0; k < 3; ++k) {
    w[k] = static_cast<std::size_t>(mu[k] * static_cast<double>(d));
    frac[k] = mu[k] * static_cast<double>(d) - static_cast<double>(w[k]);
    used += w[k];
  }
  // Largest fractional parts first, earlier branch on ties.
  std::array<int, 3> order{0, 1, 2};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b + 1 < 3 - a; ++b)
      if (frac[order[b + 1]] > frac[order[b]]) std::swap(order[b], order[b + 1]);
  for (int i = 0; used < d; ++i, ++used) ++w[order[i % 3]];
  return w;
}

// Fine-grained interaction over a spatial map. Returns the 4I×d update in hierarchical order.
Mat fine_interaction(const Map& map, const Mat& text, const Weights& W, const std::string& p, const DapeConfig& c,
                     bool refine) {
  const std::size_t gy = c.nfa_gy(), gx = c.nfa_gx(), n1 = gy * gx, j1 = c.nfa_j1(), d = map.c;
  const auto width = widths_of(d, c.mu);

  // Depthwise convolution per branch, zero padded, into one map.
  Map conv{map.h, map.w, d, std::vector<double>(map.v.size(), 0.0)};
  std::size_t off = 0;
  std::array<std::size_t, 3> offsets{};
  for (int k = 0; k < 3; ++k) {
    offsets[k] = off;
    const Tensor& ker = W.m.params.get(p + ".conv" + std::to_string(k));
    const long r = static_cast<long>(c.kernels[k] / 2);
    for (std::size_t y = 0; y < map.h; ++y)
      for (std::size_t x = 0; x < map.w; ++x)
        for (std::size_t ch = 0; ch < width[k]; ++ch) {
          double s = 0.0;
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(x) + dx;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(map.h) || sx >= static_cast<long>(map.w)) continue;
              s += ker.at(static_cast<std::size_t>(dy + r), static_cast<std::size_t>(dx + r), ch) *
                   map.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), off + ch);
            }
          conv.at(y, x, off + ch) = s;
        }
    off += width[k];
  }

  // Image tokens per level, reordered hierarchically.
  const std::array<std::size_t, 3> ry{1, 1, 2}, rx{1, 2, 2};
  std::array<Mat, 3> img;
  for (int k = 0; k < 3; ++k) {
    const std::size_t gyk = gy * ry[k], gxk = gx * rx[k];
    const Mat raster = cell_means(conv, gyk, gxk, offsets[k], width[k]);
    img[k] = Mat(raster.r, raster.c);
    for (std::size_t y = 0; y < gyk; ++y)
      for (std::size_t x = 0; x < gxk; ++x)
        for (std::size_t t = 0; t < raster.c; ++t) img[k](hier_index(k + 1, y, x, gx), t) = raster(y * gxk + x, t);
  }

  // Text spans, split 2 and 4 ways for the finer levels.
  std::array<std::vector<std::pair<std::size_t, std::size_t>>, 3> sp;
  sp[0] = spans(0, text.r, j1);
  for (auto [b, e] : sp[0]) {
    for (auto s : spans(b, e - b, 2)) sp[1].push_back(s);
    for (auto s : spans(b, e - b, 4)) sp[2].push_back(s);
  }
  std::array<Mat, 3> txt;
  for (int k = 0; k < 3; ++k) txt[k] = span_means(text, sp[k]);

  // Masks, refining only below dense rows.
  std::array<Mat, 3> lvl;
  std::vector<bool> active(n1, true);
  for (int k = 0; k < 3; ++k) {
    const std::size_t rows = n1 << k, cols = j1 << k;
    lvl[k] = Mat(rows, cols);
    std::vector<bool> dense(rows, false);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!active[i]) continue;
      std::size_t nnz = 0;
      for (std::size_t j = 0; j < cols; ++j)
        if (cos_rows(img[k], i, txt[k], j, offsets[k], width[k]) > c.k_thr) {
          lvl[k](i, j) = c.mu[k];
          ++nnz;
        }
      dense[i] = static_cast<double>(nnz) / static_cast<double>(cols) > c.tau_d;
    }
    std::vector<bool> next(2 * rows, false);
    for (std::size_t i = 0; i < rows; ++i) next[2 * i] = next[2 * i + 1] = refine && dense[i];
    active = next;
  }
  Mat combined(4 * n1, 4 * j1);
  for (std::size_t i = 0; i < combined.r; ++i)
    for (std::size_t j = 0; j < combined.c; ++j)
      combined(i, j) = lvl[0](i / 4, j / 4) + lvl[1](i / 2, j / 2) + lvl[2](i, j);

  // Queries: finest cells over every convolved channel.
  const Mat raster = cell_means(conv, 2 * gy, 2 * gx);
  Mat q(raster.r, d);
  for (std::size_t y = 0; y < 2 * gy; ++y)
    for (std::size_t x = 0; x < 2 * gx; ++x)
      for (std::size_t t = 0; t < d; ++t) q(hier_index(3, y, x, gx), t) = raster(y * 2 * gx + x, t);
  const Mat wk = c.keys_from_values ? W(p + ".text.wv") : W(p + ".text.wk");
  return attend(q, txt[2], combined, W(p + ".image.wq"), wk, W(p + ".text.wv"));
}

Mat binary_affinity(const Mat& a, const Mat& b, double thr) {
  Mat o(a.r, b.r);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < b.r; ++j) o(i, j) = cos_rows(a, i, b, j) > thr ? 1.0 : 0.0;
  return o;
}

std::pair<Mat, Mat> sample_forward(const DapeModel& model, const Tensor& image, const Tensor& highpassed,
                                   const Tensor& text) {
  const DapeConfig& c = model.config;
  const Weights W{model};
  const std::size_t d = c.d, n = c.grid_y * c.grid_x;
  const Map full = map_of(image);

  // Stride-s average pooling, then the token grid.
  Map small{full.h / c.s, full.w / c.s, d, {}};
  small.v.assign(small.h * small.w * d, 0.0);
  for (std::size_t y = 0; y < full.h; ++y)
    for (std::size_t x = 0; x < full.w; ++x)
      for (std::size_t k = 0; k < d; ++k) small.at(y / c.s, x / c.s, k) += full.at(y, x, k) / static_cast<double>(c.s * c.s);
  Mat x = cell_means(small, c.grid_y, c.grid_x);
  Mat y = span_means(of(text), spans(0, text.rows(), c.text_tokens));
  Mat carried;  // detail tokens after the first injection
  bool has_detail = false;

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    const Mat y_in = y;

    const Mat a0 = binary_affinity(x, y, c.k0);
    const Mat t1 = attend(y, x, tr(a0), W(p + ".coarse.text.wq"), W(p + ".coarse.image.wk"), W(p + ".coarse.image.wv"));
    const Mat m1 = attend(x, y, a0, W(p + ".coarse.image.wq"), W(p + ".coarse.text.wk"), W(p + ".coarse.text.wv"));
    x = plus(x, m1);

    Mat fused = t1;
    if (c.enable_cwa) {
      // Gate over spatially pooled channels.
      Mat pooled(1, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) pooled(0, k) += x(i, k) / static_cast<double>(n);
      Mat hidden = mm(pooled, W(p + ".cwa.gate.w1"));
      const Mat b1 = W(p + ".cwa.gate.b1"), b2 = W(p + ".cwa.gate.b2");
      for (std::size_t k = 0; k < d; ++k) hidden(0, k) = std::max(0.0, hidden(0, k) + b1(0, k));
      Mat gate = mm(hidden, W(p + ".cwa.gate.w2"));
      double mx = -INFINITY, z = 0.0;
      for (std::size_t k = 0; k < d; ++k) mx = std::max(mx, gate(0, k) += b2(0, k));
      for (std::size_t k = 0; k < d; ++k) z += (gate(0, k) = std::exp(gate(0, k) - mx));
      for (std::size_t k = 0; k < d; ++k) gate(0, k) /= z;

      // Top-k1 channels per segment, averaged into one channel token each.
      const std::size_t seg = d / c.segments;
      Mat tokens(c.segments, n);
      for (std::size_t s = 0; s < c.segments; ++s) {
        std::vector<bool> taken(seg, false);
        for (std::size_t pick = 0; pick < c.k1; ++pick) {
          std::size_t best = seg;
          for (std::size_t q = 0; q < seg; ++q)
            if (!taken[q] && (best == seg || gate(0, s * seg + q) > gate(0, s * seg + best))) best = q;
          taken[best] = true;
        }
        const double scale = c.cwa_agg == ChannelAgg::kSum ? 1.0 : 1.0 / static_cast<double>(c.k1);
        for (std::size_t q = 0; q < seg; ++q)
          if (taken[q])
            for (std::size_t i = 0; i < n; ++i) tokens(s, i) += x(i, s * seg + q);
        for (std::size_t i = 0; i < n; ++i) tokens(s, i) *= scale;
      }
      const Mat bridged = mm(tokens, W(p + ".cwa.bridge"));
      const Mat ac = binary_affinity(bridged, t1, c.k_c);
      fused = plus(t1, attend(t1, bridged, tr(ac), W(p + ".cwa.text.wq"), W(p + ".cwa.channel.wk"),
                              W(p + ".cwa.channel.wv")));
    }
    y = plus(y, fused);

    if (c.main_path_nfa()) {
      const Mat m2 = fine_interaction(full, y, W, p + ".nfa", c, true);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
          x(i, k) += (m2(4 * i, k) + m2(4 * i + 1, k) + m2(4 * i + 2, k) + m2(4 * i + 3, k)) / 4.0;
    }

    if (c.phi_layer(l)) {
      const std::size_t slots = c.slots();
      Mat padded = x;
      if (padded.r == n) {
        const Mat s = W("slots");
        padded.v.insert(padded.v.end(), s.v.begin(), s.v.end());
        padded.r += slots;
      }
      const Mat a = binary_affinity(padded, y_in, c.k0);
      const Mat m1p = attend(padded, y_in, a, W(p + ".phi.coarse.image.wq"), W(p + ".phi.coarse.text.wk"),
                             W(p + ".phi.coarse.text.wv"));

      // Detail map on the finest NFA grid.
      const std::size_t fy = 2 * c.nfa_gy(), fx = 2 * c.nfa_gx();
      Mat raster;
      if (!has_detail) {
        raster = mm(cell_means(map_of(highpassed), fy, fx), W(p + ".phi.detail.w"));
        const Mat b = W(p + ".phi.detail.b");
        for (std::size_t i = 0; i < raster.r; ++i)
          for (std::size_t k = 0; k < d; ++k) raster(i, k) += b(0, k);
      } else {
        raster = Mat(fy * fx, d);
        for (std::size_t yy = 0; yy < fy; ++yy)
          for (std::size_t xx = 0; xx < fx; ++xx)
            for (std::size_t k = 0; k < d; ++k) raster(yy * fx + xx, k) = carried(hier_index(3, yy, xx, c.nfa_gx()), k);
      }
      const Map detail{fy, fx, d, raster.v};
      const Mat m2 = fine_interaction(detail, y_in, W, p + ".phi.nfa", c, c.enable_nfa);

      Mat m_in(slots, d);
      for (std::size_t i = 0; i < slots; ++i)
        for (std::size_t k = 0; k < d; ++k) m_in(i, k) = m1p(n + i, k);
      Mat update;
      if (c.residual_source == ResidualSource::kM3) {
        Mat ones(slots, m2.r);
        std::fill(ones.v.begin(), ones.v.end(), 1.0);
        update = attend(m_in, m2, ones, W(p + ".phi.query.wq"), W(p + ".phi.memory.wk"), W(p + ".phi.memory.wv"));
      } else {
        update = Mat(slots, d);
        for (std::size_t i = 0; i < slots; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            double s = 0.0;
            for (std::size_t r = 0; r < m2.r; ++r) s += m2(r, k);
            update(i, k) = s / static_cast<double>(m2.r);
          }
      }
      Mat next = m1p;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) next(i, k) += x(i, k);
      for (std::size_t i = 0; i < slots; ++i)
        for (std::size_t k = 0; k < d; ++k) next(n + i, k) = m_in(i, k) + update(i, k);
      x = next;
      carried = m2;
      has_detail = true;
    }
  }

  auto pooled_unit = [](const Mat& m) {
    Mat o(1, m.c);
    for (std::size_t i = 0; i < m.r; ++i)
      for (std::size_t k = 0; k < m.c; ++k) o(0, k) += m(i, k) / static_cast<double>(m.r);
    double nrm = 0.0;
    for (double v : o.v) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (auto& v : o.v) v /= nrm;
    return o;
  };
  return {pooled_unit(x), pooled_unit(y)};
}

}  // namespace

std::pair<Tensor, Tensor> monolithic_forward(const DapeModel& model, const Batch& batch) {
  const std::size_t b = batch.size(), d = model.config.d;
  if (model.config.mask_mode != MaskMode::kMatmul) throw ConfigError("the monolithic oracle covers matmul masking only");
  Tensor img({b, d}), txt({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    const auto [e, t] = sample_forward(model, batch.images[i], batch.highpassed[i], batch.texts[i]);
    for (std::size_t k = 0; k < d; ++k) {
      img.at(i, k) = e(0, k);
      txt.at(i, k) = t(0, k);
    }
  }
  return {img, txt};
}

DapeConfig oracle_config() {
  DapeConfig c;
  c.d = 16;
  c.n_layers = 2;
  c.image_size = 16;
  c.s = 2;
  c.grid_y = c.grid_x = 4;
  c.text_len = 16;
  c.text_tokens = 4;
  c.segments = 4;
  c.k1 = 2;
  c.phi_period = 2;
  c.k0 = 0.1;
  c.k_c = 0.1;
  c.k_thr = 0.1;
  c.seed = 3;
  c.corpus_scenes = 8;
  return c;
}

double oracle_gap(const DapeConfig& config, std::size_t batch_size) {
  const Corpus corpus = generate_corpus(std::max<std::size_t>(batch_size, 4), config.corpus_seed, config.density_mix,
                                        config.image_size);
  std::vector<std::size_t> ids(batch_size);
  std::iota(ids.begin(), ids.end(), 0);
  const Batch batch = make_batch(corpus, ids, Featurizer(config.d, config.seed), config);
  const DapeModel model = DapeModel::init(config);
  Tape tape;
  const ForwardResult layered = forward(tape, model, batch);
  const auto [img, txt] = monolithic_forward(model, batch);
  double gap = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    gap = std::max(gap, std::abs(img[i] - layered.image_embeddings.value()[i]));
    gap = std::max(gap, std::abs(txt[i] - layered.text_embeddings.value()[i]));
  }
  return gap;
}

}  // namespace dape
