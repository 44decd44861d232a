#include "dape/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "dape/errors.hpp"

namespace dape {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor row_softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

double cosine(const Tensor& u, const Tensor& v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine: shape mismatch " + shape_string(u.shape()) + " vs " + shape_string(v.shape()));
  }
  return cosine(u.data(), v.data());
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_matrix: width mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out.at(i, j) = cosine(a.row(i), b.row(j));
  return out;
}

Tensor conv2d_local(const Tensor& x, std::size_t kernel_size, const Tensor& weights) {
  if (kernel_size % 2 == 0) throw ConfigError("conv2d_local: kernel size must be odd, got " + std::to_string(kernel_size));
  if (x.rank() != 3) throw DimensionError("conv2d_local: expected h×w×c input, got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), k = kernel_size;
  if (weights.shape() != Shape{k, k, c}) {
    throw DimensionError("conv2d_local: weights " + shape_string(weights.shape()) + " do not match " +
                         shape_string({k, k, c}));
  }
  const auto r = static_cast<long>(k / 2);
  Tensor out({h, w, c});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      double* o = &out.at(y, xx, 0);
      for (long dy = -r; dy <= r; ++dy) {
        const long sy = static_cast<long>(y) + dy;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (long dx = -r; dx <= r; ++dx) {
          const long sx = static_cast<long>(xx) + dx;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          const double* in = x.data().data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
          const double* wt = weights.data().data() + (static_cast<std::size_t>(dy + r) * k + static_cast<std::size_t>(dx + r)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wt[ch] * in[ch];
        }
      }
    }
  }
  return out;
}

Tensor downsample_avg(const Tensor& x, std::size_t s) {
  if (x.rank() != 3) throw DimensionError("downsample_avg: expected h×w×d input, got " + shape_string(x.shape()));
  if (s == 0 || x.dim(0) % s != 0 || x.dim(1) % s != 0) {
    throw DimensionError("downsample_avg: factor " + std::to_string(s) + " does not divide " + shape_string(x.shape()));
  }
  const std::size_t h = x.dim(0) / s, w = x.dim(1) / s, d = x.dim(2);
  Tensor out({h, w, d});
  const double inv = 1.0 / static_cast<double>(s * s);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t by = 0; by < s; ++by)
        for (std::size_t bx = 0; bx < s; ++bx)
          for (std::size_t ch = 0; ch < d; ++ch) out.at(y, xx, ch) += x.at(y * s + by, xx * s + bx, ch) * inv;
  return out;
}

namespace {

using cplx = std::complex<double>;

// Twiddle table e^{sign·2πi·m/n} for m in [0, n).
std::vector<cplx> twiddles(std::size_t n, double sign) {
  std::vector<cplx> t(n);
  for (std::size_t m = 0; m < n; ++m) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n);
    t[m] = cplx(std::cos(ang), std::sin(ang));
  }
  return t;
}

// In-place separable DFT over an h×w complex plane.
void dft2(std::vector<cplx>& plane, std::size_t h, std::size_t w, double sign) {
  const auto tw_w = twiddles(w, sign);
  const auto tw_h = twiddles(h, sign);
  std::vector<cplx> buf(std::max(h, w));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t k = 0; k < w; ++k) {
      cplx acc = 0.0;
      for (std::size_t x = 0; x < w; ++x) acc += plane[y * w + x] * tw_w[(k * x) % w];
      buf[k] = acc;
    }
    std::copy_n(buf.begin(), w, plane.begin() + static_cast<long>(y * w));
  }
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t k = 0; k < h; ++k) {
      cplx acc = 0.0;
      for (std::size_t y = 0; y < h; ++y) acc += plane[y * w + x] * tw_h[(k * y) % h];
      buf[k] = acc;
    }
    for (std::size_t k = 0; k < h; ++k) plane[k * w + x] = buf[k];
  }
}

}  // namespace

Tensor highpass_fourier(const Tensor& x, double cutoff_frac) {
  if (!(cutoff_frac > 0.0 && cutoff_frac <= 1.0)) {
    throw ConfigError("highpass_fourier: cutoff_frac must lie in (0, 1], got " + std::to_string(cutoff_frac));
  }
  if (x.rank() != 2) throw DimensionError("highpass_fourier: expected h×w plane, got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<cplx> plane(h * w);
  for (std::size_t i = 0; i < h * w; ++i) plane[i] = x[i];
  dft2(plane, h, w, -1.0);

  const double hy = static_cast<double>(h / 2), hx = static_cast<double>(w / 2);
  const double max_radius = std::sqrt(hy * hy + hx * hx);
  const double limit = cutoff_frac * max_radius;
  for (std::size_t ky = 0; ky < h; ++ky) {
    const auto fy = static_cast<double>(std::min(ky, h - ky));
    for (std::size_t kx = 0; kx < w; ++kx) {
      const auto fx = static_cast<double>(std::min(kx, w - kx));
      if (std::sqrt(fy * fy + fx * fx) <= limit) plane[ky * w + kx] = 0.0;
    }
  }

  dft2(plane, h, w, 1.0);
  Tensor out({h, w});
  const double inv = 1.0 / static_cast<double>(h * w);
  for (std::size_t i = 0; i < h * w; ++i) out[i] = plane[i].real() * inv;
  return out;
}

Tensor highpass_channels(const Tensor& x, double cutoff_frac) {
  if (x.rank() != 3) throw DimensionError("highpass_channels: expected h×w×c map, got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out({h, w, c});
  Tensor plane({h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = x[i * c + ch];
    const Tensor filtered = highpass_fourier(plane, cutoff_frac);
    for (std::size_t i = 0; i < h * w; ++i) out[i * c + ch] = filtered[i];
  }
  return out;
}

std::size_t highpass_macs(std::size_t h, std::size_t w) {
  // Forward and inverse separable passes, 4 real MACs per complex MAC.
  return 2 * 4 * (h * w * w + w * h * h);
}

Tensor group_mean(const Tensor& x, const IndexGroups& groups) {
  const std::size_t n = x.cols();
  Tensor out({groups.size(), n});
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& idx = groups[g];
    if (idx.empty()) throw DimensionError("group_mean: empty group " + std::to_string(g));
    auto o = out.row(g);
    for (auto r : idx) {
      if (r >= x.rows()) throw IndexError("group_mean: row " + std::to_string(r) + " out of range");
      auto in = x.row(r);
      for (std::size_t j = 0; j < n; ++j) o[j] += in[j];
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (auto& v : o) v *= inv;
  }
  return out;
}

}  // namespace dape
