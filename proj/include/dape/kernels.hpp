#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dape/tensor.hpp"

// Value-level numeric kernels. The differentiable wrappers in autodiff.hpp
// reuse these for their forward passes.

namespace dape {

using IndexGroups = std::vector<std::vector<std::size_t>>;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Softmax over each row with max subtraction; rows sum to 1.
Tensor row_softmax(const Tensor& a);

/// u·v / (|u||v|) clamped to [-1, 1]; defined as 0 when either vector is zero.
double cosine(std::span<const double> u, std::span<const double> v);
double cosine(const Tensor& u, const Tensor& v);

/// Row-pairwise cosine matrix: out(i, j) = cosine(a.row(i), b.row(j)).
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

/// Depthwise 2D cross-correlation with zero padding ("same" output).
/// x: h×w×c, weights: k×k×c, k odd.
Tensor conv2d_local(const Tensor& x, std::size_t kernel_size, const Tensor& weights);

/// Mean of each s×s block; x: h×w×d with s dividing h and w.
Tensor downsample_avg(const Tensor& x, std::size_t s);

/// Removes every 2D-DFT bin whose radial frequency index is at most
/// cutoff_frac·max_radius (always including DC), returns the real part of
/// the inverse transform. x: h×w, 0 < cutoff_frac <= 1.
Tensor highpass_fourier(const Tensor& x, double cutoff_frac);

/// highpass_fourier applied to every channel of an h×w×c map.
Tensor highpass_channels(const Tensor& x, double cutoff_frac);

/// Multiply-accumulate count of one highpass_fourier call on an h×w plane.
std::size_t highpass_macs(std::size_t h, std::size_t w);

/// out.row(g) = mean of x.row(i) for i in groups[g]; x: R×n.
Tensor group_mean(const Tensor& x, const IndexGroups& groups);

}  // namespace dape
