#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "dape/autodiff.hpp"
#include "dape/coarse_align.hpp"
#include "dape/cost.hpp"
#include "dape/decisions.hpp"
#include "dape/rng.hpp"

namespace dape {

using Triple = std::array<double, 3>;
using Kernels = std::array<std::size_t, 3>;

/// Largest-remainder rounding of mu·c; every branch must get a channel.
std::array<std::size_t, 3> split_widths(std::size_t c, const Triple& mu);

struct GranularitySplit {
  std::array<Var, 3> branches;  // h×w×width, after the depthwise convolution
  std::array<std::size_t, 3> widths{}, offsets{};
  Kernels kernels{};
};

GranularitySplit split_channels(Var m, const Triple& mu, const Kernels& kernels, const std::array<Var, 3>& conv);

/// Level-1 grid (gy, gx), level-2 (gy, 2gx), level-3 (2gy, 2gx). Tokens are in
/// hierarchical order: the children of level-(k) token i are 2i and 2i+1.
TokenLayout hierarchical_layout(std::size_t h, std::size_t w, std::size_t gy, std::size_t gx, int level);

/// raster[r] = hierarchical index of the level-3 cell at row-major position r.
std::vector<std::size_t> level3_raster_order(std::size_t gy, std::size_t gx);

struct MultiscaleTokens {
  std::array<Var, 3> x;
  std::array<TokenLayout, 3> layouts;
};

MultiscaleTokens tokenize_multiscale(const GranularitySplit& split, std::size_t gy, std::size_t gx);

/// Splits every span into `factor` contiguous sub-spans.
TokenLayout refine_text(const TokenLayout& spans, std::size_t factor);

/// Cosine affinity on the active rows only, binarized to {0, mu}; other rows are 0.
AffinityMask level_mask(const Tensor& x, const Tensor& t, double k_thr, double mu,
                        const std::vector<std::size_t>& active_rows, MaskLevel level);

/// Rows whose nonzero fraction exceeds tau_d.
std::vector<std::size_t> density_flag(const AffinityMask& mask, double tau_d);

/// Nearest-neighbour block replication to rows×cols.
AffinityMask upscale_mask(const AffinityMask& mask, std::size_t rows, std::size_t cols);

/// {2p, 2p+1} for every parent p, ascending.
std::vector<std::size_t> child_rows(const std::vector<std::size_t>& parents);

struct HierarchicalMask {
  std::array<AffinityMask, 3> native;     // I×J1, 2I×2J1, 4I×4J1
  std::array<AffinityMask, 3> upscaled;   // each 4I×4J1
  AffinityMask combined;                  // sum of the upscaled levels
  std::array<std::vector<std::size_t>, 2> dense;  // dense rows at levels 1 and 2
  std::array<std::size_t, 3> cosines{};   // cosine evaluations per level
  std::size_t image_tokens = 0, text_tokens = 0;  // I, J1

  std::size_t total_cosines() const { return cosines[0] + cosines[1] + cosines[2]; }
  /// Cosines of materializing every level everywhere: I·J1·(1 + 4 + 16).
  std::size_t uniform_cosines() const { return image_tokens * text_tokens * 21; }
};

struct HierarchySettings {
  Triple mu{1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0};
  double k_thr = 0.6;
  double tau_d = 0.25;
  /// false keeps level 1 only.
  bool refine = true;
};

/// image[k]: level-k tokens of branch k (width widths[k]); text[k]: level-k
/// text tokens at full width, compared on the branch's channel slice.
HierarchicalMask build_hierarchy(const std::array<Tensor, 3>& image, const std::array<Tensor, 3>& text,
                                 const std::array<std::size_t, 3>& offsets, const HierarchySettings& settings);

/// Structural problems of a built hierarchy (empty when consistent).
std::vector<std::string> hierarchy_violations(const HierarchicalMask& h, const Triple& mu);

/// The 2^3 subset sums of mu, sorted.
std::vector<double> mu_lattice(const Triple& mu);

/// softmax(Q Kᵀ/√d) ∘ A' · V. `literal` puts V_T inside the softmax instead of K_T.
Var nfa_attention(Var image_tokens, Var text_tokens, const Tensor& combined, const ProjectionVars& image_proj,
                  const ProjectionVars& text_proj, bool literal, MaskMode mode);

struct NfaWeights {
  std::array<Tensor, 3> conv;  // k×k×width per branch
  ProjectionSet image, text;

  static NfaWeights init(std::size_t d, const Triple& mu, const Kernels& kernels, Rng& rng);
};

struct NfaParams {
  std::array<Var, 3> conv;
  ProjectionVars image, text;
};

NfaParams bind_constant(Tape& tape, const NfaWeights& w);

struct NfaSettings {
  HierarchySettings hierarchy;
  Kernels kernels{3, 5, 7};
  std::size_t grid_y = 8, grid_x = 8;
  std::size_t text_tokens = 2;  // J1
  bool keys_from_values = false;
  MaskMode mode = MaskMode::kMatmul;
};

struct NfaOutput {
  Var m2;  // 4I×d, hierarchical order
  HierarchicalMask mask;
};

/// map: h×w×d spatial features; text: rows×d (4·J1 rows or more).
NfaOutput nfa_forward(Var map, Var text, const NfaParams& params, const NfaSettings& settings,
                      DecisionLog* decisions = nullptr);

/// Mean of each level-1 cell's four level-3 descendants: 4I×d -> I×d.
Var pool_to_level1(Var m2);

}  // namespace dape
