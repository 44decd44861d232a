#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "dape/coarse_align.hpp"
#include "dape/cwa.hpp"
#include "dape/nfa.hpp"
#include "dape/phi.hpp"

namespace dape {

enum class NfaMerge { kSlotsOnly, kPoolAdd };

struct DapeConfig {
  // geometry
  std::size_t d = 48;
  std::size_t n_layers = 4;
  std::size_t image_size = 32;
  std::size_t text_len = 16;
  std::size_t s = 2;
  std::size_t grid_y = 8, grid_x = 8;
  std::size_t text_tokens = 8;  // J

  // coarse and channel alignment
  double k0 = 0.5;
  double k_c = 0.5;
  std::size_t segments = 8;  // L
  std::size_t k1 = 4;
  ChannelAgg cwa_agg = ChannelAgg::kMean;

  // fine alignment
  Triple mu{1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0};
  Kernels kernels{3, 5, 7};
  double k_thr = 0.6;
  double tau_d = 0.25;
  std::size_t nfa_grid_y = 0, nfa_grid_x = 0;  // 0: same as the coarse grid
  std::size_t nfa_text_tokens = 0;             // 0: J/4
  bool keys_from_values = false;  // score against the value projection instead of the key one
  NfaMerge nfa_merge = NfaMerge::kSlotsOnly;

  // detail injection
  std::size_t phi_period = 4;  // K
  std::size_t phi_slots = 0;   // P; 0: ceil(I/4)
  double cutoff = 0.25;
  ResidualSource residual_source = ResidualSource::kM3;

  MaskMode mask_mode = MaskMode::kMatmul;
  bool enable_cwa = true, enable_nfa = true, enable_phi = true;

  // training
  double temperature = 0.07;
  double learning_rate = 0.05;
  std::size_t batch_size = 8;
  std::size_t steps = 200;
  std::size_t eval_every = 50;
  std::uint64_t seed = 1;

  // corpus
  std::string corpus_dir;  // empty: generated inside the run directory
  std::size_t corpus_scenes = 64;
  std::uint64_t corpus_seed = 7;
  Triple density_mix{1.0, 1.0, 1.0};  // sparse, mixed, dense weights

  std::size_t image_tokens() const { return grid_y * grid_x; }
  std::size_t nfa_gy() const { return nfa_grid_y ? nfa_grid_y : grid_y; }
  std::size_t nfa_gx() const { return nfa_grid_x ? nfa_grid_x : grid_x; }
  std::size_t nfa_j1() const { return nfa_text_tokens ? nfa_text_tokens : text_tokens / 4; }
  std::size_t slots() const { return phi_slots ? phi_slots : (image_tokens() + 3) / 4; }
  /// NFA on the main image stream: every layer when PHI is off, or when asked to merge.
  bool main_path_nfa() const { return enable_nfa && (!enable_phi || nfa_merge == NfaMerge::kPoolAdd); }
  bool phi_layer(std::size_t layer) const { return enable_phi && layer % phi_period == phi_period - 1; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  CoarseAlignConfig coarse() const;
  CwaSettings cwa() const;
  NfaSettings nfa(bool refine) const;
  PhiSettings phi() const;
};

nlohmann::json to_json(const DapeConfig& c);
/// Unknown keys and ill-typed values are ConfigErrors. Missing keys keep defaults.
DapeConfig config_from_json(const nlohmann::json& j);
DapeConfig load_config(const std::string& path);

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const DapeConfig& c);

std::uint64_t fnv1a(std::string_view bytes);

}  // namespace dape
