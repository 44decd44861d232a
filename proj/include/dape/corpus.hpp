#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dape/nfa.hpp"
#include "dape/rng.hpp"
#include "dape/tensor.hpp"

namespace dape {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class SizeClass { kSmall, kLarge };
enum class Density { kSparse, kMixed, kDense };

inline constexpr std::array<const char*, 8> kColorNames = {"red",  "green",   "blue",  "yellow",
                                                           "cyan", "magenta", "white", "orange"};
std::array<double, 3> color_rgb(std::size_t color);

struct ShapeRecord {
  ShapeKind kind = ShapeKind::kCircle;
  std::size_t color = 0;
  SizeClass size = SizeClass::kSmall;
  std::size_t slot = 0;  // quadrant, row-major over a 2×2 layout

  bool operator==(const ShapeRecord&) const = default;
};

struct SyntheticScene {
  std::size_t id = 0;
  std::size_t canvas = 32;
  std::vector<ShapeRecord> shapes;
  Density density = Density::kSparse;
  bool eval = false;

  std::string caption() const;
};

std::string kind_name(ShapeKind k);
std::string size_name(SizeClass s);
std::string density_name(Density d);

/// Scene drawn from `rng`: the density class picks the shape count (1, 2-3, 4).
SyntheticScene sample_scene(std::size_t id, std::size_t canvas, Density density, Rng& rng);

/// canvas×canvas×3 RGB in [0, 1] on a black background.
Tensor render(const SyntheticScene& scene);

/// Deterministic 80/20 split on the scene id.
bool is_eval_scene(std::uint64_t seed, std::size_t id);

struct Corpus {
  std::uint64_t seed = 0;
  Triple density_mix{1, 1, 1};
  std::vector<SyntheticScene> scenes;
  std::vector<Tensor> pixels;
};

Corpus generate_corpus(std::size_t n, std::uint64_t seed, const Triple& density_mix, std::size_t canvas = 32);

/// manifest.json, scenes.jsonl and pixels.bin (little-endian f64) under `dir`.
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus read_corpus(const std::string& dir);

/// Caption split into words and padded with empty strings to `length`.
std::vector<std::string> caption_words(const std::string& caption, std::size_t length);

/// Fixed seeded stand-in encoders: a per-pixel linear map for images and a
/// word table for captions. Color words embed through the same pixel map.
class Featurizer {
 public:
  Featurizer(std::size_t d, std::uint64_t seed);

  Tensor image(const Tensor& rgb) const;  // h×w×3 -> h×w×d
  Tensor text(const std::string& caption, std::size_t length) const;  // length×d
  std::size_t width() const { return d_; }

 private:
  std::size_t d_;
  std::uint64_t seed_;
  Tensor pixel_map_;  // 3×d
};

}  // namespace dape
