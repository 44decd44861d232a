#include "dape/corpus.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dape/config.hpp"
#include "dape/errors.hpp"

namespace dape {

std::array<double, 3> color_rgb(std::size_t color) {
  static constexpr std::array<std::array<double, 3>, 8> table = {{{1, 0, 0},
                                                                  {0, 1, 0},
                                                                  {0, 0, 1},
                                                                  {1, 1, 0},
                                                                  {0, 1, 1},
                                                                  {1, 0, 1},
                                                                  {1, 1, 1},
                                                                  {1, 0.5, 0}}};
  return table.at(color);
}

std::string kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

std::string size_name(SizeClass s) { return s == SizeClass::kSmall ? "small" : "large"; }

std::string density_name(Density d) {
  switch (d) {
    case Density::kSparse: return "sparse";
    case Density::kMixed: return "mixed";
    case Density::kDense: return "dense";
  }
  return "?";
}

std::string SyntheticScene::caption() const {
  std::string out;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (i) out += " and ";
    out += std::string(kColorNames[shapes[i].color]) + " " + size_name(shapes[i].size) + " " + kind_name(shapes[i].kind);
  }
  return out;
}

SyntheticScene sample_scene(std::size_t id, std::size_t canvas, Density density, Rng& rng) {
  SyntheticScene scene;
  scene.id = id;
  scene.canvas = canvas;
  scene.density = density;
  std::size_t count = 1;
  if (density == Density::kMixed) count = 2 + rng.below(2);
  if (density == Density::kDense) count = 4;
  std::array<std::size_t, 4> slots{0, 1, 2, 3};
  for (std::size_t i = 3; i > 0; --i) std::swap(slots[i], slots[rng.below(i + 1)]);
  for (std::size_t i = 0; i < count; ++i) {
    ShapeRecord r;
    r.kind = static_cast<ShapeKind>(rng.below(3));
    r.color = rng.below(kColorNames.size());
    r.size = rng.below(2) ? SizeClass::kLarge : SizeClass::kSmall;
    r.slot = slots[i];
    scene.shapes.push_back(r);
  }
  return scene;
}

Tensor render(const SyntheticScene& scene) {
  const std::size_t n = scene.canvas, half = n / 2;
  Tensor img({n, n, 3});
  for (const auto& s : scene.shapes) {
    const double cy = (s.slot / 2) * half + half / 2.0 - 0.5, cx = (s.slot % 2) * half + half / 2.0 - 0.5;
    const double r = (s.size == SizeClass::kSmall ? 0.25 : 0.42) * half;
    const auto rgb = color_rgb(s.color);
    for (std::size_t y = (s.slot / 2) * half; y < (s.slot / 2 + 1) * half; ++y)
      for (std::size_t x = (s.slot % 2) * half; x < (s.slot % 2 + 1) * half; ++x) {
        const double dy = y - cy, dx = x - cx;
        bool inside = false;
        switch (s.kind) {
          case ShapeKind::kCircle: inside = dy * dy + dx * dx <= r * r; break;
          case ShapeKind::kSquare: inside = std::abs(dy) <= r && std::abs(dx) <= r; break;
          case ShapeKind::kTriangle: inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0; break;
        }
        if (inside)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
      }
  }
  return img;
}

bool is_eval_scene(std::uint64_t seed, std::size_t id) { return derive_seed(seed, id) % 5 == 0; }

Corpus generate_corpus(std::size_t n, std::uint64_t seed, const Triple& density_mix, std::size_t canvas) {
  if (n < 4) throw ConfigError("a corpus needs at least 4 scenes");
  const double total = density_mix[0] + density_mix[1] + density_mix[2];
  if (!(total > 0.0) || density_mix[0] < 0 || density_mix[1] < 0 || density_mix[2] < 0) {
    throw ConfigError("density mix weights must be non-negative and not all zero");
  }
  Corpus corpus;
  corpus.seed = seed;
  corpus.density_mix = density_mix;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    Density d = Density::kDense;
    if (u < density_mix[0]) d = Density::kSparse;
    else if (u < density_mix[0] + density_mix[1]) d = Density::kMixed;
    SyntheticScene s = sample_scene(i, canvas, d, rng);
    s.eval = is_eval_scene(seed, i);
    corpus.pixels.push_back(render(s));
    corpus.scenes.push_back(std::move(s));
  }
  return corpus;
}

namespace {

void put_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{p[i]} << (8 * i);
  return std::bit_cast<double>(bits);
}

std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode | std::ios::trunc);
  if (!out) throw FileError("cannot write " + p.string());
  return out;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create directory " + dir + ": " + ec.message());
  const std::size_t canvas = corpus.scenes.empty() ? 0 : corpus.scenes.front().canvas;

  nlohmann::json manifest;
  manifest["format"] = "dape-corpus-1";
  manifest["scenes"] = corpus.scenes.size();
  manifest["seed"] = corpus.seed;
  manifest["density_mix"] = corpus.density_mix;
  manifest["canvas"] = canvas;
  manifest["pixels"] = {{"file", "pixels.bin"}, {"dtype", "f64le"}, {"shape", {corpus.scenes.size(), canvas, canvas, 3}}};
  open_out(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";

  auto lines = open_out(fs::path(dir) / "scenes.jsonl");
  for (const auto& s : corpus.scenes) {
    nlohmann::json j;
    j["id"] = s.id;
    j["density"] = density_name(s.density);
    j["split"] = s.eval ? "eval" : "train";
    j["caption"] = s.caption();
    for (const auto& r : s.shapes)
      j["shapes"].push_back({{"kind", kind_name(r.kind)},
                             {"color", kColorNames[r.color]},
                             {"size", size_name(r.size)},
                             {"slot", r.slot}});
    lines << j.dump() << "\n";
  }

  auto bin = open_out(fs::path(dir) / "pixels.bin", std::ios::binary);
  for (const auto& p : corpus.pixels)
    for (double v : p.data()) put_le(bin, v);
  if (!bin) throw FileError("write failed for " + (fs::path(dir) / "pixels.bin").string());
}

Corpus read_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  if (!mf) throw FileError("corpus manifest missing: " + (root / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FileError("corpus manifest unreadable: " + std::string(e.what()));
  }
  Corpus corpus;
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.density_mix = manifest.at("density_mix").get<Triple>();
  const std::size_t n = manifest.at("scenes").get<std::size_t>();
  const std::size_t canvas = manifest.at("canvas").get<std::size_t>();

  std::ifstream sl(root / "scenes.jsonl");
  if (!sl) throw FileError("corpus scenes missing: " + (root / "scenes.jsonl").string());
  auto kind_of = [](const std::string& s) {
    for (int k = 0; k < 3; ++k)
      if (kind_name(static_cast<ShapeKind>(k)) == s) return static_cast<ShapeKind>(k);
    throw FileError("unknown shape kind '" + s + "'");
  };
  auto color_of = [](const std::string& s) {
    for (std::size_t c = 0; c < kColorNames.size(); ++c)
      if (s == kColorNames[c]) return c;
    throw FileError("unknown color '" + s + "'");
  };
  std::string line;
  while (std::getline(sl, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    SyntheticScene s;
    s.id = j.at("id").get<std::size_t>();
    s.canvas = canvas;
    const auto dn = j.at("density").get<std::string>();
    s.density = dn == "sparse" ? Density::kSparse : dn == "mixed" ? Density::kMixed : Density::kDense;
    s.eval = j.at("split").get<std::string>() == "eval";
    for (const auto& r : j.at("shapes")) {
      ShapeRecord rec;
      rec.kind = kind_of(r.at("kind").get<std::string>());
      rec.color = color_of(r.at("color").get<std::string>());
      rec.size = r.at("size").get<std::string>() == "small" ? SizeClass::kSmall : SizeClass::kLarge;
      rec.slot = r.at("slot").get<std::size_t>();
      s.shapes.push_back(rec);
    }
    corpus.scenes.push_back(std::move(s));
  }
  if (corpus.scenes.size() != n) throw FileError("corpus scene count does not match its manifest");

  std::ifstream bin(root / "pixels.bin", std::ios::binary);
  if (!bin) throw FileError("corpus pixels missing: " + (root / "pixels.bin").string());
  const std::size_t per = canvas * canvas * 3;
  std::vector<unsigned char> buf(per * 8);
  for (std::size_t i = 0; i < n; ++i) {
    if (!bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw FileError("corpus pixels truncated at scene " + std::to_string(i));
    }
    Tensor t({canvas, canvas, 3});
    for (std::size_t k = 0; k < per; ++k) t[k] = get_le(buf.data() + 8 * k);
    corpus.pixels.push_back(std::move(t));
  }
  return corpus;
}

std::vector<std::string> caption_words(const std::string& caption, std::size_t length) {
  std::vector<std::string> words;
  std::istringstream in(caption);
  for (std::string w; in >> w;) words.push_back(w);
  if (words.size() > length) {
    throw ConfigError("caption has " + std::to_string(words.size()) + " words, text length is " +
                      std::to_string(length));
  }
  words.resize(length);
  return words;
}

Featurizer::Featurizer(std::size_t d, std::uint64_t seed) : d_(d), seed_(seed), pixel_map_({3, d}) {
  Rng rng(derive_seed(seed, fnv1a("pixel-map")));
  for (auto& v : pixel_map_.storage()) v = rng.normal();
}

Tensor Featurizer::image(const Tensor& rgb) const {
  const std::size_t h = rgb.dim(0), w = rgb.dim(1);
  Tensor out({h, w, d_});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = rgb.at(y, x, c);
        if (v == 0.0) continue;
        for (std::size_t k = 0; k < d_; ++k) out.at(y, x, k) += v * pixel_map_.at(c, k);
      }
  return out;
}

Tensor Featurizer::text(const std::string& caption, std::size_t length) const {
  const auto words = caption_words(caption, length);
  Tensor out({length, d_});
  for (std::size_t i = 0; i < length; ++i) {
    const auto& w = words[i];
    if (w.empty()) continue;
    std::size_t color = kColorNames.size();
    for (std::size_t c = 0; c < kColorNames.size(); ++c)
      if (w == kColorNames[c]) color = c;
    if (color < kColorNames.size()) {
      const auto rgb = color_rgb(color);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < d_; ++k) out.at(i, k) += rgb[c] * pixel_map_.at(c, k);
    } else {
      Rng rng(derive_seed(seed_, fnv1a("word:" + w)));
      for (std::size_t k = 0; k < d_; ++k) out.at(i, k) = rng.normal();
    }
  }
  return out;
}

}  // namespace dape
