#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "dape/corpus.hpp"
#include "dape/errors.hpp"

using namespace dape;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Grammar: phrase ("and" phrase)*, phrase = color size kind.
bool parses(const std::string& caption, std::size_t shapes) {
  std::istringstream in(caption);
  std::vector<std::string> w{std::istream_iterator<std::string>(in), {}};
  const std::set<std::string> colors(kColorNames.begin(), kColorNames.end());
  std::size_t i = 0, seen = 0;
  while (i < w.size()) {
    if (seen > 0 && w[i++] != "and") return false;
    if (i + 3 > w.size()) return false;
    if (!colors.count(w[i]) || (w[i + 1] != "small" && w[i + 1] != "large")) return false;
    if (w[i + 2] != "circle" && w[i + 2] != "square" && w[i + 2] != "triangle") return false;
    i += 3;
    ++seen;
  }
  return seen == shapes && w.size() == 3 + 4 * (shapes - 1);
}

}  // namespace

TEST(Corpus, CaptionGrammarAndShapeCounts) {
  const auto corpus = generate_corpus(60, 3, {1, 1, 1});
  std::set<std::size_t> counts;
  for (const auto& s : corpus.scenes) {
    EXPECT_TRUE(parses(s.caption(), s.shapes.size())) << s.caption();
    counts.insert(s.shapes.size());
    if (s.density == Density::kSparse) EXPECT_EQ(s.shapes.size(), 1u);
    if (s.density == Density::kDense) EXPECT_EQ(s.shapes.size(), 4u);
    std::set<std::size_t> slots;
    for (const auto& r : s.shapes) slots.insert(r.slot);
    EXPECT_EQ(slots.size(), s.shapes.size());
  }
  EXPECT_EQ(counts, (std::set<std::size_t>{1, 2, 3, 4}));
}

TEST(Corpus, SparseMixHasOneShapeEach) {
  for (const auto& s : generate_corpus(20, 9, {1, 0, 0}).scenes) EXPECT_EQ(s.shapes.size(), 1u);
  EXPECT_THROW(generate_corpus(3, 9, {1, 0, 0}), ConfigError);
}

TEST(Corpus, RenderIsDeterministicAndColored) {
  SyntheticScene s;
  s.canvas = 32;
  s.shapes = {{ShapeKind::kSquare, 0, SizeClass::kLarge, 3}};
  const Tensor img = render(s);
  EXPECT_EQ(img.at(24, 24, 0), 1.0);
  EXPECT_EQ(img.at(24, 24, 1), 0.0);
  EXPECT_EQ(img.at(4, 4, 0), 0.0);
  EXPECT_TRUE(std::ranges::equal(render(s).data(), img.data()));
}

TEST(Corpus, SplitIsRoughlyEightyTwenty) {
  const auto c = generate_corpus(500, 7, {1, 1, 1});
  std::size_t eval = 0;
  for (const auto& s : c.scenes) eval += s.eval;
  EXPECT_GT(eval, 70u);
  EXPECT_LT(eval, 130u);
}

TEST(Corpus, FilesAreByteStableAndRoundTrip) {
  namespace fs = std::filesystem;
  const auto a = fs::temp_directory_path() / "dape_corpus_a", b = fs::temp_directory_path() / "dape_corpus_b";
  write_corpus(generate_corpus(4, 1, {1, 1, 1}), a.string());
  write_corpus(generate_corpus(4, 1, {1, 1, 1}), b.string());
  for (const char* f : {"manifest.json", "scenes.jsonl", "pixels.bin"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "pixels.bin").size(), 4u * 32 * 32 * 3 * 8);
  const auto back = read_corpus(a.string());
  const auto orig = generate_corpus(4, 1, {1, 1, 1});
  ASSERT_EQ(back.scenes.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.scenes[i].shapes, orig.scenes[i].shapes);
    EXPECT_EQ(back.scenes[i].eval, orig.scenes[i].eval);
    EXPECT_TRUE(std::ranges::equal(back.pixels[i].data(), orig.pixels[i].data()));
  }
  fs::remove_all(a);
  fs::remove_all(b);
  EXPECT_THROW(read_corpus((fs::temp_directory_path() / "dape_no_such_corpus").string()), FileError);
}

TEST(Featurizer, ColorWordsShareThePixelMap) {
  const Featurizer f(6, 3);
  Tensor px({1, 1, 3});
  px.at(0, 0, 0) = 1.0;  // pure red
  const Tensor img = f.image(px);
  const Tensor txt = f.text("red small circle", 4);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(img.at(0, 0, k), txt.at(0, k));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(txt.at(3, k), 0.0);
  EXPECT_TRUE(std::ranges::equal(Featurizer(6, 3).text("blue large square", 3).data(),
                                 f.text("blue large square", 3).data()));
  EXPECT_THROW(f.text("a b c d e", 4), ConfigError);
}
