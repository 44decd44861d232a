#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "dape/errors.hpp"
#include "dape/harness.hpp"

using namespace dape;
namespace fs = std::filesystem;

namespace {

DapeConfig tiny() {
  DapeConfig c;
  c.d = 8;
  c.n_layers = 2;
  c.image_size = 16;
  c.grid_y = c.grid_x = 4;
  c.text_tokens = 4;
  c.segments = 2;
  c.k1 = 2;
  c.phi_period = 2;
  c.k0 = c.k_c = c.k_thr = 0.0;
  c.batch_size = 3;
  c.corpus_scenes = 16;
  c.steps = 4;
  c.eval_every = 2;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Points DAPE_RUN_DIR at a fresh directory for the test's lifetime.
class RunRoot {
 public:
  explicit RunRoot(const std::string& name) : dir_(fs::temp_directory_path() / name) {
    fs::remove_all(dir_);
    setenv("DAPE_RUN_DIR", dir_.c_str(), 1);
  }
  ~RunRoot() {
    unsetenv("DAPE_RUN_DIR");
    fs::remove_all(dir_);
  }
  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
};

}  // namespace

TEST(Harness, ZeroStepsCheckpointIsTheInitialization) {
  RunRoot root("dape_h_zero");
  DapeConfig c = tiny();
  c.steps = 0;
  const TrainReport r = cmd_train(c);
  EXPECT_EQ(load_checkpoint((fs::path(r.dir) / "checkpoint.bin").string()).params, DapeModel::init(c).params);
  EXPECT_EQ(r.rows.size(), 1u);
}

TEST(Harness, MissingCorpusIsAFileError) {
  DapeConfig c = tiny();
  c.corpus_dir = "/nonexistent/dape/corpus";
  TrainOptions o;
  o.write = false;
  EXPECT_THROW(cmd_train(c, o), FileError);
}

TEST(Harness, ReadsAGeneratedCorpus) {
  const fs::path dir = fs::temp_directory_path() / "dape_h_gen";
  fs::remove_all(dir);
  const Corpus made = generate_corpus(16, 7, {1, 1, 1}, 16);
  write_corpus(made, dir.string());
  DapeConfig c = tiny();
  c.corpus_dir = dir.string();
  const FeaturizedCorpus fc = prepare_corpus(c, "");
  EXPECT_EQ(fc.corpus.scenes.size(), 16u);
  EXPECT_EQ(fc.train.size() + fc.eval.size(), 16u);
  fs::remove_all(dir);
}

TEST(Harness, MetricsAreByteStable) {
  std::string first;
  for (int run = 0; run < 2; ++run) {
    RunRoot root("dape_h_metrics");
    const TrainReport r = cmd_train(tiny());
    const std::string csv = slurp(fs::path(r.dir) / "metrics.csv");
    EXPECT_EQ(csv.rfind(metrics_header(), 0), 0u);
    if (run == 0) first = csv;
    else EXPECT_EQ(csv, first);
  }
}

TEST(Harness, MeasuresAtTheConfiguredInterval) {
  TrainOptions o;
  o.write = false;
  const TrainReport r = cmd_train(tiny(), o);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].step, 0u);
  EXPECT_EQ(r.rows[1].step, 2u);
  EXPECT_EQ(r.rows[2].step, 4u);
}

TEST(Harness, ConfigHashNamesTheRunDirectory) {
  RunRoot root("dape_h_hash");
  DapeConfig a = tiny(), b = tiny();
  b.seed = 2;
  EXPECT_EQ(run_dir(a), run_dir(tiny()));
  EXPECT_NE(run_dir(a), run_dir(b));
  EXPECT_EQ(fs::path(run_dir(a)).parent_path(), root.path());
}

TEST(Harness, BenchEndpointsAndClosedForm) {
  const DapeConfig c;
  const auto rows = cmd_bench(c, {0.0, 0.25, 0.5, 0.75, 1.0}, false);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows.front().ratio, 1.0 / 21.0);
  EXPECT_EQ(rows.back().ratio, 1.0);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i].ratio, rows[i - 1].ratio);
  for (const auto& r : rows) EXPECT_NEAR(r.ratio, r.closed_form, 0.02 * r.closed_form);
  EXPECT_LE(rows[1].ratio, 0.6);
}

TEST(Harness, AblationHasFiveRowsAndBaseMatchesTraining) {
  DapeConfig c = tiny();
  c.steps = 2;
  const auto rows = cmd_ablate(c, false);
  ASSERT_EQ(rows.size(), 5u);
  const char* names[] = {"base", "+CWA", "+NFA", "+PHI", "+DAPE"};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(rows[i].variant, names[i]);

  DapeConfig base = c;
  base.enable_cwa = base.enable_nfa = base.enable_phi = false;
  TrainOptions o;
  o.write = false;
  const TrainReport r = cmd_train(base, o);
  EXPECT_EQ(rows[0].eval.r1, r.rows.back().eval.r1);
  EXPECT_EQ(rows[0].cost.total.macs, r.rows.back().cost.total.macs);
  EXPECT_EQ(rows[0].config_hash, config_hash(base));
  EXPECT_GT(rows[2].cost.total.macs, rows[0].cost.total.macs);
}

TEST(Harness, SplitLossFoldsATrailingSingleton) {
  const DapeConfig c = tiny();
  const FeaturizedCorpus fc = prepare_corpus(c, "");
  const DapeModel m = DapeModel::init(c);
  // Seven ids with batch size 3 give chunks of 3 and 4, never a lone pair-less row.
  const std::vector<std::size_t> ids{0, 1, 2, 3, 4, 5, 6};
  EXPECT_TRUE(std::isfinite(split_loss(m, fc.all, ids)));
}
