#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dape/config.hpp"
#include "dape/corpus.hpp"
#include "dape/model.hpp"

namespace dape {

/// $DAPE_RUN_DIR, or "runs".
std::string run_root();
/// run_root()/<config hash>, created on demand.
std::string run_dir(const DapeConfig& config);

struct FeaturizedCorpus {
  Corpus corpus;
  Batch all;  // every scene, featurized once
  std::vector<std::size_t> train, eval;
};

/// Reads config.corpus_dir when set (missing is a FileError); otherwise
/// generates the configured corpus under `dir`/corpus (in memory when `dir` is
/// empty), reusing a cached copy only if it matches the configuration.
FeaturizedCorpus prepare_corpus(const DapeConfig& config, const std::string& dir);

/// Rows of `b` in the given order, relabelled on the diagonal.
Batch subset(const Batch& b, const std::vector<std::size_t>& rows);

/// Mean contrastive loss over the ids in fixed chunks of batch_size.
double split_loss(const DapeModel& model, const Batch& all, const std::vector<std::size_t>& ids);

struct MetricsRow {
  std::string run_id;
  std::string config_hash;
  std::size_t step = 0;
  double batch_loss = 0.0;  // minibatch loss of the step ending here; NaN (empty field) at step 0
  double train_loss = 0.0;  // split_loss over the training split
  Retrieval eval;
  CostReport cost;          // one forward over the eval split
};

struct TrainReport {
  std::string dir;
  std::vector<MetricsRow> rows;
  DapeModel model;
  double seconds = 0.0;
  double steps_per_sec = 0.0;

  double initial_loss() const { return rows.front().train_loss; }
  double final_loss() const { return rows.back().train_loss; }
};

struct TrainOptions {
  std::string run_id = "train";
  /// Skip writing metrics, checkpoint and timing files.
  bool write = true;
  /// Use this corpus instead of preparing one.
  const FeaturizedCorpus* corpus = nullptr;
};

TrainReport cmd_train(const DapeConfig& config, const TrainOptions& options = {});

std::string metrics_header();
std::string metrics_line(const MetricsRow& row);

struct AblationRow {
  std::string variant;
  std::string config_hash;
  Retrieval eval;
  CostReport cost;
  double steps_per_sec = 0.0;
};

/// {base, +CWA, +NFA, +PHI, +DAPE} in that order.
std::vector<std::pair<std::string, DapeConfig>> ablation_variants(const DapeConfig& config);

/// Trains every variant on the shared corpus. Writes ablation.csv (counts and
/// recall, byte-stable) and ablation_timing.csv under run_dir(config).
std::vector<AblationRow> cmd_ablate(const DapeConfig& config, bool write = true);

struct BenchRow {
  double target = 0.0;          // requested dense fraction of level-1 rows
  double dense_fraction = 0.0;  // achieved
  std::array<std::uint64_t, 3> cosines{};
  std::uint64_t nfa_cosines = 0, uniform_cosines = 0;
  std::uint64_t nfa_macs = 0, uniform_macs = 0;  // cosine MACs only
  double ratio = 0.0;
  double closed_form = 0.0;  // (1 + 20·dense_fraction) / 21
};

/// Density-controlled scene on the NFA grid: a fraction of level-1 cells
/// carries the caption's colour, the rest its negation. Returns (map, text).
std::pair<Tensor, Tensor> density_scene(const DapeConfig& config, double dense_fraction, std::uint64_t seed);

BenchRow bench_point(const DapeConfig& config, double dense_fraction);
/// Writes bench.csv under run_dir(config).
std::vector<BenchRow> cmd_bench(const DapeConfig& config, const std::vector<double>& densities, bool write = true);

std::string format_double(double v);

}  // namespace dape
