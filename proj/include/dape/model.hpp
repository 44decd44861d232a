#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dape/autodiff.hpp"
#include "dape/config.hpp"
#include "dape/corpus.hpp"
#include "dape/cost.hpp"
#include "dape/decisions.hpp"

namespace dape {

/// Named parameter tensors in insertion order.
class ParameterStore {
 public:
  void add(std::string name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  bool operator==(const ParameterStore& o) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

struct DapeModel {
  DapeConfig config;
  ParameterStore params;

  /// Every tensor is drawn from its own stream seeded by (config.seed, name).
  static DapeModel init(const DapeConfig& config);
};

/// Parameters placed on a tape, as leaves or constants.
class BoundModel {
 public:
  BoundModel(Tape& tape, const DapeModel& model, bool trainable);
  /// Wraps vars already on a tape, in the model's parameter order.
  BoundModel(const DapeModel& model, const std::vector<Var>& vars);

  Var operator[](const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& vars() const { return vars_; }
  const DapeConfig& config() const { return *config_; }
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  const DapeConfig* config_;
  std::vector<std::pair<std::string, Var>> vars_;
  std::map<std::string, std::size_t> index_;
};

struct Batch {
  std::vector<Tensor> images;      // h×w×c featurized maps
  std::vector<Tensor> highpassed;  // same maps after the high-pass filter
  std::vector<Tensor> texts;       // text_len×d
  std::vector<std::size_t> labels; // labels[i]: text matching image i
  std::vector<std::size_t> scene_ids;

  std::size_t size() const { return images.size(); }
};

/// Featurizes `ids` of the corpus into a batch paired on the diagonal.
Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& ids, const Featurizer& featurizer,
                 const DapeConfig& config);

struct LayerTrace {
  std::size_t layer = 0;
  std::size_t image_tokens = 0, text_tokens = 0;  // stream rows entering the layer
  AffinityMask a0;
  std::optional<AffinityMask> ac;
  std::optional<HierarchicalMask> nfa;
  std::optional<AffinityMask> phi_a0;
  std::optional<HierarchicalMask> phi_nfa;
  std::size_t detail_generation = 0;  // after the layer
  CostCounters cost;
  CostCounters injection_cost;  // the detail injection alone, zero elsewhere
};

struct ForwardTrace {
  std::vector<std::vector<LayerTrace>> samples;
  CostMeter cost;
};

struct ForwardResult {
  Var image_embeddings, text_embeddings;  // b×d, unit rows
  ForwardTrace trace;
};

ForwardResult forward(const BoundModel& model, const Batch& batch, DecisionLog* decisions = nullptr);
/// Value-only forward with the parameters as constants.
ForwardResult forward(Tape& tape, const DapeModel& model, const Batch& batch);

/// Symmetric cross-entropy over img·txtᵀ·inv_temperature; inv_temperature is 1×1.
Var contrastive_loss(Var img, Var txt, Var inv_temperature, const std::vector<std::size_t>& labels);
double contrastive_loss(const Tensor& img, const Tensor& txt, double temperature,
                        const std::vector<std::size_t>& labels);

/// Loss of the batch on a tape whose parameters are leaves.
Var batch_loss(const BoundModel& model, const Batch& batch, DecisionLog* decisions = nullptr);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  CostMeter cost;
};

/// Forward, backward with masks fixed by the forward, plain gradient descent.
StepResult train_step(DapeModel& model, const Batch& batch);

struct ModuleCost {
  CostCounters counters;
  std::size_t tokens = 0;
};

struct CostReport {
  std::map<std::string, ModuleCost> modules;  // coarse, cwa, nfa, phi
  CostCounters total;
  std::uint64_t fine_cosines = 0;     // every NFA cosine evaluation in the trace
  std::uint64_t uniform_cosines = 0;  // same hierarchies evaluated at every level everywhere
  std::uint64_t fine_macs = 0;        // MACs under any nfa scope
  std::size_t hierarchies = 0;

  double fine_ratio() const {
    return uniform_cosines ? static_cast<double>(fine_cosines) / static_cast<double>(uniform_cosines) : 0.0;
  }
};

CostReport cost_report(const ForwardTrace& trace);

struct Retrieval {
  double r1 = 0.0, r5 = 0.0;
  std::size_t n = 0;
};

/// Image-to-text recall; ties count against the correct caption.
Retrieval retrieval(const Tensor& img, const Tensor& txt, const std::vector<std::size_t>& labels);
Retrieval evaluate_retrieval(const DapeModel& model, const Batch& batch);

/// "DAPE1" magic, u64 header length, JSON header (config and tensor manifest),
/// then every tensor as little-endian f64.
void save_checkpoint(const DapeModel& model, const std::string& path);
DapeModel load_checkpoint(const std::string& path);

}  // namespace dape
