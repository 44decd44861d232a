#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dape/model.hpp"

namespace dape {

struct SuiteResult {
  std::string name;
  std::string module;
  bool passed = true;
  double seconds = 0.0;
  std::vector<std::string> failures;
};

struct CheckReport {
  std::vector<SuiteResult> suites;

  bool passed() const;
  std::vector<std::string> failed_suites() const;
  nlohmann::json to_json() const;
};

struct SuiteInfo {
  std::string name;
  std::string module;
};

std::vector<SuiteInfo> list_suites();

/// Runs every suite, or only `only` when non-empty (unknown name: ConfigError).
CheckReport run_checks(const std::string& only = {});

/// Forward pass written out in one piece with plain loops, sharing no code
/// with the layered implementation. Returns b×d image and text embeddings.
std::pair<Tensor, Tensor> monolithic_forward(const DapeModel& model, const Batch& batch);

/// The seeded oracle configuration (d=16, 16 image tokens, 4 text tokens, 2 layers).
DapeConfig oracle_config();

/// Largest elementwise gap between the layered forward and the monolithic one.
double oracle_gap(const DapeConfig& config, std::size_t batch_size = 3);

}  // namespace dape
