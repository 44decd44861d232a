#pragma once

#include <optional>
#include <string>
#include <string_view>

// Seeded faults for mutation-testing the check suites. Inactive unless
// enabled through set_fault() or the DAPE_FAULT environment variable.

namespace dape {

enum class Fault {
  kFlipThreshold,   // binarize keeps entries below the threshold
  kTopkAscending,   // channel selection keeps the smallest gate weights
  kDropFineLevel,   // combined NFA mask omits the level-3 term
};

bool fault_active(Fault f);
void set_fault(Fault f, bool on);
void clear_faults();

std::optional<Fault> parse_fault(std::string_view name);
std::string fault_name(Fault f);

/// Enables every fault listed (comma-separated) in DAPE_FAULT.
void load_faults_from_env();

class ScopedFault {
 public:
  explicit ScopedFault(Fault f) : fault_(f) { set_fault(f, true); }
  ~ScopedFault() { set_fault(fault_, false); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault fault_;
};

}  // namespace dape
