#include "dape/faults.hpp"

#include <atomic>
#include <cstdlib>

#include "dape/errors.hpp"

namespace dape {

namespace {

std::atomic<unsigned> g_faults{0};

unsigned bit(Fault f) { return 1u << static_cast<unsigned>(f); }

}  // namespace

bool fault_active(Fault f) { return (g_faults.load(std::memory_order_relaxed) & bit(f)) != 0; }

void set_fault(Fault f, bool on) {
  if (on)
    g_faults.fetch_or(bit(f));
  else
    g_faults.fetch_and(~bit(f));
}

void clear_faults() { g_faults.store(0); }

std::optional<Fault> parse_fault(std::string_view name) {
  if (name == "flip_threshold") return Fault::kFlipThreshold;
  if (name == "topk_ascending") return Fault::kTopkAscending;
  if (name == "drop_fine_level") return Fault::kDropFineLevel;
  return std::nullopt;
}

std::string fault_name(Fault f) {
  switch (f) {
    case Fault::kFlipThreshold: return "flip_threshold";
    case Fault::kTopkAscending: return "topk_ascending";
    case Fault::kDropFineLevel: return "drop_fine_level";
  }
  return "unknown";
}

void load_faults_from_env() {
  const char* env = std::getenv("DAPE_FAULT");
  if (!env) return;
  std::string_view rest(env);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const auto name = rest.substr(0, comma);
    if (!name.empty()) {
      const auto f = parse_fault(name);
      if (!f) throw ConfigError("DAPE_FAULT: unknown fault '" + std::string(name) + "'");
      set_fault(*f, true);
    }
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
}

}  // namespace dape
