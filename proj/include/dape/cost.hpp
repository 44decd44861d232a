#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dape {

struct CostCounters {
  std::uint64_t macs = 0;
  std::uint64_t cosines = 0;

  CostCounters& operator+=(const CostCounters& o) {
    macs += o.macs;
    cosines += o.cosines;
    return *this;
  }
  friend CostCounters operator-(CostCounters a, const CostCounters& b) {
    a.macs -= b.macs;
    a.cosines -= b.cosines;
    return a;
  }
  bool operator==(const CostCounters&) const = default;
};

/// Hardware-neutral operation accounting. Counts are attributed to the
/// current scope path ("phi/nfa/level2", ...).
///
/// Counting rules: matmul m·k·n, depthwise conv h·w·c·k², group mean one per
/// element read, cosine 3·dim (dot plus two norms), elementwise products and
/// softmax one per element, DFT four per complex multiply-accumulate.
class CostMeter {
 public:
  class Scope {
   public:
    explicit Scope(CostMeter* meter) : meter_(meter) {}
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    Scope(Scope&& o) noexcept : meter_(o.meter_) { o.meter_ = nullptr; }
    ~Scope() {
      if (meter_) meter_->pop();
    }

   private:
    CostMeter* meter_;
  };

  [[nodiscard]] Scope scope(std::string name);

  void add_macs(std::uint64_t n);
  void add_cosines(std::uint64_t count, std::uint64_t dim);

  std::string current_path() const;
  const std::map<std::string, CostCounters>& by_path() const { return counters_; }

  CostCounters total() const;
  /// Sum over paths whose first component is `head`.
  CostCounters top_level(std::string_view head) const;
  /// Sum over paths that contain `component` anywhere.
  CostCounters containing(std::string_view component) const;

  void merge(const CostMeter& other);
  void clear() { counters_.clear(); }

 private:
  void pop() { stack_.pop_back(); }

  std::vector<std::string> stack_;
  std::map<std::string, CostCounters> counters_;
};

}  // namespace dape
