#pragma once

#include <any>
#include <cstddef>
#include <utility>
#include <vector>

#include "dape/errors.hpp"

namespace dape {

/// Sequence of the discrete choices a forward pass makes (binarized masks,
/// top-k selections, dense-row sets). Recording one pass and replaying it in
/// later passes holds those choices fixed, which is what makes finite
/// differences through thresholding well defined.
class DecisionLog {
 public:
  enum class Mode { kRecord, kReplay };

  explicit DecisionLog(Mode mode = Mode::kRecord) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) {
    mode_ = mode;
    cursor_ = 0;
  }
  std::size_t size() const { return items_.size(); }

  template <class T, class Fn>
  T decide(Fn&& compute) {
    if (mode_ == Mode::kReplay) {
      if (cursor_ >= items_.size()) throw ContractError("decision log exhausted during replay");
      const T* v = std::any_cast<T>(&items_[cursor_++]);
      if (!v) throw ContractError("decision log replay type mismatch");
      return *v;
    }
    T v = std::forward<Fn>(compute)();
    items_.emplace_back(v);
    return v;
  }

 private:
  Mode mode_;
  std::vector<std::any> items_;
  std::size_t cursor_ = 0;
};

/// Routes through `log` when present, otherwise computes directly.
template <class T, class Fn>
T decide(DecisionLog* log, Fn&& compute) {
  if (!log) return std::forward<Fn>(compute)();
  return log->decide<T>(std::forward<Fn>(compute));
}

}  // namespace dape
