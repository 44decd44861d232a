#include "dape/cost.hpp"

namespace dape {

namespace {

std::vector<std::string_view> split_path(std::string_view path) {
  std::vector<std::string_view> parts;
  while (!path.empty()) {
    const auto pos = path.find('/');
    parts.push_back(path.substr(0, pos));
    if (pos == std::string_view::npos) break;
    path.remove_prefix(pos + 1);
  }
  return parts;
}

}  // namespace

CostMeter::Scope CostMeter::scope(std::string name) {
  stack_.push_back(std::move(name));
  return Scope(this);
}

std::string CostMeter::current_path() const {
  std::string path;
  for (const auto& s : stack_) {
    if (!path.empty()) path += '/';
    path += s;
  }
  return path;
}

void CostMeter::add_macs(std::uint64_t n) {
  if (n) counters_[current_path()].macs += n;
}

void CostMeter::add_cosines(std::uint64_t count, std::uint64_t dim) {
  if (!count) return;
  auto& c = counters_[current_path()];
  c.cosines += count;
  c.macs += 3 * dim * count;
}

CostCounters CostMeter::total() const {
  CostCounters t;
  for (const auto& [_, c] : counters_) t += c;
  return t;
}

CostCounters CostMeter::top_level(std::string_view head) const {
  CostCounters t;
  for (const auto& [path, c] : counters_) {
    const auto parts = split_path(path);
    if (!parts.empty() && parts.front() == head) t += c;
  }
  return t;
}

CostCounters CostMeter::containing(std::string_view component) const {
  CostCounters t;
  for (const auto& [path, c] : counters_) {
    for (auto p : split_path(path)) {
      if (p == component) {
        t += c;
        break;
      }
    }
  }
  return t;
}

void CostMeter::merge(const CostMeter& other) {
  for (const auto& [path, c] : other.counters_) counters_[path] += c;
}

}  // namespace dape
