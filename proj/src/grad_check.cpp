#include "dape/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dape/errors.hpp"
#include "dape/rng.hpp"

namespace dape {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p));
  const Var y = f(tape, vars);
  if (y.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
  return y.value()[0];
}

}  // namespace

std::vector<Tensor> tape_gradients(const ScalarFn& f, const std::vector<Tensor>& params, double* value) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p));
  const Var y = f(tape, vars);
  tape.backward(y);
  if (value) *value = y.value()[0];
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) {
    grads.push_back(tape.grad(v));
    if (!grads.back().all_finite()) throw NumericError("grad_check: non-finite tape gradient");
  }
  return grads;
}

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& opts) {
  const auto grads = tape_gradients(f, params);
  std::vector<Tensor> probe = params;
  Rng rng(opts.seed);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t n = params[p].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.samples_per_param && opts.samples_per_param < n) {
      for (std::size_t i = 0; i < opts.samples_per_param; ++i) {
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      }
      coords.resize(opts.samples_per_param);
    }
    for (auto c : coords) {
      const double orig = params[p][c];
      probe[p][c] = orig + opts.epsilon;
      const double up = evaluate(f, probe);
      probe[p][c] = orig - opts.epsilon;
      const double down = evaluate(f, probe);
      probe[p][c] = orig;
      const double fd = (up - down) / (2.0 * opts.epsilon);
      const double g = grads[p][c];
      if (!std::isfinite(fd)) throw NumericError("grad_check: non-finite finite-difference estimate");
      const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace dape
