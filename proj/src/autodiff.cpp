#include "dape/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "dape/errors.hpp"

namespace dape {

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), true, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  bool rg = false;
  for (const auto& v : inputs) {
    if (v.tape_ != this) throw ContractError("tape: op input recorded on a different tape");
    rg = rg || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), rg, false, rg ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("tape: gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                         shape_string(n.value.shape()));
  }
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw DimensionError("tape: backward root must be scalar, got " + shape_string(root.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  accumulate(root, Tensor(root.shape(), 1.0));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.value, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Tensor(n.value.shape());
  return n.grad;
}

namespace {

// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// aᵀ · b
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    auto ar = a.row(p);
    auto br = b.row(p);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Tensor elementwise(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  a.tape().cost().add_macs(a.value().rows() * a.value().cols() * b.value().cols());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, matmul_nt(g, b.value()));
    if (t.requires_grad(b)) t.accumulate(b, matmul_tn(a.value(), g));
  });
}

Var transpose(Var a) {
  return a.tape().record(transpose(a.value()), {a},
                         [a](Tape& t, const Tensor&, const Tensor& g) { t.accumulate(a, transpose(g)); });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = elementwise(a.value(), b.value(), [](double x, double y) { return x + y; });
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = elementwise(a.value(), b.value(), [](double x, double y) { return x - y; });
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(a, g);
    Tensor neg = g;
    for (auto& v : neg.storage()) v = -v;
    t.accumulate(b, neg);
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  a.tape().cost().add_macs(out.size());
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor&, const Tensor& g) {
    Tensor ga = g;
    for (auto& v : ga.storage()) v *= s;
    t.accumulate(a, ga);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = elementwise(a.value(), b.value(), [](double x, double y) { return x * y; });
  a.tape().cost().add_macs(out.size());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, elementwise(g, b.value(), [](double x, double y) { return x * y; }));
    if (t.requires_grad(b)) t.accumulate(b, elementwise(g, a.value(), [](double x, double y) { return x * y; }));
  });
}

Var mul_scalar(Var a, Var s) {
  if (s.value().size() != 1) throw DimensionError("mul_scalar: expected a 1-element scalar, got " + shape_string(s.shape()));
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= sv;
  a.tape().cost().add_macs(out.size());
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor&, const Tensor& g) {
    const double sv = s.value()[0];
    if (t.requires_grad(a)) {
      Tensor ga = g;
      for (auto& v : ga.storage()) v *= sv;
      t.accumulate(a, ga);
    }
    if (t.requires_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
      t.accumulate(s, Tensor(s.shape(), acc));
    }
  });
}

Var mask_mul(Var a, const Tensor& mask) {
  if (a.shape() != mask.shape()) {
    throw DimensionError("mask_mul: shape mismatch " + shape_string(a.shape()) + " vs mask " + shape_string(mask.shape()));
  }
  Tensor out = elementwise(a.value(), mask, [](double x, double y) { return x * y; });
  a.tape().cost().add_macs(out.size());
  return a.tape().record(std::move(out), {a}, [a, mask](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(a, elementwise(g, mask, [](double x, double y) { return x * y; }));
  });
}

Var add_row(Var a, Var bias) {
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bias.value()[j];
  return a.tape().record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(bias)) {
      Tensor gb(bias.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
      t.accumulate(bias, gb);
    }
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = std::max(v, 0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (a.value()[i] <= 0.0) ga[i] = 0.0;
    t.accumulate(a, ga);
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = std::exp(v);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& y, const Tensor& g) {
    t.accumulate(a, elementwise(g, y, [](double x, double z) { return x * z; }));
  });
}

namespace {

// dL/dx for y = softmax(x) row-wise: y ∘ (g − <g, y>).
Tensor softmax_backward(const Tensor& y, const Tensor& g) {
  Tensor gx(y.shape());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = g.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
    auto o = gx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - dot);
  }
  return gx;
}

}  // namespace

Var row_softmax(Var a) {
  a.tape().cost().add_macs(a.value().size());
  return a.tape().record(row_softmax(a.value()), {a}, [a](Tape& t, const Tensor& y, const Tensor& g) {
    t.accumulate(a, softmax_backward(y, g));
  });
}

Var masked_row_softmax(Var scores, const Tensor& mask) {
  const Tensor& s = scores.value();
  if (s.shape() != mask.shape()) {
    throw DimensionError("masked_row_softmax: scores " + shape_string(s.shape()) + " vs mask " +
                         shape_string(mask.shape()));
  }
  Tensor out(s.shape());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto sr = s.row(i);
    auto mr = mask.row(i);
    auto o = out.row(i);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < sr.size(); ++j)
      if (mr[j] > 0.0) mx = std::max(mx, sr[j] + std::log(mr[j]));
    if (mx == -INFINITY) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < sr.size(); ++j) {
      if (mr[j] > 0.0) {
        o[j] = std::exp(sr[j] + std::log(mr[j]) - mx);
        total += o[j];
      }
    }
    for (auto& v : o) v /= total;
  }
  scores.tape().cost().add_macs(s.size());
  return scores.tape().record(std::move(out), {scores}, [scores](Tape& t, const Tensor& y, const Tensor& g) {
    t.accumulate(scores, softmax_backward(y, g));
  });
}

Var log_softmax(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (auto v : r) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = r[j] - lse;
  }
  a.tape().cost().add_macs(x.size());
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& y, const Tensor& g) {
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = g.row(i);
      double gs = 0.0;
      for (auto v : gr) gs += v;
      auto o = gx.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) o[j] = gr[j] - std::exp(yr[j]) * gs;
    }
    t.accumulate(a, gx);
  });
}

Var group_mean(Var x, const IndexGroups& groups) {
  std::size_t reads = 0;
  for (const auto& g : groups) reads += g.size();
  x.tape().cost().add_macs(reads * x.value().cols());
  return x.tape().record(group_mean(x.value(), groups), {x}, [x, groups](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const double inv = 1.0 / static_cast<double>(groups[k].size());
      auto gr = g.row(k);
      for (auto r : groups[k]) {
        auto o = gx.row(r);
        for (std::size_t j = 0; j < gr.size(); ++j) o[j] += gr[j] * inv;
      }
    }
    t.accumulate(x, gx);
  });
}

Var gather_rows(Var x, const std::vector<std::size_t>& rows) {
  const Tensor& xv = x.value();
  Tensor out({rows.size(), xv.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_string(xv.shape()));
    }
    std::copy_n(xv.row(rows[i]).begin(), xv.cols(), out.row(i).begin());
  }
  return x.tape().record(std::move(out), {x}, [x, rows](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto o = gx.row(rows[i]);
      auto gr = g.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) o[j] += gr[j];
    }
    t.accumulate(x, gx);
  });
}

Var scatter_rows(Var base, const std::vector<std::size_t>& rows, Var values) {
  const Tensor& bv = base.value();
  const Tensor& vv = values.value();
  if (vv.rows() != rows.size() || vv.cols() != bv.cols()) {
    throw DimensionError("scatter_rows: values " + shape_string(vv.shape()) + " do not fit " +
                         std::to_string(rows.size()) + " rows of " + shape_string(bv.shape()));
  }
  Tensor out = bv;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= bv.rows()) throw IndexError("scatter_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(vv.row(i).begin(), bv.cols(), out.row(rows[i]).begin());
  }
  return base.tape().record(std::move(out), {base, values}, [base, values, rows](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(base)) {
      Tensor gb = g;
      for (auto r : rows) std::fill(gb.row(r).begin(), gb.row(r).end(), 0.0);
      t.accumulate(base, gb);
    }
    if (t.requires_grad(values)) {
      Tensor gv(values.shape());
      for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(g.row(rows[i]).begin(), g.cols(), gv.row(i).begin());
      t.accumulate(values, gv);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != n) throw DimensionError("concat_rows: width mismatch " + shape_string(p.shape()));
    m += p.value().rows();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<long>(off * n));
    off += p.value().rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts, n](Tape& t, const Tensor&, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t r = p.value().rows();
      if (t.requires_grad(p)) {
        Tensor gp({r, n});
        std::copy_n(g.data().begin() + static_cast<long>(off * n), r * n, gp.data().begin());
        t.accumulate(p, gp);
      }
      off += r;
    }
  });
}

Var slice_cols(Var x, std::size_t offset, std::size_t width) {
  const Tensor& xv = x.value();
  if (offset + width > xv.cols() || width == 0) {
    throw DimensionError("slice_cols: [" + std::to_string(offset) + ", " + std::to_string(offset + width) +
                         ") outside " + shape_string(xv.shape()));
  }
  Tensor out({xv.rows(), width});
  for (std::size_t i = 0; i < xv.rows(); ++i) std::copy_n(xv.row(i).begin() + static_cast<long>(offset), width, out.row(i).begin());
  return x.tape().record(std::move(out), {x}, [x, offset, width](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < g.rows(); ++i) std::copy_n(g.row(i).begin(), width, gx.row(i).begin() + static_cast<long>(offset));
    t.accumulate(x, gx);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != m) throw DimensionError("concat_cols: height mismatch " + shape_string(p.shape()));
    n += p.value().cols();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.value().row(i).begin(), w, out.row(i).begin() + static_cast<long>(off));
    off += w;
  }
  return parts.front().tape().record(std::move(out), parts, [parts, m](Tape& t, const Tensor&, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.value().cols();
      if (t.requires_grad(p)) {
        Tensor gp({m, w});
        for (std::size_t i = 0; i < m; ++i) std::copy_n(g.row(i).begin() + static_cast<long>(off), w, gp.row(i).begin());
        t.accumulate(p, gp);
      }
      off += w;
    }
  });
}

Var broadcast_rows(Var x, std::size_t m) {
  const Tensor& xv = x.value();
  if (xv.rows() != 1) throw DimensionError("broadcast_rows: expected 1×n, got " + shape_string(xv.shape()));
  Tensor out({m, xv.cols()});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data().begin(), xv.cols(), out.row(i).begin());
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx[j] += g.at(i, j);
    t.accumulate(x, gx);
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(x, g.reshaped(x.shape()));
  });
}

Var conv2d_local(Var x, std::size_t kernel_size, Var weights) {
  Tensor out = conv2d_local(x.value(), kernel_size, weights.value());
  const Tensor& xv = x.value();
  x.tape().cost().add_macs(xv.size() * kernel_size * kernel_size);
  return x.tape().record(std::move(out), {x, weights}, [x, weights, kernel_size](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = weights.value();
    const std::size_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    const auto r = static_cast<long>(kernel_size / 2);
    Tensor gx(xv.shape());
    Tensor gw(wv.shape());
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double* go = g.data().data() + (y * w + xx) * c;
        for (long dy = -r; dy <= r; ++dy) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (long dx = -r; dx <= r; ++dx) {
            const long sx = static_cast<long>(xx) + dx;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            const auto uy = static_cast<std::size_t>(sy), ux = static_cast<std::size_t>(sx);
            const auto ky = static_cast<std::size_t>(dy + r), kx = static_cast<std::size_t>(dx + r);
            for (std::size_t ch = 0; ch < c; ++ch) {
              gx.at(uy, ux, ch) += wv.at(ky, kx, ch) * go[ch];
              gw.at(ky, kx, ch) += xv.at(uy, ux, ch) * go[ch];
            }
          }
        }
      }
    }
    t.accumulate(x, gx);
    t.accumulate(weights, gw);
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (auto v : x.value().data()) acc += v;
  return x.tape().record(Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(x, Tensor(x.shape(), g[0]));
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  std::vector<std::size_t> all(xv.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return group_mean(x, IndexGroups{all});
}

Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  std::vector<double> norms(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double ss = 0.0;
    for (auto v : xv.row(i)) ss += v * v;
    norms[i] = std::sqrt(ss);
    if (norms[i] > 0.0)
      for (auto& v : out.row(i)) v /= norms[i];
  }
  x.tape().cost().add_macs(2 * xv.size());
  return x.tape().record(std::move(out), {x}, [x, norms](Tape& t, const Tensor& y, const Tensor& g) {
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      if (norms[i] == 0.0) continue;
      auto yr = y.row(i);
      auto gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto o = gx.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) o[j] = (gr[j] - yr[j] * dot) / norms[i];
    }
    t.accumulate(x, gx);
  });
}

Var pick(Var x, const std::vector<std::pair<std::size_t, std::size_t>>& at) {
  const Tensor& xv = x.value();
  Tensor out({1, at.size()});
  for (std::size_t k = 0; k < at.size(); ++k) {
    if (at[k].first >= xv.rows() || at[k].second >= xv.cols()) throw IndexError("pick: entry out of range");
    out[k] = xv.at(at[k].first, at[k].second);
  }
  return x.tape().record(std::move(out), {x}, [x, at](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t k = 0; k < at.size(); ++k) gx.at(at[k].first, at[k].second) += g[k];
    t.accumulate(x, gx);
  });
}

}  // namespace dape
