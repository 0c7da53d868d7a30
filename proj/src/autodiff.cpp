#include "rgflow/autodiff.hpp"

#include <cmath>
#include <string>

#include "rgflow/errors.hpp"
#include "rgflow/kernels.hpp"

namespace rgflow::ad {

namespace {

#ifdef NDEBUG
bool g_check_finite = false;
#else
bool g_check_finite = true;
#endif

using kernels::Trans;

Tensor as_rank2(Tensor t) {
  if (t.rank() == 2) return t;
  return t.reshaped({t.rows(), t.cols()});
}

Tensor& grad_of(Node& n) {
  if (n.grad.empty() && n.value.size() != 0) n.grad = Tensor(n.value.shape());
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

bool wants(const std::shared_ptr<Node>& n) { return n->tape != nullptr; }

bool is_scalar(const Tensor& t) { return t.size() == 1; }

void need_rank2(const Var& a, const char* op) {
  if (!a.valid()) throw ShapeError(std::string(op) + ": empty Var");
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                     shape_string(a.shape()));
  }
}

void shape_mismatch(const char* op, const Var& a, const Var& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

// Sum of all elements of g into a 1x1 gradient.
void accumulate_reduced(Node& parent, const Tensor& g, double factor = 1.0) {
  double s = 0.0;
  for (double v : g.data()) s += v;
  grad_of(parent)[0] += factor * s;
}

}  // namespace

void set_check_finite(bool on) { g_check_finite = on; }
bool check_finite() { return g_check_finite; }

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = as_rank2(std::move(value));
  return Var(std::move(n));
}

Var Tape::variable(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = as_rank2(std::move(value));
  n->tape = this;
  n->leaf = true;
  n->index = nodes_.size();
  nodes_.push_back(n);
  return Var(std::move(n));
}

Var make_result(Tensor value, std::vector<Var> parents,
                std::function<void(Node&)> backward) {
  if (g_check_finite) require_finite(value, "autodiff op result");
  Tape* tape = nullptr;
  for (const auto& p : parents) {
    if (!p.requires_grad()) continue;
    if (tape && p.tape() != tape) {
      throw ShapeError("autodiff: operands recorded on different tapes");
    }
    tape = p.tape();
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (tape) {
    n->tape = tape;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward = std::move(backward);
    n->index = tape->nodes_.size();
    tape->nodes_.push_back(n);
  }
  return Var(std::move(n));
}

std::vector<Tensor> Tape::gradient(const Var& output,
                                   std::span<const Var> inputs) {
  if (!output.valid() || output.tape() != this) {
    throw ShapeError("gradient: output was not recorded on this tape");
  }
  if (output.value().size() != 1) {
    throw ShapeError("gradient: output must be a scalar, got shape " +
                     shape_string(output.shape()));
  }
  for (const auto& in : inputs) {
    if (!in.valid() || in.tape() != this || !in.node()->leaf) {
      throw ShapeError("gradient: input is not a variable on this tape");
    }
  }
  for (auto& n : nodes_) n->grad = Tensor();
  Node& out = *output.node();
  grad_of(out)[0] = 1.0;
  // Strict reverse execution order, each node once.
  for (std::size_t i = out.index + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
  std::vector<Tensor> grads;
  grads.reserve(inputs.size());
  for (const auto& in : inputs) {
    const Node& n = *in.node();
    grads.push_back(n.grad.empty() ? Tensor(n.value.shape()) : n.grad);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Element-wise

namespace {

enum class Bcast { None, Left, Right };

Bcast broadcast_kind(const char* op, const Var& a, const Var& b) {
  need_rank2(a, op);
  need_rank2(b, op);
  if (a.shape() == b.shape()) return Bcast::None;
  if (is_scalar(b.value())) return Bcast::Right;
  if (is_scalar(a.value())) return Bcast::Left;
  shape_mismatch(op, a, b);
  return Bcast::None;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const Bcast bc = broadcast_kind("add", a, b);
  const Tensor& big = bc == Bcast::Left ? b.value() : a.value();
  Tensor out(big.shape());
  auto o = out.data();
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = av[bc == Bcast::Left ? 0 : i] + bv[bc == Bcast::Right ? 0 : i];
  }
  return make_result(std::move(out), {a, b}, [bc](Node& self) {
    const Tensor& g = self.grad;
    for (int side = 0; side < 2; ++side) {
      auto& p = self.parents[side];
      if (!wants(p)) continue;
      const bool reduced = (side == 0 && bc == Bcast::Left) ||
                           (side == 1 && bc == Bcast::Right);
      if (reduced) {
        accumulate_reduced(*p, g);
      } else {
        auto pg = grad_of(*p).data();
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

Var mul(const Var& a, const Var& b) {
  const Bcast bc = broadcast_kind("mul", a, b);
  const Tensor& big = bc == Bcast::Left ? b.value() : a.value();
  Tensor out(big.shape());
  auto o = out.data();
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = av[bc == Bcast::Left ? 0 : i] * bv[bc == Bcast::Right ? 0 : i];
  }
  return make_result(std::move(out), {a, b}, [bc](Node& self) {
    const Tensor& g = self.grad;
    const auto av = self.parents[0]->value.data();
    const auto bv = self.parents[1]->value.data();
    const std::size_t n = g.size();
    if (wants(self.parents[0])) {
      Node& p = *self.parents[0];
      if (bc == Bcast::Left) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * bv[i];
        grad_of(p)[0] += s;
      } else {
        auto pg = grad_of(p).data();
        for (std::size_t i = 0; i < n; ++i)
          pg[i] += g[i] * bv[bc == Bcast::Right ? 0 : i];
      }
    }
    if (wants(self.parents[1])) {
      Node& p = *self.parents[1];
      if (bc == Bcast::Right) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * av[i];
        grad_of(p)[0] += s;
      } else {
        auto pg = grad_of(p).data();
        for (std::size_t i = 0; i < n; ++i)
          pg[i] += g[i] * av[bc == Bcast::Left ? 0 : i];
      }
    }
  });
}

Var scale(const Var& a, double c) {
  need_rank2(a, "scale");
  Tensor out(a.shape());
  const auto in = a.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = c * in[i];
  return make_result(std::move(out), {a}, [c](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += c * self.grad[i];
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_scalar(const Var& a, double c) {
  need_rank2(a, "add_scalar");
  Tensor out(a.shape());
  const auto in = a.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + c;
  return make_result(std::move(out), {a}, [](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
  });
}

Var square(const Var& a) {
  need_rank2(a, "square");
  Tensor out(a.shape());
  const auto in = a.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto x = self.parents[0]->value.data();
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += 2.0 * x[i] * self.grad[i];
  });
}

Var tanh(const Var& a) {
  need_rank2(a, "tanh");
  Tensor out(a.shape());
  kernels::tanh(a.value().data(), out.data());
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto y = self.value.data();
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i)
      pg[i] += (1.0 - y[i] * y[i]) * self.grad[i];
  });
}

Var sigmoid(const Var& a) {
  need_rank2(a, "sigmoid");
  Tensor out(a.shape());
  kernels::sigmoid(a.value().data(), out.data());
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto y = self.value.data();
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i)
      pg[i] += y[i] * (1.0 - y[i]) * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  need_rank2(a, "matmul");
  need_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_mismatch("matmul", a, b);
  Tensor out({m, n});
  kernels::gemm(Trans::No, Trans::No, m, n, k, a.value().data(),
                b.value().data(), out.data());
  return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(self.parents[0])) {  // dA = G B^T
      kernels::gemm(Trans::No, Trans::Yes, m, k, n, self.grad.data(),
                    pb.value.data(), grad_of(pa).data(), true);
    }
    if (wants(self.parents[1])) {  // dB = A^T G
      kernels::gemm(Trans::Yes, Trans::No, k, n, m, pa.value.data(),
                    self.grad.data(), grad_of(pb).data(), true);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  need_rank2(a, "matmul_nt");
  need_rank2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) shape_mismatch("matmul_nt", a, b);
  Tensor out({m, n});
  kernels::gemm(Trans::No, Trans::Yes, m, n, k, a.value().data(),
                b.value().data(), out.data());
  return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(self.parents[0])) {  // dA = G B
      kernels::gemm(Trans::No, Trans::No, m, k, n, self.grad.data(),
                    pb.value.data(), grad_of(pa).data(), true);
    }
    if (wants(self.parents[1])) {  // dB = G^T A
      kernels::gemm(Trans::Yes, Trans::No, n, k, m, self.grad.data(),
                    pa.value.data(), grad_of(pb).data(), true);
    }
  });
}

Var transpose(const Var& a) {
  need_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return make_result(std::move(out), {a}, [r, c](Node& self) {
    Tensor& pg = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pg.at(i, j) += self.grad.at(j, i);
  });
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  Tensor out = a.value().reshaped({rows, cols});
  return make_result(std::move(out), {a}, [](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Broadcasting and reshaping

Var mul_row(const Var& a, const Var& r) {
  need_rank2(a, "mul_row");
  need_rank2(r, "mul_row");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (r.rows() != 1 || r.cols() != cols) shape_mismatch("mul_row", a, r);
  Tensor out(a.shape());
  kernels::mul_rows(a.value().data(), r.value().data(), rows, cols, out.data());
  return make_result(std::move(out), {a, r}, [rows, cols](Node& self) {
    const Tensor& g = self.grad;
    if (wants(self.parents[0])) {
      const auto rv = self.parents[1]->value.data();
      auto pg = grad_of(*self.parents[0]).data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          pg[i * cols + j] += g[i * cols + j] * rv[j];
    }
    if (wants(self.parents[1])) {
      const auto av = self.parents[0]->value.data();
      auto rg = grad_of(*self.parents[1]).data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          rg[j] += g[i * cols + j] * av[i * cols + j];
    }
  });
}

Var add_row(const Var& a, const Var& r) {
  need_rank2(a, "add_row");
  need_rank2(r, "add_row");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (r.rows() != 1 || r.cols() != cols) shape_mismatch("add_row", a, r);
  Tensor out(a.shape());
  const auto av = a.value().data();
  const auto rv = r.value().data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = av[i * cols + j] + rv[j];
  return make_result(std::move(out), {a, r}, [rows, cols](Node& self) {
    const Tensor& g = self.grad;
    if (wants(self.parents[0])) {
      auto pg = grad_of(*self.parents[0]).data();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
    }
    if (wants(self.parents[1])) {
      auto rg = grad_of(*self.parents[1]).data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) rg[j] += g[i * cols + j];
    }
  });
}

Var broadcast_rows(const Var& r, std::size_t rows) {
  need_rank2(r, "broadcast_rows");
  if (r.rows() != 1) {
    throw ShapeError("broadcast_rows: expected a single row, got " +
                     shape_string(r.shape()));
  }
  return tile_rows(r, rows);
}

Var tile_rows(const Var& a, std::size_t times) {
  need_rank2(a, "tile_rows");
  const std::size_t block = a.value().size();
  Tensor out({a.rows() * times, a.cols()});
  const auto av = a.value().data();
  for (std::size_t t = 0; t < times; ++t)
    std::copy(av.begin(), av.end(), out.data().begin() + t * block);
  return make_result(std::move(out), {a}, [times, block](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < block; ++i) pg[i] += self.grad[t * block + i];
  });
}

Var repeat_rows(const Var& a, std::size_t times) {
  need_rank2(a, "repeat_rows");
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor out({rows * times, cols});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t t = 0; t < times; ++t)
      std::copy(av.begin() + i * cols, av.begin() + (i + 1) * cols,
                out.data().begin() + (i * times + t) * cols);
  return make_result(std::move(out), {a}, [rows, cols, times](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t j = 0; j < cols; ++j)
          pg[i * cols + j] += self.grad[(i * times + t) * cols + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions and selections

Var sum(const Var& a) {
  need_rank2(a, "sum");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& self) {
    const double g = self.grad[0];
    auto pg = grad_of(*self.parents[0]).data();
    for (auto& v : pg) v += g;
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  need_rank2(a, "row_sum");
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor out({rows, 1});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += av[i * cols + j];
    out[i] = s;
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) pg[i * cols + j] += self.grad[i];
  });
}

Var col(const Var& a, std::size_t j) {
  need_rank2(a, "col");
  if (j >= a.cols()) throw ShapeError("col: index out of range");
  const std::size_t idx[1] = {j};
  return gather_cols(a, idx);
}

Var row(const Var& a, std::size_t i) {
  need_rank2(a, "row");
  if (i >= a.rows()) throw ShapeError("row: index out of range");
  return slice_rows(a, i, i + 1);
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  need_rank2(a, "slice_rows");
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: range out of bounds for " +
                     shape_string(a.shape()));
  }
  const std::size_t cols = a.cols();
  Tensor out({end - begin, cols});
  const auto av = a.value().data();
  std::copy(av.begin() + begin * cols, av.begin() + end * cols,
            out.data().begin());
  return make_result(std::move(out), {a}, [begin, cols](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pg[begin * cols + i] += self.grad[i];
  });
}

Var gather_cols(const Var& a, std::span<const std::size_t> idx) {
  need_rank2(a, "gather_cols");
  const std::size_t rows = a.rows(), cols = a.cols(), k = idx.size();
  for (auto j : idx) {
    if (j >= cols) throw ShapeError("gather_cols: index out of range");
  }
  std::vector<std::size_t> index(idx.begin(), idx.end());
  Tensor out({rows, k});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < k; ++c) out[i * k + c] = av[i * cols + index[c]];
  return make_result(std::move(out), {a},
                     [rows, cols, k, index = std::move(index)](Node& self) {
                       auto pg = grad_of(*self.parents[0]).data();
                       for (std::size_t i = 0; i < rows; ++i)
                         for (std::size_t c = 0; c < k; ++c)
                           pg[i * cols + index[c]] += self.grad[i * k + c];
                     });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    need_rank2(p, "concat_cols");
    if (p.rows() != rows) shape_mismatch("concat_cols", parts.front(), p);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].value().data();
    const std::size_t w = widths[p];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * total + offset + j] = pv[i * w + j];
    offset += w;
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_result(
      std::move(out), std::move(parents),
      [rows, total, widths = std::move(widths)](Node& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          const std::size_t w = widths[p];
          if (wants(self.parents[p])) {
            auto pg = grad_of(*self.parents[p]).data();
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < w; ++j)
                pg[i * w + j] += self.grad[i * total + off + j];
          }
          off += w;
        }
      });
}

Var stacked_trace(const Var& t, std::size_t batch) {
  need_rank2(t, "stacked_trace");
  const std::size_t d = t.cols();
  if (t.rows() != d * batch) {
    throw ShapeError("stacked_trace: expected " + std::to_string(d * batch) +
                     " rows, got " + shape_string(t.shape()));
  }
  Tensor out({batch, 1});
  const auto tv = t.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += tv[(j * batch + b) * d + j];
    out[b] = s;
  }
  return make_result(std::move(out), {t}, [batch, d](Node& self) {
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < d; ++j)
        pg[(j * batch + b) * d + j] += self.grad[b];
  });
}

Var stacked_sqnorm(const Var& t, std::size_t batch) {
  need_rank2(t, "stacked_sqnorm");
  const std::size_t cols = t.cols();
  if (batch == 0 || t.rows() % batch != 0) {
    throw ShapeError("stacked_sqnorm: rows not a multiple of batch");
  }
  const std::size_t blocks = t.rows() / batch;
  Tensor out({batch, 1});
  const auto tv = t.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < blocks; ++j) {
      const double* r = tv.data() + (j * batch + b) * cols;
      for (std::size_t c = 0; c < cols; ++c) s += r[c] * r[c];
    }
    out[b] = s;
  }
  return make_result(std::move(out), {t}, [batch, blocks, cols](Node& self) {
    const auto tv = self.parents[0]->value.data();
    auto pg = grad_of(*self.parents[0]).data();
    for (std::size_t b = 0; b < batch; ++b) {
      const double g = 2.0 * self.grad[b];
      for (std::size_t j = 0; j < blocks; ++j) {
        const std::size_t base = (j * batch + b) * cols;
        for (std::size_t c = 0; c < cols; ++c) pg[base + c] += g * tv[base + c];
      }
    }
  });
}

}  // namespace rgflow::ad
