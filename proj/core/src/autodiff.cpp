#include "mmseq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mmseq/error.hpp"

namespace mmseq::nn {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.ptr();
  const double* s = src.ptr();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

}  // namespace

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(value.shape()), adam_m(value.shape()), adam_v(value.shape()) {}

void Parameter::zero_grad() { grad.fill(0.0); }

const Tensor& Var::value() const { return tape->value(id); }
const Shape& Var::shape() const { return tape->value(id).shape(); }

Tape::Tape() {
#ifndef NDEBUG
  check_finite_ = true;
#endif
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, recording_, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, recording_, {}, recording_ ? &p : nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward, const char* op) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  bool needs = false;
  if (recording_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw ValidationError(std::string(op) + ": operand from another tape");
      needs = needs || nodes_[p.id].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}, nullptr});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ValidationError("backward: root from another tape");
  if (nodes_[root.id].value.size() != 1) {
    throw ValidationError("backward: root must be a scalar, got " + shape_str(nodes_[root.id].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id).fill(1.0);
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) add_into(n.param->grad, n.grad);
  }
}

// --- matrix products -----------------------------------------------------

namespace {

struct MatDims {
  std::size_t batch, m, k, n;
};

MatDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b, const char* op) {
  const bool ok_rank = (a.size() == 2 && b.size() == 2) || (a.size() == 3 && b.size() == 3 && a[0] == b[0]);
  if (!ok_rank) throw ValidationError(std::string(op) + ": incompatible ranks " + shape_str(a) + " x " + shape_str(b));
  const std::size_t off = a.size() - 2;
  MatDims d{off ? a[0] : 1, a[off], a[off + 1], transpose_b ? b[off] : b[off + 1]};
  const std::size_t bk = transpose_b ? b[off + 1] : b[off];
  if (bk != d.k) throw ValidationError(std::string(op) + ": inner dimensions differ " + shape_str(a) + " x " + shape_str(b));
  return d;
}

Shape out_shape(const MatDims& d, std::size_t rank) {
  return rank == 3 ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
}

}  // namespace

Var matmul(Var a, Var b) {
  const MatDims d = matmul_dims(a.shape(), b.shape(), false, "matmul");
  Tensor out(out_shape(d, a.shape().size()));
  for (std::size_t s = 0; s < d.batch; ++s) {
    kernels::gemm_nn(d.m, d.k, d.n, a.value().ptr() + s * d.m * d.k, b.value().ptr() + s * d.k * d.n,
                     out.ptr() + s * d.m * d.n, false);
  }
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, d](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        if (t.requires_grad(a.id)) {
          double* ga = t.grad_buffer(a.id).ptr();
          for (std::size_t s = 0; s < d.batch; ++s) {
            kernels::gemm_nt(d.m, d.n, d.k, g + s * d.m * d.n, t.value(b.id).ptr() + s * d.k * d.n, ga + s * d.m * d.k,
                             true);
          }
        }
        if (t.requires_grad(b.id)) {
          double* gb = t.grad_buffer(b.id).ptr();
          for (std::size_t s = 0; s < d.batch; ++s) {
            kernels::gemm_tn(d.m, d.k, d.n, t.value(a.id).ptr() + s * d.m * d.k, g + s * d.m * d.n, gb + s * d.k * d.n,
                             true);
          }
        }
      },
      "matmul");
}

Var matmul_nt(Var a, Var b) {
  const MatDims d = matmul_dims(a.shape(), b.shape(), true, "matmul_nt");
  Tensor out(out_shape(d, a.shape().size()));
  for (std::size_t s = 0; s < d.batch; ++s) {
    kernels::gemm_nt(d.m, d.k, d.n, a.value().ptr() + s * d.m * d.k, b.value().ptr() + s * d.n * d.k,
                     out.ptr() + s * d.m * d.n, false);
  }
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, d](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        if (t.requires_grad(a.id)) {
          // dA = G B
          double* ga = t.grad_buffer(a.id).ptr();
          for (std::size_t s = 0; s < d.batch; ++s) {
            kernels::gemm_nn(d.m, d.n, d.k, g + s * d.m * d.n, t.value(b.id).ptr() + s * d.n * d.k, ga + s * d.m * d.k,
                             true);
          }
        }
        if (t.requires_grad(b.id)) {
          // dB = G^T A
          double* gb = t.grad_buffer(b.id).ptr();
          for (std::size_t s = 0; s < d.batch; ++s) {
            kernels::gemm_tn(d.m, d.n, d.k, g + s * d.m * d.n, t.value(a.id).ptr() + s * d.m * d.k, gb + s * d.n * d.k,
                             true);
          }
        }
      },
      "matmul_nt");
}

// --- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape& t, std::size_t self) {
        if (t.requires_grad(a.id)) add_into(t.grad_buffer(a.id), t.grad(self));
        if (t.requires_grad(b.id)) add_into(t.grad_buffer(b.id), t.grad(self));
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a.id)) add_into(t.grad_buffer(a.id), g);
        if (t.requires_grad(b.id)) {
          Tensor& gb = t.grad_buffer(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a.id)) {
          Tensor& ga = t.grad_buffer(a.id);
          const Tensor& bv = t.value(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b.id)) {
          Tensor& gb = t.grad_buffer(b.id);
          const Tensor& av = t.value(a.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var add_row(Var a, Var row) {
  require(row.shape().size() == 1 && !a.shape().empty() && a.shape().back() == row.shape()[0],
          "add_row: cannot broadcast " + shape_str(row.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t n = row.shape()[0];
  Tensor out = a.value();
  const double* r = row.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i % n];
  return a.tape->record(
      std::move(out), {a, row},
      [a, row, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a.id)) add_into(t.grad_buffer(a.id), g);
        if (t.requires_grad(row.id)) {
          double* gr = t.grad_buffer(row.id).ptr();
          for (std::size_t i = 0; i < g.size(); i += n) {
            for (std::size_t j = 0; j < n; ++j) gr[j] += g[i + j];
          }
        }
      },
      "add_row");
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->record(
      std::move(out), {a},
      [a, s](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
      },
      "scale");
}

namespace {

// Unary op whose derivative is a function of the output value (and input).
template <typename F, typename DF>
Var unary(Var a, F f, DF df, const char* op) {
  Tensor out = a.value();
  for (double& v : out.data()) v = f(v);
  return a.tape->record(
      std::move(out), {a},
      [a, df](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(a.id);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
      },
      op);
}

}  // namespace

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

// --- normalization ------------------------------------------------------------

Var softmax(Var a) {
  require(!a.shape().empty(), "softmax: scalar input");
  const std::size_t n = a.shape().back();
  Tensor out = a.value();
  double* y = out.ptr();
  for (std::size_t r = 0; r < out.size(); r += n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, y[r + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[r + j] = std::exp(y[r + j] - mx);
      z += y[r + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[r + j] /= z;
  }
  return a.tape->record(
      std::move(out), {a},
      [a, n](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        const double* yv = t.value(self).ptr();
        double* ga = t.grad_buffer(a.id).ptr();
        const std::size_t total = t.value(self).size();
        for (std::size_t r = 0; r < total; r += n) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[r + j] * yv[r + j];
          for (std::size_t j = 0; j < n; ++j) ga[r + j] += yv[r + j] * (g[r + j] - dot);
        }
      },
      "softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require(!x.shape().empty(), "layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  require(gain.shape() == Shape{n} && bias.shape() == Shape{n}, "layer_norm: gain/bias must have shape [" +
                                                                    std::to_string(n) + "]");
  const std::size_t rows = x.value().size() / n;
  Tensor out(x.shape());
  // Saved per row: normalized values and inverse std.
  auto xhat = std::make_shared<std::vector<double>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.value().ptr();
  const double* gv = gain.value().ptr();
  const double* bv = bias.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, n, rows, xhat, inv_std](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        const double* gv = t.value(gain.id).ptr();
        if (t.requires_grad(gain.id) || t.requires_grad(bias.id)) {
          double* gg = t.requires_grad(gain.id) ? t.grad_buffer(gain.id).ptr() : nullptr;
          double* gb = t.requires_grad(bias.id) ? t.grad_buffer(bias.id).ptr() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
              if (gb) gb[j] += g[r * n + j];
            }
          }
        }
        if (t.requires_grad(x.id)) {
          double* gx = t.grad_buffer(x.id).ptr();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            const double is = (*inv_std)[r];
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              gx[r * n + j] += is * (dh - m1 - (*xhat)[r * n + j] * m2);
            }
          }
        }
      },
      "layer_norm");
}

// --- lookup and loss -----------------------------------------------------------

Var embedding(Var table, std::span<const std::int32_t> ids) {
  require(table.shape().size() == 2, "embedding: table must be rank 2");
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValidationError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    std::copy_n(table.value().ptr() + ids[i] * d, d, out.ptr() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape->record(
      std::move(out), {table},
      [table, d, saved = std::move(saved)](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        double* gt = t.grad_buffer(table.id).ptr();
        for (std::size_t i = 0; i < saved.size(); ++i) {
          double* row = gt + static_cast<std::size_t>(saved[i]) * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
        }
      },
      "embedding");
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_id) {
  require(logits.shape().size() == 2 && logits.shape()[0] == targets.size(),
          "cross_entropy: logits " + shape_str(logits.shape()) + " do not match " + std::to_string(targets.size()) +
              " targets");
  const std::size_t rows = logits.shape()[0];
  const std::size_t v = logits.shape()[1];
  auto probs = std::make_shared<std::vector<double>>(rows * v, 0.0);
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  std::size_t count = 0;
  double total = 0.0;
  const double* x = logits.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t y = targets[r];
    if (y == ignore_id) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= v) {
      throw ValidationError("cross_entropy: target " + std::to_string(y) + " outside " + std::to_string(v) +
                            " classes");
    }
    const double* xr = x + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(xr[j] - mx);
      (*probs)[r * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] /= z;
    total += -(xr[y] - mx - std::log(z));
    ++count;
  }
  if (count == 0) throw ValidationError("cross_entropy: every target is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  return logits.tape->record(
      Tensor::scalar(total * inv), {logits},
      [logits, rows, v, inv, probs, saved = std::move(saved), ignore_id](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * inv;
        double* gl = t.grad_buffer(logits.id).ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          if (saved[r] == ignore_id) continue;
          for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += g * (*probs)[r * v + j];
          gl[r * v + static_cast<std::size_t>(saved[r])] -= g;
        }
      },
      "cross_entropy");
}

// --- shape ops -------------------------------------------------------------------

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts[0].shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.shape().size() == 2 && p.shape()[0] == rows, "concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].value().ptr();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * widths[k], widths[k], out.ptr() + r * total + off);
    off += widths[k];
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(
      std::move(out), parts,
      [saved, widths, rows, total](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        std::size_t off = 0;
        for (std::size_t k = 0; k < saved.size(); ++k) {
          if (t.requires_grad(saved[k].id)) {
            double* gp = t.grad_buffer(saved[k].id).ptr();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + off + j];
            }
          }
          off += widths[k];
        }
      },
      "concat_cols");
}

Var concat_cols(Var a, Var b) {
  const Var parts[2] = {a, b};
  return concat_cols(std::span<const Var>(parts));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  require(a.shape().size() == 2 && begin < end && end <= a.shape()[1],
          "slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.value().ptr() + r * cols + begin, w, out.ptr() + r * w);
  return a.tape->record(
      std::move(out), {a},
      [a, rows, cols, begin, w](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        double* ga = t.grad_buffer(a.id).ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) ga[r * cols + begin + j] += g[r * w + j];
        }
      },
      "slice_cols");
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  require(a.shape().size() == 2, "gather_rows: input must be rank 2");
  const std::size_t n = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < n, "gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(a.value().ptr() + rows[i] * cols, cols, out.ptr() + i * cols);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return a.tape->record(
      std::move(out), {a},
      [a, cols, saved = std::move(saved)](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        double* ga = t.grad_buffer(a.id).ptr();
        for (std::size_t i = 0; i < saved.size(); ++i) {
          for (std::size_t j = 0; j < cols; ++j) ga[saved[i] * cols + j] += g[i * cols + j];
        }
      },
      "gather_rows");
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(
      std::move(out), {a},
      [a](Tape& t, std::size_t self) { add_into(t.grad_buffer(a.id), t.grad(self)); }, "reshape");
}

namespace {

// Index permutation between [B*L, H*dk] and [B*H, L, dk].
template <typename F>
void for_each_head_index(std::size_t batch, std::size_t len, std::size_t heads, std::size_t dk, F f) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t flat = (b * len + l) * heads * dk + h * dk;
        const std::size_t split = ((b * heads + h) * len + l) * dk;
        f(flat, split);
      }
    }
  }
}

}  // namespace

Var split_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads) {
  require(x.shape().size() == 2 && x.shape()[0] == batch * len && heads > 0 && x.shape()[1] % heads == 0,
          "split_heads: shape " + shape_str(x.shape()) + " incompatible with batch/len/heads");
  const std::size_t dk = x.shape()[1] / heads;
  Tensor out({batch * heads, len, dk});
  const double* src = x.value().ptr();
  for_each_head_index(batch, len, heads, dk,
                      [&](std::size_t flat, std::size_t split) { std::copy_n(src + flat, dk, out.ptr() + split); });
  return x.tape->record(
      std::move(out), {x},
      [x, batch, len, heads, dk](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        double* gx = t.grad_buffer(x.id).ptr();
        for_each_head_index(batch, len, heads, dk, [&](std::size_t flat, std::size_t split) {
          for (std::size_t j = 0; j < dk; ++j) gx[flat + j] += g[split + j];
        });
      },
      "split_heads");
}

Var merge_heads(Var x, std::size_t batch, std::size_t heads) {
  require(x.shape().size() == 3 && heads > 0 && x.shape()[0] == batch * heads,
          "merge_heads: shape " + shape_str(x.shape()) + " incompatible with batch/heads");
  const std::size_t len = x.shape()[1];
  const std::size_t dk = x.shape()[2];
  Tensor out({batch * len, heads * dk});
  const double* src = x.value().ptr();
  for_each_head_index(batch, len, heads, dk,
                      [&](std::size_t flat, std::size_t split) { std::copy_n(src + split, dk, out.ptr() + flat); });
  return x.tape->record(
      std::move(out), {x},
      [x, batch, len, heads, dk](Tape& t, std::size_t self) {
        const double* g = t.grad(self).ptr();
        double* gx = t.grad_buffer(x.id).ptr();
        for_each_head_index(batch, len, heads, dk, [&](std::size_t flat, std::size_t split) {
          for (std::size_t j = 0; j < dk; ++j) gx[split + j] += g[flat + j];
        });
      },
      "merge_heads");
}

Var dropout(Var a, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (!a.tape->training() || rate == 0.0) return a;
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(a.value().size());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] *= (*mask)[i];
  }
  return a.tape->record(
      std::move(out), {a},
      [a, mask](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
      },
      "dropout");
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(
      Tensor::scalar(s), {a},
      [a](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (double& v : t.grad_buffer(a.id).data()) v += g;
      },
      "sum");
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

}  // namespace mmseq::nn
