#include "jemha/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "jemha/rng.hpp"

namespace jemha {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// Marks the output and records the backward closure when a tape is live.
void maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& out, std::function<void(Tape&)> backward) {
  Tape* tape = Tape::current();
  if (!tape) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  tape->record({op, std::move(inputs), out, std::move(backward)});
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double s) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

// C += A·B with A m×k, B k×n. i-k-j loop order keeps the inner loop
// contiguous in both B and C; this is the only hot kernel in the project.
void mm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose_vals(const std::vector<double>& a, int r, int c) {
  std::vector<double> t(a.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) t[static_cast<std::size_t>(j) * r + i] = a[static_cast<std::size_t>(i) * c + j];
  return t;
}

int last_dim(const Tensor& a) { return a.ndim() == 2 ? a.cols() : static_cast<int>(a.numel()); }
int row_count(const Tensor& a) { return a.ndim() == 2 ? a.rows() : 1; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  Tensor out(a.shape(), std::move(v));
  maybe_record("add", {a, b}, out, [a, b, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (a.requires_grad()) axpy(t.grad_buffer(a.data(), a.numel()), *go, 1.0);
    if (b.requires_grad()) axpy(t.grad_buffer(b.data(), b.numel()), *go, 1.0);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  Tensor out(a.shape(), std::move(v));
  maybe_record("sub", {a, b}, out, [a, b, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (a.requires_grad()) axpy(t.grad_buffer(a.data(), a.numel()), *go, 1.0);
    if (b.requires_grad()) axpy(t.grad_buffer(b.data(), b.numel()), *go, -1.0);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  Tensor out(a.shape(), std::move(v));
  maybe_record("mul", {a, b}, out, [a, b, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (a.requires_grad()) {
      auto& ga = t.grad_buffer(a.data(), a.numel());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto& gb = t.grad_buffer(b.data(), b.numel());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*go)[i] * a.values()[i];
    }
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / b.values()[i];
  Tensor out(a.shape(), std::move(v));
  maybe_record("div", {a, b}, out, [a, b, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (a.requires_grad()) {
      auto& ga = t.grad_buffer(a.data(), a.numel());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] / b.values()[i];
    }
    if (b.requires_grad()) {
      auto& gb = t.grad_buffer(b.data(), b.numel());
      for (std::size_t i = 0; i < gb.size(); ++i) {
        const double bv = b.values()[i];
        gb[i] -= (*go)[i] * a.values()[i] / (bv * bv);
      }
    }
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  Tensor out(a.shape(), std::move(v));
  maybe_record("add_scalar", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    axpy(t.grad_buffer(a.data(), a.numel()), *go, 1.0);
  });
  return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  Tensor out(a.shape(), std::move(v));
  maybe_record("mul_scalar", {a}, out, [a, out, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    axpy(t.grad_buffer(a.data(), a.numel()), *go, c);
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
  mm_accum(a.values().data(), b.values().data(), v.data(), m, k, n);
  Tensor out({m, n}, std::move(v));
  maybe_record("matmul", {a, b}, out, [a, b, out, m, k, n](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    // dA = dC·Bᵀ and dB = Aᵀ·dC, each fed to the fast kernel after an
    // explicit transpose (the dot-product loop order is ~5x slower).
    if (a.requires_grad()) {
      auto bt = transpose_vals(b.values(), k, n);
      mm_accum(go->data(), bt.data(), t.grad_buffer(a.data(), a.numel()).data(), m, n, k);
    }
    if (b.requires_grad()) {
      auto at = transpose_vals(a.values(), m, k);
      mm_accum(at.data(), go->data(), t.grad_buffer(b.data(), b.numel()).data(), k, m, n);
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: tensor is not 2-d, shape " + shape_str(a.shape()));
  const int r = a.rows(), c = a.cols();
  Tensor out({c, r}, transpose_vals(a.values(), r, c));
  maybe_record("transpose", {a}, out, [a, out, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(i) * c + j] += (*go)[static_cast<std::size_t>(j) * r + i];
  });
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  Tensor out(std::move(shape), a.values());
  if (out.numel() != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(out.shape()));
  }
  maybe_record("reshape", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    axpy(t.grad_buffer(a.data(), a.numel()), *go, 1.0);
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis " + std::to_string(axis));
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw std::invalid_argument("concat: mixed ranks");
    for (int d = 0; d < nd; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                    shape_str(p.shape()));
      }
    }
  }

  std::vector<int> shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) total += p.dim(axis);
  shape[static_cast<std::size_t>(axis)] = total;

  Tensor out = Tensor::zeros(shape);
  if (nd == 1 || axis == 0) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(off));
      off += p.numel();
    }
  } else {  // axis == 1
    const int rows = shape[0];
    int col_off = 0;
    for (const auto& p : parts) {
      const int pc = p.cols();
      for (int i = 0; i < rows; ++i) {
        std::copy(p.values().begin() + static_cast<std::ptrdiff_t>(i) * pc,
                  p.values().begin() + static_cast<std::ptrdiff_t>(i + 1) * pc,
                  out.values().begin() + static_cast<std::ptrdiff_t>(i) * total + col_off);
      }
      col_off += pc;
    }
  }

  maybe_record("concat", parts, out, [parts, out, axis, nd, total](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (nd == 1 || axis == 0) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = t.grad_buffer(p.data(), p.numel());
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += (*go)[off + i];
        }
        off += p.numel();
      }
    } else {
      const int rows = out.rows();
      int col_off = 0;
      for (const auto& p : parts) {
        const int pc = p.cols();
        if (p.requires_grad()) {
          auto& gp = t.grad_buffer(p.data(), p.numel());
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < pc; ++j)
              gp[static_cast<std::size_t>(i) * pc + j] += (*go)[static_cast<std::size_t>(i) * total + col_off + j];
        }
        col_off += pc;
      }
    }
  });
  return out;
}

Tensor slice(const Tensor& a, int lo, int hi) {
  if (a.ndim() != 1) throw std::invalid_argument("slice: tensor is not 1-d, shape " + shape_str(a.shape()));
  const int n = static_cast<int>(a.numel());
  if (lo < 0 || hi > n || lo >= hi) {
    throw std::invalid_argument("slice: bad range [" + std::to_string(lo) + "," + std::to_string(hi) + ") of " +
                                std::to_string(n));
  }
  std::vector<double> v(a.values().begin() + lo, a.values().begin() + hi);
  Tensor out({hi - lo}, std::move(v));
  maybe_record("slice", {a}, out, [a, out, lo](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < go->size(); ++i) ga[static_cast<std::size_t>(lo) + i] += (*go)[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, int lo, int hi) {
  if (a.ndim() != 2) throw std::invalid_argument("slice_cols: tensor is not 2-d, shape " + shape_str(a.shape()));
  const int r = a.rows(), c = a.cols();
  if (lo < 0 || hi > c || lo >= hi) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(lo) + "," + std::to_string(hi) + ") of " +
                                std::to_string(c));
  }
  const int w = hi - lo;
  std::vector<double> v(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) v[static_cast<std::size_t>(i) * w + j] = a.at(i, lo + j);
  Tensor out({r, w}, std::move(v));
  maybe_record("slice_cols", {a}, out, [a, out, lo, r, c, w](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        ga[static_cast<std::size_t>(i) * c + lo + j] += (*go)[static_cast<std::size_t>(i) * w + j];
  });
  return out;
}

Tensor row_select(const Tensor& a, int row) {
  if (a.ndim() != 2) throw std::invalid_argument("row_select: tensor is not 2-d, shape " + shape_str(a.shape()));
  if (row < 0 || row >= a.rows()) {
    throw std::invalid_argument("row_select: row " + std::to_string(row) + " out of " + std::to_string(a.rows()));
  }
  const int c = a.cols();
  std::vector<double> v(a.values().begin() + static_cast<std::ptrdiff_t>(row) * c,
                        a.values().begin() + static_cast<std::ptrdiff_t>(row + 1) * c);
  Tensor out({c}, std::move(v));
  maybe_record("row_select", {a}, out, [a, out, row, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(row) * c + j] += (*go)[static_cast<std::size_t>(j)];
  });
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_lookup: table is not 2-d");
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id list");
  const int v_count = table.rows(), e = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v_count) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) + " out of vocab " +
                                  std::to_string(v_count));
    }
  }
  const int n = static_cast<int>(ids.size());
  std::vector<double> v(static_cast<std::size_t>(n) * e);
  for (int i = 0; i < n; ++i) {
    const double* src = table.values().data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * e;
    std::copy(src, src + e, v.begin() + static_cast<std::ptrdiff_t>(i) * e);
  }
  Tensor out({n, e}, std::move(v));
  maybe_record("embedding_lookup", {table}, out, [table, out, ids, e](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& gt = t.grad_buffer(table.data(), table.numel());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t dst = static_cast<std::size_t>(ids[i]) * e;
      for (int j = 0; j < e; ++j) gt[dst + j] += (*go)[i * e + j];
    }
  });
  return out;
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& ids) {
  if (a.ndim() != 2) throw std::invalid_argument("gather_cols: tensor is not 2-d");
  if (static_cast<int>(ids.size()) != a.rows()) {
    throw std::invalid_argument("gather_cols: " + std::to_string(ids.size()) + " ids for " + std::to_string(a.rows()) +
                                " rows");
  }
  const int c = a.cols();
  std::vector<double> v(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= c) {
      throw std::invalid_argument("gather_cols: col " + std::to_string(ids[i]) + " out of " + std::to_string(c));
    }
    v[i] = a.at(static_cast<int>(i), ids[i]);
  }
  Tensor out({static_cast<int>(ids.size())}, std::move(v));
  maybe_record("gather_cols", {a}, out, [a, out, ids, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < ids.size(); ++i) ga[i * c + static_cast<std::size_t>(ids[i])] += (*go)[i];
  });
  return out;
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  Tensor out(a.shape(), std::move(v));
  maybe_record("relu", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += a.values()[i] > 0.0 ? (*go)[i] : 0.0;
  });
  return out;
}

Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.values()[i]);
  Tensor out(a.shape(), std::move(v));
  maybe_record("tanh", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double y = out.values()[i];
      ga[i] += (*go)[i] * (1.0 - y * y);
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.values()[i];
    v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor out(a.shape(), std::move(v));
  maybe_record("sigmoid", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double y = out.values()[i];
      ga[i] += (*go)[i] * y * (1.0 - y);
    }
  });
  return out;
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (a.values()[i] < 0.0) throw std::domain_error("sqrt: negative input");
    v[i] = std::sqrt(a.values()[i]);
  }
  Tensor out(a.shape(), std::move(v));
  maybe_record("sqrt", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * 0.5 / out.values()[i];
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor out = Tensor::scalar(s);
  maybe_record("sum_all", {a}, out, [a, out](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (auto& g : ga) g += (*go)[0];
  });
  return out;
}

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(s * inv);
  maybe_record("mean_all", {a}, out, [a, out, inv](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (auto& g : ga) g += (*go)[0] * inv;
  });
  return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.cols()) {
    throw std::invalid_argument("add_rowwise: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  }
  const int r = x.rows(), c = x.cols();
  std::vector<double> v(x.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] = x.at(i, j) + b.at(j);
  Tensor out({r, c}, std::move(v));
  maybe_record("add_rowwise", {x, b}, out, [x, b, out, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (x.requires_grad()) axpy(t.grad_buffer(x.data(), x.numel()), *go, 1.0);
    if (b.requires_grad()) {
      auto& gb = t.grad_buffer(b.data(), b.numel());
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += (*go)[static_cast<std::size_t>(i) * c + j];
    }
  });
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.ndim() != 2 || s.ndim() != 1 || s.dim(0) != x.rows()) {
    throw std::invalid_argument("scale_rows: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  }
  const int r = x.rows(), c = x.cols();
  std::vector<double> v(x.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] = x.at(i, j) * s.at(i);
  Tensor out({r, c}, std::move(v));
  maybe_record("scale_rows", {x, s}, out, [x, s, out, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    if (x.requires_grad()) {
      auto& gx = t.grad_buffer(x.data(), x.numel());
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx[static_cast<std::size_t>(i) * c + j] += (*go)[static_cast<std::size_t>(i) * c + j] * s.at(i);
    }
    if (s.requires_grad()) {
      auto& gs = t.grad_buffer(s.data(), s.numel());
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += (*go)[static_cast<std::size_t>(i) * c + j] * x.at(i, j);
        gs[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
  return out;
}

namespace {

void check_finite(const char* op, const Tensor& a) {
  for (double x : a.values()) {
    if (!std::isfinite(x)) throw std::domain_error(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  if (a.ndim() > 2) throw std::invalid_argument("softmax: rank > 2");
  check_finite("softmax", a);
  const int r = row_count(a), c = last_dim(a);
  std::vector<double> v(a.numel());
  for (int i = 0; i < r; ++i) {
    const double* row = a.values().data() + static_cast<std::size_t>(i) * c;
    double* orow = v.data() + static_cast<std::size_t>(i) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += (orow[j] = std::exp(row[j] - m));
    for (int j = 0; j < c; ++j) orow[j] /= s;
  }
  Tensor out(a.shape(), std::move(v));
  maybe_record("softmax", {a}, out, [a, out, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int i = 0; i < r; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * c;
      double dotp = 0.0;
      for (int j = 0; j < c; ++j) dotp += (*go)[off + j] * out.values()[off + j];
      for (int j = 0; j < c; ++j) ga[off + j] += out.values()[off + j] * ((*go)[off + j] - dotp);
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& a) {
  if (a.ndim() > 2) throw std::invalid_argument("log_softmax: rank > 2");
  check_finite("log_softmax", a);
  const int r = row_count(a), c = last_dim(a);
  std::vector<double> v(a.numel());
  for (int i = 0; i < r; ++i) {
    const double* row = a.values().data() + static_cast<std::size_t>(i) * c;
    double* orow = v.data() + static_cast<std::size_t>(i) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
  }
  Tensor out(a.shape(), std::move(v));
  maybe_record("log_softmax", {a}, out, [a, out, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int i = 0; i < r; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * c;
      double gsum = 0.0;
      for (int j = 0; j < c; ++j) gsum += (*go)[off + j];
      for (int j = 0; j < c; ++j) ga[off + j] += (*go)[off + j] - std::exp(out.values()[off + j]) * gsum;
    }
  });
  return out;
}

Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& keep) {
  if (a.ndim() > 2) throw std::invalid_argument("masked_softmax: rank > 2");
  check_finite("masked_softmax", a);
  const int r = row_count(a), c = last_dim(a);
  if (static_cast<int>(keep.size()) != c) {
    throw std::invalid_argument("masked_softmax: mask length " + std::to_string(keep.size()) + " vs " +
                                std::to_string(c) + " columns");
  }
  bool any = false;
  for (auto k : keep) any = any || k;
  if (!any) throw std::invalid_argument("masked_softmax: every position masked");
  std::vector<double> v(a.numel(), 0.0);
  for (int i = 0; i < r; ++i) {
    const double* row = a.values().data() + static_cast<std::size_t>(i) * c;
    double* orow = v.data() + static_cast<std::size_t>(i) * c;
    double m = -1e300;
    for (int j = 0; j < c; ++j)
      if (keep[static_cast<std::size_t>(j)]) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j)
      if (keep[static_cast<std::size_t>(j)]) s += (orow[j] = std::exp(row[j] - m));
    for (int j = 0; j < c; ++j)
      if (keep[static_cast<std::size_t>(j)]) orow[j] /= s;
  }
  Tensor out(a.shape(), std::move(v));
  maybe_record("masked_softmax", {a}, out, [a, out, keep, r, c](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& ga = t.grad_buffer(a.data(), a.numel());
    for (int i = 0; i < r; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * c;
      double dotp = 0.0;
      for (int j = 0; j < c; ++j)
        if (keep[static_cast<std::size_t>(j)]) dotp += (*go)[off + j] * out.values()[off + j];
      for (int j = 0; j < c; ++j)
        if (keep[static_cast<std::size_t>(j)]) ga[off + j] += out.values()[off + j] * ((*go)[off + j] - dotp);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int d = last_dim(x);
  if (d < 2) throw std::invalid_argument("layer_norm: needs at least 2 features, got " + std::to_string(d));
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                " vs " + std::to_string(d) + " features");
  }
  const int r = row_count(x);
  std::vector<double> v(x.numel());
  std::vector<double> xhat(x.numel());  // saved for backward
  std::vector<double> inv_sd(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const double* row = x.values().data() + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < d; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * d + j;
      xhat[k] = (row[j] - mean) * inv;
      v[k] = xhat[k] * gain.at(j) + bias.at(j);
    }
  }
  Tensor out(x.shape(), std::move(v));
  maybe_record("layer_norm", {x, gain, bias}, out,
               [x, gain, bias, out, r, d, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](Tape& t) {
                 const auto* go = t.grad_of(out);
                 if (!go) return;
                 for (int i = 0; i < r; ++i) {
                   const std::size_t off = static_cast<std::size_t>(i) * d;
                   if (gain.requires_grad()) {
                     auto& gg = t.grad_buffer(gain.data(), gain.numel());
                     for (int j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += (*go)[off + j] * xhat[off + j];
                   }
                   if (bias.requires_grad()) {
                     auto& gb = t.grad_buffer(bias.data(), bias.numel());
                     for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += (*go)[off + j];
                   }
                   if (x.requires_grad()) {
                     auto& gx = t.grad_buffer(x.data(), x.numel());
                     double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                     for (int j = 0; j < d; ++j) {
                       const double dxh = (*go)[off + j] * gain.at(j);
                       mean_dxh += dxh;
                       mean_dxh_xh += dxh * xhat[off + j];
                     }
                     mean_dxh /= d;
                     mean_dxh_xh /= d;
                     for (int j = 0; j < d; ++j) {
                       const double dxh = (*go)[off + j] * gain.at(j);
                       gx[off + j] += inv_sd[static_cast<std::size_t>(i)] *
                                      (dxh - mean_dxh - xhat[off + j] * mean_dxh_xh);
                     }
                   }
                 }
               });
  return out;
}

Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets) {
  if (targets.size() != logits.numel()) {
    throw std::invalid_argument("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(logits.numel()) + " logits");
  }
  check_finite("bce_with_logits", logits);
  for (double tgt : targets) {
    if (!(tgt >= 0.0 && tgt <= 1.0)) {
      throw std::invalid_argument("bce_with_logits: target " + std::to_string(tgt) + " outside [0,1]");
    }
  }
  const std::size_t n = targets.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.values()[i], tgt = targets[i];
    // max(z,0) - z*t + log(1+exp(-|z|)) is the overflow-safe expansion
    // of -t*log(sigmoid) - (1-t)*log(1-sigmoid).
    loss += std::max(z, 0.0) - z * tgt + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));
  maybe_record("bce_with_logits", {logits}, out, [logits, out, targets, n](Tape& t) {
    const auto* go = t.grad_of(out);
    if (!go) return;
    auto& gl = t.grad_buffer(logits.data(), logits.numel());
    const double scale = (*go)[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double z = logits.values()[i];
      const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      gl[i] += scale * (sig - targets[i]);
    }
  });
  return out;
}

// ---- composites ----

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() == 1) {
    Tensor r = add_rowwise(matmul(reshape(x, {1, static_cast<int>(x.numel())}), w), b);
    return reshape(r, {w.cols()});
  }
  return add_rowwise(matmul(x, w), b);
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  Tensor na = sqrt(sum_all(mul(a, a)));
  Tensor nb = sqrt(sum_all(mul(b, b)));
  return div(dot(a, b), add_scalar(mul(na, nb), 1e-12));
}

namespace {

GateParams make_gate(int input_dim, int hidden_dim, Rng& rng) {
  GateParams g;
  g.w_x = Tensor::randn({input_dim, hidden_dim}, rng, 1.0 / std::sqrt(static_cast<double>(input_dim)), true);
  g.w_h = Tensor::randn({hidden_dim, hidden_dim}, rng, 1.0 / std::sqrt(static_cast<double>(hidden_dim)), true);
  g.b = Tensor::zeros({hidden_dim}, true);
  return g;
}

// x·Wx + h·Wh + b for one gate, on row-matrix state.
Tensor gate_pre(const Tensor& x, const Tensor& h, const GateParams& g) {
  return add_rowwise(add(matmul(x, g.w_x), matmul(h, g.w_h)), g.b);
}

Tensor as_rows(const Tensor& t) { return t.ndim() == 1 ? reshape(t, {1, static_cast<int>(t.numel())}) : t; }

Tensor like_input(const Tensor& rows, const Tensor& ref) {
  return ref.ndim() == 1 ? reshape(rows, {static_cast<int>(rows.numel())}) : rows;
}

}  // namespace

RecurrentCellParams RecurrentCellParams::lstm(int input_dim, int hidden_dim, Rng& rng) {
  RecurrentCellParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  for (int g = 0; g < 4; ++g) p.gates.push_back(make_gate(input_dim, hidden_dim, rng));
  return p;
}

RecurrentCellParams RecurrentCellParams::gru(int input_dim, int hidden_dim, Rng& rng) {
  RecurrentCellParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  for (int g = 0; g < 3; ++g) p.gates.push_back(make_gate(input_dim, hidden_dim, rng));
  return p;
}

LstmState LstmState::zeros(int hidden_dim) { return {Tensor::zeros({hidden_dim}), Tensor::zeros({hidden_dim})}; }

LstmState LstmState::zeros(int batch, int hidden_dim) {
  return {Tensor::zeros({batch, hidden_dim}), Tensor::zeros({batch, hidden_dim})};
}

LstmState lstm_step(const Tensor& x, const LstmState& s, const RecurrentCellParams& p) {
  if (p.gates.size() != 4) throw std::invalid_argument("lstm_step: params have " + std::to_string(p.gates.size()) + " gates, want 4");
  Tensor x2 = as_rows(x), h2 = as_rows(s.h), c2 = as_rows(s.c);
  Tensor i = sigmoid(gate_pre(x2, h2, p.gates[0]));
  Tensor f = sigmoid(gate_pre(x2, h2, p.gates[1]));
  Tensor o = sigmoid(gate_pre(x2, h2, p.gates[2]));
  Tensor g = tanh(gate_pre(x2, h2, p.gates[3]));
  Tensor c_next = add(mul(f, c2), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {like_input(h_next, s.h), like_input(c_next, s.c)};
}

Tensor gru_step(const Tensor& x, const Tensor& h, const RecurrentCellParams& p) {
  if (p.gates.size() != 3) throw std::invalid_argument("gru_step: params have " + std::to_string(p.gates.size()) + " gates, want 3");
  Tensor x2 = as_rows(x), h2 = as_rows(h);
  Tensor z = sigmoid(gate_pre(x2, h2, p.gates[0]));
  Tensor r = sigmoid(gate_pre(x2, h2, p.gates[1]));
  const auto& cg = p.gates[2];
  Tensor cand = tanh(add_rowwise(add(matmul(x2, cg.w_x), matmul(mul(r, h2), cg.w_h)), cg.b));
  Tensor h_next = add(sub(h2, mul(z, h2)), mul(z, cand));
  return like_input(h_next, h);
}

FfnParams FfnParams::make(int d_in, int d_hidden, int d_out, Rng& rng) {
  FfnParams p;
  p.w1 = Tensor::randn({d_in, d_hidden}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)), true);
  p.b1 = Tensor::zeros({d_hidden}, true);
  p.w2 = Tensor::randn({d_hidden, d_out}, rng, 1.0 / std::sqrt(static_cast<double>(d_hidden)), true);
  p.b2 = Tensor::zeros({d_out}, true);
  return p;
}

Tensor ffn(const Tensor& x, const FfnParams& p) { return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2); }

}  // namespace jemha
