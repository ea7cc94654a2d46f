#include "kgpath/autograd.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "kgpath/errors.h"

namespace kgpath::ad {

namespace {

thread_local bool g_grad_enabled = true;

Var make_node(const char* op, Tensor value, std::vector<Var> inputs,
              std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = std::move(value);
  bool needs = false;
  for (const Var& in : inputs) needs = needs || in->requires_grad;
  if (needs && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backprop = std::move(backprop);
  }
  return node;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes differ, " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + a.shape_string());
  }
}

bool wants(const Var& v) { return v->requires_grad; }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape());
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Tensor gradient(const Var& v) {
  if (v->grad.size() == v->value.size()) return v->grad;
  return Tensor(v->value.shape());
}

Var matmul(const Var& a, const Var& b) {
  require_matrix("matmul", a->value);
  require_matrix("matmul", b->value);
  Tensor out({a->value.rows(), b->value.cols()});
  matmul_into(a->value, b->value, out);
  return make_node("matmul", std::move(out), {a, b}, [](Node& n) {
    const Tensor& A = n.inputs[0]->value;
    const Tensor& B = n.inputs[1]->value;
    const std::size_t m = A.rows(), k = A.cols(), c = B.cols();
    const double* dc = n.grad.data().data();
    if (wants(n.inputs[0])) {
      // dA = dC B^T as row updates against B^T; the axpy form vectorizes.
      double* da = n.inputs[0]->grad_buffer().data().data();
      const double* pb = B.data().data();
      std::vector<double> bt(k * c);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < c; ++j) bt[j * k + p] = pb[p * c + j];
      for (std::size_t i = 0; i < m; ++i) {
        double* arow = da + i * k;
        for (std::size_t j = 0; j < c; ++j) {
          const double g = dc[i * c + j];
          if (g == 0.0) continue;
          const double* brow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) arow[p] += g * brow[p];
        }
      }
    }
    if (wants(n.inputs[1])) {
      double* db = n.inputs[1]->grad_buffer().data().data();
      const double* pa = A.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) db[p * c + j] += av * dc[i * c + j];
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_node("add", std::move(out), {a, b}, [](Node& n) {
    for (int s = 0; s < 2; ++s) {
      if (!wants(n.inputs[s])) continue;
      Tensor& g = n.inputs[s]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_node("sub", std::move(out), {a, b}, [](Node& n) {
    if (wants(n.inputs[0])) {
      Tensor& g = n.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(n.inputs[1])) {
      Tensor& g = n.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node("mul", std::move(out), {a, b}, [](Node& n) {
    if (wants(n.inputs[0])) {
      Tensor& g = n.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.inputs[1]->value[i];
    }
    if (wants(n.inputs[1])) {
      Tensor& g = n.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.inputs[0]->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data()) v *= s;
  return make_node("scale", std::move(out), {a}, [s](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data()) v += s;
  return make_node("add_scalar", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var add_row(const Var& a, const Var& row) {
  const std::size_t m = a->value.rows(), c = a->value.cols();
  if (row->value.rows() != 1 || row->value.cols() != c) {
    throw DimensionError("add_row: " + a->value.shape_string() + " + " + row->value.shape_string());
  }
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += row->value[j];
  return make_node("add_row", std::move(out), {a, row}, [m, c](Node& n) {
    if (wants(n.inputs[0])) {
      Tensor& g = n.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(n.inputs[1])) {
      Tensor& g = n.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
    }
  });
}

Var mul_row(const Var& a, const Var& row) {
  const std::size_t m = a->value.rows(), c = a->value.cols();
  if (row->value.rows() != 1 || row->value.cols() != c) {
    throw DimensionError("mul_row: " + a->value.shape_string() + " * " + row->value.shape_string());
  }
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= row->value[j];
  return make_node("mul_row", std::move(out), {a, row}, [m, c](Node& n) {
    const Tensor& A = n.inputs[0]->value;
    const Tensor& R = n.inputs[1]->value;
    if (wants(n.inputs[0])) {
      Tensor& g = n.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * R[j];
    }
    if (wants(n.inputs[1])) {
      Tensor& g = n.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j] * A[i * c + j];
    }
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_node("relu", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    const Tensor& x = n.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) g[i] += n.grad[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_node("sigmoid", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = n.value[i];
      g[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

Var tanh(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data()) v = std::tanh(v);
  return make_node("tanh", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = n.value[i];
      g[i] += n.grad[i] * (1.0 - y * y);
    }
  });
}

Var square(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data()) v *= v;
  return make_node("square", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * n.inputs[0]->value[i] * n.grad[i];
  });
}

namespace {

// Shared backward for softmax variants: dx = y * (dy - <dy, y>) per row.
void softmax_backward(Node& n) {
  const std::size_t m = n.value.rows(), c = n.value.cols();
  Tensor& g = n.inputs[0]->grad_buffer();
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
    for (std::size_t j = 0; j < c; ++j) {
      g[i * c + j] += n.value[i * c + j] * (n.grad[i * c + j] - dot);
    }
  }
}

}  // namespace

Var softmax_rows(const Var& a) {
  require_matrix("softmax_rows", a->value);
  const std::size_t m = a->value.rows(), c = a->value.cols();
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return make_node("softmax_rows", std::move(out), {a}, softmax_backward);
}

Var masked_softmax_rows(const Var& a, std::shared_ptr<const std::vector<std::uint8_t>> allowed) {
  require_matrix("masked_softmax_rows", a->value);
  const std::size_t m = a->value.rows(), c = a->value.cols();
  if (!allowed || allowed->size() != m * c) {
    throw DimensionError("masked_softmax_rows: mask size does not match " + a->value.shape_string());
  }
  Tensor out({m, c});
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a->value.data().data() + i * c;
    const std::uint8_t* ok = allowed->data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (ok[j]) mx = std::max(mx, x[j]);
    if (!std::isfinite(mx)) {
      throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " allows no column");
    }
    double* row = out.data().data() + i * c;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = ok[j] ? std::exp(x[j] - mx) : 0.0;
      z += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return make_node("masked_softmax_rows", std::move(out), {a}, softmax_backward);
}

Var log_softmax_rows(const Var& a) {
  require_matrix("log_softmax_rows", a->value);
  const std::size_t m = a->value.rows(), c = a->value.cols();
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return make_node("log_softmax_rows", std::move(out), {a}, [m, c](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += n.grad[i * c + j] - std::exp(n.value[i * c + j]) * total;
      }
    }
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  require_matrix("layer_norm_rows", a->value);
  const std::size_t m = a->value.rows(), c = a->value.cols();
  Tensor out = a->value;
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) row[j] = (row[j] - mu) * is;
  }
  return make_node("layer_norm_rows", std::move(out), {a}, [m, c, inv_std](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::size_t i = 0; i < m; ++i) {
      double mean_dy = 0.0, mean_dy_y = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        mean_dy += n.grad[i * c + j];
        mean_dy_y += n.grad[i * c + j] * n.value[i * c + j];
      }
      mean_dy *= inv_c;
      mean_dy_y *= inv_c;
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += (*inv_std)[i] *
                        (n.grad[i * c + j] - mean_dy - n.value[i * c + j] * mean_dy_y);
      }
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a->value.data()) total += v;
  return make_node("sum", Tensor::scalar(total), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    const double d = n.grad[0];
    for (double& v : g.data()) v += d;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a->value.size())); }

Var weighted_sum(const Var& a, const Tensor& weights) {
  require_same_shape("weighted_sum", a->value, weights);
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += a->value[i] * weights[i];
  return make_node("weighted_sum", Tensor::scalar(total), {a}, [weights](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    const double d = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * weights[i];
  });
}

Var transpose(const Var& a) {
  require_matrix("transpose", a->value);
  const std::size_t m = a->value.rows(), c = a->value.cols();
  Tensor out({c, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * m + i] = a->value[i * c + j];
  return make_node("transpose", std::move(out), {a}, [m, c](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * m + i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0]->value.rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p->value.rows() != m) {
      throw DimensionError("concat_cols: row counts differ, " + parts[0]->value.shape_string() +
                           " vs " + p->value.shape_string());
    }
    widths.push_back(p->value.cols());
    total += p->value.cols();
  }
  Tensor out({m, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t w = p->value.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = p->value[i * w + j];
    offset += w;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_node("concat_cols", std::move(out), std::move(inputs), [m, total, widths](Node& n) {
    std::size_t off = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const std::size_t w = widths[s];
      if (wants(n.inputs[s])) {
        Tensor& g = n.inputs[s]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += n.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p->value.cols() != c) {
      throw DimensionError("concat_rows: column counts differ, " + parts[0]->value.shape_string() +
                           " vs " + p->value.shape_string());
    }
    rows += p->value.rows();
  }
  std::vector<double> data;
  data.reserve(rows * c);
  for (const Var& p : parts) data.insert(data.end(), p->value.data().begin(), p->value.data().end());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_node("concat_rows", Tensor({rows, c}, std::move(data)), std::move(inputs),
                   [](Node& n) {
                     std::size_t off = 0;
                     for (const Var& in : n.inputs) {
                       const std::size_t len = in->value.size();
                       if (wants(in)) {
                         Tensor& g = in->grad_buffer();
                         for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
                       }
                       off += len;
                     }
                   });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t m = a->value.rows(), c = a->value.cols();
  if (count == 0 || begin + count > m) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of " + a->value.shape_string());
  }
  Tensor out({count, c});
  std::copy_n(a->value.data().begin() + begin * c, count * c, out.data().begin());
  return make_node("slice_rows", std::move(out), {a}, [begin, c](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * c + i] += n.grad[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t m = a->value.rows(), c = a->value.cols();
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of " + a->value.shape_string());
  }
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a->value[i * c + begin + j];
  return make_node("slice_cols", std::move(out), {a}, [m, c, begin, count](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += n.grad[i * count + j];
  });
}

Var repeat_row(const Var& a, std::size_t row, std::size_t times) {
  const std::size_t c = a->value.cols();
  if (row >= a->value.rows() || times == 0) {
    throw DimensionError("repeat_row: row " + std::to_string(row) + " of " + a->value.shape_string());
  }
  Tensor out({times, c});
  for (std::size_t t = 0; t < times; ++t)
    for (std::size_t j = 0; j < c; ++j) out[t * c + j] = a->value[row * c + j];
  return make_node("repeat_row", std::move(out), {a}, [row, times, c](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t j = 0; j < c; ++j) g[row * c + j] += n.grad[t * c + j];
  });
}

Var gather_rows(const Var& table, std::span<const std::int64_t> ids) {
  const std::size_t rows = table->value.rows(), c = table->value.cols();
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw LookupError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                        std::to_string(rows) + " rows");
    }
    std::copy_n(table->value.data().begin() + ids[i] * c, c, out.data().begin() + i * c);
  }
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  return make_node("gather_rows", std::move(out), {table}, [idx, c](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += n.grad[i * c + j];
  });
}

void backward(const Var& loss) {
  if (loss->value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + loss->value.shape_string());
  }
  if (!loss->requires_grad) return;

  // Iterative post-order DFS; reversed it is a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() == node->value.size()) node->backprop(*node);
  }
}

double tanh_scalar(double x) { return std::tanh(x); }

double fd_check(const std::function<Var(const Var&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("fd_check: step must be positive");
  Var input = leaf(x, true);
  Var out = f(input);
  backward(out);
  const Tensor analytic = gradient(input);

  NoGradGuard no_grad;
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(constant(probe))->value.item();
    probe[i] = orig - step;
    const double down = f(constant(probe))->value.item();
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kgpath::ad

namespace kgpath::ad {

Var grouped_attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& L,
                      std::shared_ptr<const std::vector<std::uint8_t>> allowed,
                      Tensor* weights_out) {
  require_same_shape("grouped_attention", q->value, k->value);
  require_same_shape("grouped_attention", q->value, v->value);
  require_matrix("grouped_attention", q->value);
  const std::size_t rows = q->value.rows(), d = q->value.cols();
  const std::size_t n = L.streams * L.steps;
  if (rows != L.streams * L.batch * L.steps) {
    throw DimensionError("grouped_attention: " + q->value.shape_string() + " does not fit " +
                         std::to_string(L.streams) + " streams x " + std::to_string(L.batch) +
                         " blocks x " + std::to_string(L.steps) + " steps");
  }
  if (L.heads == 0 || d % L.heads != 0) {
    throw DimensionError("grouped_attention: width " + std::to_string(d) +
                         " not divisible by head count " + std::to_string(L.heads));
  }
  if (!allowed || allowed->size() != n * n) {
    throw DimensionError("grouped_attention: mask must be " + std::to_string(n) + "x" +
                         std::to_string(n));
  }
  const std::size_t dh = d / L.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // Global row of block-local index i in block b.
  auto row_of = [L](std::size_t b, std::size_t i) {
    return ((i / L.steps) * L.batch + b) * L.steps + i % L.steps;
  };

  auto probs = std::make_shared<std::vector<double>>(L.batch * L.heads * n * n, 0.0);
  Tensor out({rows, d});
  const double* Q = q->value.data().data();
  const double* K = k->value.data().data();
  const double* V = v->value.data().data();
  std::vector<double> score(n);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      const std::size_t off = h * dh;
      double* P = probs->data() + (b * L.heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = Q + row_of(b, i) * d + off;
        const std::uint8_t* ok = allowed->data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!ok[j]) continue;
          const double* kj = K + row_of(b, j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          score[j] = s * inv_sqrt;
          mx = std::max(mx, score[j]);
        }
        if (!std::isfinite(mx)) {
          throw ContractError("grouped_attention: token " + std::to_string(i) + " attends to nothing");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] = ok[j] ? std::exp(score[j] - mx) : 0.0;
          z += P[i * n + j];
        }
        double* oi = out.data().data() + row_of(b, i) * d + off;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] /= z;
          const double p = P[i * n + j];
          if (p == 0.0) continue;
          const double* vj = V + row_of(b, j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  if (weights_out) *weights_out = Tensor({L.batch * L.heads * n, n}, *probs);

  return make_node("grouped_attention", std::move(out), {q, k, v},
                   [L, n, d, dh, inv_sqrt, probs, row_of](Node& node) {
    const double* Q = node.inputs[0]->value.data().data();
    const double* K = node.inputs[1]->value.data().data();
    const double* V = node.inputs[2]->value.data().data();
    double* gQ = node.inputs[0]->grad_buffer().data().data();
    double* gK = node.inputs[1]->grad_buffer().data().data();
    double* gV = node.inputs[2]->grad_buffer().data().data();
    const double* gO = node.grad.data().data();
    std::vector<double> dp(n);
    for (std::size_t b = 0; b < L.batch; ++b) {
      for (std::size_t h = 0; h < L.heads; ++h) {
        const std::size_t off = h * dh;
        const double* P = probs->data() + (b * L.heads + h) * n * n;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ri = row_of(b, i);
          const double* goi = gO + ri * d + off;
          double weighted = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double p = P[i * n + j];
            if (p == 0.0) {
              dp[j] = 0.0;
              continue;
            }
            const std::size_t rj = row_of(b, j);
            const double* vj = V + rj * d + off;
            double* gvj = gV + rj * d + off;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += goi[c] * vj[c];
              gvj[c] += p * goi[c];
            }
            dp[j] = s;
            weighted += p * s;
          }
          const double* qi = Q + ri * d + off;
          double* gqi = gQ + ri * d + off;
          for (std::size_t j = 0; j < n; ++j) {
            const double p = P[i * n + j];
            if (p == 0.0) continue;
            const double ds = p * (dp[j] - weighted) * inv_sqrt;
            const std::size_t rj = row_of(b, j);
            const double* kj = K + rj * d + off;
            double* gkj = gK + rj * d + off;
            for (std::size_t c = 0; c < dh; ++c) {
              gqi[c] += ds * kj[c];
              gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace kgpath::ad
