#ifndef KGPATH_AUTOGRAD_H_
#define KGPATH_AUTOGRAD_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "kgpath/tensor.h"

// Define-by-run reverse-mode differentiation over dense matrices. A graph
// is built fresh for every forward pass; parameters are long-lived leaves
// whose gradients accumulate until zeroed.
namespace kgpath::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  const char* op = "leaf";
  std::vector<Var> inputs;
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  std::function<void(Node&)> backprop;
  bool requires_grad = false;

  Tensor& grad_buffer();
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var leaf(Tensor value, bool requires_grad = true);
Var constant(Tensor value);

// Gradient of a node; zeros when nothing was propagated into it.
Tensor gradient(const Var& v);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a (m x n) + row (1 x n) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (m x n) * row (1 x n) broadcast over rows.
Var mul_row(const Var& a, const Var& row);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);
Var softmax_rows(const Var& a);
// Row softmax where allowed[i * cols + j] == 0 forces probability exactly 0.
// Every row must allow at least one column.
Var masked_softmax_rows(const Var& a, std::shared_ptr<const std::vector<std::uint8_t>> allowed);
Var log_softmax_rows(const Var& a);
// Per-row standardization (no affine part).
Var layer_norm_rows(const Var& a, double eps = 1e-5);
Var sum(const Var& a);
Var mean(const Var& a);
// Sum of a elementwise-weighted by a constant tensor of the same shape.
Var weighted_sum(const Var& a, const Tensor& weights);
Var transpose(const Var& a);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
// Copies row `row` of a, `times` times.
Var repeat_row(const Var& a, std::size_t row, std::size_t times);
// Embedding lookup: out[i] = table[ids[i]].
Var gather_rows(const Var& table, std::span<const std::int64_t> ids);

// Row layout of grouped attention inputs: row (s, b, t) sits at
// (s * batch + b) * steps + t. Each b is an independent block whose
// streams * steps tokens attend to each other under `allowed`, a
// (streams*steps)^2 matrix over block-local indices s * steps + t.
struct AttentionLayout {
  std::size_t streams = 1;
  std::size_t batch = 1;
  std::size_t steps = 1;
  std::size_t heads = 1;
};

// Multi-head scaled dot-product attention, per block and head:
// softmax(Q K^T / sqrt(d / heads)) V with disallowed weights exactly 0.
// `weights_out`, when given, receives the (batch * heads * n) x n weights.
Var grouped_attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout,
                      std::shared_ptr<const std::vector<std::uint8_t>> allowed,
                      Tensor* weights_out = nullptr);

// Reverse-mode pass from a scalar node; accumulates into every leaf that
// requires gradients.
void backward(const Var& loss);

double tanh_scalar(double x);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double fd_check(const std::function<Var(const Var&)>& f, const Tensor& x, double step = 1e-5);

}  // namespace kgpath::ad

#endif  // KGPATH_AUTOGRAD_H_
