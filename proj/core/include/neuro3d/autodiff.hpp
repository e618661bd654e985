#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "neuro3d/tensor.hpp"

namespace neuro3d::ag {

// Define-by-run reverse-mode autodiff over Tensor. Graphs are rebuilt every
// step; parameters are long-lived leaf nodes whose grads accumulate until
// zero_grad. Everything is double precision so finite-difference checks at
// rel 1e-3 have plenty of headroom.
struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Value> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(val.shape());
    return grad;
  }
  void accumulate(const Tensor& g) {
    Tensor& dst = ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  }
};

Value constant(Tensor v);
Value param(Tensor v);  // leaf with requires_grad = true

void zero_grad(const std::vector<Value>& params);

// Runs reverse-mode accumulation from a scalar root (grad seeded with 1).
void backward(const Value& root);
// Same, but with an explicit seed (vector-Jacobian product entry point).
void backward_seed(const Value& node, const Tensor& seed);

// --- elementwise / scalar ---
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value add_n(const std::vector<Value>& xs);
Value tanh_(const Value& a);
Value sigmoid_(const Value& a);
Value softplus_(const Value& a);
Value silu_(const Value& a);
Value relu_(const Value& a);
Value exp_(const Value& a);
Value square(const Value& a);
Value stop_grad(const Value& a);

// --- reductions ---
Value sum(const Value& a);
Value mean(const Value& a);
Value mse(const Value& a, const Value& b);
Value dot(const Value& a, const Value& b);  // flattened

// --- linear algebra / shaping (2-D unless noted) ---
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a);
Value reshape(const Value& a, std::vector<int> shape);
Value concat_rows(const Value& a, const Value& b);
Value concat_cols(const Value& a, const Value& b);
Value slice_rows(const Value& a, int r0, int r1);
Value slice_cols(const Value& a, int c0, int c1);
Value gather_rows(const Value& a, const std::vector<int>& idx);
// [n x d] built from src rows placed at idx (in order); all other rows = fill.
Value row_scatter(int n, const std::vector<int>& idx, const Value& src, const Value& fill);
Value broadcast_row(const Value& v, int n);        // [d] -> [n x d]
Value stack_rows(const std::vector<Value>& rows);  // k x [d] -> [k x d]
Value add_rowwise(const Value& x, const Value& b); // [n x d] + [d]

// --- nonlinear blocks ---
Value softmax_rows(const Value& a);
Value log_softmax_rows(const Value& a);
Value cross_entropy(const Value& logits, const std::vector<int>& labels);  // [n x K], mean
Value layer_norm_rows(const Value& x, const Value& gamma, const Value& beta, double eps = 1e-5);
Value unit_normalize(const Value& v, double eps = 1e-12);

// --- conv nets (single image, [C x H x W]) ---
Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad);
Value upsample2x(const Value& x);
Value mean_hw(const Value& x);                       // [C x H x W] -> [C]
Value add_channel_bias(const Value& x, const Value& b);
Value channel_norm(const Value& x, const Value& gamma, const Value& beta, double eps = 1e-5);

}  // namespace neuro3d::ag
