#pragma once

#include <map>
#include <string>
#include <vector>

#include "neuro3d/autodiff.hpp"
#include "neuro3d/rng.hpp"

namespace neuro3d::nn {

using ag::Value;

// Named parameter registry. Modules add their leaves here so optimizers,
// checkpoints, and freeze flags all see one flat list.
class ParamSet {
public:
  Value add(const std::string& name, Tensor init);
  const std::vector<Value>& params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }
  std::int64_t total_size() const;

  std::map<std::string, Tensor> state() const;
  // Throws if a name is missing or a shape disagrees.
  void load_state(const std::map<std::string, Tensor>& state);

  void set_trainable(bool on);
  double grad_norm() const;

private:
  std::vector<std::string> names_;
  std::vector<Value> params_;
};

Tensor gaussian_init(Rng& rng, std::vector<int> shape, double stddev);

struct Linear {
  Value w;  // [in x out]
  Value b;  // [out]; constant zero when constructed without bias
  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true);
  Value forward(const Value& x) const;      // [n x in] -> [n x out]
  Value forward_vec(const Value& x) const;  // [in] -> [out]
};

struct LayerNorm {
  Value gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, int d);
  Value forward(const Value& x) const { return ag::layer_norm_rows(x, gamma, beta); }
};

// Multi-head attention; self-attention when ctx == x. Context tokens carry no
// positional encoding, so attention over them is permutation-invariant. With
// biases disabled, a zero context yields exactly zero output (the conditional
// path collapses onto the unconditional one).
struct MultiheadAttention {
  int heads = 1;
  Linear q, k, v, o;
  MultiheadAttention() = default;
  MultiheadAttention(ParamSet& ps, const std::string& name, int d_model, int d_ctx, int heads,
                     Rng& rng, bool with_bias = true);
  Value forward(const Value& x, const Value& ctx) const;
};

// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiheadAttention attn;
  Linear fc1, fc2;
  TransformerBlock() = default;
  TransformerBlock(ParamSet& ps, const std::string& name, int d_model, int heads, int d_mlp,
                   Rng& rng);
  Value forward(const Value& x) const;
};

struct Conv2d {
  Value w;  // [out x in x kh x kw]
  Value b;  // [out]
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamSet& ps, const std::string& name, int in, int out, int k, int stride, int pad,
         Rng& rng);
  Value forward(const Value& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

// Sinusoidal encodings shared by token positions and diffusion timesteps.
Tensor sinusoidal_embedding(int index, int dim, double max_period = 10000.0);
Tensor positional_encoding_rows(int n, int dim);

struct AdamOptimizer {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  explicit AdamOptimizer(double lr = 1e-3) : lr(lr) {}
  void step(const std::vector<Value>& params);
  void reset();

private:
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

struct SgdOptimizer {
  double lr = 1e-2;
  explicit SgdOptimizer(double lr = 1e-2) : lr(lr) {}
  void step(const std::vector<Value>& params);
};

}  // namespace neuro3d::nn
