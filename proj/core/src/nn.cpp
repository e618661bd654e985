#include "neuro3d/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace neuro3d::nn {

Value ParamSet::add(const std::string& name, Tensor init) {
  for (const auto& n : names_)
    if (n == name) throw std::invalid_argument("ParamSet: duplicate name " + name);
  names_.push_back(name);
  params_.push_back(ag::param(std::move(init)));
  return params_.back();
}

std::int64_t ParamSet::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->val.numel();
  return n;
}

std::map<std::string, Tensor> ParamSet::state() const {
  std::map<std::string, Tensor> s;
  for (std::size_t i = 0; i < params_.size(); ++i) s[names_[i]] = params_[i]->val;
  return s;
}

void ParamSet::load_state(const std::map<std::string, Tensor>& state) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto it = state.find(names_[i]);
    if (it == state.end())
      throw std::runtime_error("ParamSet::load_state: missing tensor " + names_[i]);
    if (!(it->second.shape() == params_[i]->val.shape()))
      throw std::runtime_error("ParamSet::load_state: shape mismatch for " + names_[i]);
    params_[i]->val = it->second;
  }
}

void ParamSet::set_trainable(bool on) {
  for (auto& p : params_) p->requires_grad = on;
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    if (p->grad.numel() > 0)
      for (std::int64_t i = 0; i < p->grad.numel(); ++i) s += p->grad[i] * p->grad[i];
  return std::sqrt(s);
}

Tensor gaussian_init(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor t(std::move(shape));
  rng.fill_gaussian(t.data(), t.numel(), 0.0, stddev);
  return t;
}

Linear::Linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng,
               bool with_bias) {
  w = ps.add(name + ".w", gaussian_init(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
  b = with_bias ? ps.add(name + ".b", Tensor::zeros({out})) : ag::constant(Tensor::zeros({out}));
}

Value Linear::forward(const Value& x) const { return ag::add_rowwise(ag::matmul(x, w), b); }

Value Linear::forward_vec(const Value& x) const {
  const int in = static_cast<int>(x->val.numel());
  auto y = forward(ag::reshape(x, {1, in}));
  return ag::reshape(y, {w->val.dim(1)});
}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& name, int d) {
  gamma = ps.add(name + ".gamma", Tensor::full({d}, 1.0));
  beta = ps.add(name + ".beta", Tensor::zeros({d}));
}

MultiheadAttention::MultiheadAttention(ParamSet& ps, const std::string& name, int d_model,
                                       int d_ctx, int n_heads, Rng& rng, bool with_bias)
    : heads(n_heads),
      q(ps, name + ".q", d_model, d_model, rng, with_bias),
      k(ps, name + ".k", d_ctx, d_model, rng, with_bias),
      v(ps, name + ".v", d_ctx, d_model, rng, with_bias),
      o(ps, name + ".o", d_model, d_model, rng, with_bias) {
  if (d_model % n_heads != 0)
    throw std::invalid_argument("MultiheadAttention: d_model % heads != 0");
}

Value MultiheadAttention::forward(const Value& x, const Value& ctx) const {
  const int d = x->val.dim(1);
  const int dh = d / heads;
  auto qs = q.forward(x), ks = k.forward(ctx), vs = v.forward(ctx);
  Value merged;
  for (int h = 0; h < heads; ++h) {
    auto qh = ag::slice_cols(qs, h * dh, (h + 1) * dh);
    auto kh = ag::slice_cols(ks, h * dh, (h + 1) * dh);
    auto vh = ag::slice_cols(vs, h * dh, (h + 1) * dh);
    auto scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), 1.0 / std::sqrt(double(dh)));
    auto out_h = ag::matmul(ag::softmax_rows(scores), vh);
    merged = h == 0 ? out_h : ag::concat_cols(merged, out_h);
  }
  return o.forward(merged);
}

TransformerBlock::TransformerBlock(ParamSet& ps, const std::string& name, int d_model, int heads,
                                   int d_mlp, Rng& rng)
    : ln1(ps, name + ".ln1", d_model),
      ln2(ps, name + ".ln2", d_model),
      attn(ps, name + ".attn", d_model, d_model, heads, rng),
      fc1(ps, name + ".fc1", d_model, d_mlp, rng),
      fc2(ps, name + ".fc2", d_mlp, d_model, rng) {}

Value TransformerBlock::forward(const Value& x) const {
  auto h = ln1.forward(x);
  auto y = ag::add(x, attn.forward(h, h));
  auto m = fc2.forward(ag::silu_(fc1.forward(ln2.forward(y))));
  return ag::add(y, m);
}

Conv2d::Conv2d(ParamSet& ps, const std::string& name, int in, int out, int k, int stride_, int pad_,
               Rng& rng)
    : stride(stride_), pad(pad_) {
  const double std = 1.0 / std::sqrt(static_cast<double>(in) * k * k);
  w = ps.add(name + ".w", gaussian_init(rng, {out, in, k, k}, std));
  b = ps.add(name + ".b", Tensor::zeros({out}));
}

Tensor sinusoidal_embedding(int index, int dim, double max_period) {
  Tensor e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * i / std::max(1, half - 1));
    e[i] = std::sin(index * freq);
    e[half + i] = std::cos(index * freq);
  }
  return e;
}

Tensor positional_encoding_rows(int n, int dim) {
  Tensor e({n, dim});
  for (int i = 0; i < n; ++i) {
    Tensor row = sinusoidal_embedding(i, dim);
    for (int j = 0; j < dim; ++j) e.at(i, j) = row[j];
  }
  return e;
}

void AdamOptimizer::step(const std::vector<Value>& params) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p->val.shape()));
      v_.push_back(Tensor::zeros(p->val.shape()));
    }
    t_ = 0;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p->grad.numel() == 0) continue;
    for (std::int64_t j = 0; j < p->val.numel(); ++j) {
      const double g = p->grad[j];
      m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
      v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
      const double mh = m_[i][j] / bc1;
      const double vh = v_[i][j] / bc2;
      p->val[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

void AdamOptimizer::reset() {
  m_.clear();
  v_.clear();
  t_ = 0;
}

void SgdOptimizer::step(const std::vector<Value>& params) {
  for (const auto& p : params) {
    if (p->grad.numel() == 0) continue;
    for (std::int64_t j = 0; j < p->val.numel(); ++j) p->val[j] -= lr * p->grad[j];
  }
}

}  // namespace neuro3d::nn
