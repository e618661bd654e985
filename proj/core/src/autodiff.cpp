#include "neuro3d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace neuro3d::ag {

namespace {

Value make_node(Tensor val, std::vector<Value> inputs, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->val.shape_str() +
                                " vs " + b->val.shape_str());
}

Value unary(const Value& a, const std::function<double(double)>& f,
            const std::function<double(double, double)>& dfdx /* (x, y) -> dy/dx */) {
  Tensor out(a->val.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(a->val[i]);
  return make_node(std::move(out), {a}, [dfdx](Node& n) {
    const Value& a = n.inputs[0];
    if (!a->requires_grad) return;
    Tensor& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < n.val.numel(); ++i)
      ga[i] += n.grad[i] * dfdx(a->val[i], n.val[i]);
  });
}

}  // namespace

Value constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  return n;
}

Value param(Tensor v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = true;
  return n;
}

void zero_grad(const std::vector<Value>& params) {
  for (const auto& p : params)
    if (p->grad.numel() > 0) p->grad.fill(0.0);
}

namespace {
void topo_visit(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
  if (!n->requires_grad || seen.count(n)) return;
  seen.insert(n);
  for (const auto& in : n->inputs) topo_visit(in.get(), seen, order);
  order.push_back(n);
}
}  // namespace

void backward_seed(const Value& node, const Tensor& seed) {
  if (!node->val.same_shape(seed))
    throw std::invalid_argument("backward_seed: seed shape mismatch");
  if (!node->requires_grad) return;
  std::unordered_set<Node*> seen;
  std::vector<Node*> order;
  topo_visit(node.get(), seen, order);
  node->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

void backward(const Value& root) {
  if (root->val.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  backward_seed(root, Tensor::full(root->val.shape(), 1.0));
}

// ---------------------------------------------------------------- elementwise

Value add(const Value& a, const Value& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->val.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k)
      if (n.inputs[k]->requires_grad) n.inputs[k]->accumulate(n.grad);
  });
}

Value sub(const Value& a, const Value& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->val.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      Tensor& g = n.inputs[1]->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Value mul(const Value& a, const Value& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->val.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Value &a = n.inputs[0], &b = n.inputs[1];
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * b->val[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * a->val[i];
    }
  });
}

Value scale(const Value& a, double c) {
  Tensor out(a->val.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * c;
  return make_node(std::move(out), {a}, [c](Node& n) {
    Tensor& g = n.inputs[0]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * c;
  });
}

Value add_n(const std::vector<Value>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty");
  Tensor out(xs[0]->val.shape());
  for (const auto& x : xs) {
    check_same_shape(xs[0], x, "add_n");
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += x->val[i];
  }
  return make_node(std::move(out), xs, [](Node& n) {
    for (auto& in : n.inputs)
      if (in->requires_grad) in->accumulate(n.grad);
  });
}

Value tanh_(const Value& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Value sigmoid_(const Value& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Value softplus_(const Value& a) {
  // log(1 + e^x), computed stably; derivative is sigmoid(x).
  return unary(a,
               [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Value silu_(const Value& a) {
  return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}

Value relu_(const Value& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Value exp_(const Value& a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Value square(const Value& a) {
  return unary(a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Value stop_grad(const Value& a) { return constant(a->val); }

// ---------------------------------------------------------------- reductions

Value sum(const Value& a) {
  Tensor out = Tensor::scalar(a->val.sum());
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.inputs[0]->ensure_grad();
    const double s = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

Value mean(const Value& a) {
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  Tensor out = Tensor::scalar(a->val.sum() * inv);
  return make_node(std::move(out), {a}, [inv](Node& n) {
    Tensor& g = n.inputs[0]->ensure_grad();
    const double s = n.grad[0] * inv;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

Value mse(const Value& a, const Value& b) {
  check_same_shape(a, b, "mse");
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  double acc = 0.0;
  for (std::int64_t i = 0; i < a->val.numel(); ++i) {
    const double d = a->val[i] - b->val[i];
    acc += d * d;
  }
  return make_node(Tensor::scalar(acc * inv), {a, b}, [inv](Node& n) {
    const Value &a = n.inputs[0], &b = n.inputs[1];
    const double s = 2.0 * inv * n.grad[0];
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * (a->val[i] - b->val[i]);
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= s * (a->val[i] - b->val[i]);
    }
  });
}

Value dot(const Value& a, const Value& b) {
  if (a->val.numel() != b->val.numel()) throw std::invalid_argument("dot: size mismatch");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a->val.numel(); ++i) acc += a->val[i] * b->val[i];
  return make_node(Tensor::scalar(acc), {a, b}, [](Node& n) {
    const Value &a = n.inputs[0], &b = n.inputs[1];
    const double s = n.grad[0];
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * b->val[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * a->val[i];
    }
  });
}

// ------------------------------------------------------------- linear algebra

Value matmul(const Value& a, const Value& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + a->val.shape_str() + " x " +
                                b->val.shape_str());
  const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a->val.at(i, p);
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b->val.at(p, j);
    }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& nd) {
    const Value &a = nd.inputs[0], &b = nd.inputs[1];
    if (a->requires_grad) {  // dA = G * B^T
      Tensor& ga = a->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double gv = nd.grad.at(i, j);
          if (gv == 0.0) continue;
          for (int p = 0; p < k; ++p) ga.at(i, p) += gv * b->val.at(p, j);
        }
    }
    if (b->requires_grad) {  // dB = A^T * G
      Tensor& gb = b->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double av = a->val.at(i, p);
          if (av == 0.0) continue;
          for (int j = 0; j < n; ++j) gb.at(p, j) += av * nd.grad.at(i, j);
        }
    }
  });
}

Value transpose(const Value& a) {
  if (a->val.rank() != 2) throw std::invalid_argument("transpose: rank != 2");
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a->val.at(i, j);
  return make_node(std::move(out), {a}, [m, n](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) += nd.grad.at(j, i);
  });
}

Value reshape(const Value& a, std::vector<int> shape) {
  Tensor out = a->val.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
  });
}

Value concat_rows(const Value& a, const Value& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(1))
    throw std::invalid_argument("concat_rows: bad shapes");
  const int na = a->val.dim(0), nb = b->val.dim(0), d = a->val.dim(1);
  Tensor out({na + nb, d});
  std::copy(a->val.data(), a->val.data() + a->val.numel(), out.data());
  std::copy(b->val.data(), b->val.data() + b->val.numel(), out.data() + a->val.numel());
  return make_node(std::move(out), {a, b}, [na, nb, d](Node& nd) {
    if (nd.inputs[0]->requires_grad) {
      Tensor& g = nd.inputs[0]->ensure_grad();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(na) * d; ++i) g[i] += nd.grad[i];
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor& g = nd.inputs[1]->ensure_grad();
      const std::int64_t off = static_cast<std::int64_t>(na) * d;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(nb) * d; ++i)
        g[i] += nd.grad[off + i];
    }
  });
}

Value concat_cols(const Value& a, const Value& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(0) != b->val.dim(0))
    throw std::invalid_argument("concat_cols: bad shapes");
  const int n = a->val.dim(0), da = a->val.dim(1), db = b->val.dim(1);
  Tensor out({n, da + db});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < da; ++j) out.at(i, j) = a->val.at(i, j);
    for (int j = 0; j < db; ++j) out.at(i, da + j) = b->val.at(i, j);
  }
  return make_node(std::move(out), {a, b}, [n, da, db](Node& nd) {
    if (nd.inputs[0]->requires_grad) {
      Tensor& g = nd.inputs[0]->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < da; ++j) g.at(i, j) += nd.grad.at(i, j);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor& g = nd.inputs[1]->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < db; ++j) g.at(i, j) += nd.grad.at(i, da + j);
    }
  });
}

Value slice_rows(const Value& a, int r0, int r1) {
  const int d = a->val.dim(1);
  Tensor out({r1 - r0, d});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < d; ++j) out.at(i - r0, j) = a->val.at(i, j);
  return make_node(std::move(out), {a}, [r0, r1, d](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < d; ++j) g.at(i, j) += nd.grad.at(i - r0, j);
  });
}

Value slice_cols(const Value& a, int c0, int c1) {
  const int n = a->val.dim(0);
  Tensor out({n, c1 - c0});
  for (int i = 0; i < n; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a->val.at(i, j);
  return make_node(std::move(out), {a}, [n, c0, c1](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = c0; j < c1; ++j) g.at(i, j) += nd.grad.at(i, j - c0);
  });
}

Value gather_rows(const Value& a, const std::vector<int>& idx) {
  const int d = a->val.dim(1);
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = a->val.at(idx[i], j);
  return make_node(std::move(out), {a}, [idx, d](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) g.at(idx[i], j) += nd.grad.at(static_cast<int>(i), j);
  });
}

Value row_scatter(int n, const std::vector<int>& idx, const Value& src, const Value& fill) {
  const int d = src->val.dim(1);
  if (fill->val.numel() != d) throw std::invalid_argument("row_scatter: fill dim mismatch");
  Tensor out({n, d});
  std::vector<char> placed(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    placed[static_cast<std::size_t>(idx[i])] = 1;
    for (int j = 0; j < d; ++j) out.at(idx[i], j) = src->val.at(static_cast<int>(i), j);
  }
  for (int i = 0; i < n; ++i)
    if (!placed[static_cast<std::size_t>(i)])
      for (int j = 0; j < d; ++j) out.at(i, j) = fill->val[j];
  return make_node(std::move(out), {src, fill}, [n, idx, d, placed](Node& nd) {
    if (nd.inputs[0]->requires_grad) {
      Tensor& g = nd.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j) g.at(static_cast<int>(i), j) += nd.grad.at(idx[i], j);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor& g = nd.inputs[1]->ensure_grad();
      for (int i = 0; i < n; ++i)
        if (!placed[static_cast<std::size_t>(i)])
          for (int j = 0; j < d; ++j) g[j] += nd.grad.at(i, j);
    }
  });
}

Value broadcast_row(const Value& v, int n) {
  const int d = static_cast<int>(v->val.numel());
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = v->val[j];
  return make_node(std::move(out), {v}, [n, d](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) g[j] += nd.grad.at(i, j);
  });
}

Value stack_rows(const std::vector<Value>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
  const int d = static_cast<int>(rows[0]->val.numel());
  Tensor out({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]->val.numel() != d) throw std::invalid_argument("stack_rows: dim mismatch");
    for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = rows[i]->val[j];
  }
  return make_node(std::move(out), rows, [d](Node& nd) {
    for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
      if (!nd.inputs[i]->requires_grad) continue;
      Tensor& g = nd.inputs[i]->ensure_grad();
      for (int j = 0; j < d; ++j) g[j] += nd.grad.at(static_cast<int>(i), j);
    }
  });
}

Value add_rowwise(const Value& x, const Value& b) {
  const int n = x->val.dim(0), d = x->val.dim(1);
  if (b->val.numel() != d) throw std::invalid_argument("add_rowwise: dim mismatch");
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = x->val.at(i, j) + b->val[j];
  return make_node(std::move(out), {x, b}, [n, d](Node& nd) {
    if (nd.inputs[0]->requires_grad) nd.inputs[0]->accumulate(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor& g = nd.inputs[1]->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) g[j] += nd.grad.at(i, j);
    }
  });
}

// ------------------------------------------------------------ nonlinear blocks

Value softmax_rows(const Value& a) {
  const int n = a->val.dim(0), d = a->val.dim(1);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    double mx = a->val.at(i, 0);
    for (int j = 1; j < d; ++j) mx = std::max(mx, a->val.at(i, j));
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      out.at(i, j) = std::exp(a->val.at(i, j) - mx);
      s += out.at(i, j);
    }
    for (int j = 0; j < d; ++j) out.at(i, j) /= s;
  }
  return make_node(std::move(out), {a}, [n, d](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double dotv = 0.0;
      for (int j = 0; j < d; ++j) dotv += nd.grad.at(i, j) * nd.val.at(i, j);
      for (int j = 0; j < d; ++j)
        g.at(i, j) += nd.val.at(i, j) * (nd.grad.at(i, j) - dotv);
    }
  });
}

Value log_softmax_rows(const Value& a) {
  const int n = a->val.dim(0), d = a->val.dim(1);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    double mx = a->val.at(i, 0);
    for (int j = 1; j < d; ++j) mx = std::max(mx, a->val.at(i, j));
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += std::exp(a->val.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < d; ++j) out.at(i, j) = a->val.at(i, j) - lse;
  }
  return make_node(std::move(out), {a}, [n, d](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double gsum = 0.0;
      for (int j = 0; j < d; ++j) gsum += nd.grad.at(i, j);
      for (int j = 0; j < d; ++j)
        g.at(i, j) += nd.grad.at(i, j) - std::exp(nd.val.at(i, j)) * gsum;
    }
  });
}

Value cross_entropy(const Value& logits, const std::vector<int>& labels) {
  const int n = logits->val.dim(0), k = logits->val.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  Tensor probs({n, k});
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = logits->val.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits->val.at(i, j));
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      probs.at(i, j) = std::exp(logits->val.at(i, j) - mx);
      s += probs.at(i, j);
    }
    for (int j = 0; j < k; ++j) probs.at(i, j) /= s;
    loss -= std::log(std::max(probs.at(i, labels[static_cast<std::size_t>(i)]), 1e-300));
  }
  loss /= n;
  return make_node(Tensor::scalar(loss), {logits},
                   [n, k, labels, probs = std::move(probs)](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    const double s = nd.grad[0] / n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const double onehot = (j == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
        g.at(i, j) += s * (probs.at(i, j) - onehot);
      }
  });
}

Value layer_norm_rows(const Value& x, const Value& gamma, const Value& beta, double eps) {
  const int n = x->val.dim(0), d = x->val.dim(1);
  Tensor out({n, d}), xhat({n, d}), inv_sigma({n});
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x->val.at(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x->val.at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (int j = 0; j < d; ++j) {
      xhat.at(i, j) = (x->val.at(i, j) - mu) * is;
      out.at(i, j) = xhat.at(i, j) * gamma->val[j] + beta->val[j];
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [n, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node& nd) {
    const Value &x = nd.inputs[0], &gamma = nd.inputs[1], &beta = nd.inputs[2];
    if (gamma->requires_grad) {
      Tensor& gg = gamma->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gg[j] += nd.grad.at(i, j) * xhat.at(i, j);
    }
    if (beta->requires_grad) {
      Tensor& gb = beta->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gb[j] += nd.grad.at(i, j);
    }
    if (x->requires_grad) {
      Tensor& gx = x->ensure_grad();
      for (int i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gy = nd.grad.at(i, j) * gamma->val[j];
          m1 += gy;
          m2 += gy * xhat.at(i, j);
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
          const double gy = nd.grad.at(i, j) * gamma->val[j];
          gx.at(i, j) += inv_sigma[i] * (gy - m1 - xhat.at(i, j) * m2);
        }
      }
    }
  });
}

Value unit_normalize(const Value& v, double eps) {
  const std::int64_t d = v->val.numel();
  double nrm = v->val.norm2();
  const double n_eff = std::max(nrm, eps);
  Tensor out(v->val.shape());
  for (std::int64_t i = 0; i < d; ++i) out[i] = v->val[i] / n_eff;
  return make_node(std::move(out), {v}, [n_eff](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    double proj = 0.0;
    for (std::int64_t i = 0; i < nd.val.numel(); ++i) proj += nd.grad[i] * nd.val[i];
    for (std::int64_t i = 0; i < nd.val.numel(); ++i)
      g[i] += (nd.grad[i] - nd.val[i] * proj) / n_eff;
  });
}

// --------------------------------------------------------------------- convs

Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad) {
  const int ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
  const int co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  if (w->val.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (b->val.numel() != co) throw std::invalid_argument("conv2d: bias mismatch");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({co, oh, ow});
  for (int k = 0; k < co; ++k) {
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = b->val[k];
        for (int c = 0; c < ci; ++c)
          for (int p = 0; p < kh; ++p) {
            const int ih = i * stride - pad + p;
            if (ih < 0 || ih >= h) continue;
            for (int q = 0; q < kw; ++q) {
              const int iw = j * stride - pad + q;
              if (iw < 0 || iw >= wd) continue;
              acc += x->val.at(c, ih, iw) * w->val.at(k, c, p, q);
            }
          }
        out.at(k, i, j) = acc;
      }
  }
  return make_node(std::move(out), {x, w, b}, [=](Node& nd) {
    const Value &x = nd.inputs[0], &w = nd.inputs[1], &b = nd.inputs[2];
    const int oh = nd.val.dim(1), ow = nd.val.dim(2);
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (int k = 0; k < co; ++k)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) gb[k] += nd.grad.at(k, i, j);
    }
    const bool need_x = x->requires_grad, need_w = w->requires_grad;
    if (!need_x && !need_w) return;
    Tensor* gx = need_x ? &x->ensure_grad() : nullptr;
    Tensor* gw = need_w ? &w->ensure_grad() : nullptr;
    for (int k = 0; k < co; ++k)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const double gv = nd.grad.at(k, i, j);
          if (gv == 0.0) continue;
          for (int c = 0; c < ci; ++c)
            for (int p = 0; p < kh; ++p) {
              const int ih = i * stride - pad + p;
              if (ih < 0 || ih >= h) continue;
              for (int q = 0; q < kw; ++q) {
                const int iw = j * stride - pad + q;
                if (iw < 0 || iw >= wd) continue;
                if (need_w) gw->at(k, c, p, q) += gv * x->val.at(c, ih, iw);
                if (need_x) gx->at(c, ih, iw) += gv * w->val.at(k, c, p, q);
              }
            }
        }
  });
}

Value upsample2x(const Value& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = x->val.at(k, i, j);
        out.at(k, 2 * i, 2 * j) = v;
        out.at(k, 2 * i + 1, 2 * j) = v;
        out.at(k, 2 * i, 2 * j + 1) = v;
        out.at(k, 2 * i + 1, 2 * j + 1) = v;
      }
  return make_node(std::move(out), {x}, [c, h, w](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          g.at(k, i, j) += nd.grad.at(k, 2 * i, 2 * j) + nd.grad.at(k, 2 * i + 1, 2 * j) +
                           nd.grad.at(k, 2 * i, 2 * j + 1) + nd.grad.at(k, 2 * i + 1, 2 * j + 1);
  });
}

Value mean_hw(const Value& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const double inv = 1.0 / (static_cast<double>(h) * w);
  Tensor out({c});
  for (int k = 0; k < c; ++k) {
    double acc = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) acc += x->val.at(k, i, j);
    out[k] = acc * inv;
  }
  return make_node(std::move(out), {x}, [c, h, w, inv](Node& nd) {
    Tensor& g = nd.inputs[0]->ensure_grad();
    for (int k = 0; k < c; ++k) {
      const double s = nd.grad[k] * inv;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) g.at(k, i, j) += s;
    }
  });
}

Value add_channel_bias(const Value& x, const Value& b) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (b->val.numel() != c) throw std::invalid_argument("add_channel_bias: dim mismatch");
  Tensor out({c, h, w});
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(k, i, j) = x->val.at(k, i, j) + b->val[k];
  return make_node(std::move(out), {x, b}, [c, h, w](Node& nd) {
    if (nd.inputs[0]->requires_grad) nd.inputs[0]->accumulate(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor& g = nd.inputs[1]->ensure_grad();
      for (int k = 0; k < c; ++k)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) g[k] += nd.grad.at(k, i, j);
    }
  });
}

Value channel_norm(const Value& x, const Value& gamma, const Value& beta, double eps) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const int hw = h * w;
  Tensor out({c, h, w}), xhat({c, h, w}), inv_sigma({c});
  for (int k = 0; k < c; ++k) {
    double mu = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) mu += x->val.at(k, i, j);
    mu /= hw;
    double var = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double d = x->val.at(k, i, j) - mu;
        var += d * d;
      }
    var /= hw;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[k] = is;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        xhat.at(k, i, j) = (x->val.at(k, i, j) - mu) * is;
        out.at(k, i, j) = xhat.at(k, i, j) * gamma->val[k] + beta->val[k];
      }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [c, h, w, hw, xhat = std::move(xhat),
                    inv_sigma = std::move(inv_sigma)](Node& nd) {
    const Value &x = nd.inputs[0], &gamma = nd.inputs[1], &beta = nd.inputs[2];
    if (gamma->requires_grad) {
      Tensor& gg = gamma->ensure_grad();
      for (int k = 0; k < c; ++k)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) gg[k] += nd.grad.at(k, i, j) * xhat.at(k, i, j);
    }
    if (beta->requires_grad) {
      Tensor& gb = beta->ensure_grad();
      for (int k = 0; k < c; ++k)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) gb[k] += nd.grad.at(k, i, j);
    }
    if (x->requires_grad) {
      Tensor& gx = x->ensure_grad();
      for (int k = 0; k < c; ++k) {
        double m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double gy = nd.grad.at(k, i, j) * gamma->val[k];
            m1 += gy;
            m2 += gy * xhat.at(k, i, j);
          }
        m1 /= hw;
        m2 /= hw;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double gy = nd.grad.at(k, i, j) * gamma->val[k];
            gx.at(k, i, j) += inv_sigma[k] * (gy - m1 - xhat.at(k, i, j) * m2);
          }
      }
    }
  });
}

}  // namespace neuro3d::ag
