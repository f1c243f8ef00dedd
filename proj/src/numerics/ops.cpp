#include "stanet/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stanet/errors.hpp"
#include "stanet/numerics/graph.hpp"

namespace stanet::ops {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

// C[m x n] (+)= A[m x k] B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m x n] (+)= A[m x k] B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k x n] (+)= A[m x k]^T B[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

[[noreturn]] void dimension_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(op + ": expected rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) dimension_error(op, a, b);
}

template <class Fn>
void record(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& out, Fn&& fn) {
  if (!detail::should_record(inputs)) return;
  std::vector<NodePtr> nodes;
  nodes.reserve(inputs.size());
  for (const Tensor* t : inputs) nodes.push_back(t->node());
  Graph::active()->record(op, std::move(nodes), out.node(), std::forward<Fn>(fn));
}

// Elementwise unary op with derivative expressed through input and output.
template <class Forward, class Derivative>
Tensor unary(const char* op, const Tensor& a, Forward forward, Derivative derivative) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(a[i]);
  Tensor result(a.shape(), std::move(out));
  NodePtr an = a.node();
  record(op, {&a}, result, [an, derivative](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * derivative(an->data[i], o.data[i]);
    }
  });
  return result;
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) dimension_error("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
  NodePtr an = a.node(), bn = b.node();
  record("matmul", {&a, &b}, out, [an, bn, m, k, n](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) gemm_nt(m, n, k, o.grad.data(), bn->data.data(), g->data());
    if (auto* g = detail::grad_sink(*bn)) gemm_tn(m, k, n, an->data.data(), o.grad.data(), g->data());
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  if (a.dim(1) != b.dim(1)) dimension_error("matmul_nt", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros({m, n});
  gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data().data());
  NodePtr an = a.node(), bn = b.node();
  record("matmul_nt", {&a, &b}, out, [an, bn, m, k, n](const TensorNode& o) {
    // dA = dC B, dB = dC^T A
    if (auto* g = detail::grad_sink(*an)) gemm_nn(m, n, k, o.grad.data(), bn->data.data(), g->data());
    if (auto* g = detail::grad_sink(*bn)) gemm_tn(m, n, k, o.grad.data(), an->data.data(), g->data());
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  Tensor result({n, m}, std::move(out));
  NodePtr an = a.node();
  record("transpose", {&a}, result, [an, m, n](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += o.grad[j * m + i];
    }
  });
  return result;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor result(a.shape(), std::move(out));
  NodePtr an = a.node(), bn = b.node();
  record("add", {&a, &b}, result, [an, bn](const TensorNode& o) {
    for (const NodePtr& n : {an, bn}) {
      if (auto* g = detail::grad_sink(*n)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
      }
    }
  });
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor result(a.shape(), std::move(out));
  NodePtr an = a.node(), bn = b.node();
  record("sub", {&a, &b}, result, [an, bn](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::grad_sink(*bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
    }
  });
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor result(a.shape(), std::move(out));
  NodePtr an = a.node(), bn = b.node();
  record("mul", {&a, &b}, result, [an, bn](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * bn->data[i];
    }
    if (auto* g = detail::grad_sink(*bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * an->data[i];
    }
  });
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor reciprocal(const Tensor& a) {
  for (double v : a.data()) {
    if (v == 0.0) throw NumericError("reciprocal of zero");
  }
  return unary("reciprocal", a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ContractError("add_n needs at least one term");
  for (const Tensor& t : terms) require_same_shape("add_n", terms.front(), t);
  std::vector<double> out(terms.front().numel(), 0.0);
  for (const Tensor& t : terms)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  Tensor result(terms.front().shape(), std::move(out));
  if (detail::should_record(terms)) {
    std::vector<NodePtr> nodes;
    for (const Tensor& t : terms) nodes.push_back(t.node());
    Graph::active()->record("add_n", nodes, result.node(), [nodes](const TensorNode& o) {
      for (const NodePtr& n : nodes) {
        if (auto* g = detail::grad_sink(*n)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
        }
      }
    });
  }
  return result;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor result = Tensor::scalar(total);
  NodePtr an = a.node();
  record("sum", {&a}, result, [an](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (double& gi : *g) gi += o.grad[0];
    }
  });
  return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---- row-wise -------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require_rank("softmax_rows", x, 2);
  if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double* yi = out.data() + i * n;
    const double peak = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - peak);
      z += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  Tensor result({m, n}, std::move(out));
  NodePtr xn = x.node();
  record("softmax_rows", {&x}, result, [xn, m, n](const TensorNode& o) {
    auto* g = detail::grad_sink(*xn);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = o.data.data() + i * n;
      const double* gy = o.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * yi[j];
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += yi[j] * (gy[j] - dot);
    }
  });
  return result;
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank("log_softmax_rows", x, 2);
  if (!x.all_finite()) throw NumericError("log_softmax_rows: non-finite input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    const double peak = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - peak);
    const double log_z = peak + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] - log_z;
  }
  Tensor result({m, n}, std::move(out));
  NodePtr xn = x.node();
  record("log_softmax_rows", {&x}, result, [xn, m, n](const TensorNode& o) {
    auto* g = detail::grad_sink(*xn);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = o.data.data() + i * n;
      const double* gy = o.grad.data() + i * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += gy[j];
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += gy[j] - std::exp(yi[j]) * total;
    }
  });
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_to_string(logits.shape()) + " logits");
  }
  for (std::size_t label : labels) {
    if (label >= n) throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
  }
  Tensor log_probs = log_softmax_rows(logits);
  std::vector<double> pick(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) pick[i * n + labels[i]] = -1.0 / static_cast<double>(m);
  return sum(mul(log_probs, Tensor({m, n}, std::move(pick))));
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_row_bias", x, 2);
  if (bias.numel() != x.dim(1)) dimension_error("add_row_bias", x, bias);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  Tensor result({m, n}, std::move(out));
  NodePtr xn = x.node(), bn = bias.node();
  record("add_row_bias", {&x, &bias}, result, [xn, bn, m, n](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*xn)) {
      for (std::size_t i = 0; i < m * n; ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::grad_sink(*bn)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += o.grad[i * n + j];
    }
  });
  return result;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank("scale_rows", x, 2);
  if (s.numel() != x.dim(0)) dimension_error("scale_rows", x, s);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * s[i];
  Tensor result({m, n}, std::move(out));
  NodePtr xn = x.node(), sn = s.node();
  record("scale_rows", {&x, &s}, result, [xn, sn, m, n](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*xn)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += o.grad[i * n + j] * sn->data[i];
    }
    if (auto* g = detail::grad_sink(*sn)) {
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * xn->data[i * n + j];
        (*g)[i] += acc;
      }
    }
  });
  return result;
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  require_rank("layer_norm_rows", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (xi[j] - mu) * inv_std[i];
  }
  Tensor result({m, n}, std::move(out));
  NodePtr xn = x.node();
  record("layer_norm_rows", {&x}, result, [xn, m, n, inv_std](const TensorNode& o) {
    auto* g = detail::grad_sink(*xn);
    if (!g) return;
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = o.data.data() + i * n;
      const double* gy = o.grad.data() + i * n;
      double g_mean = 0.0, gy_dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        g_mean += gy[j];
        gy_dot += gy[j] * yi[j];
      }
      g_mean /= dn;
      gy_dot /= dn;
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += inv_std[i] * (gy[j] - g_mean - yi[j] * gy_dot);
    }
  });
  return result;
}

Tensor patch_cosine(const Tensor& q, const Tensor& a) {
  require_rank("patch_cosine", q, 2);
  require_same_shape("patch_cosine", q, a);
  const std::size_t p = q.dim(0), c = q.dim(1);
  std::vector<double> out(p), dots(p), nq(p), na(p);
  for (std::size_t m = 0; m < p; ++m) {
    const double* qm = q.data().data() + m * c;
    const double* am = a.data().data() + m * c;
    double dot = 0.0, qq = 0.0, aa = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += qm[j] * am[j];
      qq += qm[j] * qm[j];
      aa += am[j] * am[j];
    }
    dots[m] = dot;
    nq[m] = std::sqrt(qq);
    na[m] = std::sqrt(aa);
    out[m] = dot / std::max(nq[m] * na[m], kCosineEps);
  }
  Tensor result({p}, std::move(out));
  NodePtr qn = q.node(), an = a.node();
  record("patch_cosine", {&q, &a}, result, [qn, an, p, c, dots, nq, na](const TensorNode& o) {
    // Above the floor: d cos / d q = a / (|q||a|) - dot q / (|q|^3 |a|).
    // At the floor the denominator is the constant eps.
    auto* gq = detail::grad_sink(*qn);
    auto* ga = detail::grad_sink(*an);
    for (std::size_t m = 0; m < p; ++m) {
      const double go = o.grad[m];
      if (go == 0.0) continue;
      const double* qm = qn->data.data() + m * c;
      const double* am = an->data.data() + m * c;
      const double denom = nq[m] * na[m];
      const bool floored = !(denom > kCosineEps);
      const double inv = 1.0 / (floored ? kCosineEps : denom);
      if (gq) {
        const double coef = floored ? 0.0 : dots[m] / (nq[m] * nq[m] * denom);
        for (std::size_t j = 0; j < c; ++j) (*gq)[m * c + j] += go * (am[j] * inv - coef * qm[j]);
      }
      if (ga) {
        const double coef = floored ? 0.0 : dots[m] / (na[m] * na[m] * denom);
        for (std::size_t j = 0; j < c; ++j) (*ga)[m * c + j] += go * (qm[j] * inv - coef * am[j]);
      }
    }
  });
  return result;
}

// ---- feature maps ---------------------------------------------------------

Tensor broadcast_mul_spatial(const Tensor& f, const Tensor& s) {
  require_rank("broadcast_mul_spatial", f, 3);
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  const bool flat_ok = s.rank() == 1 && s.dim(0) == hw;
  const bool grid_ok = s.rank() == 2 && s.dim(0) == f.dim(1) && s.dim(1) == f.dim(2);
  if (!flat_ok && !grid_ok) dimension_error("broadcast_mul_spatial", f, s);
  std::vector<double> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t m = 0; m < hw; ++m) out[ch * hw + m] = f[ch * hw + m] * s[m];
  Tensor result(f.shape(), std::move(out));
  NodePtr fn = f.node(), sn = s.node();
  record("broadcast_mul_spatial", {&f, &s}, result, [fn, sn, c, hw](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*fn)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t m = 0; m < hw; ++m) (*g)[ch * hw + m] += o.grad[ch * hw + m] * sn->data[m];
    }
    if (auto* g = detail::grad_sink(*sn)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t m = 0; m < hw; ++m) (*g)[m] += o.grad[ch * hw + m] * fn->data[ch * hw + m];
    }
  });
  return result;
}

Tensor broadcast_mul_channel(const Tensor& f, const Tensor& v) {
  require_rank("broadcast_mul_channel", f, 3);
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  if (v.rank() != 1 || v.dim(0) != c) dimension_error("broadcast_mul_channel", f, v);
  std::vector<double> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t m = 0; m < hw; ++m) out[ch * hw + m] = f[ch * hw + m] * v[ch];
  Tensor result(f.shape(), std::move(out));
  NodePtr fn = f.node(), vn = v.node();
  record("broadcast_mul_channel", {&f, &v}, result, [fn, vn, c, hw](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*fn)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t m = 0; m < hw; ++m) (*g)[ch * hw + m] += o.grad[ch * hw + m] * vn->data[ch];
    }
    if (auto* g = detail::grad_sink(*vn)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t m = 0; m < hw; ++m) acc += o.grad[ch * hw + m] * fn->data[ch * hw + m];
        (*g)[ch] += acc;
      }
    }
  });
  return result;
}

Tensor global_avg_pool(const Tensor& f) {
  require_rank("global_avg_pool", f, 3);
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t m = 0; m < hw; ++m) acc += f[ch * hw + m];
    out[ch] = acc / static_cast<double>(hw);
  }
  Tensor result({c}, std::move(out));
  NodePtr fn = f.node();
  record("global_avg_pool", {&f}, result, [fn, c, hw](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*fn)) {
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t m = 0; m < hw; ++m) (*g)[ch * hw + m] += o.grad[ch] * inv;
    }
  });
  return result;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  const std::size_t ci = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci || w.dim(3) != k) dimension_error("conv2d", x, w);
  if (b.numel() != co) dimension_error("conv2d", w, b);
  if (H + 2 * padding < k || W + 2 * padding < k) dimension_error("conv2d", x, w);
  const std::size_t Ho = H + 2 * padding - k + 1, Wo = W + 2 * padding - k + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Accumulates the kernel contribution for every valid (output, input) pair.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < ci; ++i)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * ci + i) * k + ky) * k + kx;
            for (std::size_t y = 0; y < Ho; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const std::size_t x_row = (i * H + static_cast<std::size_t>(iy)) * W;
              const std::size_t o_row = (o * Ho + y) * Wo;
              for (std::size_t xo = 0; xo < Wo; ++xo) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                visit(o_row + xo, x_row + static_cast<std::size_t>(ix), widx);
              }
            }
          }
  };

  std::vector<double> out(co * Ho * Wo);
  for (std::size_t o = 0; o < co; ++o) std::fill_n(out.begin() + o * Ho * Wo, Ho * Wo, b[o]);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out[oi] += wd[wi] * xd[xi]; });
  Tensor result({co, Ho, Wo}, std::move(out));

  NodePtr xn = x.node(), wn = w.node(), bn = b.node();
  record("conv2d", {&x, &w, &b}, result, [xn, wn, bn, co, Ho, Wo, for_each_tap](const TensorNode& o) {
    auto* gx = detail::grad_sink(*xn);
    auto* gw = detail::grad_sink(*wn);
    if (gx || gw) {
      for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
        const double go = o.grad[oi];
        if (gx) (*gx)[xi] += go * wn->data[wi];
        if (gw) (*gw)[wi] += go * xn->data[xi];
      });
    }
    if (auto* gb = detail::grad_sink(*bn)) {
      for (std::size_t oc = 0; oc < co; ++oc) {
        double acc = 0.0;
        for (std::size_t m = 0; m < Ho * Wo; ++m) acc += o.grad[oc * Ho * Wo + m];
        (*gb)[oc] += acc;
      }
    }
  });
  return result;
}

Tensor max_pool2(const Tensor& x) {
  require_rank("max_pool2", x, 3);
  const std::size_t c = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) throw DimensionError("max_pool2: input too small " + shape_to_string(x.shape()));
  std::vector<double> out(c * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xo = 0; xo < Wo; ++xo) {
        std::size_t best = (ch * H + 2 * y) * W + 2 * xo;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * H + 2 * y + dy) * W + 2 * xo + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t oi = (ch * Ho + y) * Wo + xo;
        out[oi] = x[best];
        argmax[oi] = best;
      }
  Tensor result({c, Ho, Wo}, std::move(out));
  NodePtr xn = x.node();
  record("max_pool2", {&x}, result, [xn, argmax](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*xn)) {
      for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i]] += o.grad[i];
    }
  });
  return result;
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  Tensor result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  NodePtr an = a.node();
  record("reshape", {&a}, result, [an](const TensorNode& o) {
    if (auto* g = detail::grad_sink(*an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat needs at least one part");
  Shape shape = parts.front().shape();
  Shape tail(shape.begin() + 1, shape.end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) dimension_error("concat", parts.front(), p);
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  Tensor result(std::move(shape), std::move(out));
  if (detail::should_record(parts)) {
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    Graph::active()->record("concat", nodes, result.node(), [nodes](const TensorNode& o) {
      std::size_t offset = 0;
      for (const NodePtr& n : nodes) {
        if (auto* g = detail::grad_sink(*n)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[offset + i];
        }
        offset += n->data.size();
      }
    });
  }
  return result;
}

Tensor to_positions(const Tensor& f) {
  require_rank("to_positions", f, 3);
  return transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

Tensor from_positions(const Tensor& x, std::size_t h, std::size_t w) {
  require_rank("from_positions", x, 2);
  if (x.dim(0) != h * w) {
    throw DimensionError("from_positions: " + shape_to_string(x.shape()) + " is not " + std::to_string(h) + "x" +
                         std::to_string(w) + " positions");
  }
  return reshape(transpose(x), {x.dim(1), h, w});
}

// ---- vectors --------------------------------------------------------------

Tensor l2_normalize(const Tensor& v) {
  double sq = 0.0;
  for (double x : v.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("l2_normalize: vector has zero or non-finite norm");
  std::vector<double> out(v.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] / norm;
  Tensor result(v.shape(), std::move(out));
  NodePtr vn = v.node();
  record("l2_normalize", {&v}, result, [vn, norm](const TensorNode& o) {
    auto* g = detail::grad_sink(*vn);
    if (!g) return;
    double dot = 0.0;
    for (std::size_t i = 0; i < o.data.size(); ++i) dot += o.grad[i] * o.data[i];
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += (o.grad[i] - o.data[i] * dot) / norm;
  });
  return result;
}

// ---- non-differentiable helpers -------------------------------------------

Tensor row(const Tensor& m, std::size_t i) {
  require_rank("row", m, 2);
  if (i >= m.dim(0)) throw DimensionError("row " + std::to_string(i) + " out of range for " + shape_to_string(m.shape()));
  const std::size_t n = m.dim(1);
  return Tensor({n}, std::vector<double>(m.data().begin() + i * n, m.data().begin() + (i + 1) * n));
}

Tensor rot90(const Tensor& x, int quarter_turns) {
  if (x.rank() < 2) throw DimensionError("rot90 needs at least two axes, got " + shape_to_string(x.shape()));
  const int turns = ((quarter_turns % 4) + 4) % 4;
  const Shape& s = x.shape();
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  if (turns % 2 == 1 && H != W) {
    throw DimensionError("rot90: odd quarter turns need a square spatial extent, got " + shape_to_string(s));
  }
  const std::size_t planes = x.numel() / (H * W);
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * H * W;
    double* dst = out.data() + p * H * W;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        // destination (i, j) reads the source pixel that lands there
        std::size_t si = i, sj = j;
        switch (turns) {
          case 1: si = j; sj = W - 1 - i; break;
          case 2: si = H - 1 - i; sj = W - 1 - j; break;
          case 3: si = H - 1 - j; sj = i; break;
          default: break;
        }
        dst[i * W + j] = src[si * W + sj];
      }
  }
  return Tensor(s, std::move(out));
}

}  // namespace stanet::ops
