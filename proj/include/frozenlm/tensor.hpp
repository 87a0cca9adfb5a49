#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "frozenlm/common.hpp"

// Reverse-mode automatic differentiation over dense tensors. Graphs are
// built eagerly: every op records a closure that scatters the output
// gradient into its parents. backward() runs the closures in reverse
// topological order. Templated on the scalar type; float is the working
// precision, double backs the finite-difference oracles.

namespace frozenlm {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

// Disables graph recording in scope; forwards become plain evaluation.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // allocated on first use, same length as val
  bool needs_grad = false;
  std::string name;  // nonempty for named parameters
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  int64_t size() const { return int64_t(val.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), S(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

  static Tensor make(Shape shape, std::vector<S> data, bool needs_grad = false,
                     std::string name = {}) {
    if (int64_t(data.size()) != numel(shape))
      throw std::invalid_argument("tensor data length does not match shape");
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->needs_grad = needs_grad && detail::grad_mode();
    n->name = std::move(name);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool needs_grad = false) {
    std::vector<S> d(size_t(numel(shape)), S(0));
    return make(std::move(shape), std::move(d), needs_grad);
  }

  static Tensor full(Shape shape, S value) {
    std::vector<S> d(size_t(numel(shape)), value);
    return make(std::move(shape), std::move(d));
  }

  static Tensor scalar(S value) { return make({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return node_->size(); }
  int64_t rows() const { return node_->shape.at(0); }
  int64_t cols() const { return node_->shape.at(1); }
  std::vector<S>& val() { return node_->val; }
  const std::vector<S>& val() const { return node_->val; }
  std::vector<S>& grad() { return node_->grad; }
  const std::vector<S>& grad() const { return node_->grad; }
  bool needs_grad() const { return node_->needs_grad; }
  const std::string& name() const { return node_->name; }

  S item() const {
    if (node_->size() != 1) throw std::runtime_error("item(): tensor is not scalar");
    return node_->val[0];
  }

  TensorNode<S>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<S>>& handle() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> alloc(Shape shape) {
  auto n = std::make_shared<TensorNode<S>>();
  n->val.assign(size_t(numel(shape)), S(0));
  n->shape = std::move(shape);
  return Tensor<S>(std::move(n));
}

template <class S>
void wire(Tensor<S>& out, std::initializer_list<Tensor<S>> parents,
          std::function<void()> fn) {
  if (!grad_mode()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.needs_grad();
  if (!any) return;
  out.node()->needs_grad = true;
  for (const auto& p : parents) out.node()->parents.push_back(p.handle());
  out.node()->backprop = std::move(fn);
}

template <class S>
void require_2d(const Tensor<S>& t, const char* who) {
  if (t.shape().size() != 2) throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = a.val()[size_t(i)] + b.val()[size_t(i)];
  detail::wire(out, {a, b}, [an = a.node(), bn = b.node(), on = out.node(), n] {
    if (an->needs_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[size_t(i)] += on->grad[size_t(i)];
    }
  });
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("sub: shape mismatch");
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = a.val()[size_t(i)] - b.val()[size_t(i)];
  detail::wire(out, {a, b}, [an = a.node(), bn = b.node(), on = out.node(), n] {
    if (an->needs_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[size_t(i)] -= on->grad[size_t(i)];
    }
  });
  return out;
}

// [m,n] + [n] broadcast over rows
template <class S>
Tensor<S> add_bias(const Tensor<S>& a, const Tensor<S>& bias) {
  detail::require_2d(a, "add_bias");
  if (bias.shape().size() != 1 || bias.shape()[0] != a.cols())
    throw std::invalid_argument("add_bias: bias must be [cols]");
  auto out = detail::alloc<S>(a.shape());
  const int64_t m = a.rows(), n = a.cols();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.val()[size_t(i * n + j)] = a.val()[size_t(i * n + j)] + bias.val()[size_t(j)];
  detail::wire(out, {a, bias}, [an = a.node(), bn = bias.node(), on = out.node(), m, n] {
    if (an->needs_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < m * n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) bn->grad[size_t(j)] += on->grad[size_t(i * n + j)];
    }
  });
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = a.val()[size_t(i)] * b.val()[size_t(i)];
  detail::wire(out, {a, b}, [an = a.node(), bn = b.node(), on = out.node(), n] {
    if (an->needs_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)] * bn->val[size_t(i)];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[size_t(i)] += on->grad[size_t(i)] * an->val[size_t(i)];
    }
  });
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = a.val()[size_t(i)] * c;
  detail::wire(out, {a}, [an = a.node(), on = out.node(), n, c] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)] * c;
  });
  return out;
}

template <class S>
Tensor<S> exp_of(const Tensor<S>& a) {
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = std::exp(a.val()[size_t(i)]);
  detail::wire(out, {a}, [an = a.node(), on = out.node(), n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)] * on->val[size_t(i)];
  });
  return out;
}

template <class S>
Tensor<S> log_of(const Tensor<S>& a) {
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.val()[size_t(i)] = std::log(a.val()[size_t(i)]);
  detail::wire(out, {a}, [an = a.node(), on = out.node(), n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)] / an->val[size_t(i)];
  });
  return out;
}

// tanh-approximation GELU (GPT-2 convention)
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  const S c0 = S(0.7978845608028654);  // sqrt(2/pi)
  const S c1 = S(0.044715);
  for (int64_t i = 0; i < n; ++i) {
    S x = a.val()[size_t(i)];
    S t = std::tanh(c0 * (x + c1 * x * x * x));
    out.val()[size_t(i)] = S(0.5) * x * (S(1) + t);
  }
  detail::wire(out, {a}, [an = a.node(), on = out.node(), n, c0, c1] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      S x = an->val[size_t(i)];
      S u = c0 * (x + c1 * x * x * x);
      S t = std::tanh(u);
      S du = c0 * (S(1) + S(3) * c1 * x * x);
      S d = S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
      an->grad[size_t(i)] += on->grad[size_t(i)] * d;
    }
  });
  return out;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  auto out = detail::alloc<S>({m, n});
  const S* av = a.val().data();
  const S* bv = b.val().data();
  S* ov = out.val().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const S aip = av[i * k + p];
      const S* brow = bv + p * n;
      S* orow = ov + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  detail::wire(out, {a, b}, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    const S* og = on->grad.data();
    if (an->needs_grad) {
      an->ensure_grad();
      // dA += dC * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          S acc = 0;
          const S* orow = og + i * n;
          const S* brow = bn->val.data() + p * n;
          for (int64_t j = 0; j < n; ++j) acc += orow[j] * brow[j];
          an->grad[size_t(i * k + p)] += acc;
        }
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      // dB += A^T * dC
      for (int64_t p = 0; p < k; ++p)
        for (int64_t i = 0; i < m; ++i) {
          const S aip = an->val[size_t(i * k + p)];
          const S* orow = og + i * n;
          S* brow = bn->grad.data() + p * n;
          for (int64_t j = 0; j < n; ++j) brow[j] += aip * orow[j];
        }
    }
  });
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_2d(a, "transpose");
  const int64_t m = a.rows(), n = a.cols();
  auto out = detail::alloc<S>({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.val()[size_t(j * m + i)] = a.val()[size_t(i * n + j)];
  detail::wire(out, {a}, [an = a.node(), on = out.node(), m, n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) an->grad[size_t(i * n + j)] += on->grad[size_t(j * m + i)];
  });
  return out;
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty list");
  const int64_t n = parts[0].cols();
  int64_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n) throw std::invalid_argument("concat_rows: column mismatch");
    m += p.rows();
  }
  auto out = detail::alloc<S>({m, n});
  int64_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.val().begin(), p.val().end(), out.val().begin() + r * n);
    r += p.rows();
  }
  if (detail::grad_mode()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.needs_grad();
    if (any) {
      out.node()->needs_grad = true;
      std::vector<TensorNode<S>*> raw;
      for (const auto& p : parts) {
        out.node()->parents.push_back(p.handle());
        raw.push_back(p.node());
      }
      out.node()->backprop = [raw, on = out.node(), n] {
        int64_t r0 = 0;
        for (auto* pn : raw) {
          const int64_t rows = pn->shape[0];
          if (pn->needs_grad) {
            pn->ensure_grad();
            for (int64_t i = 0; i < rows * n; ++i)
              pn->grad[size_t(i)] += on->grad[size_t(r0 * n + i)];
          }
          r0 += rows;
        }
      };
    }
  }
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int64_t r0, int64_t r1) {
  detail::require_2d(a, "slice_rows");
  if (r0 < 0 || r1 > a.rows() || r0 > r1) throw std::invalid_argument("slice_rows: bad range");
  const int64_t n = a.cols();
  auto out = detail::alloc<S>({r1 - r0, n});
  std::copy(a.val().begin() + r0 * n, a.val().begin() + r1 * n, out.val().begin());
  detail::wire(out, {a}, [an = a.node(), on = out.node(), r0, r1, n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < (r1 - r0) * n; ++i) an->grad[size_t(r0 * n + i)] += on->grad[size_t(i)];
  });
  return out;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int64_t c0, int64_t c1) {
  detail::require_2d(a, "slice_cols");
  if (c0 < 0 || c1 > a.cols() || c0 > c1) throw std::invalid_argument("slice_cols: bad range");
  const int64_t m = a.rows(), n = a.cols(), w = c1 - c0;
  auto out = detail::alloc<S>({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy(a.val().begin() + i * n + c0, a.val().begin() + i * n + c1,
              out.val().begin() + i * w);
  detail::wire(out, {a}, [an = a.node(), on = out.node(), m, n, c0, w] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j)
        an->grad[size_t(i * n + c0 + j)] += on->grad[size_t(i * w + j)];
  });
  return out;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty list");
  const int64_t m = parts[0].rows();
  int64_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
  }
  auto out = detail::alloc<S>({m, n});
  int64_t c = 0;
  for (const auto& p : parts) {
    const int64_t w = p.cols();
    for (int64_t i = 0; i < m; ++i)
      std::copy(p.val().begin() + i * w, p.val().begin() + (i + 1) * w,
                out.val().begin() + i * n + c);
    c += w;
  }
  if (detail::grad_mode()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.needs_grad();
    if (any) {
      out.node()->needs_grad = true;
      std::vector<TensorNode<S>*> raw;
      for (const auto& p : parts) {
        out.node()->parents.push_back(p.handle());
        raw.push_back(p.node());
      }
      out.node()->backprop = [raw, on = out.node(), m, n] {
        int64_t c0 = 0;
        for (auto* pn : raw) {
          const int64_t w = pn->shape[1];
          if (pn->needs_grad) {
            pn->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < w; ++j)
                pn->grad[size_t(i * w + j)] += on->grad[size_t(i * n + c0 + j)];
          }
          c0 += w;
        }
      };
    }
  }
  return out;
}

// gather arbitrary rows; backward scatter-adds
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, std::vector<int64_t> idx) {
  detail::require_2d(a, "gather_rows");
  const int64_t n = a.cols();
  for (auto r : idx)
    if (r < 0 || r >= a.rows()) throw std::invalid_argument("gather_rows: index out of range");
  auto out = detail::alloc<S>({int64_t(idx.size()), n});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(a.val().begin() + idx[i] * n, a.val().begin() + (idx[i] + 1) * n,
              out.val().begin() + int64_t(i) * n);
  detail::wire(out, {a}, [an = a.node(), on = out.node(), idx = std::move(idx), n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < n; ++j)
        an->grad[size_t(idx[i] * n + j)] += on->grad[i * size_t(n) + size_t(j)];
  });
  return out;
}

// token embedding lookup: table [V,D], ids -> [T,D]
template <class S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
  detail::require_2d(table, "embedding");
  std::vector<int64_t> idx(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) idx[i] = ids[i];
  return gather_rows(table, std::move(idx));
}

// ---------------------------------------------------------------------------
// reductions and normalizations

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  auto out = detail::alloc<S>({1});
  S acc = 0;
  for (S v : a.val()) acc += v;
  out.val()[0] = acc;
  detail::wire(out, {a}, [an = a.node(), on = out.node()] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    const S g = on->grad[0];
    for (auto& gv : an->grad) gv += g;
  });
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / S(a.size()));
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  detail::require_2d(a, "softmax_rows");
  const int64_t m = a.rows(), n = a.cols();
  auto out = detail::alloc<S>({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const S* row = a.val().data() + i * n;
    S mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    S* orow = out.val().data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int64_t j = 0; j < n; ++j) orow[j] /= z;
  }
  detail::wire(out, {a}, [an = a.node(), on = out.node(), m, n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const S* p = on->val.data() + i * n;
      const S* dp = on->grad.data() + i * n;
      S dot = 0;
      for (int64_t j = 0; j < n; ++j) dot += p[j] * dp[j];
      S* da = an->grad.data() + i * n;
      for (int64_t j = 0; j < n; ++j) da[j] += p[j] * (dp[j] - dot);
    }
  });
  return out;
}

// Row-wise softmax where row i is normalized over columns j <= i only.
// Probabilities above the diagonal are structural zeros, which makes
// causality exact in both value and gradient.
template <class S>
Tensor<S> causal_softmax(const Tensor<S>& scores) {
  detail::require_2d(scores, "causal_softmax");
  if (scores.rows() != scores.cols())
    throw std::invalid_argument("causal_softmax: expected square score matrix");
  const int64_t n = scores.rows();
  auto out = detail::alloc<S>({n, n});
  for (int64_t i = 0; i < n; ++i) {
    const S* row = scores.val().data() + i * n;
    S mx = row[0];
    for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    S* orow = out.val().data() + i * n;
    for (int64_t j = 0; j <= i; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int64_t j = 0; j <= i; ++j) orow[j] /= z;
  }
  detail::wire(out, {scores}, [an = scores.node(), on = out.node(), n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const S* p = on->val.data() + i * n;
      const S* dp = on->grad.data() + i * n;
      S dot = 0;
      for (int64_t j = 0; j <= i; ++j) dot += p[j] * dp[j];
      S* da = an->grad.data() + i * n;
      for (int64_t j = 0; j <= i; ++j) da[j] += p[j] * (dp[j] - dot);
    }
  });
  return out;
}

template <class S>
Tensor<S> log_softmax_rows(const Tensor<S>& a) {
  detail::require_2d(a, "log_softmax_rows");
  const int64_t m = a.rows(), n = a.cols();
  auto out = detail::alloc<S>({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const S* row = a.val().data() + i * n;
    S mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const S lse = mx + std::log(z);
    S* orow = out.val().data() + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  detail::wire(out, {a}, [an = a.node(), on = out.node(), m, n] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const S* ly = on->val.data() + i * n;
      const S* dy = on->grad.data() + i * n;
      S tot = 0;
      for (int64_t j = 0; j < n; ++j) tot += dy[j];
      S* da = an->grad.data() + i * n;
      for (int64_t j = 0; j < n; ++j) da[j] += dy[j] - std::exp(ly[j]) * tot;
    }
  });
  return out;
}

template <class S>
Tensor<S> layernorm_rows(const Tensor<S>& a, const Tensor<S>& gain, const Tensor<S>& bias,
                         S eps = S(1e-5)) {
  detail::require_2d(a, "layernorm_rows");
  const int64_t m = a.rows(), n = a.cols();
  if (gain.size() != n || bias.size() != n)
    throw std::invalid_argument("layernorm_rows: gain/bias must be [cols]");
  auto out = detail::alloc<S>({m, n});
  std::vector<S> inv_sigma(static_cast<size_t>(m)), mean(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    const S* row = a.val().data() + i * n;
    S mu = 0;
    for (int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= S(n);
    S var = 0;
    for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= S(n);
    const S is = S(1) / std::sqrt(var + eps);
    mean[size_t(i)] = mu;
    inv_sigma[size_t(i)] = is;
    S* orow = out.val().data() + i * n;
    for (int64_t j = 0; j < n; ++j)
      orow[j] = (row[j] - mu) * is * gain.val()[size_t(j)] + bias.val()[size_t(j)];
  }
  detail::wire(out, {a, gain, bias},
               [an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node(), m, n,
                mean = std::move(mean), inv_sigma = std::move(inv_sigma)] {
                 for (int64_t i = 0; i < m; ++i) {
                   const S* row = an->val.data() + i * n;
                   const S* dy = on->grad.data() + i * n;
                   const S mu = mean[size_t(i)];
                   const S is = inv_sigma[size_t(i)];
                   if (gn->needs_grad) gn->ensure_grad();
                   if (bn->needs_grad) bn->ensure_grad();
                   if (an->needs_grad) an->ensure_grad();
                   // xhat and the two row means needed by the input gradient
                   S mean_gdy = 0, mean_gdyx = 0;
                   for (int64_t j = 0; j < n; ++j) {
                     const S xh = (row[j] - mu) * is;
                     const S gdy = gn->val[size_t(j)] * dy[j];
                     mean_gdy += gdy;
                     mean_gdyx += gdy * xh;
                     if (gn->needs_grad) gn->grad[size_t(j)] += dy[j] * xh;
                     if (bn->needs_grad) bn->grad[size_t(j)] += dy[j];
                   }
                   mean_gdy /= S(n);
                   mean_gdyx /= S(n);
                   if (an->needs_grad) {
                     S* da = an->grad.data() + i * n;
                     for (int64_t j = 0; j < n; ++j) {
                       const S xh = (row[j] - mu) * is;
                       const S gdy = gn->val[size_t(j)] * dy[j];
                       da[j] += is * (gdy - mean_gdy - xh * mean_gdyx);
                     }
                   }
                 }
               });
  return out;
}

// Mean cross-entropy of logits [T,V] against integer targets. Rows whose
// target equals ignore_index contribute nothing (and do not count toward
// the mean).
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets,
                        int ignore_index = -1) {
  detail::require_2d(logits, "cross_entropy");
  const int64_t t = logits.rows(), v = logits.cols();
  if (int64_t(targets.size()) != t)
    throw std::invalid_argument("cross_entropy: one target per row required");
  int64_t counted = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (targets[size_t(i)] == ignore_index) continue;
    if (targets[size_t(i)] < 0 || targets[size_t(i)] >= v)
      throw std::invalid_argument("cross_entropy: target id out of range");
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: all rows ignored");
  auto out = detail::alloc<S>({1});
  std::vector<S> probs(static_cast<size_t>(t * v));
  S loss = 0;
  for (int64_t i = 0; i < t; ++i) {
    const S* row = logits.val().data() + i * v;
    S mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    S* prow = probs.data() + i * v;
    for (int64_t j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (int64_t j = 0; j < v; ++j) prow[j] /= z;
    if (targets[size_t(i)] != ignore_index)
      loss -= std::log(std::max(prow[targets[size_t(i)]], std::numeric_limits<S>::min()));
  }
  out.val()[0] = loss / S(counted);
  std::vector<int> tgt(targets.begin(), targets.end());
  detail::wire(out, {logits},
               [ln = logits.node(), on = out.node(), t, v, counted, ignore_index,
                probs = std::move(probs), tgt = std::move(tgt)] {
                 if (!ln->needs_grad) return;
                 ln->ensure_grad();
                 const S g = on->grad[0] / S(counted);
                 for (int64_t i = 0; i < t; ++i) {
                   if (tgt[size_t(i)] == ignore_index) continue;
                   const S* prow = probs.data() + i * v;
                   S* drow = ln->grad.data() + i * v;
                   for (int64_t j = 0; j < v; ++j) drow[j] += g * prow[j];
                   drow[tgt[size_t(i)]] -= g;
                 }
               });
  return out;
}

// Inverted dropout; the mask is drawn once at op construction from the
// caller's stream. Call only on training paths.
template <class S>
Tensor<S> dropout(const Tensor<S>& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  auto out = detail::alloc<S>(a.shape());
  const int64_t n = a.size();
  std::vector<S> mask(static_cast<size_t>(n));
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (int64_t i = 0; i < n; ++i) {
    mask[size_t(i)] = (rng.uniform() < rate) ? S(0) : keep_scale;
    out.val()[size_t(i)] = a.val()[size_t(i)] * mask[size_t(i)];
  }
  detail::wire(out, {a}, [an = a.node(), on = out.node(), n, mask = std::move(mask)] {
    if (!an->needs_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)] * mask[size_t(i)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// backward

struct BackwardReport {
  // names of requested parameters that the loss does not reach
  std::vector<std::string> disconnected;
};

template <class S>
std::vector<TensorNode<S>*> topo_from(TensorNode<S>* root) {
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children after parents; reverse for backprop
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable node with needs_grad set (frozen parameters included; the
// optimizer is what enforces the partition).
template <class S>
BackwardReport backward(const Tensor<S>& loss,
                        std::span<const Tensor<S>> report_params = {},
                        S seed_grad = S(1)) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  BackwardReport report;
  if (!loss.needs_grad()) {
    for (const auto& p : report_params) report.disconnected.push_back(p.name());
    return report;
  }
  auto order = topo_from<S>(loss.node());
  loss.node()->ensure_grad();
  loss.node()->grad[0] += seed_grad;
  std::unordered_set<TensorNode<S>*> reached(order.begin(), order.end());
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
  for (const auto& p : report_params)
    if (!reached.count(p.node())) report.disconnected.push_back(p.name());
  return report;
}

}  // namespace frozenlm
