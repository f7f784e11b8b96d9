#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <variant>
#include <vector>

#include "epic/matrix.hpp"

namespace epic {

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

// One element of a mixed token/vector input sequence.
template <typename T>
struct SeqElement {
  enum class Kind { Token, InjectConst, InjectNode };
  Kind kind;
  int token_id = -1;
  std::vector<T> vec;  // InjectConst
  int node = -1;       // InjectNode: 1 x d node on the same tape
};

// Per-layer attention capture: capture[head] is an n x n row-stochastic
// matrix with exact zeros above the diagonal.
template <typename T>
using AttnMaps = std::vector<Matrix<T>>;

// Reverse-mode tape over dense matrices. Nodes are created in topological
// order; backward() walks them in reverse. The tape owns values and grads.
template <typename T>
class Tape {
 public:
  using NodeId = int;

  NodeId leaf(Matrix<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {});
  }

  NodeId constant(Matrix<T> value) { return push(std::move(value), false, {}); }

  const Matrix<T>& value(NodeId id) const { return nodes_[id].value; }
  const Matrix<T>& grad(NodeId id) const { return nodes_[id].grad; }
  Matrix<T>& grad_mut(NodeId id) { return nodes_[id].grad; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  NodeId matmul(NodeId a, NodeId b, bool ta = false, bool tb = false) {
    Matrix<T> out;
    matmul_into(val(a), ta, val(b), tb, out, false);
    return make(std::move(out), {a, b}, [this, a, b, ta, tb](const Matrix<T>& g) {
      // dA and dB for C = op(A) op(B): standard transpose bookkeeping.
      if (needs(a)) {
        if (!ta)
          matmul_into(g, false, val(b), !tb, nodes_[a].grad, true);
        else
          matmul_into(val(b), tb, g, true, nodes_[a].grad, true);
      }
      if (needs(b)) {
        if (!tb)
          matmul_into(val(a), !ta, g, false, nodes_[b].grad, true);
        else
          matmul_into(g, true, val(a), ta, nodes_[b].grad, true);
      }
    });
  }

  NodeId add(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("add: shape mismatch");
    Matrix<T> out = val(a);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] += val(b).data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += g.data[i];
      if (needs(b))
        for (size_t i = 0; i < g.size(); ++i) nodes_[b].grad.data[i] += g.data[i];
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("sub: shape mismatch");
    Matrix<T> out = val(a);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] -= val(b).data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += g.data[i];
      if (needs(b))
        for (size_t i = 0; i < g.size(); ++i) nodes_[b].grad.data[i] -= g.data[i];
    });
  }

  NodeId scale(NodeId a, T c) {
    Matrix<T> out = val(a);
    for (T& v : out.data) v *= c;
    return make(std::move(out), {a}, [this, a, c](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += c * g.data[i];
    });
  }

  // bias is 1 x c, broadcast over rows of a.
  NodeId add_row_broadcast(NodeId a, NodeId bias) {
    const Matrix<T>& x = val(a);
    const Matrix<T>& b = val(bias);
    if (b.rows != 1 || b.cols != x.cols)
      throw std::invalid_argument("add_row_broadcast: bias shape mismatch");
    Matrix<T> out = x;
    for (int r = 0; r < x.rows; ++r)
      for (int c = 0; c < x.cols; ++c) out.at(r, c) += b.at(0, c);
    return make(std::move(out), {a, bias}, [this, a, bias](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += g.data[i];
      if (needs(bias))
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) nodes_[bias].grad.at(0, c) += g.at(r, c);
    });
  }

  NodeId gelu(NodeId a) {
    Matrix<T> out = val(a);
    for (T& v : out.data) v = gelu_scalar(v);
    return make(std::move(out), {a}, [this, a](const Matrix<T>& g) {
      if (!needs(a)) return;
      const Matrix<T>& x = val(a);
      for (size_t i = 0; i < g.size(); ++i)
        nodes_[a].grad.data[i] += g.data[i] * gelu_grad_scalar(x.data[i]);
    });
  }

  // Row-wise RMS norm with learned gain (1 x c): y = x * gain / rms(x).
  NodeId rmsnorm(NodeId a, NodeId gain, T eps = T(1e-6)) {
    const Matrix<T>& x = val(a);
    const Matrix<T>& gn = val(gain);
    if (gn.rows != 1 || gn.cols != x.cols)
      throw std::invalid_argument("rmsnorm: gain shape mismatch");
    Matrix<T> out(x.rows, x.cols);
    std::vector<T> inv_rms(x.rows);
    for (int r = 0; r < x.rows; ++r) {
      T ms = T(0);
      for (int c = 0; c < x.cols; ++c) ms += x.at(r, c) * x.at(r, c);
      ms = ms / T(x.cols) + eps;
      inv_rms[r] = T(1) / std::sqrt(ms);
      for (int c = 0; c < x.cols; ++c) out.at(r, c) = x.at(r, c) * inv_rms[r] * gn.at(0, c);
    }
    return make(std::move(out), {a, gain},
                [this, a, gain, inv_rms = std::move(inv_rms)](const Matrix<T>& g) {
      const Matrix<T>& x = val(a);
      const Matrix<T>& gn = val(gain);
      const int n = x.cols;
      for (int r = 0; r < x.rows; ++r) {
        const T ir = inv_rms[r];
        if (needs(gain))
          for (int c = 0; c < n; ++c) nodes_[gain].grad.at(0, c) += g.at(r, c) * x.at(r, c) * ir;
        if (needs(a)) {
          // d/dx of x * ir(x): ir * I - ir^3 / n * x x^T, times gain on the output side.
          T dot = T(0);
          for (int c = 0; c < n; ++c) dot += g.at(r, c) * gn.at(0, c) * x.at(r, c);
          const T coef = ir * ir * ir * dot / T(n);
          for (int c = 0; c < n; ++c)
            nodes_[a].grad.at(r, c) += g.at(r, c) * gn.at(0, c) * ir - coef * x.at(r, c);
        }
      }
    });
  }

  // Rotary position encoding: row index is the sequence position; each head's
  // dimension pairs (2i, 2i+1) are rotated by pos * base^(-2i/head_dim).
  NodeId rope(NodeId a, int n_heads, T base) {
    const Matrix<T>& x = val(a);
    const int d = x.cols;
    const int hd = d / n_heads;
    if (hd % 2 != 0) throw std::invalid_argument("rope: head_dim must be even");
    Matrix<T> out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
      rope_row(x.row_ptr(r), out.row_ptr(r), r, n_heads, hd, base, /*inverse=*/false);
    return make(std::move(out), {a}, [this, a, n_heads, base](const Matrix<T>& g) {
      if (!needs(a)) return;
      const int d = g.cols;
      const int hd = d / n_heads;
      Matrix<T> tmp(1, d);
      for (int r = 0; r < g.rows; ++r) {
        // Rotation is orthogonal: transpose = rotation by -theta.
        rope_row(g.row_ptr(r), tmp.row_ptr(0), r, n_heads, hd, base, /*inverse=*/true);
        for (int c = 0; c < d; ++c) nodes_[a].grad.at(r, c) += tmp.at(0, c);
      }
    });
  }

  // Fused multi-head causal self-attention on pre-split projections.
  // q, k, v are n x d with heads laid out contiguously. If capture is given
  // the per-head probability matrices are copied out. force_uniform replaces
  // the probabilities with uniform rows over the allowed positions (forward
  // only; used by the sink-metric self-test).
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, int n_heads,
                          AttnMaps<T>* capture = nullptr, bool force_uniform = false) {
    const Matrix<T>& Q = val(q);
    const Matrix<T>& K = val(k);
    const Matrix<T>& V = val(v);
    const int n = Q.rows;
    const int d = Q.cols;
    const int hd = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(T(hd));

    auto probs = std::make_shared<std::vector<Matrix<T>>>();
    probs->reserve(n_heads);
    Matrix<T> out(n, d);
    for (int h = 0; h < n_heads; ++h) {
      Matrix<T> P(n, n);
      const int off = h * hd;
      for (int i = 0; i < n; ++i) {
        if (force_uniform) {
          for (int j = 0; j <= i; ++j) P.at(i, j) = T(1) / T(i + 1);
        } else {
          T maxs = -std::numeric_limits<T>::infinity();
          for (int j = 0; j <= i; ++j) {
            T s = T(0);
            for (int c = 0; c < hd; ++c) s += Q.at(i, off + c) * K.at(j, off + c);
            s *= inv_sqrt;
            P.at(i, j) = s;
            maxs = std::max(maxs, s);
          }
          T denom = T(0);
          for (int j = 0; j <= i; ++j) {
            P.at(i, j) = std::exp(P.at(i, j) - maxs);
            denom += P.at(i, j);
          }
          for (int j = 0; j <= i; ++j) P.at(i, j) /= denom;
        }
        for (int c = 0; c < hd; ++c) {
          T acc = T(0);
          for (int j = 0; j <= i; ++j) acc += P.at(i, j) * V.at(j, off + c);
          out.at(i, off + c) = acc;
        }
      }
      probs->push_back(std::move(P));
    }
    if (capture) *capture = *probs;

    return make(std::move(out), {q, k, v},
                [this, q, k, v, n_heads, probs, inv_sqrt](const Matrix<T>& g) {
      const Matrix<T>& Q = val(q);
      const Matrix<T>& K = val(k);
      const Matrix<T>& V = val(v);
      const int n = Q.rows;
      const int hd = Q.cols / n_heads;
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * hd;
        const Matrix<T>& P = (*probs)[h];
        for (int i = 0; i < n; ++i) {
          // dP then dS = P o (dP - sum(dP o P)) restricted to j <= i.
          std::vector<T> dP(i + 1, T(0));
          for (int j = 0; j <= i; ++j) {
            T acc = T(0);
            for (int c = 0; c < hd; ++c) acc += g.at(i, off + c) * V.at(j, off + c);
            dP[j] = acc;
          }
          T inner = T(0);
          for (int j = 0; j <= i; ++j) inner += dP[j] * P.at(i, j);
          for (int j = 0; j <= i; ++j) {
            const T dS = P.at(i, j) * (dP[j] - inner) * inv_sqrt;
            if (needs(q))
              for (int c = 0; c < hd; ++c) nodes_[q].grad.at(i, off + c) += dS * K.at(j, off + c);
            if (needs(k))
              for (int c = 0; c < hd; ++c) nodes_[k].grad.at(j, off + c) += dS * Q.at(i, off + c);
            if (needs(v))
              for (int c = 0; c < hd; ++c)
                nodes_[v].grad.at(j, off + c) += P.at(i, j) * g.at(i, off + c);
          }
        }
      }
    });
  }

  // Builds the n x d input matrix from the embedding table and a mixed
  // token/vector element list. Token rows read (and backprop into) the table;
  // InjectNode rows route gradient back to the producing node.
  NodeId assemble(NodeId table, const std::vector<SeqElement<T>>& elems) {
    const Matrix<T>& tab = val(table);
    const int d = tab.cols;
    Matrix<T> out(static_cast<int>(elems.size()), d);
    for (size_t i = 0; i < elems.size(); ++i) {
      const auto& e = elems[i];
      switch (e.kind) {
        case SeqElement<T>::Kind::Token: {
          if (e.token_id < 0 || e.token_id >= tab.rows)
            throw std::domain_error("assemble: token id out of vocabulary");
          const T* src = tab.row_ptr(e.token_id);
          std::copy(src, src + d, out.row_ptr(static_cast<int>(i)));
          break;
        }
        case SeqElement<T>::Kind::InjectConst: {
          if (static_cast<int>(e.vec.size()) != d)
            throw std::domain_error("assemble: injected vector has wrong dimension");
          for (int c = 0; c < d; ++c) {
            if (!std::isfinite(static_cast<double>(e.vec[c])))
              throw std::domain_error("assemble: injected vector is not finite");
            out.at(static_cast<int>(i), c) = e.vec[c];
          }
          break;
        }
        case SeqElement<T>::Kind::InjectNode: {
          const Matrix<T>& src = val(e.node);
          if (src.rows != 1 || src.cols != d)
            throw std::domain_error("assemble: injected node must be 1 x d");
          std::copy(src.row_ptr(0), src.row_ptr(0) + d, out.row_ptr(static_cast<int>(i)));
          break;
        }
      }
    }
    std::vector<NodeId> parents = {table};
    for (const auto& e : elems)
      if (e.kind == SeqElement<T>::Kind::InjectNode) parents.push_back(e.node);
    return make(std::move(out), parents, [this, table, elems](const Matrix<T>& g) {
      const int d = g.cols;
      for (size_t i = 0; i < elems.size(); ++i) {
        const auto& e = elems[i];
        if (e.kind == SeqElement<T>::Kind::Token && needs(table)) {
          for (int c = 0; c < d; ++c)
            nodes_[table].grad.at(e.token_id, c) += g.at(static_cast<int>(i), c);
        } else if (e.kind == SeqElement<T>::Kind::InjectNode && needs(e.node)) {
          for (int c = 0; c < d; ++c) nodes_[e.node].grad.at(0, c) += g.at(static_cast<int>(i), c);
        }
      }
    });
  }

  NodeId select_row(NodeId a, int r) {
    const Matrix<T>& x = val(a);
    if (r < 0 || r >= x.rows) throw std::out_of_range("select_row");
    Matrix<T> out(1, x.cols);
    std::copy(x.row_ptr(r), x.row_ptr(r) + x.cols, out.row_ptr(0));
    return make(std::move(out), {a}, [this, a, r](const Matrix<T>& g) {
      if (!needs(a)) return;
      for (int c = 0; c < g.cols; ++c) nodes_[a].grad.at(r, c) += g.at(0, c);
    });
  }

  // 1 x n vectors -> 1 x 1.
  NodeId dot(NodeId a, NodeId b) {
    const Matrix<T>& x = val(a);
    const Matrix<T>& y = val(b);
    if (x.rows != 1 || y.rows != 1 || x.cols != y.cols)
      throw std::invalid_argument("dot: expects equal-length row vectors");
    T acc = T(0);
    for (int c = 0; c < x.cols; ++c) acc += x.at(0, c) * y.at(0, c);
    Matrix<T> out(1, 1);
    out.at(0, 0) = acc;
    return make(std::move(out), {a, b}, [this, a, b](const Matrix<T>& g) {
      const T gv = g.at(0, 0);
      if (needs(a))
        for (int c = 0; c < val(b).cols; ++c) nodes_[a].grad.at(0, c) += gv * val(b).at(0, c);
      if (needs(b))
        for (int c = 0; c < val(a).cols; ++c) nodes_[b].grad.at(0, c) += gv * val(a).at(0, c);
    });
  }

  NodeId sqrt_s(NodeId a) {
    Matrix<T> out = val(a);
    for (T& v : out.data) v = std::sqrt(v);
    return make(std::move(out), {a}, [this, a](const Matrix<T>& g) {
      if (!needs(a)) return;
      for (size_t i = 0; i < g.size(); ++i)
        nodes_[a].grad.data[i] += g.data[i] * T(0.5) / std::sqrt(val(a).data[i]);
    });
  }

  NodeId mul_s(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("mul_s: shape mismatch");
    Matrix<T> out = val(a);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= val(b).data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i)
          nodes_[a].grad.data[i] += g.data[i] * val(b).data[i];
      if (needs(b))
        for (size_t i = 0; i < g.size(); ++i)
          nodes_[b].grad.data[i] += g.data[i] * val(a).data[i];
    });
  }

  NodeId div_s(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("div_s: shape mismatch");
    Matrix<T> out = val(a);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] /= val(b).data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Matrix<T>& g) {
      if (needs(a))
        for (size_t i = 0; i < g.size(); ++i)
          nodes_[a].grad.data[i] += g.data[i] / val(b).data[i];
      if (needs(b))
        for (size_t i = 0; i < g.size(); ++i) {
          const T bv = val(b).data[i];
          nodes_[b].grad.data[i] -= g.data[i] * val(a).data[i] / (bv * bv);
        }
    });
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    int total = 0;
    for (NodeId p : parts) {
      if (val(p).rows != 1) throw std::invalid_argument("concat_cols: expects row vectors");
      total += val(p).cols;
    }
    Matrix<T> out(1, total);
    int off = 0;
    for (NodeId p : parts) {
      const Matrix<T>& x = val(p);
      std::copy(x.row_ptr(0), x.row_ptr(0) + x.cols, out.row_ptr(0) + off);
      off += x.cols;
    }
    return make(std::move(out), parts, [this, parts](const Matrix<T>& g) {
      int off = 0;
      for (NodeId p : parts) {
        const int w = val(p).cols;
        if (needs(p))
          for (int c = 0; c < w; ++c) nodes_[p].grad.at(0, c) += g.at(0, off + c);
        off += w;
      }
    });
  }

  // 1 x m -> 1 x 1, numerically stable.
  NodeId logsumexp_row(NodeId a) {
    const Matrix<T>& x = val(a);
    if (x.rows != 1) throw std::invalid_argument("logsumexp_row: expects a row vector");
    T mx = x.at(0, 0);
    for (int c = 1; c < x.cols; ++c) mx = std::max(mx, x.at(0, c));
    T sum = T(0);
    for (int c = 0; c < x.cols; ++c) sum += std::exp(x.at(0, c) - mx);
    Matrix<T> out(1, 1);
    out.at(0, 0) = mx + std::log(sum);
    return make(std::move(out), {a}, [this, a](const Matrix<T>& g, const Matrix<T>& y) {
      if (!needs(a)) return;
      const Matrix<T>& x = val(a);
      const T gv = g.at(0, 0);
      for (int c = 0; c < x.cols; ++c)
        nodes_[a].grad.at(0, c) += gv * std::exp(x.at(0, c) - y.at(0, 0));
    });
  }

  // Re-register a node's value as a constant (stop-gradient).
  NodeId detach(NodeId a) { return constant(val(a)); }

  void backward(NodeId root) {
    if (val(root).rows != 1 || val(root).cols != 1)
      throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.fill(T(0));
    nodes_[root].grad.at(0, 0) = T(1);
    for (int i = root; i >= 0; --i) {
      if (nodes_[i].requires_grad && nodes_[i].back) nodes_[i].back(nodes_[i].grad, nodes_[i].value);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::function<void(const Matrix<T>& grad, const Matrix<T>& value)> back;
  };

  const Matrix<T>& val(NodeId id) const { return nodes_[id].value; }
  bool needs(NodeId id) const { return nodes_[id].requires_grad; }

  NodeId push(Matrix<T> value, bool requires_grad,
              std::function<void(const Matrix<T>&, const Matrix<T>&)> back) {
    Node n;
    n.grad = requires_grad ? Matrix<T>(value.rows, value.cols) : Matrix<T>();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  template <typename F>
  NodeId make(Matrix<T> value, const std::vector<NodeId>& parents, F&& fn) {
    bool rg = false;
    for (NodeId p : parents) rg = rg || nodes_[p].requires_grad;
    std::function<void(const Matrix<T>&, const Matrix<T>&)> back;
    if (rg) {
      if constexpr (std::is_invocable_v<F, const Matrix<T>&, const Matrix<T>&>)
        back = std::forward<F>(fn);
      else
        back = [f = std::forward<F>(fn)](const Matrix<T>& g, const Matrix<T>&) { f(g); };
    }
    return push(std::move(value), rg, std::move(back));
  }

  static void rope_row(const T* in, T* out, int pos, int n_heads, int hd, T base,
                       bool inverse) {
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * hd;
      for (int i = 0; i < hd / 2; ++i) {
        const T theta = T(pos) * std::pow(base, T(-2 * i) / T(hd));
        const T c = std::cos(theta);
        const T s = inverse ? -std::sin(theta) : std::sin(theta);
        const T x0 = in[off + 2 * i];
        const T x1 = in[off + 2 * i + 1];
        out[off + 2 * i] = c * x0 - s * x1;
        out[off + 2 * i + 1] = s * x0 + c * x1;
      }
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace epic
