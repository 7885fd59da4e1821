#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "arlab/nn/graph.hpp"
#include "arlab/nn/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes its output
// eagerly and registers a backward closure that accumulates input adjoints.
namespace arlab::nn {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_same_graph(const Var& a, const Var& b) {
  require(&a.graph() == &b.graph(), "operands belong to different graphs");
}

inline void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

inline Var stop_gradient(const Var& a) { return a.graph().constant(a.value()); }

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_graph(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::require(b.rows() == k, "matmul inner extents differ: " + shape_string(a.shape()) +
                                     " * " + shape_string(b.shape()));
  Tensor out = Tensor::matrix(m, n);
  kernel::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b},
      [ia, ib, m, k, n](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        if (g.requires_grad(ia)) {
          kernel::gemm_nt(m, n, k, go.data(), g.value(ib).data(), g.grad_buffer(ia).data());
        }
        if (g.requires_grad(ib)) {
          kernel::gemm_tn(m, k, n, g.value(ia).data(), go.data(), g.grad_buffer(ib).data());
        }
      },
      "matmul");
}

namespace detail {

inline Var elementwise_binary(const Var& a, const Var& b, double sign_b, const char* name) {
  require_same_graph(a, b);
  require(a.value().size() == b.value().size(),
          std::string(name) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
  Tensor out = a.value();
  axpy(out.size(), sign_b, b.value().data(), out.data());
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b},
      [ia, ib, sign_b](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        if (g.requires_grad(ia)) axpy(go.size(), 1.0, go.data(), g.grad_buffer(ia).data());
        if (g.requires_grad(ib)) axpy(go.size(), sign_b, go.data(), g.grad_buffer(ib).data());
      },
      name);
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::elementwise_binary(a, b, 1.0, "add"); }
inline Var sub(const Var& a, const Var& b) { return detail::elementwise_binary(a, b, -1.0, "sub"); }

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_graph(a, b);
  detail::require(a.value().size() == b.value().size(), "mul shape mismatch");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b},
      [ia, ib](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        const Tensor& av = g.value(ia);
        const Tensor& bv = g.value(ib);
        if (g.requires_grad(ia)) {
          Tensor& ga = g.grad_buffer(ia);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.requires_grad(ib)) {
          Tensor& gb = g.grad_buffer(ib);
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
      },
      "mul");
}

// a[rows x n] + bias broadcast over rows (bias has n entries).
inline Var add_bias(const Var& a, const Var& bias) {
  detail::require_same_graph(a, bias);
  const std::size_t rows = a.rows(), n = a.cols();
  detail::require(bias.value().size() == n, "add_bias: bias length must equal column count");
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) detail::axpy(n, 1.0, bias.value().data(), out.data() + r * n);
  const NodeId ia = a.id(), ib = bias.id();
  return a.graph().record(
      std::move(out), {a, bias},
      [ia, ib, rows, n](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        if (g.requires_grad(ia)) detail::axpy(go.size(), 1.0, go.data(), g.grad_buffer(ia).data());
        if (g.requires_grad(ib)) {
          double* gb = g.grad_buffer(ib).data();
          for (std::size_t r = 0; r < rows; ++r) detail::axpy(n, 1.0, go.data() + r * n, gb);
        }
      },
      "add_bias");
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const NodeId ia = a.id();
  return a.graph().record(
      std::move(out), {a},
      [ia, s](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        detail::axpy(go.size(), s, go.data(), g.grad_buffer(ia).data());
      },
      "scale");
}

inline Var sum(const Var& a) {
  const Tensor& av = a.value();
  double total = 0.0;
  for (double v : av.values()) total += v;
  const NodeId ia = a.id();
  return a.graph().record(
      Tensor::scalar(total), {a},
      [ia](Graph& g, NodeId self) {
        const double go = g.grad_buffer(self)[0];
        for (double& v : g.grad_buffer(ia).values()) v += go;
      },
      "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

namespace detail {

template <class F, class DF>
Var unary(const Var& a, F f, DF df, const char* name) {
  Tensor out = a.value();
  for (double& v : out.values()) v = f(v);
  const NodeId ia = a.id();
  return a.graph().record(
      std::move(out), {a},
      [ia, df](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        const Tensor& x = g.value(ia);
        const Tensor& y = g.value(self);
        Tensor& gx = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(x[i], y[i]);
      },
      name);
}

}  // namespace detail

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

// tanh-approximated GELU
inline Var gelu(const Var& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return detail::unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      },
      "gelu");
}

inline Var softmax_rows(const Var& a) {
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  const NodeId ia = a.id();
  return a.graph().record(
      std::move(out), {a},
      [ia, rows, n](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        const Tensor& p = g.value(self);
        Tensor& ga = g.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* pr = p.data() + r * n;
          const double* gr = go.data() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
          double* out_r = ga.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) out_r[j] += pr[j] * (gr[j] - dot);
        }
      },
      "softmax_rows");
}

// Per-row layer normalization with learned gain and bias (each n entries).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  detail::require_same_graph(x, gain);
  detail::require_same_graph(x, bias);
  const std::size_t rows = x.rows(), n = x.cols();
  detail::require(gain.value().size() == n && bias.value().size() == n,
                  "layer_norm: gain/bias length must equal column count");
  auto xhat = std::make_shared<std::vector<double>>(rows * n);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out = Tensor::matrix(rows, n);
  const double* xv = x.value().data();
  const double* gv = gain.value().data();
  const double* bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* hr = xhat->data() + r * n;
    double* orow = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mu) * is;
      orow[j] = gv[j] * hr[j] + bv[j];
    }
  }
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, rows, n, xhat, inv_std](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        const double* gv = g.value(ig).data();
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
          double* gg = g.requires_grad(ig) ? g.grad_buffer(ig).data() : nullptr;
          double* gb = g.requires_grad(ib) ? g.grad_buffer(ib).data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = go.data() + r * n;
            const double* hr = xhat->data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg[j] += gr[j] * hr[j];
              if (gb) gb[j] += gr[j];
            }
          }
        }
        if (g.requires_grad(ix)) {
          double* gx = g.grad_buffer(ix).data();
          std::vector<double> dh(n);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = go.data() + r * n;
            const double* hr = xhat->data() + r * n;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dh[j] = gr[j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * hr[j];
            }
            mean_dh /= static_cast<double>(n);
            mean_dh_h /= static_cast<double>(n);
            const double is = (*inv_std)[r];
            double* gxr = gx + r * n;
            for (std::size_t j = 0; j < n; ++j) gxr[j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
          }
        }
      },
      "layer_norm");
}

// Row gather: out[i] = table[indices[i]].
inline Var embedding(const Var& table, std::span<const int> indices) {
  const std::size_t vocab = table.rows(), d = table.cols();
  detail::require(!indices.empty(), "embedding: empty index list");
  Tensor out = Tensor::matrix(indices.size(), d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= vocab) {
      throw std::out_of_range("embedding index " + std::to_string(idx) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(table.value().data() + idx * d, d, out.data() + i * d);
  }
  const NodeId it = table.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return table.graph().record(
      std::move(out), {table},
      [it, d, idx = std::move(idx)](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        double* gt = g.grad_buffer(it).data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          detail::axpy(d, 1.0, go.data() + i * d, gt + static_cast<std::size_t>(idx[i]) * d);
        }
      },
      "embedding");
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t n = a.cols();
  detail::require(count > 0 && begin + count <= a.rows(), "slice_rows out of range");
  Tensor out = Tensor::matrix(count, n);
  std::copy_n(a.value().data() + begin * n, count * n, out.data());
  const NodeId ia = a.id();
  return a.graph().record(
      std::move(out), {a},
      [ia, begin, n](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        detail::axpy(go.size(), 1.0, go.data(), g.grad_buffer(ia).data() + begin * n);
      },
      "slice_rows");
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t rows = a.rows(), n = a.cols();
  detail::require(count > 0 && begin + count <= n, "slice_cols out of range");
  Tensor out = Tensor::matrix(rows, count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * n + begin, count, out.data() + r * count);
  }
  const NodeId ia = a.id();
  return a.graph().record(
      std::move(out), {a},
      [ia, rows, n, begin, count](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        double* ga = g.grad_buffer(ia).data();
        for (std::size_t r = 0; r < rows; ++r) {
          detail::axpy(count, 1.0, go.data() + r * count, ga + r * n + begin);
        }
      },
      "slice_cols");
}

// Per-sequence concatenation along time: `head` holds `batch` runs of P rows,
// `tail` holds `batch` runs of T rows; output holds `batch` runs of P+T rows.
inline Var concat_seq(const Var& head, const Var& tail, std::size_t batch) {
  detail::require_same_graph(head, tail);
  const std::size_t n = head.cols();
  detail::require(tail.cols() == n, "concat_seq column mismatch");
  detail::require(batch > 0 && head.rows() % batch == 0 && tail.rows() % batch == 0,
                  "concat_seq rows not divisible by batch");
  const std::size_t p = head.rows() / batch, t = tail.rows() / batch;
  Tensor out = Tensor::matrix(batch * (p + t), n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(head.value().data() + b * p * n, p * n, out.data() + b * (p + t) * n);
    std::copy_n(tail.value().data() + b * t * n, t * n, out.data() + (b * (p + t) + p) * n);
  }
  const NodeId ih = head.id(), it = tail.id();
  return head.graph().record(
      std::move(out), {head, tail},
      [ih, it, batch, p, t, n](Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        for (std::size_t b = 0; b < batch; ++b) {
          if (g.requires_grad(ih)) {
            detail::axpy(p * n, 1.0, go.data() + b * (p + t) * n, g.grad_buffer(ih).data() + b * p * n);
          }
          if (g.requires_grad(it)) {
            detail::axpy(t * n, 1.0, go.data() + (b * (p + t) + p) * n,
                         g.grad_buffer(it).data() + b * t * n);
          }
        }
      },
      "concat_seq");
}

inline Var concat_rows(const Var& a, const Var& b) { return concat_seq(a, b, 1); }

// Causal multi-head attention over `batch` sequences.
//   q: batch runs of T query rows, k/v: batch runs of L = P + T key rows.
// Query t of a run sits at absolute slot P + t and attends to keys [0, P + t].
// Scores are formed with dense GEMMs per (sequence, head); masked entries
// carry probability exactly zero.
inline Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t batch,
                            std::size_t heads) {
  detail::require_same_graph(q, k);
  detail::require_same_graph(q, v);
  const std::size_t dm = q.cols();
  detail::require(k.cols() == dm && v.cols() == dm, "attention width mismatch");
  detail::require(heads > 0 && dm % heads == 0, "attention width not divisible by heads");
  detail::require(batch > 0 && q.rows() % batch == 0 && k.rows() % batch == 0 &&
                      v.rows() == k.rows(),
                  "attention rows not divisible by batch");
  const std::size_t t_len = q.rows() / batch, l_len = k.rows() / batch;
  detail::require(l_len >= t_len, "attention: fewer keys than queries");
  const std::size_t offset = l_len - t_len, hd = dm / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // Head slice of `rows` consecutive rows starting at `row0`, as [rows x hd].
  auto gather = [dm, hd](const double* src, std::size_t row0, std::size_t rows, std::size_t h) {
    std::vector<double> out(rows * hd);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + (row0 + r) * dm + h * hd, hd, out.data() + r * hd);
    }
    return out;
  };

  auto probs = std::make_shared<std::vector<double>>(batch * heads * t_len * l_len, 0.0);
  Tensor out = Tensor::matrix(batch * t_len, dm);
  const double* qv = q.value().data();
  const double* kv = k.value().data();
  const double* vv = v.value().data();
  std::vector<double> oh(t_len * hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::vector<double> qh = gather(qv, b * t_len, t_len, h);
      const std::vector<double> kh = gather(kv, b * l_len, l_len, h);
      const std::vector<double> vh = gather(vv, b * l_len, l_len, h);
      double* ph = probs->data() + (b * heads + h) * t_len * l_len;
      kernel::gemm_nt(t_len, hd, l_len, qh.data(), kh.data(), ph);
      for (std::size_t t = 0; t < t_len; ++t) {
        double* pr = ph + t * l_len;
        const std::size_t visible = offset + t + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, pr[j] *= inv_sqrt);
        double z = 0.0;
        for (std::size_t j = 0; j < visible; ++j) z += (pr[j] = std::exp(pr[j] - mx));
        const double iz = 1.0 / z;
        for (std::size_t j = 0; j < visible; ++j) pr[j] *= iz;
        std::fill(pr + visible, pr + l_len, 0.0);
      }
      std::fill(oh.begin(), oh.end(), 0.0);
      kernel::gemm_nn(t_len, l_len, hd, ph, vh.data(), oh.data());
      for (std::size_t t = 0; t < t_len; ++t) {
        std::copy_n(oh.data() + t * hd, hd, out.data() + (b * t_len + t) * dm + h * hd);
      }
    }
  }
  const NodeId iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, batch, heads, t_len, l_len, offset, hd, dm, inv_sqrt, probs, gather](
          Graph& g, NodeId self) {
        const Tensor& go = g.grad_buffer(self);
        const bool need_q = g.requires_grad(iq), need_k = g.requires_grad(ik),
                   need_v = g.requires_grad(iv);
        const double* qv = g.value(iq).data();
        const double* kv = g.value(ik).data();
        const double* vv = g.value(iv).data();
        double* gq = need_q ? g.grad_buffer(iq).data() : nullptr;
        double* gk = need_k ? g.grad_buffer(ik).data() : nullptr;
        double* gv = need_v ? g.grad_buffer(iv).data() : nullptr;
        std::vector<double> ds(t_len * l_len);
        std::vector<double> dqh(t_len * hd), dkh(l_len * hd), dvh(l_len * hd);
        auto scatter = [dm, hd](const std::vector<double>& src, double* dst, std::size_t row0,
                                std::size_t rows, std::size_t h) {
          for (std::size_t r = 0; r < rows; ++r) {
            detail::axpy(hd, 1.0, src.data() + r * hd, dst + (row0 + r) * dm + h * hd);
          }
        };
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* ph = probs->data() + (b * heads + h) * t_len * l_len;
            const std::vector<double> goh = gather(go.data(), b * t_len, t_len, h);
            const std::vector<double> vh = gather(vv, b * l_len, l_len, h);
            if (gv) {
              std::fill(dvh.begin(), dvh.end(), 0.0);
              kernel::gemm_tn(t_len, l_len, hd, ph, goh.data(), dvh.data());
              scatter(dvh, gv, b * l_len, l_len, h);
            }
            if (!gq && !gk) continue;
            std::fill(ds.begin(), ds.end(), 0.0);
            kernel::gemm_nt(t_len, hd, l_len, goh.data(), vh.data(), ds.data());
            for (std::size_t t = 0; t < t_len; ++t) {
              const double* pr = ph + t * l_len;
              double* dr = ds.data() + t * l_len;
              const std::size_t visible = offset + t + 1;
              double dot = 0.0;
              for (std::size_t j = 0; j < visible; ++j) dot += pr[j] * dr[j];
              for (std::size_t j = 0; j < visible; ++j) dr[j] = pr[j] * (dr[j] - dot) * inv_sqrt;
              std::fill(dr + visible, dr + l_len, 0.0);
            }
            if (gq) {
              const std::vector<double> kh = gather(kv, b * l_len, l_len, h);
              std::fill(dqh.begin(), dqh.end(), 0.0);
              kernel::gemm_nn(t_len, l_len, hd, ds.data(), kh.data(), dqh.data());
              scatter(dqh, gq, b * t_len, t_len, h);
            }
            if (gk) {
              const std::vector<double> qh = gather(qv, b * t_len, t_len, h);
              std::fill(dkh.begin(), dkh.end(), 0.0);
              kernel::gemm_tn(t_len, l_len, hd, ds.data(), qh.data(), dkh.data());
              scatter(dkh, gk, b * l_len, l_len, h);
            }
          }
        }
      },
      "causal_attention");
}

// Mean over masked rows of -log softmax(logits)[target]. An empty mask span
// selects every row.
inline Var cross_entropy(const Var& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> mask = {}) {
  const std::size_t rows = logits.rows(), n = logits.cols();
  detail::require(targets.size() == rows, "cross_entropy: one target per row required");
  detail::require(mask.empty() || mask.size() == rows, "cross_entropy: mask length mismatch");
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw std::out_of_range("cross_entropy target " + std::to_string(targets[r]) +
                              " outside vocabulary of " + std::to_string(n));
    }
    active.push_back(r);
  }
  if (active.empty()) throw std::invalid_argument("cross_entropy: mask selects no positions");

  // log-softmax via max subtraction; probabilities are kept for backward.
  auto probs = std::make_shared<std::vector<double>>(active.size() * n);
  const double* lv = logits.value().data();
  double total = 0.0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const double* row = lv + active[a] * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[targets[active[a]]];
    double* pr = probs->data() + a * n;
    for (std::size_t j = 0; j < n; ++j) pr[j] = std::exp(row[j] - log_z);
  }
  const double inv_count = 1.0 / static_cast<double>(active.size());
  std::vector<int> tgt;
  tgt.reserve(active.size());
  for (std::size_t r : active) tgt.push_back(targets[r]);
  const NodeId il = logits.id();
  return logits.graph().record(
      Tensor::scalar(total * inv_count), {logits},
      [il, n, inv_count, probs, active = std::move(active), tgt = std::move(tgt)](Graph& g,
                                                                                  NodeId self) {
        const double go = g.grad_buffer(self)[0] * inv_count;
        double* gl = g.grad_buffer(il).data();
        for (std::size_t a = 0; a < active.size(); ++a) {
          const double* pr = probs->data() + a * n;
          double* gr = gl + active[a] * n;
          for (std::size_t j = 0; j < n; ++j) gr[j] += go * pr[j];
          gr[tgt[a]] -= go;
        }
      },
      "cross_entropy");
}

// Mean over consecutive segments of `segment` rows of
//   (1 / (segment - 1)) * sum_i ||h[i+1] - h[i]||^2.
inline Var continuity_loss(const Var& h, std::size_t segment) {
  if (segment < 2) throw std::invalid_argument("continuity_loss needs at least two states");
  const std::size_t rows = h.rows(), n = h.cols();
  detail::require(rows % segment == 0, "continuity_loss: rows not divisible by segment length");
  const std::size_t segments = rows / segment;
  const double denom = static_cast<double>(segment - 1) * static_cast<double>(segments);
  const double w = 1.0 / denom;
  const double* hv = h.value().data();
  // Per-step squared distances are summed first, then the steps, so the
  // value matches an explicit per-step profile bit for bit.
  double total = 0.0;
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t i = 0; i + 1 < segment; ++i) {
      const double* a = hv + (s * segment + i) * n;
      const double* b = a + n;
      double step = 0.0;
      for (std::size_t j = 0; j < n; ++j) step += (b[j] - a[j]) * (b[j] - a[j]);
      total += step;
    }
  }
  const NodeId ih = h.id();
  return h.graph().record(
      Tensor::scalar(total / denom), {h},
      [ih, segments, segment, n, w](Graph& g, NodeId self) {
        const double go = g.grad_buffer(self)[0] * w;
        const double* hv = g.value(ih).data();
        double* gh = g.grad_buffer(ih).data();
        for (std::size_t s = 0; s < segments; ++s) {
          for (std::size_t i = 0; i + 1 < segment; ++i) {
            const std::size_t ra = (s * segment + i) * n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = 2.0 * go * (hv[ra + n + j] - hv[ra + j]);
              gh[ra + n + j] += d;
              gh[ra + j] -= d;
            }
          }
        }
      },
      "continuity_loss");
}

}  // namespace arlab::nn
