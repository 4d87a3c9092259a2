#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cwfalab/tensor.hpp"

namespace cwfalab::ad {

// Scoped switch that stops tape construction (inference paths).
inline thread_local int no_grad_depth = 0;

struct NoGradGuard {
  NoGradGuard() { ++no_grad_depth; }
  ~NoGradGuard() { --no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return no_grad_depth == 0; }

template <typename T>
struct NodeT {
  TensorBase<T> value;
  TensorBase<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  std::function<void(NodeT<T>&)> backward_fn;

  void accumulate(const TensorBase<T>& g) {
    if (!requires_grad) return;
    if (grad.empty())
      grad = g;
    else
      add_inplace(grad, g);
  }
  void accumulate(TensorBase<T>&& g) {
    if (!requires_grad) return;
    if (grad.empty())
      grad = std::move(g);
    else
      add_inplace(grad, g);
  }
};

template <typename T>
using NodePtr = std::shared_ptr<NodeT<T>>;

// Handle to a tape node; ops on VarT extend the tape.
template <typename T>
class VarT {
 public:
  VarT() = default;
  explicit VarT(NodePtr<T> n) : n_(std::move(n)) {}

  // trainable leaf
  static VarT param(TensorBase<T> v) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return VarT(std::move(n));
  }

  // non-trainable value
  static VarT constant(TensorBase<T> v) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(v);
    return VarT(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const TensorBase<T>& value() const { return n_->value; }
  TensorBase<T>& mutable_value() { return n_->value; }  // optimizer updates leaves in place
  const TensorBase<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const NodePtr<T>& node() const { return n_; }

  void zero_grad() { n_->grad = TensorBase<T>(); }

  // copy of the value with no tape history
  VarT detach() const { return constant(n_->value); }

 private:
  NodePtr<T> n_;
};

using Var = VarT<float>;
using VarD = VarT<double>;

template <typename T, typename F>
VarT<T> make_op(TensorBase<T> value, std::vector<NodePtr<T>> parents, F&& backward_fn) {
  auto n = std::make_shared<NodeT<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::forward<F>(backward_fn);
    }
  }
  return VarT<T>(std::move(n));
}

// Reverse sweep from a scalar root. Gradients accumulate into leaves and are
// kept across calls, so per-sample backward passes sum into a batch gradient.
template <typename T>
void backward(const VarT<T>& root) {
  NodeT<T>* r = root.node().get();
  if (r->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
  if (!r->requires_grad) return;

  // iterative DFS post-order; reversed it visits consumers before producers
  std::vector<NodeT<T>*> order;
  std::unordered_set<NodeT<T>*> visited{r};
  struct Frame {
    NodeT<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{r, 0}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      NodeT<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  r->accumulate(TensorBase<T>(r->value.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---- arithmetic -------------------------------------------------------------

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
  return make_op(cwfalab::add(a.value(), b.value()), {a.node(), b.node()}, [](NodeT<T>& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(n.grad);
  });
}

template <typename T>
VarT<T> scale(const VarT<T>& a, double s) {
  return make_op(cwfalab::scale(a.value(), static_cast<T>(s)), {a.node()}, [s](NodeT<T>& n) {
    n.parents[0]->accumulate(cwfalab::scale(n.grad, static_cast<T>(s)));
  });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
  return make_op(cwfalab::mul(a.value(), b.value()), {a.node(), b.node()}, [](NodeT<T>& n) {
    n.parents[0]->accumulate(cwfalab::mul(n.grad, n.parents[1]->value));
    n.parents[1]->accumulate(cwfalab::mul(n.grad, n.parents[0]->value));
  });
}

// x is (C,H,W); p is (C,), broadcast over spatial axes. Gradient w.r.t. x is
// the unmodified incoming gradient; p collects the spatial sum.
template <typename T>
VarT<T> add_channel_broadcast(const VarT<T>& x, const VarT<T>& p) {
  return make_op(cwfalab::add_channel_vector(x.value(), p.value()), {x.node(), p.node()},
                 [](NodeT<T>& n) {
                   n.parents[0]->accumulate(n.grad);
                   if (n.parents[1]->requires_grad) {
                     const auto& g = n.grad;
                     const std::size_t c = g.dim(0), hw = g.dim(1) * g.dim(2);
                     TensorBase<T> gp(Shape{c});
                     for (std::size_t ci = 0; ci < c; ++ci) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < hw; ++i)
                         acc += static_cast<double>(g.data()[ci * hw + i]);
                       gp[ci] = static_cast<T>(acc);
                     }
                     n.parents[1]->accumulate(std::move(gp));
                   }
                 });
}

// x is (N,C); b is (C,) added to every row
template <typename T>
VarT<T> add_row_bias(const VarT<T>& x, const VarT<T>& b) {
  if (x.value().rank() != 2 || b.value().rank() != 1 || b.value().dim(0) != x.value().dim(1))
    throw ShapeError("add_row_bias: need (N,C) and (C,)");
  auto out = TensorBase<T>::uninit(x.value().shape());
  const std::size_t n = out.dim(0), c = out.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.value().at(i, j) + b.value()[j];
  return make_op(std::move(out), {x.node(), b.node()}, [](NodeT<T>& nd) {
    nd.parents[0]->accumulate(nd.grad);
    if (nd.parents[1]->requires_grad) nd.parents[1]->accumulate(col_sum(nd.grad));
  });
}

// ---- matmul -----------------------------------------------------------------

template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
  return make_op(cwfalab::matmul(a.value(), b.value()), {a.node(), b.node()}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->accumulate(matmul_nt(n.grad, n.parents[1]->value));
    if (n.parents[1]->requires_grad)
      n.parents[1]->accumulate(matmul_tn(n.parents[0]->value, n.grad));
  });
}

// a x b^T, the linear-layer form for row-major weights (out_dim, in_dim)
template <typename T>
VarT<T> matmul_nt(const VarT<T>& a, const VarT<T>& b) {
  return make_op(cwfalab::matmul_nt(a.value(), b.value()), {a.node(), b.node()}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->accumulate(cwfalab::matmul(n.grad, n.parents[1]->value));
    if (n.parents[1]->requires_grad)
      n.parents[1]->accumulate(matmul_tn(n.grad, n.parents[0]->value));
  });
}

// ---- activations ------------------------------------------------------------

template <typename T>
VarT<T> softmax_rows(const VarT<T>& x) {
  // backward reads the op's own output, so nothing extra needs capturing
  return make_op(cwfalab::softmax_rows(x.value()), {x.node()}, [](NodeT<T>& n) {
    const TensorBase<T>& y = n.value;
    const std::size_t rows = y.dim(0), cols = y.dim(1);
    auto gx = TensorBase<T>::uninit(y.shape());
    for (std::size_t i = 0; i < rows; ++i) {
      const T* yr = y.data() + i * cols;
      const T* gr = n.grad.data() + i * cols;
      const double dot = dot_rows_f64(gr, yr, cols);
      T* o = gx.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j)
        o[j] = yr[j] * (gr[j] - static_cast<T>(dot));
    }
    n.parents[0]->accumulate(std::move(gx));
  });
}

template <typename T>
VarT<T> gelu(const VarT<T>& x) {
  return make_op(cwfalab::gelu(x.value()), {x.node()}, [](NodeT<T>& n) {
    const auto& xv = n.parents[0]->value;
    auto gx = TensorBase<T>::uninit(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i)
      gx[i] = n.grad[i] * gelu_grad_scalar(xv[i]);
    n.parents[0]->accumulate(std::move(gx));
  });
}

// ---- layer norm ---------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm over (N,C) with affine (gamma, beta), each (C,).
template <typename T>
VarT<T> layer_norm_rows(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("layer_norm_rows: need (N,C)");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c})
    throw ShapeError("layer_norm_rows: affine params must be (C,)");

  auto xhat = TensorBase<T>::uninit(xv.shape());
  auto inv_std = TensorBase<T>::uninit(Shape{n});
  auto out = TensorBase<T>::uninit(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += static_cast<double>(row[j]);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = static_cast<T>(istd);
    T* xh = xhat.data() + i * c;
    T* o = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = static_cast<T>((static_cast<double>(row[j]) - mean) * istd);
      o[j] = xh[j] * gamma.value()[j] + beta.value()[j];
    }
  }

  return make_op(std::move(out), {x.node(), gamma.node(), beta.node()},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<T>& nd) {
                   const std::size_t rows = xhat.dim(0), cols = xhat.dim(1);
                   const auto& g = nd.grad;
                   const auto& gamma_v = nd.parents[1]->value;
                   if (nd.parents[0]->requires_grad) {
                     auto gx = TensorBase<T>::uninit(xhat.shape());
                     for (std::size_t i = 0; i < rows; ++i) {
                       const T* gr = g.data() + i * cols;
                       const T* xh = xhat.data() + i * cols;
                       double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                       for (std::size_t j = 0; j < cols; ++j) {
                         const double dxh = static_cast<double>(gr[j]) * gamma_v[j];
                         sum_dxhat += dxh;
                         sum_dxhat_xhat += dxh * xh[j];
                       }
                       const double istd = inv_std[i];
                       const double inv_c = 1.0 / static_cast<double>(cols);
                       T* o = gx.data() + i * cols;
                       for (std::size_t j = 0; j < cols; ++j) {
                         const double dxh = static_cast<double>(gr[j]) * gamma_v[j];
                         o[j] = static_cast<T>(istd * (dxh - inv_c * sum_dxhat -
                                                       inv_c * xh[j] * sum_dxhat_xhat));
                       }
                     }
                     nd.parents[0]->accumulate(std::move(gx));
                   }
                   if (nd.parents[1]->requires_grad) {
                     TensorBase<T> ggamma(Shape{cols});
                     for (std::size_t i = 0; i < rows; ++i)
                       for (std::size_t j = 0; j < cols; ++j)
                         ggamma[j] += g.at(i, j) * xhat.at(i, j);
                     nd.parents[1]->accumulate(std::move(ggamma));
                   }
                   if (nd.parents[2]->requires_grad) nd.parents[2]->accumulate(col_sum(g));
                 });
}

// ---- reductions ---------------------------------------------------------------

template <typename T>
VarT<T> mean_all(const VarT<T>& x) {
  const double m = cwfalab::sum(x.value()) / static_cast<double>(x.value().numel());
  const std::size_t count = x.value().numel();
  return make_op(TensorBase<T>::from_data({1}, {static_cast<T>(m)}), {x.node()},
                 [count](NodeT<T>& n) {
                   TensorBase<T> gx(n.parents[0]->value.shape(),
                                    n.grad[0] / static_cast<T>(count));
                   n.parents[0]->accumulate(std::move(gx));
                 });
}

// (C,H,W) -> (C,): the channel descriptor used by the feature augmentation
template <typename T>
VarT<T> global_avg_pool(const VarT<T>& x) {
  return make_op(cwfalab::global_avg_pool(x.value()), {x.node()}, [](NodeT<T>& n) {
    const auto& shp = n.parents[0]->value.shape();
    const std::size_t c = shp[0], hw = shp[1] * shp[2];
    auto gx = TensorBase<T>::uninit(shp);
    const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T v = n.grad[ci] * inv;
      for (std::size_t i = 0; i < hw; ++i) gx.data()[ci * hw + i] = v;
    }
    n.parents[0]->accumulate(std::move(gx));
  });
}

// y = eps_scale * v / ||v||; if ||v|| <= degenerate_tol the output is zero and
// *degenerate (when given) is set. Any shape, treated flat.
template <typename T>
VarT<T> l2_normalize_scale(const VarT<T>& v, double eps_scale, double degenerate_tol = 1e-12,
                           bool* degenerate = nullptr) {
  const double norm = static_cast<double>(l2_norm(v.value()));
  if (norm <= degenerate_tol) {
    if (degenerate) *degenerate = true;
    // locally constant zero: contributes no gradient
    return make_op(TensorBase<T>(v.value().shape(), T(0)), {v.node()}, [](NodeT<T>&) {});
  }
  const double c_over_n = eps_scale / norm;
  TensorBase<T> out = cwfalab::scale(v.value(), static_cast<T>(c_over_n));
  return make_op(std::move(out), {v.node()}, [c_over_n, norm](NodeT<T>& n) {
    const auto& vv = n.parents[0]->value;
    double vdotg = 0.0;
    for (std::size_t i = 0; i < vv.numel(); ++i)
      vdotg += static_cast<double>(vv[i]) * static_cast<double>(n.grad[i]);
    const double k = vdotg / (norm * norm);
    auto gv = TensorBase<T>::uninit(vv.shape());
    for (std::size_t i = 0; i < vv.numel(); ++i)
      gv[i] = static_cast<T>(c_over_n * (static_cast<double>(n.grad[i]) -
                                         static_cast<double>(vv[i]) * k));
    n.parents[0]->accumulate(std::move(gv));
  });
}

// ---- layout ------------------------------------------------------------------

template <typename T>
VarT<T> chw_to_tokens(const VarT<T>& x) {
  const std::size_t h = x.value().dim(1), w = x.value().dim(2);
  return make_op(cwfalab::chw_to_tokens(x.value()), {x.node()}, [h, w](NodeT<T>& n) {
    n.parents[0]->accumulate(cwfalab::tokens_to_chw(n.grad, h, w));
  });
}

template <typename T>
VarT<T> tokens_to_chw(const VarT<T>& x, std::size_t h, std::size_t w) {
  return make_op(cwfalab::tokens_to_chw(x.value(), h, w), {x.node()}, [](NodeT<T>& n) {
    n.parents[0]->accumulate(cwfalab::chw_to_tokens(n.grad));
  });
}

template <typename T>
VarT<T> bilinear_resize(const VarT<T>& x, std::size_t h2, std::size_t w2) {
  const std::size_t h = x.value().dim(1), w = x.value().dim(2);
  return make_op(cwfalab::bilinear_resize(x.value(), h2, w2), {x.node()}, [h, w](NodeT<T>& n) {
    n.parents[0]->accumulate(bilinear_resize_adjoint(n.grad, h, w));
  });
}

template <typename T>
VarT<T> concat_channels(const std::vector<VarT<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input");
  const std::size_t h = xs[0].value().dim(1), w = xs[0].value().dim(2);
  std::size_t c_total = 0;
  std::vector<NodePtr<T>> parents;
  for (const auto& x : xs) {
    if (x.value().rank() != 3 || x.value().dim(1) != h || x.value().dim(2) != w)
      throw ShapeError("concat_channels: spatial dims differ");
    c_total += x.value().dim(0);
    parents.push_back(x.node());
  }
  auto out = TensorBase<T>::uninit(Shape{c_total, h, w});
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.value().numel(), out.data() + off);
    off += x.value().numel();
  }
  return make_op(std::move(out), std::move(parents), [](NodeT<T>& n) {
    std::size_t pos = 0;
    for (auto& p : n.parents) {
      const std::size_t cnt = p->value.numel();
      if (p->requires_grad) {
        auto gp = TensorBase<T>::uninit(p->value.shape());
        std::copy(n.grad.data() + pos, n.grad.data() + pos + cnt, gp.data());
        p->accumulate(std::move(gp));
      }
      pos += cnt;
    }
  });
}

template <typename T>
VarT<T> im2col(const VarT<T>& x, const ConvGeom& g) {
  return make_op(cwfalab::im2col(x.value(), g), {x.node()}, [g](NodeT<T>& n) {
    n.parents[0]->accumulate(col2im(n.grad, g));
  });
}

// ---- attention ----------------------------------------------------------------

// Per-head attention maps captured for inspection in tests.
template <typename T>
struct AttentionCapture {
  std::vector<TensorBase<T>> head_weights;
};

// Rows of the score matrix processed per block; 128 rows of 1024 tokens is
// half a megabyte, comfortably inside L2 next to K and V.
inline constexpr std::size_t kAttnRowBlock = 128;

// copy one head's (n x dh) column slice, row stride `ld`, into dst as
// (dh x n); 16-row blocks keep the 4 KB-strided writes from fighting over one
// cache set
template <typename T>
void transpose_head(const T* src, std::size_t n, std::size_t dh, std::size_t ld, T* dst) {
  for (std::size_t i0 = 0; i0 < n; i0 += 16) {
    const std::size_t in = std::min<std::size_t>(16, n - i0);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t d = 0; d < dh; ++d) dst[d * n + i0 + i] = src[(i0 + i) * ld + d];
  }
}

// Scaled dot-product multi-head self-attention over token matrices (N,C).
// Returns the merged head outputs (N,C); the output projection is separate.
template <typename T>
VarT<T> multihead_attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v, int heads,
                            AttentionCapture<T>* capture = nullptr) {
  const auto& qv = q.value();
  if (qv.rank() != 2 || k.value().shape() != qv.shape() || v.value().shape() != qv.shape())
    throw ShapeError("multihead_attention: q,k,v must share shape (N,C)");
  const std::size_t n = qv.dim(0), c = qv.dim(1);
  if (heads <= 0 || c % static_cast<std::size_t>(heads) != 0)
    throw ShapeError("multihead_attention: C must divide by heads");
  const std::size_t h = static_cast<std::size_t>(heads), dh = c / h;
  const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Scores are produced and consumed in row blocks sized to stay cache
  // resident; only the post-softmax weights are kept (for the backward pass),
  // so no full n x n intermediate other than A ever touches memory. K is
  // transposed once per head instead of once per block inside the NT path.
  thread_local std::vector<T> sblk, hbuf;
  if (sblk.size() < kAttnRowBlock * n) sblk.resize(kAttnRowBlock * n);
  if (hbuf.size() < dh * n) hbuf.resize(dh * n);

  auto attn = std::make_shared<std::vector<TensorBase<T>>>();
  attn->reserve(h);
  auto out = TensorBase<T>::uninit(Shape{n, c});
  for (std::size_t hi = 0; hi < h; ++hi) {
    transpose_head(k.value().data() + hi * dh, n, dh, c, hbuf.data());
    auto a = TensorBase<T>::uninit(Shape{n, n});
    for (std::size_t i0 = 0; i0 < n; i0 += kAttnRowBlock) {
      const std::size_t bn = std::min(kAttnRowBlock, n - i0);
      blas_gemm(false, false, bn, n, dh, qv.data() + i0 * c + hi * dh, c, hbuf.data(), n,
                sblk.data(), n);
      softmax_rows_buf(sblk.data(), a.data() + i0 * n, bn, n, att_scale);
      blas_gemm(false, false, bn, dh, n, a.data() + i0 * n, n, v.value().data() + hi * dh, c,
                out.data() + i0 * c + hi * dh, c);
    }
    if (capture) capture->head_weights.push_back(a);
    attn->push_back(std::move(a));
  }

  return make_op(
      std::move(out), {q.node(), k.node(), v.node()},
      [attn, n, c, h, dh, att_scale](NodeT<T>& nd) {
        const auto& gout = nd.grad;
        const auto& qv2 = nd.parents[0]->value;
        const auto& kv2 = nd.parents[1]->value;
        const auto& vv2 = nd.parents[2]->value;
        auto gq = TensorBase<T>::uninit(Shape{n, c});
        TensorBase<T> gk(Shape{n, c}), gv(Shape{n, c});
        thread_local std::vector<T> dblk, vtbuf;
        if (dblk.size() < kAttnRowBlock * n) dblk.resize(kAttnRowBlock * n);
        if (vtbuf.size() < dh * n) vtbuf.resize(dh * n);
        for (std::size_t hi = 0; hi < h; ++hi) {
          const TensorBase<T>& a = (*attn)[hi];
          transpose_head(vv2.data() + hi * dh, n, dh, c, vtbuf.data());
          for (std::size_t i0 = 0; i0 < n; i0 += kAttnRowBlock) {
            const std::size_t bn = std::min(kAttnRowBlock, n - i0);
            // dA block = dOut_h V_h^T, staying in cache until consumed
            blas_gemm(false, false, bn, n, dh, gout.data() + i0 * c + hi * dh, c, vtbuf.data(),
                      n, dblk.data(), n);
            // softmax backward in place, folding in the 1/sqrt(dh) scaling
            for (std::size_t i = 0; i < bn; ++i) {
              const T* ar = a.data() + (i0 + i) * n;
              T* gr = dblk.data() + i * n;
              const double dot = dot_rows_f64(gr, ar, n);
              for (std::size_t j = 0; j < n; ++j)
                gr[j] = att_scale * ar[j] * (gr[j] - static_cast<T>(dot));
            }
            // dQ rows are owned by this block; dK, dV accumulate across blocks
            blas_gemm(false, false, bn, dh, n, dblk.data(), n, kv2.data() + hi * dh, c,
                      gq.data() + i0 * c + hi * dh, c);
            blas_gemm_acc(true, false, n, dh, bn, dblk.data(), n,
                          qv2.data() + i0 * c + hi * dh, c, gk.data() + hi * dh, c);
            blas_gemm_acc(true, false, n, dh, bn, a.data() + i0 * n, n,
                          gout.data() + i0 * c + hi * dh, c, gv.data() + hi * dh, c);
          }
        }
        nd.parents[0]->accumulate(std::move(gq));
        nd.parents[1]->accumulate(std::move(gk));
        nd.parents[2]->accumulate(std::move(gv));
      });
}

// ---- loss -----------------------------------------------------------------------

// Mean token-level cross entropy over (N,K) logits; labels < 0 are ignored.
// If every label is ignored the loss is zero with zero gradient.
template <typename T>
VarT<T> cross_entropy_mean(const VarT<T>& logits, std::vector<int> labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || labels.size() != lv.dim(0))
    throw ShapeError("cross_entropy_mean: labels must match logit rows");
  const std::size_t n = lv.dim(0), kk = lv.dim(1);
  for (int lb : labels)
    if (lb >= static_cast<int>(kk))
      throw ShapeError("cross_entropy_mean: label out of range");

  TensorBase<T> probs = cwfalab::softmax_rows(lv);
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) continue;
    ++counted;
    const double p = static_cast<double>(probs.at(i, static_cast<std::size_t>(labels[i])));
    loss -= std::log(p > 1e-30 ? p : 1e-30);
  }
  const double mean_loss = counted ? loss / static_cast<double>(counted) : 0.0;

  return make_op(TensorBase<T>::from_data({1}, {static_cast<T>(mean_loss)}), {logits.node()},
                 [probs = std::move(probs), labels = std::move(labels), counted](NodeT<T>& nd) {
                   if (!counted) return;
                   const std::size_t rows = probs.dim(0), cols = probs.dim(1);
                   const T s = nd.grad[0] / static_cast<T>(counted);
                   TensorBase<T> gx(probs.shape());
                   for (std::size_t i = 0; i < rows; ++i) {
                     if (labels[i] < 0) continue;
                     const T* pr = probs.data() + i * cols;
                     T* o = gx.data() + i * cols;
                     for (std::size_t j = 0; j < cols; ++j) o[j] = s * pr[j];
                     o[static_cast<std::size_t>(labels[i])] -= s;
                   }
                   nd.parents[0]->accumulate(std::move(gx));
                 });
}

}  // namespace cwfalab::ad
