#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "cwfalab/errors.hpp"

namespace cwfalab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// std::allocator whose no-argument construct leaves trivial elements
// uninitialized, so vectors of hot-loop outputs skip the useless memset
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAlloc<U>;
  };
  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

// Dense row-major tensor. Rank-3 image data is channel-first (C,H,W).
template <typename T>
class TensorBase {
 public:
  using Storage = std::vector<T, DefaultInitAlloc<T>>;

  TensorBase() = default;

  explicit TensorBase(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  // storage left unconstructed; only for outputs every element of which is
  // about to be written
  static TensorBase uninit(Shape shape) {
    TensorBase t;
    t.shape_ = std::move(shape);
    t.data_.resize(shape_numel(t.shape_));
    return t;
  }

  static TensorBase from_data(Shape shape, const std::vector<T>& data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data size does not match shape " + shape_str(shape));
    TensorBase t;
    t.shape_ = std::move(shape);
    t.data_.assign(data.begin(), data.end());
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  TensorBase<U> cast() const {
    auto out = TensorBase<U>::uninit(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  Storage data_;
};

using Tensor = TensorBase<float>;
using TensorD = TensorBase<double>;

template <typename T>
void require_same_shape(const TensorBase<T>& a, const TensorBase<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
TensorBase<T> add(const TensorBase<T>& a, const TensorBase<T>& b) {
  require_same_shape(a, b, "add");
  auto out = TensorBase<T>::uninit(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <typename T>
void add_inplace(TensorBase<T>& a, const TensorBase<T>& b) {
  require_same_shape(a, b, "add_inplace");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.numel(); ++i) pa[i] += pb[i];
}

template <typename T>
void axpy(TensorBase<T>& y, T alpha, const TensorBase<T>& x) {
  require_same_shape(y, x, "axpy");
  T* py = y.data();
  const T* px = x.data();
  for (std::size_t i = 0; i < y.numel(); ++i) py[i] += alpha * px[i];
}

template <typename T>
TensorBase<T> mul(const TensorBase<T>& a, const TensorBase<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = TensorBase<T>::uninit(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
TensorBase<T> scale(const TensorBase<T>& a, T s) {
  auto out = TensorBase<T>::uninit(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

// a is (C,H,W), b is a length-C vector broadcast over the spatial axes
template <typename T>
TensorBase<T> add_channel_vector(const TensorBase<T>& a, const TensorBase<T>& b) {
  if (a.rank() != 3 || b.rank() != 1 || b.dim(0) != a.dim(0))
    throw ShapeError("add_channel_vector: need (C,H,W) and (C,), got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  auto out = TensorBase<T>::uninit(a.shape());
  const std::size_t hw = a.dim(1) * a.dim(2);
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t c = 0; c < a.dim(0); ++c) {
    const T v = b[c];
    for (std::size_t i = 0; i < hw; ++i) po[c * hw + i] = pa[c * hw + i] + v;
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

// (C,H,W) -> (C,), mean over the spatial axes
template <typename T>
TensorBase<T> global_avg_pool(const TensorBase<T>& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool: need rank-3, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto out = TensorBase<T>::uninit(Shape{c});
  const T* px = x.data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(px[ci * hw + i]);
    out[ci] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return out;
}

// Euclidean norm of the flattened tensor, accumulated in double.
template <typename T>
T l2_norm(const TensorBase<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x[i]);
    acc += v * v;
  }
  return static_cast<T>(std::sqrt(acc));
}

template <typename T>
double sum(const TensorBase<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
  return acc;
}

// (N,C) -> (C,), sum over rows
template <typename T>
TensorBase<T> col_sum(const TensorBase<T>& x) {
  if (x.rank() != 2) throw ShapeError("col_sum: need rank-2");
  TensorBase<T> out(Shape{x.dim(1)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) out[j] += x.at(i, j);
  return out;
}

template <typename T>
bool all_finite(const TensorBase<T>& x) {
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (!std::isfinite(static_cast<double>(x[i]))) return false;
  return true;
}

// ---- matmul (kernels in gemm.cpp) -------------------------------------------

void blas_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
               std::size_t ldc);
void blas_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
               std::size_t ldc);

// C += op(A) op(B); used where a product is built up over row blocks
void blas_gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                   std::size_t ldc);
void blas_gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                   std::size_t ldc);

// (M,K) x (K,N) -> (M,N)
template <typename T>
TensorBase<T> matmul(const TensorBase<T>& a, const TensorBase<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorBase<T>::uninit(Shape{m, n});
  blas_gemm(false, false, m, n, k, a.data(), k, b.data(), n, out.data(), n);
  return out;
}

// (M,K) x (N,K)^T -> (M,N)
template <typename T>
TensorBase<T> matmul_nt(const TensorBase<T>& a, const TensorBase<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = TensorBase<T>::uninit(Shape{m, n});
  blas_gemm(false, true, m, n, k, a.data(), k, b.data(), k, out.data(), n);
  return out;
}

// (R,M)^T x (R,N) -> (M,N)
template <typename T>
TensorBase<T> matmul_tn(const TensorBase<T>& a, const TensorBase<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("matmul_tn: incompatible " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  const std::size_t r = a.dim(0), m = a.dim(1), n = b.dim(1);
  auto out = TensorBase<T>::uninit(Shape{m, n});
  blas_gemm(true, false, m, n, r, a.data(), m, b.data(), n, out.data(), n);
  return out;
}

// ---- layout ----------------------------------------------------------------

// (C,H,W) -> (H*W, C) token matrix
template <typename T>
TensorBase<T> chw_to_tokens(const TensorBase<T>& x) {
  if (x.rank() != 3) throw ShapeError("chw_to_tokens: need rank-3");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  auto out = TensorBase<T>::uninit(Shape{hw, c});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < hw; ++i) po[i * c + ci] = px[ci * hw + i];
  return out;
}

// (H*W, C) -> (C,H,W)
template <typename T>
TensorBase<T> tokens_to_chw(const TensorBase<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 2 || x.dim(0) != h * w)
    throw ShapeError("tokens_to_chw: need (" + std::to_string(h * w) + ",C)");
  const std::size_t c = x.dim(1), hw = h * w;
  auto out = TensorBase<T>::uninit(Shape{c, h, w});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t ci = 0; ci < c; ++ci) po[ci * hw + i] = px[i * c + ci];
  return out;
}

// ---- convolution lowering ---------------------------------------------------

struct ConvGeom {
  std::size_t c_in = 0, h_in = 0, w_in = 0;
  std::size_t kernel = 0, stride = 0, pad = 0;
  std::size_t h_out = 0, w_out = 0;
};

inline ConvGeom conv_geom(const Shape& in, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  if (in.size() != 3) throw ShapeError("conv_geom: need rank-3 input");
  ConvGeom g;
  g.c_in = in[0];
  g.h_in = in[1];
  g.w_in = in[2];
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  if (stride == 0 || kernel == 0) throw ShapeError("conv_geom: kernel/stride must be positive");
  if (in[1] + 2 * pad < kernel || in[2] + 2 * pad < kernel)
    throw ShapeError("conv_geom: kernel larger than padded input");
  g.h_out = (in[1] + 2 * pad - kernel) / stride + 1;
  g.w_out = (in[2] + 2 * pad - kernel) / stride + 1;
  return g;
}

// (C,H,W) -> (H_out*W_out, C*k*k); out-of-bounds taps read zero
template <typename T>
TensorBase<T> im2col(const TensorBase<T>& x, const ConvGeom& g) {
  auto out = TensorBase<T>::uninit(Shape{g.h_out * g.w_out, g.c_in * g.kernel * g.kernel});
  T* po = out.data();
  const T* px = x.data();
  const std::size_t hw = g.h_in * g.w_in;
  for (std::size_t oy = 0; oy < g.h_out; ++oy) {
    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
      T* row = po + (oy * g.w_out + ox) * g.c_in * g.kernel * g.kernel;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            T v = T(0);
            if (iy >= 0 && iy < static_cast<long>(g.h_in) && ix >= 0 &&
                ix < static_cast<long>(g.w_in))
              v = px[c * hw + static_cast<std::size_t>(iy) * g.w_in + static_cast<std::size_t>(ix)];
            row[(c * g.kernel + ky) * g.kernel + kx] = v;
          }
        }
      }
    }
  }
  return out;
}

// adjoint of im2col: scatter-add column rows back into (C,H,W)
template <typename T>
TensorBase<T> col2im(const TensorBase<T>& cols, const ConvGeom& g) {
  if (cols.rank() != 2 || cols.dim(0) != g.h_out * g.w_out ||
      cols.dim(1) != g.c_in * g.kernel * g.kernel)
    throw ShapeError("col2im: column matrix does not match geometry");
  TensorBase<T> out(Shape{g.c_in, g.h_in, g.w_in});
  T* po = out.data();
  const T* pc = cols.data();
  const std::size_t hw = g.h_in * g.w_in;
  for (std::size_t oy = 0; oy < g.h_out; ++oy) {
    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
      const T* row = pc + (oy * g.w_out + ox) * g.c_in * g.kernel * g.kernel;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h_in)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w_in)) continue;
            po[c * hw + static_cast<std::size_t>(iy) * g.w_in + static_cast<std::size_t>(ix)] +=
                row[(c * g.kernel + ky) * g.kernel + kx];
          }
        }
      }
    }
  }
  return out;
}

// ---- resampling -------------------------------------------------------------

struct BilinearTap {
  std::size_t i0, i1;
  float w1;  // weight of i1; i0 gets 1-w1
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<BilinearTap> taps(out);
  const double s = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    if (src < 0.0) src = 0.0;
    const double hi = static_cast<double>(in - 1);
    if (src > hi) src = hi;
    const auto i0 = static_cast<std::size_t>(src);
    taps[o].i0 = i0;
    taps[o].i1 = i0 + 1 < in ? i0 + 1 : i0;
    taps[o].w1 = static_cast<float>(src - static_cast<double>(i0));
  }
  return taps;
}

// (C,H,W) -> (C,h2,w2), half-pixel-center bilinear
template <typename T>
TensorBase<T> bilinear_resize(const TensorBase<T>& x, std::size_t h2, std::size_t w2) {
  if (x.rank() != 3) throw ShapeError("bilinear_resize: need rank-3");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = bilinear_taps(h, h2);
  const auto tx = bilinear_taps(w, w2);
  auto out = TensorBase<T>::uninit(Shape{c, h2, w2});
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* src = x.data() + ci * h * w;
    T* dst = out.data() + ci * h2 * w2;
    for (std::size_t y = 0; y < h2; ++y) {
      const auto& a = ty[y];
      for (std::size_t xo = 0; xo < w2; ++xo) {
        const auto& b = tx[xo];
        const T v00 = src[a.i0 * w + b.i0], v01 = src[a.i0 * w + b.i1];
        const T v10 = src[a.i1 * w + b.i0], v11 = src[a.i1 * w + b.i1];
        const T top = v00 + static_cast<T>(b.w1) * (v01 - v00);
        const T bot = v10 + static_cast<T>(b.w1) * (v11 - v10);
        dst[y * w2 + xo] = top + static_cast<T>(a.w1) * (bot - top);
      }
    }
  }
  return out;
}

// taps regrouped by source index: for each input position, which outputs
// read it and with what weight
struct InverseTaps {
  std::vector<std::uint32_t> offsets;  // size in+1
  // weights kept in double so the 1-w1 complement rounds the same way the
  // forward pass computes it for either scalar type
  std::vector<std::pair<std::uint32_t, double>> entries;
};

inline InverseTaps invert_taps(const std::vector<BilinearTap>& taps, std::size_t in) {
  InverseTaps inv;
  inv.offsets.assign(in + 1, 0);
  for (const auto& t : taps) {
    ++inv.offsets[t.i0 + 1];
    if (t.i1 != t.i0) ++inv.offsets[t.i1 + 1];
  }
  for (std::size_t i = 0; i < in; ++i) inv.offsets[i + 1] += inv.offsets[i];
  inv.entries.resize(inv.offsets[in]);
  std::vector<std::uint32_t> cursor(inv.offsets.begin(), inv.offsets.end() - 1);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const auto& t = taps[o];
    inv.entries[cursor[t.i0]++] = {static_cast<std::uint32_t>(o), 1.0 - static_cast<double>(t.w1)};
    if (t.i1 != t.i0)
      inv.entries[cursor[t.i1]++] = {static_cast<std::uint32_t>(o), static_cast<double>(t.w1)};
  }
  return inv;
}

// adjoint of bilinear_resize, mapping gradient (C,h2,w2) back onto (C,h,w).
// Written as a gather over the inverted taps: every destination cell sums its
// contributions in a register, so upsampling adjoints (many outputs feeding
// few inputs) do not serialize on read-modify-write of the same cell.
template <typename T>
TensorBase<T> bilinear_resize_adjoint(const TensorBase<T>& g, std::size_t h, std::size_t w) {
  if (g.rank() != 3) throw ShapeError("bilinear_resize_adjoint: need rank-3");
  const std::size_t c = g.dim(0), h2 = g.dim(1), w2 = g.dim(2);
  const InverseTaps iy = invert_taps(bilinear_taps(h, h2), h);
  const InverseTaps ix = invert_taps(bilinear_taps(w, w2), w);
  auto out = TensorBase<T>::uninit(Shape{c, h, w});
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* src = g.data() + ci * h2 * w2;
    T* dst = out.data() + ci * h * w;
    for (std::size_t yi = 0; yi < h; ++yi) {
      for (std::size_t xi = 0; xi < w; ++xi) {
        T acc = 0;
        for (std::uint32_t e = iy.offsets[yi]; e < iy.offsets[yi + 1]; ++e) {
          const auto [y2, wy] = iy.entries[e];
          const T* grow = src + static_cast<std::size_t>(y2) * w2;
          T racc = 0;
          for (std::uint32_t f = ix.offsets[xi]; f < ix.offsets[xi + 1]; ++f) {
            const auto [xo, wx] = ix.entries[f];
            racc += static_cast<T>(wx) * grow[xo];
          }
          acc += static_cast<T>(wy) * racc;
        }
        dst[yi * w + xi] = acc;
      }
    }
  }
  return out;
}

// ---- fast float transcendentals ---------------------------------------------
//
// The float product path needs exp/tanh in tight loops that the compiler can
// vectorize, so these are branch-free polynomial versions (rel err ~2e-7).
// The double path keeps libm for reference-grade gradient checking.

inline float fast_expf(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  // round-to-nearest via the 1.5*2^23 shifter; avoids floorf, which GCC will
  // not vectorize under strict IEEE flags
  const float fi = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  // Cody-Waite two-part ln2 keeps the reduced argument accurate for large |x|
  float z = x - fi * 0.693359375f;
  z -= fi * -2.12194440e-4f;
  const float p =
      1.0f +
      z * (1.0f +
           z * (0.5f + z * (0.16666666666f +
                            z * (0.04166666666f + z * (0.00833333333f + z * 0.00138888888f)))));
  const auto bits = static_cast<std::uint32_t>(static_cast<int>(fi) + 127) << 23;
  float s;
  std::memcpy(&s, &bits, 4);
  return p * s;
}

template <typename T>
inline T exp_fn(T x) {
  return std::exp(x);
}
template <>
inline float exp_fn<float>(float x) {
  return fast_expf(x);
}

template <typename T>
inline T tanh_fn(T x) {
  return std::tanh(x);
}
template <>
inline float tanh_fn<float>(float x) {
  const float e = fast_expf(2.0f * x);
  return 1.0f - 2.0f / (e + 1.0f);
}

// ---- plain activations (forward only; gradients live in the autodiff ops) ---

// softmax over each length-m row of src into dst (may alias src), applying a
// positive premultiplier to the logits first; exp(p*x) maxes where x does, so
// the shift uses the raw row max
template <typename T>
void softmax_rows_buf(const T* src, T* dst, std::size_t n, std::size_t m, T premul) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = src + i * m;
    T* orow = dst + i * m;
    // lane-split reductions: the fixed lane order keeps results reproducible
    // while breaking the serial dependence that otherwise dominates long rows
    T mx = row[0];
    std::size_t j = 1;
    if (m >= 32) {
      T lanes[16];
      for (int t = 0; t < 16; ++t) lanes[t] = row[t];
      for (j = 16; j + 16 <= m; j += 16)
        for (int t = 0; t < 16; ++t)
          lanes[t] = row[j + t] > lanes[t] ? row[j + t] : lanes[t];
      mx = lanes[0];
      for (int t = 1; t < 16; ++t) mx = lanes[t] > mx ? lanes[t] : mx;
    }
    for (; j < m; ++j) mx = row[j] > mx ? row[j] : mx;

    for (std::size_t jj = 0; jj < m; ++jj) orow[jj] = exp_fn(premul * (row[jj] - mx));

    double acc[8] = {0.0};
    std::size_t j2 = 0;
    for (; j2 + 8 <= m; j2 += 8)
      for (int t = 0; t < 8; ++t) acc[t] += static_cast<double>(orow[j2 + t]);
    double denom =
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; j2 < m; ++j2) denom += static_cast<double>(orow[j2]);

    const T inv = static_cast<T>(1.0 / denom);
    for (std::size_t jj = 0; jj < m; ++jj) orow[jj] *= inv;
  }
}

template <typename T>
TensorBase<T> softmax_rows(const TensorBase<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: need rank-2");
  auto out = TensorBase<T>::uninit(x.shape());
  softmax_rows_buf(x.data(), out.data(), x.dim(0), x.dim(1), T(1));
  return out;
}

// dot product accumulated in double, lane-split like the softmax denominator
template <typename T>
double dot_rows_f64(const T* a, const T* b, std::size_t n) {
  double acc[8] = {0.0};
  const std::size_t n8 = n - n % 8;
  std::size_t j = 0;
  for (; j < n8; j += 8)
    for (int t = 0; t < 8; ++t)
      acc[t] += static_cast<double>(a[j + t]) * static_cast<double>(b[j + t]);
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; j < n; ++j) s += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return s;
}

inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;

// tanh-form gelu (the standard approximation), same formula in both precisions
template <typename T>
T gelu_scalar(T x) {
  const T u = static_cast<T>(kGeluC0) * (x + static_cast<T>(kGeluC1) * x * x * x);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + tanh_fn(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T u = static_cast<T>(kGeluC0) * (x + static_cast<T>(kGeluC1) * x * x * x);
  const T th = tanh_fn(u);
  const T du = static_cast<T>(kGeluC0) * (static_cast<T>(1) + static_cast<T>(3.0 * kGeluC1) * x * x);
  return static_cast<T>(0.5) * (static_cast<T>(1) + th) +
         static_cast<T>(0.5) * x * (static_cast<T>(1) - th * th) * du;
}

template <typename T>
TensorBase<T> gelu(const TensorBase<T>& x) {
  auto out = TensorBase<T>::uninit(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

// ---- optimizer --------------------------------------------------------------

struct AdamWParams {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// One decoupled-weight-decay Adam update. `step` is 1-based.
template <typename T>
void adamw_step(TensorBase<T>& p, const TensorBase<T>& g, TensorBase<T>& m, TensorBase<T>& v,
                std::uint64_t step, const AdamWParams& hp) {
  require_same_shape(p, g, "adamw_step");
  if (m.empty()) m = TensorBase<T>(p.shape());
  if (v.empty()) v = TensorBase<T>(p.shape());
  const double b1 = hp.beta1, b2 = hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
  T* pp = p.data();
  const T* pg = g.data();
  T* pm = m.data();
  T* pv = v.data();
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double gi = static_cast<double>(pg[i]);
    const double mi = b1 * static_cast<double>(pm[i]) + (1.0 - b1) * gi;
    const double vi = b2 * static_cast<double>(pv[i]) + (1.0 - b2) * gi * gi;
    pm[i] = static_cast<T>(mi);
    pv[i] = static_cast<T>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + hp.eps) +
                          hp.weight_decay * static_cast<double>(pp[i]);
    pp[i] = static_cast<T>(static_cast<double>(pp[i]) - hp.lr * update);
  }
}

}  // namespace cwfalab
