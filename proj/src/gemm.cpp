#include "cwfalab/tensor.hpp"

#include <cstddef>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#if defined(__GLIBC__)
#include <malloc.h>

namespace {
// Activation tensors are a few MB and are allocated and freed every forward
// pass. With default malloc tuning each one round-trips through mmap/munmap
// (or heap trim), so every reuse page-faults 4MB back in; that costs more
// than the arithmetic it feeds. Keep big blocks on the heap and stop trimming.
struct HeapTuning {
  HeapTuning() {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  }
};
const HeapTuning heap_tuning_init;
}  // namespace
#endif

// Hand-rolled gemm kernels. A BLAS would be faster to adopt, but the system
// OpenBLAS picks its kernel from CPUID at load time, and on VMs that mask the
// model string it silently falls back to a generic kernel (~6x off peak
// here). Worse, different dispatched kernels use different summation orders,
// so checkpoints would stop being byte-reproducible across environments.
// These kernels fix one accumulation order forever and hit a decent fraction
// of single-core peak for the small, cache-resident shapes this project uses.

namespace cwfalab {
namespace {

#if defined(__AVX512F__)

// Computes a MR x jn tile of C accumulating over the full k range. NV is the
// number of 16-lane column vectors (1 for tiles <= 16 wide, else 2); the
// narrow variant matters because attention projects through 16-wide heads.
// AT selects whether A is accessed as (m x k, row-major) or as its transpose
// stored (k x m, row-major).
template <bool AT, int MR, int NV>
inline void tile_f32(std::size_t i0, std::size_t j0, std::size_t jn, std::size_t k,
                     const float* a, std::size_t lda, const float* b, std::size_t ldb,
                     float* c, std::size_t ldc) {
  const __mmask16 m0 = jn >= 16 ? static_cast<__mmask16>(0xFFFF)
                                : static_cast<__mmask16>((1u << jn) - 1u);
  const std::size_t rem = jn > 16 ? jn - 16 : 0;
  const __mmask16 m1 = rem >= 16 ? static_cast<__mmask16>(0xFFFF)
                                 : static_cast<__mmask16>((1u << rem) - 1u);

  __m512 acc0[MR], acc1[MR];
  for (int t = 0; t < MR; ++t) {
    acc0[t] = _mm512_setzero_ps();
    if (NV == 2) acc1[t] = _mm512_setzero_ps();
  }
  for (std::size_t r = 0; r < k; ++r) {
    const float* brow = b + r * ldb + j0;
    const __m512 b0 = _mm512_maskz_loadu_ps(m0, brow);
    __m512 b1;
    if (NV == 2) b1 = _mm512_maskz_loadu_ps(m1, brow + 16);
    for (int t = 0; t < MR; ++t) {
      const std::size_t i = i0 + static_cast<std::size_t>(t);
      const float av = AT ? a[r * lda + i] : a[i * lda + r];
      const __m512 av16 = _mm512_set1_ps(av);
      acc0[t] = _mm512_fmadd_ps(av16, b0, acc0[t]);
      if (NV == 2) acc1[t] = _mm512_fmadd_ps(av16, b1, acc1[t]);
    }
  }
  for (int t = 0; t < MR; ++t) {
    float* crow = c + (i0 + static_cast<std::size_t>(t)) * ldc + j0;
    _mm512_mask_storeu_ps(crow, m0, acc0[t]);
    if (NV == 2) _mm512_mask_storeu_ps(crow + 16, m1, acc1[t]);
  }
}

template <bool AT, int NV>
inline void tile_row_f32(std::size_t i0, std::size_t mr, std::size_t j0, std::size_t jn,
                         std::size_t k, const float* a, std::size_t lda, const float* b,
                         std::size_t ldb, float* c, std::size_t ldc) {
  switch (mr) {
    case 6: tile_f32<AT, 6, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
    case 5: tile_f32<AT, 5, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
    case 4: tile_f32<AT, 4, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
    case 3: tile_f32<AT, 3, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
    case 2: tile_f32<AT, 2, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
    default: tile_f32<AT, 1, NV>(i0, j0, jn, k, a, lda, b, ldb, c, ldc); break;
  }
}

template <bool AT>
void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
              const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  constexpr std::size_t MR = 6;
  // column panels sized so the live B panel (k rows x JP cols) fits L1 while
  // the row tiles sweep over it; wider panels when k is shallow
  const std::size_t jp_raw = 6144 / (k > 0 ? k : 1);
  const std::size_t JP = jp_raw < 32 ? 32 : (jp_raw > 256 ? 256 : jp_raw & ~std::size_t(31));
  for (std::size_t jp = 0; jp < n; jp += JP) {
    const std::size_t jpn = std::min(JP, n - jp);
    for (std::size_t i0 = 0; i0 < m; i0 += MR) {
      const std::size_t mr = std::min(MR, m - i0);
      for (std::size_t j0 = jp; j0 < jp + jpn; j0 += 32) {
        const std::size_t jn = std::min<std::size_t>(32, jp + jpn - j0);
        if (jn <= 16)
          tile_row_f32<AT, 1>(i0, mr, j0, jn, k, a, lda, b, ldb, c, ldc);
        else
          tile_row_f32<AT, 2>(i0, mr, j0, jn, k, a, lda, b, ldb, c, ldc);
      }
    }
  }
}

// A^T * B with a narrow result (n <= 16), k deep: the layout the attention
// backward hits for dV and dK. The generic path walks whole strided columns
// of A per tile; this one streams A row-blocks once and keeps the small C
// resident, updating it as a sequence of rank-8 contributions. Accum keeps
// the existing C instead of zeroing it first.
template <bool Accum>
void gemm_f32_tn_narrow(std::size_t m, std::size_t n, std::size_t k, const float* a,
                        std::size_t lda, const float* b, std::size_t ldb, float* c,
                        std::size_t ldc) {
  const __mmask16 mk = static_cast<__mmask16>((1u << n) - 1u);
  const __m512 vz = _mm512_setzero_ps();
  if (!Accum)
    for (std::size_t i = 0; i < m; ++i) _mm512_mask_storeu_ps(c + i * ldc, mk, vz);

  for (std::size_t r0 = 0; r0 < k; r0 += 8) {
    const std::size_t rb = std::min<std::size_t>(8, k - r0);
    __m512 bv[8];
    for (std::size_t t = 0; t < rb; ++t)
      bv[t] = _mm512_maskz_loadu_ps(mk, b + (r0 + t) * ldb);

    std::size_t i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) {
      // two chains per output row hide the fma latency
      __m512 acc[4][2];
      for (int j = 0; j < 4; ++j) {
        acc[j][0] = _mm512_maskz_loadu_ps(mk, c + (i0 + j) * ldc);
        acc[j][1] = vz;
      }
      for (std::size_t t = 0; t < rb; ++t) {
        const float* arow = a + (r0 + t) * lda + i0;
        const int p = static_cast<int>(t & 1);
        for (int j = 0; j < 4; ++j)
          acc[j][p] = _mm512_fmadd_ps(_mm512_set1_ps(arow[j]), bv[t], acc[j][p]);
      }
      for (int j = 0; j < 4; ++j)
        _mm512_mask_storeu_ps(c + (i0 + j) * ldc, mk,
                              _mm512_add_ps(acc[j][0], acc[j][1]));
    }
    for (; i0 < m; ++i0) {
      __m512 a0 = _mm512_maskz_loadu_ps(mk, c + i0 * ldc);
      __m512 a1 = vz;
      for (std::size_t t = 0; t < rb; ++t) {
        const __m512 av = _mm512_set1_ps(a[(r0 + t) * lda + i0]);
        if (t & 1)
          a1 = _mm512_fmadd_ps(av, bv[t], a1);
        else
          a0 = _mm512_fmadd_ps(av, bv[t], a0);
      }
      _mm512_mask_storeu_ps(c + i0 * ldc, mk, _mm512_add_ps(a0, a1));
    }
  }
}

#else  // scalar fallback

template <bool AT>
void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
              const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0f;
    for (std::size_t r = 0; r < k; ++r) {
      const float av = AT ? a[r * lda + i] : a[i * lda + r];
      const float* brow = b + r * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

#endif

// B^T is materialized once so the NT case reuses the row-major kernel. The
// buffer persists to avoid a large allocation per call.
thread_local std::vector<float> g_bt_f32;
thread_local std::vector<double> g_bt_f64;

}  // namespace

void blas_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
               std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const float* bmat = b;
  std::size_t ldbm = ldb;
  if (trans_b) {
    if (g_bt_f32.size() < k * n) g_bt_f32.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t r = 0; r < k; ++r) g_bt_f32[r * n + j] = b[j * ldb + r];
    bmat = g_bt_f32.data();
    ldbm = n;
  }
  if (trans_a) {
#if defined(__AVX512F__)
    if (n <= 16) {
      gemm_f32_tn_narrow<false>(m, n, k, a, lda, bmat, ldbm, c, ldc);
      return;
    }
#endif
    gemm_f32<true>(m, n, k, a, lda, bmat, ldbm, c, ldc);
  } else {
    gemm_f32<false>(m, n, k, a, lda, bmat, ldbm, c, ldc);
  }
}

void blas_gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                   std::size_t ldc) {
  if (m == 0 || n == 0) return;
#if defined(__AVX512F__)
  if (trans_a && !trans_b && n <= 16) {
    gemm_f32_tn_narrow<true>(m, n, k, a, lda, b, ldb, c, ldc);
    return;
  }
#endif
  thread_local std::vector<float> scratch;
  if (scratch.size() < m * n) scratch.resize(m * n);
  blas_gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, scratch.data(), n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += scratch[i * n + j];
}

void blas_gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                   std::size_t ldc) {
  if (m == 0 || n == 0) return;
  thread_local std::vector<double> scratch;
  if (scratch.size() < m * n) scratch.resize(m * n);
  blas_gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, scratch.data(), n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += scratch[i * n + j];
}

void blas_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
               std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const double* bmat = b;
  std::size_t ldbm = ldb;
  if (trans_b) {
    if (g_bt_f64.size() < k * n) g_bt_f64.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t r = 0; r < k; ++r) g_bt_f64[r * n + j] = b[j * ldb + r];
    bmat = g_bt_f64.data();
    ldbm = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      const double av = trans_a ? a[r * lda + i] : a[i * lda + r];
      const double* brow = bmat + r * ldbm;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace cwfalab
