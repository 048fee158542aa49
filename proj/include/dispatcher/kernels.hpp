#pragma once

#include <algorithm>
#include <cstddef>

#include "dispatcher/memory.hpp"

// Dense double-precision GEMM kernels. Packed panels plus a 4x8 register tile;
// single-threaded and deterministic (fixed summation order for a given shape).
namespace dispatcher::kernels {

namespace detail {

inline constexpr std::size_t kTileM = 4;
inline constexpr std::size_t kTileN = 8;
inline constexpr std::size_t kBlockK = 256;
inline constexpr std::size_t kBlockM = 128;
inline constexpr std::size_t kBlockN = 1024;

// acc[4x8] += a_panel[k x 4] * b_panel[k x 8]
inline void micro_kernel(std::size_t kc, const double* __restrict a, const double* __restrict b,
                         double* __restrict acc) {
  double c[kTileM][kTileN] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    const double* bp = b + p * kTileN;
    const double* ap = a + p * kTileM;
    for (std::size_t i = 0; i < kTileM; ++i) {
      const double av = ap[i];
      for (std::size_t j = 0; j < kTileN; ++j) {
        c[i][j] += av * bp[j];
      }
    }
  }
  for (std::size_t i = 0; i < kTileM; ++i) {
    for (std::size_t j = 0; j < kTileN; ++j) {
      acc[i * kTileN + j] = c[i][j];
    }
  }
}

// Element (i, p) of op(A) where op is identity (A is m x k, row stride lda) or
// transpose (A is k x m).
inline double load_a(const double* a, std::size_t lda, bool trans, std::size_t i, std::size_t p) {
  return trans ? a[p * lda + i] : a[i * lda + p];
}

inline double load_b(const double* b, std::size_t ldb, bool trans, std::size_t p, std::size_t j) {
  return trans ? b[j * ldb + p] : b[p * ldb + j];
}

}  // namespace detail

// C[m x n] (+)= op(A)[m x k] * op(B)[k x n], all row-major.
// trans_a: A is stored k x m. trans_b: B is stored n x k.
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, bool trans_a,
                 const double* b, bool trans_b, double* c, bool accumulate) {
  using namespace detail;
  if (!accumulate) {
    std::fill(c, c + m * n, 0.0);
  }
  if (m == 0 || n == 0 || k == 0) {
    return;
  }
  op_counters().total_macs += static_cast<std::uint64_t>(m) * n * k;

  const std::size_t lda = trans_a ? m : k;
  const std::size_t ldb = trans_b ? k : n;

  Buffer a_pack(kBlockM * kBlockK);
  Buffer b_pack(kBlockK * kBlockN);
  double tile[kTileM * kTileN];

  for (std::size_t jb = 0; jb < n; jb += kBlockN) {
    const std::size_t nc = std::min(kBlockN, n - jb);
    const std::size_t n_panels = (nc + kTileN - 1) / kTileN;
    for (std::size_t pb = 0; pb < k; pb += kBlockK) {
      const std::size_t kc = std::min(kBlockK, k - pb);
      // Pack B block into kTileN-wide panels, zero-padded.
      for (std::size_t jp = 0; jp < n_panels; ++jp) {
        double* dst = b_pack.data() + jp * kc * kTileN;
        for (std::size_t p = 0; p < kc; ++p) {
          for (std::size_t jj = 0; jj < kTileN; ++jj) {
            const std::size_t j = jp * kTileN + jj;
            dst[p * kTileN + jj] = j < nc ? load_b(b, ldb, trans_b, pb + p, jb + j) : 0.0;
          }
        }
      }
      for (std::size_t ib = 0; ib < m; ib += kBlockM) {
        const std::size_t mc = std::min(kBlockM, m - ib);
        const std::size_t m_panels = (mc + kTileM - 1) / kTileM;
        for (std::size_t ip = 0; ip < m_panels; ++ip) {
          double* dst = a_pack.data() + ip * kc * kTileM;
          for (std::size_t p = 0; p < kc; ++p) {
            for (std::size_t ii = 0; ii < kTileM; ++ii) {
              const std::size_t i = ip * kTileM + ii;
              dst[p * kTileM + ii] = i < mc ? load_a(a, lda, trans_a, ib + i, pb + p) : 0.0;
            }
          }
        }
        for (std::size_t ip = 0; ip < m_panels; ++ip) {
          const std::size_t rows = std::min(kTileM, mc - ip * kTileM);
          for (std::size_t jp = 0; jp < n_panels; ++jp) {
            const std::size_t cols = std::min(kTileN, nc - jp * kTileN);
            micro_kernel(kc, a_pack.data() + ip * kc * kTileM, b_pack.data() + jp * kc * kTileN,
                         tile);
            for (std::size_t ii = 0; ii < rows; ++ii) {
              double* crow = c + (ib + ip * kTileM + ii) * n + jb + jp * kTileN;
              for (std::size_t jj = 0; jj < cols; ++jj) {
                crow[jj] += tile[ii * kTileN + jj];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace dispatcher::kernels
