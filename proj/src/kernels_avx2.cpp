// AVX2+FMA variants of the inner-loop kernels. Compiled with -mavx2 -mfma;
// only reached through the runtime dispatcher, which checks cpu support
// first. Accumulation order differs from the scalar reference, so results
// agree to rounding, not bitwise.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "hica/kernels.hpp"

namespace hica::kernels {

namespace {

inline double hsum256(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double dot_avx2(const double* x, const double* y, int n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double s = hsum256(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy_avx2(double* y, double a, const double* x, int n) {
  const __m256d av = _mm256_set1_pd(a);
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d yi = _mm256_loadu_pd(y + i);
    yi = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yi);
    _mm256_storeu_pd(y + i, yi);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void matmul_acc_avx2(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      axpy_avx2(crow, arow[kk], b + static_cast<size_t>(kk) * n, n);
    }
  }
}

void matmul_nt_acc_avx2(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] += dot_avx2(arow, b + static_cast<size_t>(j) * k, k);
  }
}

void matmul_tn_acc_avx2(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const double* arow = a + static_cast<size_t>(kk) * m;
    const double* brow = b + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      axpy_avx2(c + static_cast<size_t>(i) * n, arow[i], brow, n);
    }
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops ops{"avx2",          dot_avx2,          axpy_avx2,
                       matmul_acc_avx2, matmul_nt_acc_avx2, matmul_tn_acc_avx2};
  return ops;
}

}  // namespace hica::kernels

#endif  // x86_64
