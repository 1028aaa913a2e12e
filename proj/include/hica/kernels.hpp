#pragma once

#include <string>

namespace hica::kernels {

// Inner-loop kernels behind the tensor ops. Scalar versions are the
// reference; the AVX2 set is selected at runtime when the CPU supports
// avx2+fma and must agree with scalar within accumulation-order rounding
// (equivalence-tested in tests/test_kernels.cpp).
//
// Matmul kernels accumulate into c; callers zero c when they want a plain
// product.
struct Ops {
  const char* name;
  double (*dot)(const double* x, const double* y, int n);
  // y[i] += a * x[i]
  void (*axpy)(double* y, double a, const double* x, int n);
  // c (m x n) += a (m x k) * b (k x n)
  void (*matmul_acc)(const double* a, const double* b, double* c, int m, int k, int n);
  // c (m x n) += a (m x k) * b^T, b given as n x k
  void (*matmul_nt_acc)(const double* a, const double* b, double* c, int m, int k, int n);
  // c (m x n) += a^T * b, a given as k x m, b as k x n
  void (*matmul_tn_acc)(const double* a, const double* b, double* c, int m, int k, int n);
};

const Ops& scalar_ops();
#if defined(__x86_64__) || defined(_M_X64)
const Ops& avx2_ops();
#endif

// Active kernel set. Chosen once: HICA_KERNELS=scalar|avx2 overrides, else
// avx2 when the CPU has it, else scalar.
const Ops& active();

// Test hook; pass "scalar", "avx2" or "auto".
void force(const std::string& which);

}  // namespace hica::kernels
