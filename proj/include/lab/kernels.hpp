#pragma once

// Dense row-major GEMM kernels (f32 + f64), the hot loops of the whole
// toolkit. Every kernel exists in two drivers: an OpenMP-parallel one and a
// serial reference. Both dispatch to the same non-inlined per-row workers,
// so results are bit-identical across drivers and thread counts (each output
// row is owned by exactly one thread and the inner accumulation order is
// fixed).

namespace lab::kernels {

// C[m x n] = A[m x k] . B[k x n]; accumulates into C when acc is set.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);
void gemm_nn_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);

// C[m x n] = A[m x k] . B[n x k]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);
void gemm_nt_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);

// C[m x n] = A[k x m]^T . B[k x n]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);
void gemm_tn_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc = false);

// f64 variants (spectral paths).
void dgemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
void dgemm_nn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
void dgemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
void dgemm_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
void dgemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
void dgemm_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);

}  // namespace lab::kernels
