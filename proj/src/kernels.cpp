#include "lab/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <type_traits>
#include <vector>

namespace lab::kernels {

namespace {

// Work below this many multiply-adds is not worth a parallel region. The
// default keeps training-sized gemms serial (eval parallelizes across whole
// windows instead); LAB_GEMM_PARALLEL_MIN_WORK overrides it.
long parallel_min_work() {
  static const long v = [] {
    if (const char* e = std::getenv("LAB_GEMM_PARALLEL_MIN_WORK")) {
      return std::atol(e);
    }
    return 1L << 30;
  }();
  return v;
}

typedef float vf8 __attribute__((vector_size(32)));
typedef double vd4 __attribute__((vector_size(32)));

inline vf8 load8(const float* p) {
  vf8 v;
  std::memcpy(&v, p, 32);
  return v;
}
inline void store8(float* p, vf8 v) { std::memcpy(p, &v, 32); }
inline vf8 broadcast8(float x) { return vf8{x, x, x, x, x, x, x, x}; }

// f32 NN micro-kernel: a band of up to 4 output rows, register-blocked in
// 16-column tiles with the k loop fully accumulated in registers. The serial
// and parallel drivers call the same band worker, so results are
// bit-identical across drivers and thread counts.
[[gnu::noinline]] void band_nn_f32(const float* a, const float* b, float* c, int i0, int rows,
                                   int k, int n, bool acc) {
  const float* a0 = a + static_cast<long>(i0) * k;
  float* c0 = c + static_cast<long>(i0) * n;
  if (rows == 4) {
    const float* a1 = a0 + k;
    const float* a2 = a0 + 2 * k;
    const float* a3 = a0 + 3 * k;
    float* c1 = c0 + n;
    float* c2 = c0 + 2 * n;
    float* c3 = c0 + 3 * n;
    int j = 0;
    for (; j + 16 <= n; j += 16) {
      vf8 r0a, r0b, r1a, r1b, r2a, r2b, r3a, r3b;
      if (acc) {
        r0a = load8(c0 + j); r0b = load8(c0 + j + 8);
        r1a = load8(c1 + j); r1b = load8(c1 + j + 8);
        r2a = load8(c2 + j); r2b = load8(c2 + j + 8);
        r3a = load8(c3 + j); r3b = load8(c3 + j + 8);
      } else {
        r0a = r0b = r1a = r1b = r2a = r2b = r3a = r3b = vf8{};
      }
      const float* bp = b + j;
      for (int kk = 0; kk < k; ++kk, bp += n) {
        const vf8 b0 = load8(bp);
        const vf8 b1 = load8(bp + 8);
        vf8 av;
        av = broadcast8(a0[kk]); r0a += av * b0; r0b += av * b1;
        av = broadcast8(a1[kk]); r1a += av * b0; r1b += av * b1;
        av = broadcast8(a2[kk]); r2a += av * b0; r2b += av * b1;
        av = broadcast8(a3[kk]); r3a += av * b0; r3b += av * b1;
      }
      store8(c0 + j, r0a); store8(c0 + j + 8, r0b);
      store8(c1 + j, r1a); store8(c1 + j + 8, r1b);
      store8(c2 + j, r2a); store8(c2 + j + 8, r2b);
      store8(c3 + j, r3a); store8(c3 + j + 8, r3b);
    }
    for (; j < n; ++j) {
      float s0 = acc ? c0[j] : 0.0f;
      float s1 = acc ? c1[j] : 0.0f;
      float s2 = acc ? c2[j] : 0.0f;
      float s3 = acc ? c3[j] : 0.0f;
      for (int kk = 0; kk < k; ++kk) {
        const float bv = b[static_cast<long>(kk) * n + j];
        s0 += a0[kk] * bv;
        s1 += a1[kk] * bv;
        s2 += a2[kk] * bv;
        s3 += a3[kk] * bv;
      }
      c0[j] = s0; c1[j] = s1; c2[j] = s2; c3[j] = s3;
    }
    return;
  }
  // Remainder rows (m % 4): plain rows, fixed accumulation order.
  for (int r = 0; r < rows; ++r) {
    float* crow = c0 + static_cast<long>(r) * n;
    const float* arow = a0 + static_cast<long>(r) * k;
    if (!acc) {
      for (int j = 0; j < n; ++j) crow[j] = 0.0f;
    }
    for (int kk = 0; kk < k; ++kk) {
      const float aik = arow[kk];
      const float* brow = b + static_cast<long>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void drive_nn_f32(const float* a, const float* b, float* c, int m, int k, int n, bool acc,
                  bool parallel) {
  const int bands = (m + 3) / 4;
  if (parallel && static_cast<long>(m) * k * n >= parallel_min_work()) {
#pragma omp parallel for schedule(static)
    for (int bi = 0; bi < bands; ++bi) {
      const int i0 = bi * 4;
      band_nn_f32(a, b, c, i0, std::min(4, m - i0), k, n, acc);
    }
  } else {
    for (int bi = 0; bi < bands; ++bi) {
      const int i0 = bi * 4;
      band_nn_f32(a, b, c, i0, std::min(4, m - i0), k, n, acc);
    }
  }
}

// Scratch for the transposed operand of the nt/tn forms; one cheap pass that
// routes everything through the blocked NN kernel.
thread_local std::vector<float> tl_scratch_f32;

const float* transpose_into_scratch(const float* src, int rows, int cols) {
  tl_scratch_f32.resize(static_cast<size_t>(rows) * cols);
  float* dst = tl_scratch_f32.data();
  constexpr int kBlock = 32;
  for (int i0 = 0; i0 < rows; i0 += kBlock) {
    const int imax = std::min(rows, i0 + kBlock);
    for (int j0 = 0; j0 < cols; j0 += kBlock) {
      const int jmax = std::min(cols, j0 + kBlock);
      for (int i = i0; i < imax; ++i) {
        for (int j = j0; j < jmax; ++j) {
          dst[static_cast<long>(j) * rows + i] = src[static_cast<long>(i) * cols + j];
        }
      }
    }
  }
  return dst;
}

// f64 paths (spectral analysis): simple per-row workers, shared by both
// drivers for the same bit-identity guarantee.
[[gnu::noinline]] void row_nn_f64(const double* a, const double* b, double* c, int i, int k,
                                  int n, bool acc) {
  double* crow = c + static_cast<long>(i) * n;
  if (!acc) {
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
  }
  const double* arow = a + static_cast<long>(i) * k;
  for (int kk = 0; kk < k; ++kk) {
    const double aik = arow[kk];
    const double* brow = b + static_cast<long>(kk) * n;
    for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
  }
}

[[gnu::noinline]] void row_nt_f64(const double* a, const double* b, double* c, int i, int k,
                                  int n, bool acc) {
  const double* arow = a + static_cast<long>(i) * k;
  double* crow = c + static_cast<long>(i) * n;
  for (int j = 0; j < n; ++j) {
    const double* brow = b + static_cast<long>(j) * k;
    vd4 lanes = {0, 0, 0, 0};
    int kk = 0;
    for (; kk + 4 <= k; kk += 4) {
      vd4 x, y;
      std::memcpy(&x, arow + kk, 32);
      std::memcpy(&y, brow + kk, 32);
      lanes += x * y;
    }
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; kk < k; ++kk) s += arow[kk] * brow[kk];
    crow[j] = acc ? crow[j] + s : s;
  }
}

[[gnu::noinline]] void row_tn_f64(const double* a, const double* b, double* c, int i, int k,
                                  int m, int n, bool acc) {
  double* crow = c + static_cast<long>(i) * n;
  if (!acc) {
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
  }
  for (int kk = 0; kk < k; ++kk) {
    const double aki = a[static_cast<long>(kk) * m + i];
    const double* brow = b + static_cast<long>(kk) * n;
    for (int j = 0; j < n; ++j) crow[j] += aki * brow[j];
  }
}

template <typename Row>
void drive_rows(int m, long work, bool parallel, Row&& row) {
  if (parallel && work >= parallel_min_work()) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) row(i);
  } else {
    for (int i = 0; i < m; ++i) row(i);
  }
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(a, b, c, m, k, n, acc, true);
}
void gemm_nn_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(a, b, c, m, k, n, acc, false);
}
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(a, transpose_into_scratch(b, n, k), c, m, k, n, acc, true);
}
void gemm_nt_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(a, transpose_into_scratch(b, n, k), c, m, k, n, acc, false);
}
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(transpose_into_scratch(a, k, m), b, c, m, k, n, acc, true);
}
void gemm_tn_serial(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  drive_nn_f32(transpose_into_scratch(a, k, m), b, c, m, k, n, acc, false);
}

void dgemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, static_cast<long>(m) * k * n, true, [=](int i) { row_nn_f64(a, b, c, i, k, n, acc); });
}
void dgemm_nn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, 0, false, [=](int i) { row_nn_f64(a, b, c, i, k, n, acc); });
}
void dgemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, static_cast<long>(m) * k * n, true, [=](int i) { row_tn_f64(a, b, c, i, k, m, n, acc); });
}
void dgemm_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, 0, false, [=](int i) { row_tn_f64(a, b, c, i, k, m, n, acc); });
}
void dgemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, static_cast<long>(m) * k * n, true, [=](int i) { row_nt_f64(a, b, c, i, k, n, acc); });
}
void dgemm_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  drive_rows(m, 0, false, [=](int i) { row_nt_f64(a, b, c, i, k, n, acc); });
}

}  // namespace lab::kernels
