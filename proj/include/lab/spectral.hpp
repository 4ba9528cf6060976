#pragma once

#include <complex>
#include <vector>

#include "lab/tensor.hpp"

// All matrix analysis runs in 64-bit regardless of training precision; the
// pairing and eigenvalue tolerances promised here are unverifiable in f32.
namespace lab::spectral {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  static Mat identity(int n);
  static Mat from_f32(const float* p, int r, int c);
};

Mat transpose(const Mat& m);
Mat matmul(const Mat& a, const Mat& b);
Mat matmul_tn(const Mat& a, const Mat& b);  // a^T . b
double fro_norm(const Mat& m);
double max_abs(const Mat& m);
bool all_finite(const Mat& m);

// A = routing + filtering with routing skew-symmetric and filtering symmetric.
struct Decomposition {
  Mat routing;
  Mat filtering;
};
Decomposition decompose(const Mat& a);

// m = u . diag(sigma) . v^T, sigma descending, u/v column-orthonormal.
struct SvdResult {
  Mat u;
  std::vector<double> sigma;
  Mat v;
};
SvdResult svd(const Mat& m);

double effective_rank(const std::vector<double>& sigma);
double effective_rank(const Mat& m);
double rho(const Decomposition& d);

std::vector<std::complex<double>> eigenvalues(const Mat& m);
double max_real_eigenvalue(const Mat& m);

double spectral_norm(const Mat& m);  // sigma_max, exact via svd
// Power-iteration lower bound on sigma_max; used where the norm only scales a
// tolerance and a full svd would dominate the runtime.
double spectral_norm_estimate(const Mat& m, int iters = 100);

enum class ComponentKind { routing, filtering };

// Keep the top-k singular triplets. Routing targets are rounded down to the
// nearest even k (rotation planes come in pairs); the result is re-skewed or
// re-symmetrized to kill rounding drift.
Mat truncate_rank(const Mat& m, int k, ComponentKind kind);

struct WeightKernel {
  Mat m;  // d_head x d_head
  int layer = 0;
  int head = 0;
};
WeightKernel weight_kernel(const Mat& wq, const Mat& wk, int d_head, int layer = 0, int head = 0);

struct SpectralReport {
  std::vector<double> singular_values_r;
  std::vector<double> singular_values_f;
  double effrank_r = 0.0;
  double effrank_f = 0.0;
  double rho = 0.0;
  double max_re_lambda = 0.0;
};
SpectralReport analyze(const Mat& a);

}  // namespace lab::spectral
