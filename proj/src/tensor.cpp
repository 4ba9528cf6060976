#include "lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lab/kernels.hpp"

namespace lab {

namespace {

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

}  // namespace

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->data.assign(static_cast<size_t>(rows) * cols, 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::uninitialized(int rows, int cols, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->data.resize(static_cast<size_t>(rows) * cols);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(int rows, int cols, std::vector<float> values, bool requires_grad) {
  if (values.size() != static_cast<size_t>(rows) * cols) {
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->data.assign(values.begin(), values.end());
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor is " + shape_str(*this));
  return n->data[0];
}

const FloatBuf& Tensor::grad() const {
  if (n->grad.size() != n->data.size()) {
    throw std::runtime_error("grad: not populated; run backward first");
  }
  return n->grad;
}

Tensor Tape::make(int rows, int cols, bool requires_grad) {
  // Every primitive writes each output element; skip the zero pass.
  return Tensor::uninitialized(rows, cols, grad_enabled_ && requires_grad);
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make(m, n, a.requires_grad() || b.requires_grad());
  kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, on = out.n;
    record([an, bn, on, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();  // dA += dC . B^T
        kernels::gemm_nt(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();  // dB += A^T . dC
        kernels::gemm_tn(an->data.data(), on->grad.data(), bn->grad.data(), k, m, n, true);
      }
    });
  }
  return out;
}

Tensor Tape::matmul_bias(const Tensor& a, const Tensor& b, const Tensor& bias) {
  if (a.cols() != b.rows() || bias.rows() != 1 || bias.cols() != b.cols()) {
    throw std::invalid_argument("matmul_bias: shape mismatch " + shape_str(a) + ", " +
                                shape_str(b) + ", bias " + shape_str(bias));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out =
      make(m, n, a.requires_grad() || b.requires_grad() || bias.requires_grad());
  kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
  for (int i = 0; i < m; ++i) {
    float* row = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) row[j] += bias.data()[j];
  }
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, cn = bias.n, on = out.n;
    record([an, bn, cn, on, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        kernels::gemm_nt(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        kernels::gemm_tn(an->data.data(), on->grad.data(), bn->grad.data(), k, m, n, true);
      }
      if (cn->requires_grad) {
        cn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const float* row = on->grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) cn->grad[j] += row[j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b, float alpha) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = make(m, n, a.requires_grad() || b.requires_grad());
  kernels::gemm_nt(a.data(), b.data(), out.data(), m, k, n);
  if (alpha != 1.0f) {
    float* p = out.data();
    for (long i = 0; i < static_cast<long>(m) * n; ++i) p[i] *= alpha;
  }
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, on = out.n;
    record([an, bn, on, m, k, n, alpha] {
      const float* g = on->grad.data();
      std::vector<float> scaled;
      if (alpha != 1.0f) {
        scaled.assign(g, g + static_cast<long>(m) * n);
        for (auto& x : scaled) x *= alpha;
        g = scaled.data();
      }
      if (an->requires_grad) {
        an->ensure_grad();  // dA += alpha * dC . B
        kernels::gemm_nn(g, bn->data.data(), an->grad.data(), m, n, k, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();  // dB += alpha * dC^T . A
        kernels::gemm_tn(g, an->data.data(), bn->grad.data(), n, m, k, true);
      }
    });
  }
  return out;
}

Tensor Tape::skew_half(const Tensor& a) {
  if (a.rows() != a.cols()) {
    throw std::invalid_argument("skew_half: matrix must be square, got " + shape_str(a));
  }
  const int n = a.rows();
  Tensor out = make(n, n, a.requires_grad());
  for (int i = 0; i < n; ++i) {
    out.at(i, i) = 0.0f;
    for (int j = i + 1; j < n; ++j) {
      const float v = 0.5f * (a.at(i, j) - a.at(j, i));
      out.at(i, j) = v;
      out.at(j, i) = -v;
    }
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          an->grad[static_cast<size_t>(i) * n + j] +=
              0.5f * (on->grad[static_cast<size_t>(i) * n + j] -
                      on->grad[static_cast<size_t>(j) * n + i]);
        }
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, on = out.n;
    record([an, bn, on, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, on = out.n;
    record([an, bn, on, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto an = a.n, bn = b.n, on = out.n;
    record([an, bn, on, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, float s) {
  Tensor out = make(a.rows(), a.cols(), a.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n, s] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

Tensor Tape::add_scalar(const Tensor& a, float c) {
  Tensor out = make(a.rows(), a.cols(), a.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  const int m = a.rows(), c = a.cols();
  Tensor out = make(c, m, a.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, m, c] {
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          an->grad[static_cast<size_t>(i) * c + j] += on->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor Tape::softplus(const Tensor& a) {
  Tensor out = make(a.rows(), a.cols(), a.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) {
    const float x = a.data()[i];
    out.data()[i] = x > 30.0f ? x : std::log1p(std::exp(x));
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) {
        const float x = an->data[i];
        const float sig = 1.0f / (1.0f + std::exp(-x));
        an->grad[i] += on->grad[i] * sig;
      }
    });
  }
  return out;
}

Tensor Tape::elu(const Tensor& a) {
  Tensor out = make(a.rows(), a.cols(), a.requires_grad());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) {
    const float x = a.data()[i];
    out.data()[i] = x > 0.0f ? x : std::expm1(x);
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) {
        const float x = an->data[i];
        an->grad[i] += on->grad[i] * (x > 0.0f ? 1.0f : std::exp(x));
      }
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& a) {
  Tensor out = make(a.rows(), a.cols(), a.requires_grad());
  const long n = a.numel();
  constexpr float inv_sqrt2 = 0.7071067811865476f;
  constexpr float inv_sqrt_2pi = 0.3989422804014327f;
  // The derivative cdf + x*pdf is stashed at forward time; erf/exp are the
  // hot-path cost here, not memory.
  auto deriv = out.requires_grad() ? std::make_shared<std::vector<float>>(n) : nullptr;
  const float* src = a.data();
  float* dst = out.data();
  if (deriv) {
    float* dd = deriv->data();
#pragma omp simd
    for (long i = 0; i < n; ++i) {
      const float x = src[i];
      const float cdf = 0.5f * (1.0f + erff(x * inv_sqrt2));
      dst[i] = x * cdf;
      dd[i] = cdf + x * inv_sqrt_2pi * expf(-0.5f * x * x);
    }
  } else {
#pragma omp simd
    for (long i = 0; i < n; ++i) {
      const float x = src[i];
      dst[i] = 0.5f * x * (1.0f + erff(x * inv_sqrt2));
    }
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, deriv, n] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * (*deriv)[i];
    });
  }
  return out;
}

Tensor Tape::add_bias_row(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw std::invalid_argument("add_bias_row: shape mismatch " + shape_str(a) + " vs " +
                                shape_str(bias));
  }
  const int m = a.rows(), c = a.cols();
  Tensor out = make(m, c, a.requires_grad() || bias.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) + bias.data()[j];
  if (out.requires_grad()) {
    auto an = a.n, bn = bias.n, on = out.n;
    record([an, bn, on, m, c] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (long i = 0; i < static_cast<long>(m) * c; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) bn->grad[j] += on->grad[static_cast<size_t>(i) * c + j];
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps) {
  if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 || bias.cols() != a.cols()) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(a.cols()));
  }
  const int m = a.rows(), c = a.cols();
  Tensor out =
      make(m, c, a.requires_grad() || gain.requires_grad() || bias.requires_grad());
  // xhat and 1/s are needed by backward; keep them in the closure.
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(m) * c);
  auto inv_s = std::make_shared<std::vector<float>>(m);
  for (int i = 0; i < m; ++i) {
    const float* row = a.data() + static_cast<size_t>(i) * c;
    float mean = 0.0f;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<float>(c);
    float var = 0.0f;
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<float>(c);
    const float is = 1.0f / std::sqrt(var + eps);
    (*inv_s)[i] = is;
    for (int j = 0; j < c; ++j) {
      const float xh = (row[j] - mean) * is;
      (*xhat)[static_cast<size_t>(i) * c + j] = xh;
      out.at(i, j) = xh * gain.data()[j] + bias.data()[j];
    }
  }
  if (out.requires_grad()) {
    auto an = a.n, gn = gain.n, bn = bias.n, on = out.n;
    record([an, gn, bn, on, xhat, inv_s, m, c] {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (an->requires_grad) an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const float* dy = on->grad.data() + static_cast<size_t>(i) * c;
        const float* xh = xhat->data() + static_cast<size_t>(i) * c;
        if (gn->requires_grad || bn->requires_grad) {
          for (int j = 0; j < c; ++j) {
            if (gn->requires_grad) gn->grad[j] += dy[j] * xh[j];
            if (bn->requires_grad) bn->grad[j] += dy[j];
          }
        }
        if (an->requires_grad) {
          float sum_h = 0.0f, sum_hx = 0.0f;
          for (int j = 0; j < c; ++j) {
            const float h = dy[j] * gn->data[j];
            sum_h += h;
            sum_hx += h * xh[j];
          }
          const float inv_c = 1.0f / static_cast<float>(c);
          for (int j = 0; j < c; ++j) {
            const float h = dy[j] * gn->data[j];
            an->grad[static_cast<size_t>(i) * c + j] +=
                (*inv_s)[i] * (h - sum_h * inv_c - xh[j] * sum_hx * inv_c);
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::embedding(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::invalid_argument("embedding: token " + std::to_string(id) +
                                  " out of range (vocab " + std::to_string(v) + ")");
    }
  }
  const int m = static_cast<int>(ids.size());
  Tensor out = make(m, d, table.requires_grad());
  for (int i = 0; i < m; ++i) {
    const float* src = table.data() + static_cast<size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + static_cast<size_t>(i) * d);
  }
  if (out.requires_grad()) {
    auto tn = table.n, on = out.n;
    auto idx = std::make_shared<std::vector<int>>(ids);
    record([tn, on, idx, d] {
      tn->ensure_grad();
      for (size_t i = 0; i < idx->size(); ++i) {
        float* dst = tn->grad.data() + static_cast<size_t>((*idx)[i]) * d;
        const float* src = on->grad.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& a, Mask mask) {
  if (a.rows() != a.cols()) {
    throw std::invalid_argument("softmax_rows: matrix must be square, got " + shape_str(a));
  }
  const int n = a.rows();
  Tensor out = make(n, n, a.requires_grad());
  for (int i = 0; i < n; ++i) {
    const int lim = mask == Mask::causal ? i + 1 : n;
    const float* row = a.data() + static_cast<size_t>(i) * n;
    float mx = kNegInf;
    for (int j = 0; j < lim; ++j) mx = std::max(mx, row[j]);
    if (!(mx > kNegInf)) {
      throw NumericalError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    float* orow = out.data() + static_cast<size_t>(i) * n;
#pragma omp simd
    for (int j = 0; j < lim; ++j) orow[j] = expf(row[j] - mx);
    float denom = 0.0f;
    for (int j = 0; j < lim; ++j) denom += orow[j];
    const float inv = 1.0f / denom;
    for (int j = 0; j < lim; ++j) orow[j] *= inv;
    for (int j = lim; j < n; ++j) orow[j] = 0.0f;
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const float* y = on->data.data() + static_cast<size_t>(i) * n;
        const float* dy = on->grad.data() + static_cast<size_t>(i) * n;
        float dot = 0.0f;
        for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
        float* dx = an->grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  const int m = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != m) {
    throw std::invalid_argument("cross_entropy_mean: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= v) {
      throw std::invalid_argument("cross_entropy_mean: target " + std::to_string(t) +
                                  " out of range (vocab " + std::to_string(v) + ")");
    }
  }
  Tensor out = make(1, 1, logits.requires_grad());
  // Softmax probabilities are reused by backward.
  auto probs = out.requires_grad()
                   ? std::make_shared<std::vector<float>>(static_cast<size_t>(m) * v)
                   : nullptr;
  std::vector<float> prow_local(v);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const float* row = logits.data() + static_cast<size_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    float* prow = probs ? probs->data() + static_cast<size_t>(i) * v : prow_local.data();
#pragma omp simd
    for (int j = 0; j < v; ++j) prow[j] = expf(row[j] - mx);
    double lse = 0.0;
    for (int j = 0; j < v; ++j) lse += prow[j];
    const float inv = static_cast<float>(1.0 / lse);
    for (int j = 0; j < v; ++j) prow[j] *= inv;
    total += std::log(lse) + mx - row[targets[i]];
  }
  out.data()[0] = static_cast<float>(total / m);
  if (out.requires_grad()) {
    auto ln = logits.n, on = out.n;
    auto tgt = std::make_shared<std::vector<int>>(targets);
    record([ln, on, tgt, probs, m, v] {
      ln->ensure_grad();
      const float g = on->grad[0] / static_cast<float>(m);
      for (int i = 0; i < m; ++i) {
        const float* prow = probs->data() + static_cast<size_t>(i) * v;
        float* dst = ln->grad.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) dst[j] += g * prow[j];
        dst[(*tgt)[i]] -= g;
      }
    });
  }
  return out;
}

Tensor Tape::slice_cols(const Tensor& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") invalid for " + shape_str(a));
  }
  const int m = a.rows(), w = c1 - c0, c = a.cols();
  Tensor out = make(m, w, a.requires_grad());
  for (int i = 0; i < m; ++i) {
    const float* src = a.data() + static_cast<size_t>(i) * c + c0;
    std::copy(src, src + w, out.data() + static_cast<size_t>(i) * w);
  }
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, m, w, c, c0] {
      an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        float* dst = an->grad.data() + static_cast<size_t>(i) * c + c0;
        const float* src = on->grad.data() + static_cast<size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int m = parts[0].rows();
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0]) + " vs " +
                                  shape_str(p));
    }
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor out = make(m, total, rg);
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i) {
      std::copy(p.data() + static_cast<size_t>(i) * w, p.data() + static_cast<size_t>(i) * w + w,
                out.data() + static_cast<size_t>(i) * total + off);
    }
    off += w;
  }
  if (out.requires_grad()) {
    auto nodes = std::make_shared<std::vector<std::shared_ptr<TensorNode>>>();
    for (const Tensor& p : parts) nodes->push_back(p.n);
    auto on = out.n;
    record([nodes, on, m, total] {
      int off2 = 0;
      for (auto& pn : *nodes) {
        const int w = pn->cols;
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int i = 0; i < m; ++i) {
            const float* src = on->grad.data() + static_cast<size_t>(i) * total + off2;
            float* dst = pn->grad.data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

Tensor Tape::sub_diag(const Tensor& s, const Tensor& d) {
  if (s.rows() != s.cols() || d.cols() != 1 || d.rows() != s.rows()) {
    throw std::invalid_argument("sub_diag: need [n,n] and [n,1], got " + shape_str(s) + " and " +
                                shape_str(d));
  }
  const int n = s.rows();
  Tensor out = make(n, n, s.requires_grad() || d.requires_grad());
  std::copy(s.data(), s.data() + static_cast<size_t>(n) * n, out.data());
  for (int i = 0; i < n; ++i) out.at(i, i) -= d.data()[i];
  if (out.requires_grad()) {
    auto sn = s.n, dn = d.n, on = out.n;
    record([sn, dn, on, n] {
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (long i = 0; i < static_cast<long>(n) * n; ++i) sn->grad[i] += on->grad[i];
      }
      if (dn->requires_grad) {
        dn->ensure_grad();
        for (int i = 0; i < n; ++i) dn->grad[i] -= on->grad[static_cast<size_t>(i) * n + i];
      }
    });
  }
  return out;
}

Tensor Tape::sd_interaction(const Tensor& p, const Tensor& d) {
  if (p.rows() != p.cols() || d.cols() != 1 || d.rows() != p.rows()) {
    throw std::invalid_argument("sd_interaction: need [n,n] and [n,1], got " + shape_str(p) +
                                " and " + shape_str(d));
  }
  const int n = p.rows();
  Tensor out = make(n, n, p.requires_grad() || d.requires_grad());
  for (int i = 0; i < n; ++i) {
    out.at(i, i) = -d.data()[i];
    for (int j = i + 1; j < n; ++j) {
      const float v = 0.5f * (p.at(i, j) - p.at(j, i));
      out.at(i, j) = v;
      out.at(j, i) = -v;
    }
  }
  if (out.requires_grad()) {
    auto pn = p.n, dn = d.n, on = out.n;
    record([pn, dn, on, n] {
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            pn->grad[static_cast<size_t>(i) * n + j] +=
                0.5f * (on->grad[static_cast<size_t>(i) * n + j] -
                        on->grad[static_cast<size_t>(j) * n + i]);
          }
        }
      }
      if (dn->requires_grad) {
        dn->ensure_grad();
        for (int i = 0; i < n; ++i) dn->grad[i] -= on->grad[static_cast<size_t>(i) * n + i];
      }
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  Tensor out = make(1, 1, a.requires_grad());
  double s = 0.0;
  const long n = a.numel();
  for (long i = 0; i < n; ++i) s += a.data()[i];
  out.data()[0] = static_cast<float>(s);
  if (out.requires_grad()) {
    auto an = a.n, on = out.n;
    record([an, on, n] {
      an->ensure_grad();
      for (long i = 0; i < n; ++i) an->grad[i] += on->grad[0];
    });
  }
  return out;
}

Tensor Tape::linear_attention_head(const Tensor& qphi, const Tensor& kphi, const Tensor& v,
                                   float denom_floor) {
  check_same_shape("linear_attention_head(q,k)", qphi, kphi);
  check_same_shape("linear_attention_head(k,v)", kphi, v);
  const int n = qphi.rows(), d = qphi.cols();
  Tensor out = make(n, d, qphi.requires_grad() || kphi.requires_grad() || v.requires_grad());
  auto den = std::make_shared<std::vector<float>>(n);
  auto floored = std::make_shared<std::vector<char>>(n);
  {
    std::vector<float> state(static_cast<size_t>(d) * d, 0.0f);  // sum kphi_j v_j^T
    std::vector<float> zsum(d, 0.0f);                            // sum kphi_j
    for (int i = 0; i < n; ++i) {
      const float* kr = kphi.data() + static_cast<size_t>(i) * d;
      const float* vr = v.data() + static_cast<size_t>(i) * d;
      for (int a2 = 0; a2 < d; ++a2) {
        float* srow = state.data() + static_cast<size_t>(a2) * d;
        const float ka = kr[a2];
        for (int b = 0; b < d; ++b) srow[b] += ka * vr[b];
        zsum[a2] += ka;
      }
      const float* qr = qphi.data() + static_cast<size_t>(i) * d;
      float dd = 0.0f;
      for (int a2 = 0; a2 < d; ++a2) dd += qr[a2] * zsum[a2];
      (*floored)[i] = dd < denom_floor ? 1 : 0;
      dd = std::max(dd, denom_floor);
      (*den)[i] = dd;
      float* orow = out.data() + static_cast<size_t>(i) * d;
      for (int b = 0; b < d; ++b) {
        float num = 0.0f;
        for (int a2 = 0; a2 < d; ++a2) num += qr[a2] * state[static_cast<size_t>(a2) * d + b];
        orow[b] = num / dd;
      }
    }
  }
  if (out.requires_grad()) {
    auto qn = qphi.n, kn = kphi.n, vn = v.n, on = out.n;
    record([qn, kn, vn, on, den, floored, n, d] {
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      // dnum_i = dout_i/den_i; dden_i = -(out_i . dout_i)/den_i (0 when floored).
      std::vector<float> dnum(static_cast<size_t>(n) * d);
      std::vector<float> dden(n);
      for (int i = 0; i < n; ++i) {
        const float* do_ = on->grad.data() + static_cast<size_t>(i) * d;
        const float* o = on->data.data() + static_cast<size_t>(i) * d;
        float dot = 0.0f;
        for (int b = 0; b < d; ++b) {
          dnum[static_cast<size_t>(i) * d + b] = do_[b] / (*den)[i];
          dot += o[b] * do_[b];
        }
        dden[i] = (*floored)[i] ? 0.0f : -dot / (*den)[i];
      }
      // Ascending pass rebuilds the running state for dqphi.
      if (qn->requires_grad) {
        std::vector<float> state(static_cast<size_t>(d) * d, 0.0f);
        std::vector<float> zsum(d, 0.0f);
        for (int i = 0; i < n; ++i) {
          const float* kr = kn->data.data() + static_cast<size_t>(i) * d;
          const float* vr = vn->data.data() + static_cast<size_t>(i) * d;
          for (int a2 = 0; a2 < d; ++a2) {
            float* srow = state.data() + static_cast<size_t>(a2) * d;
            const float ka = kr[a2];
            for (int b = 0; b < d; ++b) srow[b] += ka * vr[b];
            zsum[a2] += ka;
          }
          float* dq = qn->grad.data() + static_cast<size_t>(i) * d;
          const float* dn_ = dnum.data() + static_cast<size_t>(i) * d;
          for (int a2 = 0; a2 < d; ++a2) {
            float acc = 0.0f;
            const float* srow = state.data() + static_cast<size_t>(a2) * d;
            for (int b = 0; b < d; ++b) acc += srow[b] * dn_[b];
            dq[a2] += acc + zsum[a2] * dden[i];
          }
        }
      }
      // Descending pass accumulates suffix sums for dkphi / dv.
      if (kn->requires_grad || vn->requires_grad) {
        std::vector<float> sz(static_cast<size_t>(d) * d, 0.0f);  // sum_{i>=j} q_i dnum_i^T
        std::vector<float> szv(d, 0.0f);                          // sum_{i>=j} q_i dden_i
        for (int i = n - 1; i >= 0; --i) {
          const float* qr = qn->data.data() + static_cast<size_t>(i) * d;
          const float* dn_ = dnum.data() + static_cast<size_t>(i) * d;
          for (int a2 = 0; a2 < d; ++a2) {
            float* srow = sz.data() + static_cast<size_t>(a2) * d;
            const float qa = qr[a2];
            for (int b = 0; b < d; ++b) srow[b] += qa * dn_[b];
            szv[a2] += qa * dden[i];
          }
          const float* kr = kn->data.data() + static_cast<size_t>(i) * d;
          const float* vr = vn->data.data() + static_cast<size_t>(i) * d;
          if (kn->requires_grad) {
            float* dk = kn->grad.data() + static_cast<size_t>(i) * d;
            for (int a2 = 0; a2 < d; ++a2) {
              float acc = 0.0f;
              const float* srow = sz.data() + static_cast<size_t>(a2) * d;
              for (int b = 0; b < d; ++b) acc += srow[b] * vr[b];
              dk[a2] += acc + szv[a2];
            }
          }
          if (vn->requires_grad) {
            float* dv = vn->grad.data() + static_cast<size_t>(i) * d;
            for (int b = 0; b < d; ++b) {
              float acc = 0.0f;
              for (int a2 = 0; a2 < d; ++a2) acc += sz[static_cast<size_t>(a2) * d + b] * kr[a2];
              dv[b] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss));
  }
  if (!grad_enabled_) throw std::runtime_error("backward: tape has gradients disabled");
  loss.n->ensure_grad();
  loss.n->grad[0] = 1.0f;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

}  // namespace lab
