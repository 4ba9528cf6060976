#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace lab {

// Thrown when a computation degenerates numerically (fully masked softmax
// row, eigensolver non-convergence, ...). CLI maps it to exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Default-initializing allocator: fresh op outputs are written in full by
// every primitive, so the value-initialization pass of plain vector<float>
// would only burn memory bandwidth.
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAlloc<U>;
  };
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};
using FloatBuf = std::vector<float, DefaultInitAlloc<float>>;

struct TensorNode {
  int rows = 0, cols = 0;
  FloatBuf data;
  FloatBuf grad;  // sized lazily on first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

// Value-semantic handle to a node. All tensors are 2-D; scalars are 1x1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : n(std::move(node)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor uninitialized(int rows, int cols, bool requires_grad = false);
  static Tensor from(int rows, int cols, std::vector<float> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n); }
  int rows() const { return n->rows; }
  int cols() const { return n->cols; }
  long numel() const { return static_cast<long>(n->rows) * n->cols; }

  float* data() { return n->data.data(); }
  const float* data() const { return n->data.data(); }
  FloatBuf& values() { return n->data; }
  const FloatBuf& values() const { return n->data; }

  float& at(int i, int j) { return n->data[static_cast<size_t>(i) * n->cols + j]; }
  float at(int i, int j) const { return n->data[static_cast<size_t>(i) * n->cols + j]; }
  float item() const;

  bool requires_grad() const { return n->requires_grad; }
  const FloatBuf& grad() const;
  void zero_grad() {
    if (!n->grad.empty()) n->grad.assign(n->data.size(), 0.0f);
  }

  std::shared_ptr<TensorNode> n;
};

enum class Mask { none, causal };

// Records primitive operations in creation order (a valid topological order);
// backward replays the records in reverse. With grad disabled the tape records
// nothing and forward passes are safe to run from parallel workers.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k].[k,n]
  // [m,k].[k,n] + bias row broadcast; one output tensor for the whole affine.
  Tensor matmul_bias(const Tensor& a, const Tensor& b, const Tensor& bias);
  Tensor matmul_nt(const Tensor& a, const Tensor& b, float alpha = 1.0f);  // alpha*[m,k].[n,k]^T
  Tensor skew_half(const Tensor& a);  // (a - a^T)/2
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, float s);
  Tensor add_scalar(const Tensor& a, float c);
  Tensor transpose(const Tensor& a);
  Tensor softplus(const Tensor& a);
  Tensor elu(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor add_bias_row(const Tensor& a, const Tensor& bias);  // [m,n] + [1,n]
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
  Tensor embedding(const Tensor& table, const std::vector<int>& ids);
  Tensor softmax_rows(const Tensor& a, Mask mask);
  Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);
  Tensor slice_cols(const Tensor& a, int c0, int c1);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor sub_diag(const Tensor& s, const Tensor& d);  // s[n,n] - diag(d[n,1])
  // (p - p^T)/2 - diag(d): the fused skew-minus-damping interaction. Only the
  // skew half of p survives; the symmetric half is annihilated by the
  // construction (and receives no gradient).
  Tensor sd_interaction(const Tensor& p, const Tensor& d);
  Tensor sum(const Tensor& a);                        // -> [1,1]

  // Causal linear attention core for one head, O(N) running-state recurrence:
  //   out_i = (qphi_i^T sum_{j<=i} kphi_j v_j^T) / max(qphi_i^T sum_{j<=i} kphi_j, floor)
  Tensor linear_attention_head(const Tensor& qphi, const Tensor& kphi, const Tensor& v,
                               float denom_floor);

  void backward(const Tensor& loss);

  bool grad_enabled() const { return grad_enabled_; }
  size_t num_records() const { return records_.size(); }

 private:
  Tensor make(int rows, int cols, bool requires_grad);
  bool track(const Tensor& a) const { return grad_enabled_ && a.requires_grad(); }
  void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

  bool grad_enabled_ = true;
  std::vector<std::function<void()>> records_;
};

}  // namespace lab
