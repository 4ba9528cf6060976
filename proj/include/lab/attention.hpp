#pragma once

#include <functional>
#include <string>

#include "lab/tensor.hpp"

namespace lab::attn {

enum class Mechanism { standard, sd, linear };

Mechanism mechanism_from_string(const std::string& s);
std::string to_string(Mechanism m);

// Per-layer attention parameters; tensors are owned by the model and shared
// into forward passes. wd/bd are populated for the sd mechanism only.
struct LayerParams {
  Mechanism mech = Mechanism::standard;
  int heads = 1;
  int d_head = 1;
  float epsilon = 0.05f;
  Tensor wq, wk, wv;  // d_model x (heads*d_head)
  Tensor wo;          // (heads*d_head) x d_model
  Tensor wd;          // d_model x heads
  Tensor bd;          // 1 x heads
};

// Eval-time intercept points. on_sd_components receives the raw pre-skew
// interaction p = QK^T/sqrt(d) and the damping vector before L is assembled;
// only the skew half of p enters L, so writing a replacement into p replaces
// S. on_scores sees (and may rewrite) the assembled unmasked per-head score
// matrix. Training passes run with hooks == nullptr. Hook implementations
// must be thread-safe: eval windows run from parallel workers.
struct AttnIntercept {
  std::function<void(int layer, int head, int n, float* p, float* d)> on_sd_components;
  std::function<void(int layer, int head, Mechanism mech, int n, float* scores)> on_scores;
};

// Unmasked single-head scores Q K^T / sqrt(d_head); the causal mask is applied
// downstream, never before decomposition-style consumers see the matrix.
Tensor standard_scores(Tape& tape, const Tensor& x, const Tensor& wq_head, const Tensor& wk_head,
                       int d_head);

// One head of the skew-minus-diagonal interaction. S and the damping vector
// are retained for inspection; L = S - diag(d) is what the caller masks and
// softmaxes.
struct SdScores {
  Tensor l;
  Tensor s;
  Tensor d;  // n x 1, every entry >= epsilon
};
SdScores sd_scores(Tape& tape, const Tensor& x, const Tensor& wq_head, const Tensor& wk_head,
                   const Tensor& wd_col, const Tensor& bd_scalar, float epsilon, int d_head);

// Full multi-head ELU+1 causal linear attention (projections + O(N) core +
// output projection).
Tensor linear_attention(Tape& tape, const Tensor& x, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv, const Tensor& wo, int heads, int d_head);

constexpr float kLinearDenomFloor = 1e-6f;

Tensor attention_layer_forward(Tape& tape, const Tensor& x, const LayerParams& p,
                               int layer_index = 0, const AttnIntercept* hooks = nullptr);

}  // namespace lab::attn
