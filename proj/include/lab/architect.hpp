#pragma once

#include <string>
#include <vector>

#include "lab/attention.hpp"

namespace lab::arch {

// A measured per-layer routing rank profile (weight-kernel effective ranks).
struct RankProfile {
  std::vector<double> ranks;
  int d_head_measured = 64;
};

enum class Policy { compressed, wide, deep, linear_boundary };
Policy policy_from_string(const std::string& s);
std::string to_string(Policy p);

struct LayerPrescription {
  int heads = 0;
  int d_head = 0;
  attn::Mechanism mechanism = attn::Mechanism::standard;
};

struct Prescription {
  std::vector<LayerPrescription> layers;
  int d_model = 768;
  long context = 1024;
  int baseline_heads = 12;
  int baseline_d_head = 64;
  int baseline_depth = 12;  // the measuring model's depth; savings are vs this
  long long attn_params = 0;
  long long baseline_attn_params = 0;
  double attn_param_savings_pct = 0.0;
  long long attn_flops_per_token = 0;
  long long baseline_attn_flops_per_token = 0;
  double attn_flops_savings_pct = 0.0;
  std::string flop_convention;
};

struct PrescribeOptions {
  int d_model = 768;
  int base_heads = 12;
  int base_d_head = 64;
  long context = 1024;
  int linear_boundary_k = 0;  // used by Policy::linear_boundary
};

// compressed: d_head = smallest power of two >= measured rank, clamped to
//             [8, 64], base head count.
// wide:       compressed schedule with head count raised in the plateau
//             (24 heads at d_head<=8, 16 heads at d_head=16).
// deep:       compressed schedule extended by one extra minimum layer in
//             front and two extra maximum layers on top.
// linear_boundary(K): uniform baseline with the first K layers flagged as
//             ELU+1 causal linear attention.
Prescription prescribe(const RankProfile& profile, Policy policy,
                       const PrescribeOptions& opts = {});

// Weights-only: the four projection matrices per layer, no biases.
long long count_attention_params(const std::vector<LayerPrescription>& layers, int d_model);

// Per token, per layer, at 2 ops per multiply-add:
//   projections 2*4*d_model*(heads*d_head)
//   softmax core 2*2*N*(heads*d_head)
//   linear core 2*2*(2*heads*d_head^2)   (state update + readout)
long long count_attention_flops(const std::vector<LayerPrescription>& layers, int d_model, long n);
extern const char* kFlopConvention;

double low_rank_fraction(const RankProfile& profile, double threshold = 5.0);

}  // namespace lab::arch
