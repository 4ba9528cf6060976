#include "lab/architect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lab::arch {

Policy policy_from_string(const std::string& s) {
  if (s == "compressed") return Policy::compressed;
  if (s == "wide") return Policy::wide;
  if (s == "deep") return Policy::deep;
  if (s == "linear-boundary") return Policy::linear_boundary;
  throw std::invalid_argument("unknown policy '" + s +
                              "' (expected compressed|wide|deep|linear-boundary)");
}

std::string to_string(Policy p) {
  switch (p) {
    case Policy::compressed: return "compressed";
    case Policy::wide: return "wide";
    case Policy::deep: return "deep";
    case Policy::linear_boundary: return "linear-boundary";
  }
  return "?";
}

const char* kFlopConvention =
    "per token per layer, 2 ops per multiply-add: projections 2*4*d_model*(heads*d_head); "
    "softmax core 2*2*N*(heads*d_head); linear core 2*2*(2*heads*d_head^2)";

namespace {

int pow2_ceil_clamped(double rank) {
  int d = 8;
  while (d < 64 && static_cast<double>(d) < rank) d *= 2;
  return std::min(d, 64);
}

}  // namespace

long long count_attention_params(const std::vector<LayerPrescription>& layers, int d_model) {
  long long total = 0;
  for (const auto& l : layers) {
    total += 4LL * d_model * (static_cast<long long>(l.heads) * l.d_head);
  }
  return total;
}

long long count_attention_flops(const std::vector<LayerPrescription>& layers, int d_model,
                                long n) {
  if (n <= 0) throw std::invalid_argument("count_attention_flops: N must be > 0");
  long long total = 0;
  for (const auto& l : layers) {
    const long long width = static_cast<long long>(l.heads) * l.d_head;
    total += 2LL * 4 * d_model * width;  // projections
    if (l.mechanism == attn::Mechanism::linear) {
      total += 2LL * 2 * (2LL * l.heads * l.d_head * l.d_head);
    } else {
      total += 2LL * 2 * n * width;
    }
  }
  return total;
}

Prescription prescribe(const RankProfile& profile, Policy policy, const PrescribeOptions& opts) {
  if (profile.ranks.empty()) {
    throw std::invalid_argument("prescribe: empty rank profile");
  }
  for (double r : profile.ranks) {
    if (!(r >= 0.0)) throw std::invalid_argument("prescribe: ranks must be >= 0");
  }
  Prescription p;
  p.d_model = opts.d_model;
  p.context = opts.context;
  p.baseline_heads = opts.base_heads;
  p.baseline_d_head = opts.base_d_head;
  p.baseline_depth = static_cast<int>(profile.ranks.size());
  p.flop_convention = kFlopConvention;

  std::vector<LayerPrescription> compressed;
  for (double r : profile.ranks) {
    compressed.push_back({opts.base_heads, pow2_ceil_clamped(r), attn::Mechanism::standard});
  }

  switch (policy) {
    case Policy::compressed:
      p.layers = compressed;
      break;
    case Policy::wide:
      // Reinvest saved width as heads in the low-rank plateau: double the
      // head count where d_head collapsed to the floor, 4/3 of it in the
      // next tier.
      p.layers = compressed;
      for (auto& l : p.layers) {
        if (l.d_head <= 8) l.heads = 2 * opts.base_heads;
        else if (l.d_head == 16) l.heads = (4 * opts.base_heads + 2) / 3;
      }
      break;
    case Policy::deep: {
      int min_d = compressed.front().d_head, max_d = compressed.front().d_head;
      for (const auto& l : compressed) {
        min_d = std::min(min_d, l.d_head);
        max_d = std::max(max_d, l.d_head);
      }
      p.layers.push_back({opts.base_heads, min_d, attn::Mechanism::standard});
      for (const auto& l : compressed) p.layers.push_back(l);
      p.layers.push_back({opts.base_heads, max_d, attn::Mechanism::standard});
      p.layers.push_back({opts.base_heads, max_d, attn::Mechanism::standard});
      break;
    }
    case Policy::linear_boundary: {
      const int k = opts.linear_boundary_k;
      if (k < 0 || k > static_cast<int>(profile.ranks.size())) {
        throw std::invalid_argument("prescribe: linear boundary K outside [0, depth]");
      }
      for (size_t i = 0; i < profile.ranks.size(); ++i) {
        p.layers.push_back({opts.base_heads, opts.base_d_head,
                            static_cast<int>(i) < k ? attn::Mechanism::linear
                                                    : attn::Mechanism::standard});
      }
      break;
    }
  }

  std::vector<LayerPrescription> baseline(
      p.baseline_depth, {opts.base_heads, opts.base_d_head, attn::Mechanism::standard});
  p.attn_params = count_attention_params(p.layers, p.d_model);
  p.baseline_attn_params = count_attention_params(baseline, p.d_model);
  p.attn_param_savings_pct =
      100.0 * (1.0 - static_cast<double>(p.attn_params) / p.baseline_attn_params);
  p.attn_flops_per_token = count_attention_flops(p.layers, p.d_model, p.context);
  p.baseline_attn_flops_per_token = count_attention_flops(baseline, p.d_model, p.context);
  p.attn_flops_savings_pct =
      100.0 * (1.0 - static_cast<double>(p.attn_flops_per_token) / p.baseline_attn_flops_per_token);
  return p;
}

double low_rank_fraction(const RankProfile& profile, double threshold) {
  if (profile.ranks.empty()) {
    throw std::invalid_argument("low_rank_fraction: empty profile");
  }
  int low = 0;
  for (double r : profile.ranks) {
    if (r <= threshold) ++low;
  }
  return static_cast<double>(low) / profile.ranks.size();
}

}  // namespace lab::arch
