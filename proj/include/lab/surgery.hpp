#pragma once

#include <atomic>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lab/model.hpp"

namespace lab::surgery {

enum class RoutingMode { full, rank, zero };
enum class FilteringMode { full, per_head_mean_scalar, rank, zero };

struct LayerDirective {
  int layer = 0;
  RoutingMode routing = RoutingMode::full;
  int routing_rank = 0;  // even, used when routing == rank
  FilteringMode filtering = FilteringMode::full;
  int filtering_rank = 0;  // used when filtering == rank
};

// Inference-time interception only: no parameter changes, no retraining.
// For sd layers the directives act on S and the damping vector directly;
// for standard layers the unmasked scores are decomposed, truncated and
// recombined before the causal mask is applied.
struct SurgeryPlan {
  std::vector<LayerDirective> layers;

  static LayerDirective linearize(int layer) {
    return {layer, RoutingMode::rank, 2, FilteringMode::per_head_mean_scalar, 0};
  }
};

void validate(const SurgeryPlan& plan, const model::ModelConfig& cfg);

// Per-layer modification counters filled while a plan is live; eval windows
// run in parallel, hence the atomics.
struct InterceptAudit {
  explicit InterceptAudit(size_t layers) : modified_heads(layers) {}
  std::vector<std::atomic<long>> modified_heads;
};

// Binds a plan to intercept hooks. The context owns the audit log and must
// outlive every forward pass that uses its hooks.
class SurgeryContext {
 public:
  SurgeryContext(const model::Model& m, const SurgeryPlan& plan);
  const attn::AttnIntercept* hooks() const { return &hooks_; }
  const InterceptAudit& audit() const { return *audit_; }

 private:
  SurgeryPlan plan_;
  std::vector<int> directive_of_layer_;  // -1 when untouched
  std::unique_ptr<InterceptAudit> audit_;
  attn::AttnIntercept hooks_;
};

struct SweepResult {
  std::string plan_desc;
  double ppl = 0.0;
  double delta_ppl_pct = 0.0;
};

// Overlapping-stride perplexity under a plan; protocol identical to the
// baseline eval (same stride, same corpus slice).
double eval_with_plan(const model::Model& m, std::span<const uint8_t> corpus, int stride,
                      const SurgeryPlan& plan, InterceptAudit* audit_out = nullptr);

struct SweepReport {
  double baseline_ppl = 0.0;
  std::vector<SweepResult> results;
};

// One layer at a time: routing -> rank 2, filtering -> per-head scalar.
SweepReport per_layer_linearization_sweep(const model::Model& m, std::span<const uint8_t> corpus,
                                          int stride);

// Fold layers 0..k-1 into the linearized set, front to back; k=0 is baseline.
SweepReport cumulative_linearization_sweep(const model::Model& m, std::span<const uint8_t> corpus,
                                           int stride);

// Full cross-product of routing x filtering rank targets applied to every
// layer of a standard-attention model. Rank -1 denotes "full".
struct GridReport {
  double baseline_ppl = 0.0;
  std::vector<int> routing_ranks;
  std::vector<int> filtering_ranks;
  std::vector<std::vector<SweepResult>> cells;  // [routing][filtering]
};
GridReport joint_rank_grid(const model::Model& m, std::span<const uint8_t> corpus, int stride,
                           const std::vector<int>& routing_ranks,
                           const std::vector<int>& filtering_ranks);

// Spearman rank correlation (average-rank ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace lab::surgery
