#pragma once

#include <limits>
#include <optional>
#include <span>

#include "lab/model.hpp"

namespace lab::train {

struct TrainConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  int warmup_steps = 200;
  int total_steps = 3000;
  double min_lr_fraction = 0.1;
  int batch_size = 16;
  uint64_t seed = 1;
  float epsilon = 0.05f;  // sd damping offset, applied to the model at train time
  int log_every = 50;
  int rank_log_every = 100;
  double val_fraction = 0.1;  // held-out tail of the corpus
  int eval_stride = 0;        // 0 -> context/2
  bool prop1_monitor = true;  // sample a dissipativity check every 100 steps
};

void validate(const TrainConfig& cfg);  // throws model::ConfigError

// AdamW with decoupled weight decay and bias-corrected moments. Moment slots
// follow the model's parameter registry order.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  long step = 0;
};
AdamState init_adam(const model::Model& m);

// One optimizer step. Returns false (and leaves parameters and moments
// untouched) when any gradient is non-finite; the caller owns divergence
// handling.
bool adamw_step(std::vector<model::NamedParam>& params, AdamState& state, double lr,
                double beta1, double beta2, double weight_decay);

// Linear warmup to the peak, cosine decay to min_lr_fraction * lr afterwards.
double lr_at(long step, const TrainConfig& cfg);

struct CascadeRow {
  long step = 0;
  std::vector<double> layer_mean_routing_effrank;
  double low_rank_fraction = 0.0;  // share of layers with effrank <= 5
  double layer0_rank = 0.0;
};
struct CascadeTrace {
  std::vector<CascadeRow> rows;
};

// Mean weight-kernel routing effective rank per layer at the current weights.
CascadeRow cascade_row_for(const model::Model& m, long step, double low_rank_threshold = 5.0);

enum class RunStatus { converged, nan_diverged, blowup };
std::string to_string(RunStatus s);

struct RunOutcome {
  RunStatus status = RunStatus::converged;
  std::optional<long> divergence_step;
  double final_val_ppl = std::numeric_limits<double>::quiet_NaN();
  double initial_val_ppl = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  // Worst observed max Re(lambda) - 1e-8*||L||_2 across sampled sd heads;
  // dissipativity holds while this stays <= 0.
  double prop1_worst_excess = -std::numeric_limits<double>::infinity();
  long prop1_checks = 0;
};

struct LossPoint {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  CascadeTrace trace;
  RunOutcome outcome;
  std::vector<LossPoint> loss_curve;
};

// Streams over a byte corpus; the final val_fraction of the corpus is held
// out for perplexity. The model is updated in place and cfg.epsilon replaces
// its sd damping offset before the first step.
TrainResult train(model::Model& m, std::span<const uint8_t> corpus, const TrainConfig& cfg);

struct SweepRow {
  double epsilon = 0.0;
  uint64_t seed = 0;
  RunOutcome outcome;
};
std::vector<SweepRow> epsilon_sweep(const model::ModelConfig& mcfg, const TrainConfig& base,
                                    std::span<const uint8_t> corpus,
                                    const std::vector<double>& epsilons,
                                    const std::vector<uint64_t>& seeds);

}  // namespace lab::train
