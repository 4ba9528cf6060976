#include "lab/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "lab/rng.hpp"
#include "lab/spectral.hpp"

namespace lab::train {

void validate(const TrainConfig& cfg) {
  std::string problems;
  auto bad = [&](const std::string& msg) {
    if (!problems.empty()) problems += "; ";
    problems += msg;
  };
  if (cfg.lr <= 0.0) bad("lr must be > 0");
  if (cfg.warmup_steps < 0) bad("warmup_steps must be >= 0");
  if (cfg.total_steps <= 0) bad("total_steps must be > 0");
  if (cfg.warmup_steps >= cfg.total_steps) bad("warmup_steps must be < total_steps");
  if (cfg.batch_size < 1) bad("batch_size must be >= 1");
  if (cfg.epsilon < 0.0f) bad("epsilon must be >= 0");
  if (cfg.min_lr_fraction < 0.0 || cfg.min_lr_fraction > 1.0) {
    bad("min_lr_fraction must be in [0, 1]");
  }
  if (cfg.log_every < 1) bad("log_every must be >= 1");
  if (cfg.rank_log_every < 1) bad("rank_log_every must be >= 1");
  if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 0.5) bad("val_fraction must be in (0, 0.5)");
  if (!problems.empty()) throw model::ConfigError("invalid train config: " + problems);
}

AdamState init_adam(const model::Model& m) {
  AdamState s;
  s.m.resize(m.params.size());
  s.v.resize(m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    s.m[i].assign(m.params[i].tensor.numel(), 0.0f);
    s.v[i].assign(m.params[i].tensor.numel(), 0.0f);
  }
  return s;
}

bool adamw_step(std::vector<model::NamedParam>& params, AdamState& state, double lr, double beta1,
                double beta2, double weight_decay) {
  constexpr double eps = 1e-8;
  for (auto& p : params) {
    const auto& g = p.tensor.n->grad;
    for (float x : g) {
      if (!std::isfinite(x)) return false;
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& data = p.tensor.values();
    const auto& grad = p.tensor.n->grad;
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const double wd = p.weight_decay ? weight_decay : 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      m[i] = static_cast<float>(beta1 * m[i] + (1.0 - beta1) * g);
      v[i] = static_cast<float>(beta2 * v[i] + (1.0 - beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double x = data[i];
      x -= lr * wd * x;
      x -= lr * mhat / (std::sqrt(vhat) + eps);
      data[i] = static_cast<float>(x);
    }
  }
  return true;
}

double lr_at(long step, const TrainConfig& cfg) {
  const double min_lr = cfg.lr * cfg.min_lr_fraction;
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (step >= cfg.total_steps) return min_lr;
  const double t = static_cast<double>(step - cfg.warmup_steps) /
                   static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return min_lr + (cfg.lr - min_lr) * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
}

CascadeRow cascade_row_for(const model::Model& m, long step, double low_rank_threshold) {
  CascadeRow row;
  row.step = step;
  const int dm = m.config.d_model;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const auto& spec = m.config.layers[li];
    const auto& att = m.layers[li].attn;
    const spectral::Mat wq = spectral::Mat::from_f32(att.wq.data(), dm, spec.heads * spec.d_head);
    const spectral::Mat wk = spectral::Mat::from_f32(att.wk.data(), dm, spec.heads * spec.d_head);
    double acc = 0.0;
    for (int h = 0; h < spec.heads; ++h) {
      spectral::Mat wq_h(dm, spec.d_head), wk_h(dm, spec.d_head);
      for (int r = 0; r < dm; ++r) {
        for (int c = 0; c < spec.d_head; ++c) {
          wq_h(r, c) = wq(r, h * spec.d_head + c);
          wk_h(r, c) = wk(r, h * spec.d_head + c);
        }
      }
      const auto kern = spectral::weight_kernel(wq_h, wk_h, spec.d_head, static_cast<int>(li), h);
      const auto dec = spectral::decompose(kern.m);
      acc += spectral::effective_rank(dec.routing);
    }
    row.layer_mean_routing_effrank.push_back(acc / spec.heads);
  }
  int low = 0;
  for (double r : row.layer_mean_routing_effrank) {
    if (r <= low_rank_threshold) ++low;
  }
  row.low_rank_fraction = static_cast<double>(low) / row.layer_mean_routing_effrank.size();
  row.layer0_rank = row.layer_mean_routing_effrank.front();
  return row;
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::nan_diverged: return "nan-diverged";
    case RunStatus::blowup: return "blowup";
  }
  return "?";
}

namespace {

// 64-bit dissipativity check of the sampled window: for every sd head,
// max Re(lambda(L)) must stay below 1e-8 * ||L||_2.
void prop1_check(const model::Model& m, const std::vector<int>& window, RunOutcome& out) {
  bool any_sd = false;
  for (const auto& l : m.config.layers) any_sd = any_sd || l.mechanism == attn::Mechanism::sd;
  if (!any_sd) return;
  std::vector<std::pair<int, spectral::Mat>> captured;
  attn::AttnIntercept hooks;
  hooks.on_scores = [&](int layer, int, attn::Mechanism mech, int n, float* scores) {
    if (mech != attn::Mechanism::sd) return;
    captured.emplace_back(layer, spectral::Mat::from_f32(scores, n, n));
  };
  Tape tape(false);
  std::vector<int> inputs(window.begin(), window.end() - 1);
  m.forward(tape, inputs, &hooks);
  for (auto& [layer, l] : captured) {
    const double bound = 1e-8 * spectral::spectral_norm_estimate(l);
    const double worst = spectral::max_real_eigenvalue(l);
    out.prop1_worst_excess = std::max(out.prop1_worst_excess, worst - bound);
    out.prop1_checks += 1;
  }
}

}  // namespace

TrainResult train(model::Model& m, std::span<const uint8_t> corpus, const TrainConfig& cfg) {
  validate(cfg);
  const int n = m.config.context;
  const long mlen = static_cast<long>(corpus.size());
  const long train_len = std::max<long>(n + 2, mlen - static_cast<long>(mlen * cfg.val_fraction));
  if (mlen < n + 2) {
    throw model::ConfigError("train: corpus of " + std::to_string(mlen) +
                             " bytes is too short for context " + std::to_string(n));
  }
  std::span<const uint8_t> val = corpus.subspan(std::min(train_len, mlen - 2));
  const int stride = cfg.eval_stride > 0 ? cfg.eval_stride : std::max(1, n / 2);

  // The damping offset is fixed at train time.
  m.config.sd_epsilon = cfg.epsilon;
  for (auto& layer : m.layers) layer.attn.epsilon = cfg.epsilon;

  TrainResult result;
  result.outcome.initial_val_ppl = model::perplexity(m, val, stride);

  Rng rng(cfg.seed);
  AdamState adam = init_adam(m);
  double blowup_ref = std::numeric_limits<double>::quiet_NaN();
  int blowup_streak = 0;
  std::vector<int> window(n + 1);

  for (long step = 0; step < cfg.total_steps; ++step) {
    if (step % cfg.rank_log_every == 0) {
      result.trace.rows.push_back(cascade_row_for(m, step));
    }
    m.zero_grad();
    double loss_acc = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const long start = static_cast<long>(rng.uniform_below(
          static_cast<uint64_t>(train_len - (n + 1))));
      for (int i = 0; i <= n; ++i) window[i] = corpus[start + i];
      Tape tape;
      Tensor loss = m.loss(tape, window);
      loss_acc += static_cast<double>(loss.item()) / cfg.batch_size;
      tape.backward(tape.scale(loss, 1.0f / cfg.batch_size));
    }
    const double lr = lr_at(step, cfg);
    if (step % cfg.log_every == 0 || step == cfg.total_steps - 1) {
      result.loss_curve.push_back({step, loss_acc, lr});
    }
    if (!std::isfinite(loss_acc)) {
      result.outcome.status = RunStatus::nan_diverged;
      result.outcome.divergence_step = step;
      break;
    }
    if (!adamw_step(m.params, adam, lr, cfg.beta1, cfg.beta2, cfg.weight_decay)) {
      result.outcome.status = RunStatus::nan_diverged;
      result.outcome.divergence_step = step;
      break;
    }
    if (step == 100) blowup_ref = loss_acc;
    if (step > 100 && std::isfinite(blowup_ref)) {
      blowup_streak = loss_acc > 3.0 * blowup_ref ? blowup_streak + 1 : 0;
      if (blowup_streak >= 200) {
        result.outcome.status = RunStatus::blowup;
        result.outcome.divergence_step = step;
        break;
      }
    }
    if (cfg.prop1_monitor && step % 100 == 0) {
      prop1_check(m, window, result.outcome);
    }
    result.outcome.final_train_loss = loss_acc;
  }

  if (result.outcome.status == RunStatus::converged) {
    result.trace.rows.push_back(cascade_row_for(m, cfg.total_steps));
    result.outcome.final_val_ppl = model::perplexity(m, val, stride);
  }
  return result;
}

std::vector<SweepRow> epsilon_sweep(const model::ModelConfig& mcfg, const TrainConfig& base,
                                    std::span<const uint8_t> corpus,
                                    const std::vector<double>& epsilons,
                                    const std::vector<uint64_t>& seeds) {
  if (epsilons.empty()) throw model::ConfigError("epsilon_sweep: epsilon list is empty");
  if (seeds.empty()) throw model::ConfigError("epsilon_sweep: seed list is empty");
  for (double e : epsilons) {
    if (e < 0.0) throw model::ConfigError("epsilon_sweep: epsilon must be >= 0");
  }
  std::vector<SweepRow> rows;
  for (double e : epsilons) {
    for (uint64_t seed : seeds) {
      model::ModelConfig mc = mcfg;
      mc.sd_epsilon = static_cast<float>(e);
      TrainConfig tc = base;
      tc.epsilon = static_cast<float>(e);
      tc.seed = seed;
      model::Model m = model::build(mc, seed);
      TrainResult r = train(m, corpus, tc);
      rows.push_back({e, seed, r.outcome});
    }
  }
  return rows;
}

}  // namespace lab::train
