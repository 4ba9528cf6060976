#include "lab/surgery.hpp"

#include <cmath>

#include "doctest.h"
#include "lab/corpus.hpp"
#include "lab/rng.hpp"
#include "lab/spectral.hpp"
#include "lab/trainer.hpp"

using namespace lab;
using surgery::FilteringMode;
using surgery::LayerDirective;
using surgery::RoutingMode;
using surgery::SurgeryPlan;

namespace {

// One small trained model per mechanism, shared across cases.
struct Fixture {
  model::Model sd_model;
  model::Model std_model;
  std::vector<uint8_t> val;
  int stride = 16;

  Fixture() {
    const std::string text = corpus::generate(70000, 31);
    std::vector<uint8_t> bytes(text.begin(), text.end());
    model::ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 32;
    cfg.context = 32;
    cfg.layers.assign(2, {attn::Mechanism::sd, 2, 8, false});
    train::TrainConfig tc;
    tc.total_steps = 150;
    tc.warmup_steps = 10;
    tc.batch_size = 4;
    tc.lr = 3e-3;
    tc.rank_log_every = 150;
    tc.prop1_monitor = false;

    sd_model = model::build(cfg, 5);
    train::train(sd_model, bytes, tc);

    model::ModelConfig scfg = cfg;
    for (auto& l : scfg.layers) l.mechanism = attn::Mechanism::standard;
    std_model = model::build(scfg, 5);
    train::train(std_model, bytes, tc);

    val.assign(bytes.end() - 50 * cfg.context, bytes.end());
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("plan validation rejects odd ranks, bad layers, linear targets") {
  const auto& f = fixture();
  SurgeryPlan odd;
  odd.layers.push_back({0, RoutingMode::rank, 3, FilteringMode::full, 0});
  CHECK_THROWS_WITH_AS(surgery::validate(odd, f.sd_model.config), doctest::Contains("odd"),
                       model::ConfigError);

  SurgeryPlan oob;
  oob.layers.push_back({7, RoutingMode::zero, 0, FilteringMode::full, 0});
  CHECK_THROWS_AS(surgery::validate(oob, f.sd_model.config), model::ConfigError);

  SurgeryPlan dup;
  dup.layers.push_back(SurgeryPlan::linearize(0));
  dup.layers.push_back(SurgeryPlan::linearize(0));
  CHECK_THROWS_WITH_AS(surgery::validate(dup, f.sd_model.config), doctest::Contains("duplicate"),
                       model::ConfigError);

  model::ModelConfig lin_cfg = f.sd_model.config;
  lin_cfg.layers[0].mechanism = attn::Mechanism::linear;
  SurgeryPlan lin;
  lin.layers.push_back(SurgeryPlan::linearize(0));
  CHECK_THROWS_WITH_AS(surgery::validate(lin, lin_cfg), doctest::Contains("linear"),
                       model::ConfigError);
}

TEST_CASE("identity plan reproduces the baseline bit-for-bit") {
  const auto& f = fixture();
  const double baseline = model::perplexity(f.sd_model, f.val, f.stride);

  SurgeryPlan identity;
  identity.layers.push_back({0, RoutingMode::full, 0, FilteringMode::full, 0});
  identity.layers.push_back({1, RoutingMode::full, 0, FilteringMode::full, 0});
  surgery::InterceptAudit audit(2);
  const double under_plan = surgery::eval_with_plan(f.sd_model, f.val, f.stride, identity, &audit);
  CHECK(under_plan == baseline);
  CHECK(audit.modified_heads[0].load() == 0);
  CHECK(audit.modified_heads[1].load() == 0);

  // Surgery leaves no residue: a fresh baseline eval is bit-identical.
  SurgeryPlan heavy;
  heavy.layers.push_back({0, RoutingMode::zero, 0, FilteringMode::per_head_mean_scalar, 0});
  surgery::eval_with_plan(f.sd_model, f.val, f.stride, heavy);
  CHECK(model::perplexity(f.sd_model, f.val, f.stride) == baseline);
}

TEST_CASE("audit log matches the plan under parallel evaluation") {
  const auto& f = fixture();
  SurgeryPlan plan;
  plan.layers.push_back(SurgeryPlan::linearize(1));
  surgery::InterceptAudit audit(2);
  surgery::eval_with_plan(f.sd_model, f.val, f.stride, plan, &audit);
  CHECK(audit.modified_heads[0].load() == 0);
  const long touched = audit.modified_heads[1].load();
  CHECK(touched > 0);
  CHECK(touched % f.sd_model.config.layers[1].heads == 0);  // every head, every window

  // L-1 layers untouched in each per-layer run.
  SurgeryPlan plan0;
  plan0.layers.push_back(SurgeryPlan::linearize(0));
  surgery::InterceptAudit audit0(2);
  surgery::eval_with_plan(f.sd_model, f.val, f.stride, plan0, &audit0);
  CHECK(audit0.modified_heads[0].load() == touched);
  CHECK(audit0.modified_heads[1].load() == 0);
}

TEST_CASE("sd hooks keep algebraic classes after truncation") {
  const auto& f = fixture();
  SurgeryPlan plan;
  plan.layers.push_back({0, RoutingMode::rank, 2, FilteringMode::per_head_mean_scalar, 0});
  surgery::SurgeryContext ctx(f.sd_model, plan);

  Rng rng(8);
  const int n = 12;
  std::vector<float> p(n * n), d(n);
  for (auto& x : p) x = static_cast<float>(rng.normal());
  for (auto& x : d) x = 0.05f + std::fabs(static_cast<float>(rng.normal()));
  const std::vector<float> d_orig = d;
  ctx.hooks()->on_sd_components(0, 0, n, p.data(), d.data());

  // Written-back skew part is exactly skew in f32 and rank <= 2.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) CHECK(p[i * n + j] == -p[j * n + i]);
  }
  const auto sig = spectral::svd(spectral::Mat::from_f32(p.data(), n, n)).sigma;
  for (size_t i = 2; i < sig.size(); ++i) CHECK(sig[i] <= 1e-6 * std::max(1.0, sig[0]));

  // Damping collapsed to its mean, still positive.
  double mean = 0.0;
  for (float x : d_orig) mean += x;
  mean /= n;
  for (float x : d) {
    CHECK(x == doctest::Approx(mean).epsilon(1e-5));
    CHECK(x > 0.0f);
  }
}

TEST_CASE("standard hooks: decompose-truncate-recombine keeps classes") {
  const auto& f = fixture();
  SurgeryPlan plan;
  plan.layers.push_back({0, RoutingMode::rank, 2, FilteringMode::rank, 1});
  surgery::SurgeryContext ctx(f.std_model, plan);

  Rng rng(9);
  const int n = 10;
  std::vector<float> scores(n * n);
  for (auto& x : scores) x = static_cast<float>(rng.normal());
  ctx.hooks()->on_scores(0, 0, attn::Mechanism::standard, n, scores.data());

  const auto dec = spectral::decompose(spectral::Mat::from_f32(scores.data(), n, n));
  const auto sig_r = spectral::svd(dec.routing).sigma;
  const auto sig_f = spectral::svd(dec.filtering).sigma;
  for (size_t i = 2; i < sig_r.size(); ++i) CHECK(sig_r[i] <= 1e-6 * std::max(1.0, sig_r[0]));
  for (size_t i = 1; i < sig_f.size(); ++i) CHECK(sig_f[i] <= 1e-6 * std::max(1.0, sig_f[0]));
  // Skew/symmetric to well under 1e-9 (exact by construction in f32).
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      CHECK(std::fabs(dec.routing(i, j) + dec.routing(j, i)) <= 1e-9);
      CHECK(std::fabs(dec.filtering(i, j) - dec.filtering(j, i)) <= 1e-9);
    }
}

TEST_CASE("per-layer and cumulative sweeps have the stated shapes") {
  const auto& f = fixture();
  const auto per_layer = surgery::per_layer_linearization_sweep(f.sd_model, f.val, f.stride);
  CHECK(per_layer.results.size() == f.sd_model.config.layers.size());
  for (const auto& r : per_layer.results) CHECK(std::isfinite(r.ppl));

  const auto cumulative = surgery::cumulative_linearization_sweep(f.sd_model, f.val, f.stride);
  REQUIRE(cumulative.results.size() == f.sd_model.config.layers.size() + 1);
  CHECK(cumulative.results[0].ppl == cumulative.baseline_ppl);  // k=0 is the baseline
  CHECK(cumulative.results[0].delta_ppl_pct == 0.0);
}

TEST_CASE("joint rank grid on a standard model") {
  const auto& f = fixture();
  CHECK_THROWS_AS(surgery::joint_rank_grid(f.sd_model, f.val, f.stride, {-1}, {-1}),
                  model::ConfigError);

  const std::vector<int> rr{-1, 2, 0};
  const std::vector<int> fr{-1, 1, 0};
  const auto grid = surgery::joint_rank_grid(f.std_model, f.val, f.stride, rr, fr);
  REQUIRE(grid.cells.size() == rr.size());
  for (const auto& row : grid.cells) REQUIRE(row.size() == fr.size());
  CHECK(grid.cells[0][0].ppl == grid.baseline_ppl);
  CHECK(grid.cells[0][0].delta_ppl_pct == 0.0);
  for (const auto& row : grid.cells) {
    for (const auto& cell : row) CHECK(std::isfinite(cell.ppl));
  }
  // Removing everything hurts more than keeping everything.
  CHECK(grid.cells[2][2].ppl > grid.baseline_ppl);
}

TEST_CASE("zero-routing devastates a trained sd model; damping collapse is mild") {
  const auto& f = fixture();
  const double baseline = model::perplexity(f.sd_model, f.val, f.stride);

  SurgeryPlan zero_s;
  SurgeryPlan collapse;
  for (int l = 0; l < 2; ++l) {
    zero_s.layers.push_back({l, RoutingMode::zero, 0, FilteringMode::full, 0});
    collapse.layers.push_back({l, RoutingMode::full, 0, FilteringMode::per_head_mean_scalar, 0});
  }
  const double ppl_zero = surgery::eval_with_plan(f.sd_model, f.val, f.stride, zero_s);
  const double ppl_collapse = surgery::eval_with_plan(f.sd_model, f.val, f.stride, collapse);
  CHECK(ppl_zero > baseline);
  CHECK(ppl_zero - baseline > ppl_collapse - baseline);
}

TEST_CASE("spearman rank correlation") {
  CHECK(surgery::spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(surgery::spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(std::fabs(surgery::spearman({1, 2, 3, 4, 5, 6}, {3, 1, 4, 1, 5, 9})) < 1.0);
  CHECK_THROWS_AS(surgery::spearman({1.0}, {2.0}), std::invalid_argument);
}
