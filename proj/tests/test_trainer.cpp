#include "lab/trainer.hpp"

#include <cmath>

#include "doctest.h"
#include "lab/corpus.hpp"

using namespace lab;
using train::TrainConfig;

namespace {

model::ModelConfig tiny_model(attn::Mechanism mech = attn::Mechanism::sd) {
  model::ModelConfig cfg;
  cfg.vocab_size = 256;
  cfg.d_model = 32;
  cfg.context = 32;
  cfg.layers.assign(2, {mech, 2, 8, false});
  return cfg;
}

TrainConfig tiny_train(int steps = 120) {
  TrainConfig tc;
  tc.total_steps = steps;
  tc.warmup_steps = 10;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.log_every = 20;
  tc.rank_log_every = 40;
  tc.val_fraction = 0.2;
  return tc;
}

std::vector<uint8_t> text_corpus(size_t n, uint64_t seed) {
  const std::string s = corpus::generate(n, seed);
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("adamw: identity, single-step magnitude, decoupled decay") {
  auto scalar_param = [](float v, bool decay) {
    model::NamedParam p;
    p.name = "w";
    p.tensor = Tensor::from(1, 1, {v}, true);
    p.weight_decay = decay;
    return p;
  };

  // Zero gradients, zero weight decay: parameters unchanged.
  {
    std::vector<model::NamedParam> params{scalar_param(1.5f, false)};
    params[0].tensor.n->ensure_grad();
    train::AdamState st;
    st.m.assign(1, std::vector<float>(1, 0.0f));
    st.v.assign(1, std::vector<float>(1, 0.0f));
    CHECK(train::adamw_step(params, st, 0.1, 0.9, 0.95, 0.0));
    CHECK(params[0].tensor.item() == 1.5f);
  }

  // Constant gradient 1, one step at lr=0.1: decrease by ~0.1.
  {
    std::vector<model::NamedParam> params{scalar_param(1.0f, false)};
    params[0].tensor.n->ensure_grad();
    params[0].tensor.n->grad[0] = 1.0f;
    train::AdamState st;
    st.m.assign(1, std::vector<float>(1, 0.0f));
    st.v.assign(1, std::vector<float>(1, 0.0f));
    CHECK(train::adamw_step(params, st, 0.1, 0.9, 0.95, 0.0));
    CHECK(params[0].tensor.item() == doctest::Approx(0.9).epsilon(1e-4));
  }

  // Weight decay only: parameter scaled by (1 - lr*wd).
  {
    std::vector<model::NamedParam> params{scalar_param(2.0f, true)};
    params[0].tensor.n->ensure_grad();
    train::AdamState st;
    st.m.assign(1, std::vector<float>(1, 0.0f));
    st.v.assign(1, std::vector<float>(1, 0.0f));
    CHECK(train::adamw_step(params, st, 0.1, 0.9, 0.95, 0.1));
    CHECK(params[0].tensor.item() == doctest::Approx(2.0 * 0.99).epsilon(1e-6));
  }

  // Non-finite gradient: no silent update.
  {
    std::vector<model::NamedParam> params{scalar_param(1.0f, false)};
    params[0].tensor.n->ensure_grad();
    params[0].tensor.n->grad[0] = std::numeric_limits<float>::quiet_NaN();
    train::AdamState st;
    st.m.assign(1, std::vector<float>(1, 0.0f));
    st.v.assign(1, std::vector<float>(1, 0.0f));
    CHECK_FALSE(train::adamw_step(params, st, 0.1, 0.9, 0.95, 0.0));
    CHECK(params[0].tensor.item() == 1.0f);
    CHECK(st.step == 0);
  }
}

TEST_CASE("lr schedule: ramp, peak, cosine floor") {
  TrainConfig tc;
  tc.lr = 6e-4;
  tc.warmup_steps = 2000;
  tc.total_steps = 10000;
  tc.min_lr_fraction = 0.1;
  CHECK(train::lr_at(0, tc) == 0.0);
  CHECK(train::lr_at(1000, tc) == doctest::Approx(3e-4));
  CHECK(train::lr_at(2000, tc) == doctest::Approx(6e-4));
  CHECK(train::lr_at(10000, tc) == doctest::Approx(6e-5));
  CHECK(train::lr_at(6000, tc) < 6e-4);
  CHECK(train::lr_at(6000, tc) > 6e-5);
}

TEST_CASE("train config validation") {
  TrainConfig tc = tiny_train();
  tc.epsilon = -0.1f;
  CHECK_THROWS_WITH_AS(train::validate(tc), doctest::Contains("epsilon"), model::ConfigError);
  tc = tiny_train();
  tc.warmup_steps = tc.total_steps;
  CHECK_THROWS_AS(train::validate(tc), model::ConfigError);
  tc = tiny_train();
  tc.lr = 0.0;
  CHECK_THROWS_WITH_AS(train::validate(tc), doctest::Contains("lr"), model::ConfigError);
}

TEST_CASE("toy run: converges, logs a reproducible cascade trace") {
  const auto bytes = text_corpus(60000, 21);
  auto run = [&] {
    model::Model m = model::build(tiny_model(), 5);
    return train::train(m, bytes, tiny_train());
  };
  const auto r1 = run();
  CHECK(r1.outcome.status == train::RunStatus::converged);
  CHECK(std::isfinite(r1.outcome.final_val_ppl));
  // Held-out loss decreases from step 0 to final for a converged run.
  CHECK(r1.outcome.final_val_ppl < r1.outcome.initial_val_ppl);
  CHECK_FALSE(r1.outcome.divergence_step.has_value());
  CHECK(r1.loss_curve.front().loss > r1.loss_curve.back().loss);

  // Trace rows: strictly increasing steps, one column per layer, fresh-init
  // ranks roughly exchangeable across layers at step 0.
  REQUIRE(!r1.trace.rows.empty());
  CHECK(r1.trace.rows.front().step == 0);
  for (size_t i = 1; i < r1.trace.rows.size(); ++i) {
    CHECK(r1.trace.rows[i].step > r1.trace.rows[i - 1].step);
  }
  const auto& row0 = r1.trace.rows.front();
  REQUIRE(row0.layer_mean_routing_effrank.size() == 2);
  const double a = row0.layer_mean_routing_effrank[0];
  const double b = row0.layer_mean_routing_effrank[1];
  CHECK(std::fabs(a - b) <= 0.2 * std::max(a, b));
  CHECK(row0.layer0_rank == a);
  CHECK(row0.low_rank_fraction >= 0.0);
  CHECK(row0.low_rank_fraction <= 1.0);

  // Prop-1 monitor ran and never saw a violation.
  CHECK(r1.outcome.prop1_checks > 0);
  CHECK(r1.outcome.prop1_worst_excess <= 0.0);

  // Bit-reproducible across runs with the same seed and config.
  const auto r2 = run();
  REQUIRE(r2.trace.rows.size() == r1.trace.rows.size());
  for (size_t i = 0; i < r1.trace.rows.size(); ++i) {
    CHECK(r1.trace.rows[i].layer_mean_routing_effrank ==
          r2.trace.rows[i].layer_mean_routing_effrank);
  }
  CHECK(r1.outcome.final_val_ppl == r2.outcome.final_val_ppl);
  REQUIRE(r1.loss_curve.size() == r2.loss_curve.size());
  for (size_t i = 0; i < r1.loss_curve.size(); ++i) {
    CHECK(r1.loss_curve[i].loss == r2.loss_curve[i].loss);
  }
}

TEST_CASE("epsilon sweep: populated rows and input validation") {
  const auto bytes = text_corpus(30000, 22);
  const auto mc = tiny_model();
  TrainConfig tc = tiny_train(40);
  tc.rank_log_every = 20;

  const auto rows = train::epsilon_sweep(mc, tc, bytes, {0.05}, {1, 2});
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.epsilon == 0.05);
    CHECK((r.outcome.status == train::RunStatus::converged ||
           r.outcome.divergence_step.has_value()));
  }
  CHECK(rows[0].seed == 1);
  CHECK(rows[1].seed == 2);

  CHECK_THROWS_AS(train::epsilon_sweep(mc, tc, bytes, {0.05}, {}), model::ConfigError);
  CHECK_THROWS_AS(train::epsilon_sweep(mc, tc, bytes, {}, {1}), model::ConfigError);
  CHECK_THROWS_AS(train::epsilon_sweep(mc, tc, bytes, {-0.01}, {1}), model::ConfigError);
}

TEST_CASE("divergence handling reports a step") {
  // A pathologically large learning rate drives the loss to NaN quickly.
  const auto bytes = text_corpus(30000, 23);
  model::Model m = model::build(tiny_model(), 9);
  TrainConfig tc = tiny_train(200);
  tc.lr = 500.0;
  tc.warmup_steps = 1;
  tc.prop1_monitor = false;
  const auto r = train::train(m, bytes, tc);
  if (r.outcome.status != train::RunStatus::converged) {
    CHECK(r.outcome.divergence_step.has_value());
    CHECK(std::isnan(r.outcome.final_val_ppl));
  }
}
