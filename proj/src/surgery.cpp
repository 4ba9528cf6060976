#include "lab/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lab/spectral.hpp"

namespace lab::surgery {

namespace {

std::string describe(const LayerDirective& d) {
  std::string s = "layer " + std::to_string(d.layer) + ": routing=";
  switch (d.routing) {
    case RoutingMode::full: s += "full"; break;
    case RoutingMode::zero: s += "zero"; break;
    case RoutingMode::rank: s += "rank" + std::to_string(d.routing_rank); break;
  }
  s += " filtering=";
  switch (d.filtering) {
    case FilteringMode::full: s += "full"; break;
    case FilteringMode::zero: s += "zero"; break;
    case FilteringMode::per_head_mean_scalar: s += "mean-scalar"; break;
    case FilteringMode::rank: s += "rank" + std::to_string(d.filtering_rank); break;
  }
  return s;
}

std::string describe(const SurgeryPlan& plan) {
  if (plan.layers.empty()) return "identity";
  std::string s;
  for (const auto& d : plan.layers) {
    if (!s.empty()) s += "; ";
    s += describe(d);
  }
  return s;
}

bool is_identity(const LayerDirective& d) {
  return d.routing == RoutingMode::full && d.filtering == FilteringMode::full;
}

}  // namespace

void validate(const SurgeryPlan& plan, const model::ModelConfig& cfg) {
  std::vector<bool> seen(cfg.layers.size(), false);
  for (const auto& d : plan.layers) {
    if (d.layer < 0 || d.layer >= static_cast<int>(cfg.layers.size())) {
      throw model::ConfigError("surgery plan: layer " + std::to_string(d.layer) +
                               " does not exist (model has " +
                               std::to_string(cfg.layers.size()) + ")");
    }
    if (seen[d.layer]) {
      throw model::ConfigError("surgery plan: duplicate directive for layer " +
                               std::to_string(d.layer));
    }
    seen[d.layer] = true;
    if (d.routing == RoutingMode::rank) {
      if (d.routing_rank < 0) {
        throw model::ConfigError("surgery plan: negative routing rank");
      }
      if (d.routing_rank % 2 != 0) {
        throw model::ConfigError("surgery plan: routing rank " +
                                 std::to_string(d.routing_rank) +
                                 " is odd; rotation planes come in pairs");
      }
    }
    if (d.filtering == FilteringMode::rank && d.filtering_rank < 0) {
      throw model::ConfigError("surgery plan: negative filtering rank");
    }
    if (cfg.layers[d.layer].mechanism == attn::Mechanism::linear && !is_identity(d)) {
      throw model::ConfigError("surgery plan: layer " + std::to_string(d.layer) +
                               " is linear-attention and has no score matrix to intercept");
    }
  }
}

SurgeryContext::SurgeryContext(const model::Model& m, const SurgeryPlan& plan)
    : plan_(plan), directive_of_layer_(m.config.layers.size(), -1) {
  validate(plan, m.config);
  audit_ = std::make_unique<InterceptAudit>(m.config.layers.size());
  for (size_t i = 0; i < plan_.layers.size(); ++i) {
    if (!is_identity(plan_.layers[i])) directive_of_layer_[plan_.layers[i].layer] = static_cast<int>(i);
  }

  // sd layers: the hook sees the raw pre-skew interaction; only its skew
  // half enters L, so writing the truncated S back replaces the routing
  // component exactly.
  hooks_.on_sd_components = [this](int layer, int, int n, float* p, float* d) {
    const int di = directive_of_layer_[layer];
    if (di < 0) return;
    const LayerDirective& dir = plan_.layers[di];
    if (dir.routing == RoutingMode::zero) {
      std::fill(p, p + static_cast<long>(n) * n, 0.0f);
    } else if (dir.routing == RoutingMode::rank) {
      const auto dec = spectral::decompose(spectral::Mat::from_f32(p, n, n));
      const auto t =
          spectral::truncate_rank(dec.routing, dir.routing_rank, spectral::ComponentKind::routing);
      for (long i = 0; i < static_cast<long>(n) * n; ++i) p[i] = static_cast<float>(t.a[i]);
    }
    switch (dir.filtering) {
      case FilteringMode::full:
        break;
      case FilteringMode::zero:
        std::fill(d, d + n, 0.0f);
        break;
      case FilteringMode::per_head_mean_scalar: {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += d[i];
        mean /= n;
        std::fill(d, d + n, static_cast<float>(mean));
        break;
      }
      case FilteringMode::rank: {
        // diag(d) truncated to rank k keeps the k largest damping entries.
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return std::fabs(d[a]) > std::fabs(d[b]); });
        for (int i = dir.filtering_rank; i < n; ++i) d[idx[i]] = 0.0f;
        break;
      }
    }
    audit_->modified_heads[layer].fetch_add(1, std::memory_order_relaxed);
  };

  // standard layers: decompose the unmasked scores, truncate, recombine.
  hooks_.on_scores = [this](int layer, int, attn::Mechanism mech, int n, float* scores) {
    if (mech != attn::Mechanism::standard) return;
    const int di = directive_of_layer_[layer];
    if (di < 0) return;
    const LayerDirective& dir = plan_.layers[di];
    auto dec = spectral::decompose(spectral::Mat::from_f32(scores, n, n));
    spectral::Mat r = std::move(dec.routing);
    spectral::Mat f = std::move(dec.filtering);
    if (dir.routing == RoutingMode::zero) {
      r = spectral::Mat(n, n);
    } else if (dir.routing == RoutingMode::rank) {
      r = spectral::truncate_rank(r, dir.routing_rank, spectral::ComponentKind::routing);
    }
    switch (dir.filtering) {
      case FilteringMode::full:
        break;
      case FilteringMode::zero:
        f = spectral::Mat(n, n);
        break;
      case FilteringMode::rank:
        f = spectral::truncate_rank(f, dir.filtering_rank, spectral::ComponentKind::filtering);
        break;
      case FilteringMode::per_head_mean_scalar: {
        // Nearest scalar multiple of the identity: the diagonal-damping analog.
        double c = 0.0;
        for (int i = 0; i < n; ++i) c += f(i, i);
        c /= n;
        f = spectral::Mat(n, n);
        for (int i = 0; i < n; ++i) f(i, i) = c;
        break;
      }
    }
    for (long i = 0; i < static_cast<long>(n) * n; ++i) {
      scores[i] = static_cast<float>(r.a[i] + f.a[i]);
    }
    audit_->modified_heads[layer].fetch_add(1, std::memory_order_relaxed);
  };
}

double eval_with_plan(const model::Model& m, std::span<const uint8_t> corpus, int stride,
                      const SurgeryPlan& plan, InterceptAudit* audit_out) {
  SurgeryContext ctx(m, plan);
  const double ppl = model::perplexity(m, corpus, stride, ctx.hooks());
  if (audit_out) {
    for (size_t i = 0; i < ctx.audit().modified_heads.size(); ++i) {
      audit_out->modified_heads[i].store(ctx.audit().modified_heads[i].load());
    }
  }
  return ppl;
}

namespace {

SweepResult make_result(const SurgeryPlan& plan, double ppl, double baseline) {
  return {describe(plan), ppl, 100.0 * (ppl - baseline) / baseline};
}

}  // namespace

SweepReport per_layer_linearization_sweep(const model::Model& m, std::span<const uint8_t> corpus,
                                          int stride) {
  SweepReport rep;
  rep.baseline_ppl = model::perplexity(m, corpus, stride);
  for (size_t l = 0; l < m.config.layers.size(); ++l) {
    SurgeryPlan plan;
    plan.layers.push_back(SurgeryPlan::linearize(static_cast<int>(l)));
    const double ppl = eval_with_plan(m, corpus, stride, plan);
    rep.results.push_back(make_result(plan, ppl, rep.baseline_ppl));
  }
  return rep;
}

SweepReport cumulative_linearization_sweep(const model::Model& m,
                                           std::span<const uint8_t> corpus, int stride) {
  SweepReport rep;
  rep.baseline_ppl = model::perplexity(m, corpus, stride);
  for (size_t k = 0; k <= m.config.layers.size(); ++k) {
    SurgeryPlan plan;
    for (size_t l = 0; l < k; ++l) plan.layers.push_back(SurgeryPlan::linearize(static_cast<int>(l)));
    const double ppl = k == 0 ? rep.baseline_ppl : eval_with_plan(m, corpus, stride, plan);
    rep.results.push_back(make_result(plan, ppl, rep.baseline_ppl));
  }
  return rep;
}

GridReport joint_rank_grid(const model::Model& m, std::span<const uint8_t> corpus, int stride,
                           const std::vector<int>& routing_ranks,
                           const std::vector<int>& filtering_ranks) {
  for (const auto& l : m.config.layers) {
    if (l.mechanism != attn::Mechanism::standard) {
      throw model::ConfigError("joint_rank_grid: model must be all standard attention");
    }
  }
  if (routing_ranks.empty() || filtering_ranks.empty()) {
    throw model::ConfigError("joint_rank_grid: empty rank list");
  }
  GridReport rep;
  rep.routing_ranks = routing_ranks;
  rep.filtering_ranks = filtering_ranks;
  rep.baseline_ppl = model::perplexity(m, corpus, stride);
  for (int rr : routing_ranks) {
    std::vector<SweepResult> row;
    for (int fr : filtering_ranks) {
      SurgeryPlan plan;
      bool identity = rr < 0 && fr < 0;
      if (!identity) {
        for (size_t l = 0; l < m.config.layers.size(); ++l) {
          LayerDirective d;
          d.layer = static_cast<int>(l);
          if (rr < 0) {
            d.routing = RoutingMode::full;
          } else if (rr == 0) {
            d.routing = RoutingMode::zero;
          } else {
            d.routing = RoutingMode::rank;
            d.routing_rank = rr;
          }
          if (fr < 0) {
            d.filtering = FilteringMode::full;
          } else if (fr == 0) {
            d.filtering = FilteringMode::zero;
          } else {
            d.filtering = FilteringMode::rank;
            d.filtering_rank = fr;
          }
          plan.layers.push_back(d);
        }
      }
      const double ppl = identity ? rep.baseline_ppl : eval_with_plan(m, corpus, stride, plan);
      row.push_back(make_result(plan, ppl, rep.baseline_ppl));
    }
    rep.cells.push_back(std::move(row));
  }
  return rep;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length series of size >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return v[x] < v[y]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (i + j) + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0 || vb == 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace lab::surgery
