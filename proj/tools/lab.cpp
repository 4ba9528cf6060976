// lab: reproducible attention-spectrum experiments from JSON configs.
//
// Exit codes: 0 success, 2 config error, 3 numerical error, 4 I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lab/architect.hpp"
#include "lab/corpus.hpp"
#include "lab/model.hpp"
#include "lab/probe.hpp"
#include "lab/report.hpp"
#include "lab/surgery.hpp"
#include "lab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw lab::model::ConfigError(path + ": " + e.what());
  }
}

uint64_t seed_override(uint64_t seed) {
  if (const char* env = std::getenv("LAB_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return seed;
}

std::string fmt(double v) { return lab::report::fmt_double(v); }

struct TrainConfigFile {
  lab::model::ModelConfig model;
  lab::train::TrainConfig train;
  std::string corpus_path;
  std::string out_dir;
};

TrainConfigFile load_train_config(const std::string& path) {
  const json j = read_json_file(path);
  lab::report::reject_unknown_keys(j, {"model", "train", "corpus", "out_dir"}, "config");
  if (!j.contains("model")) throw lab::model::ConfigError("config: missing 'model'");
  if (!j.contains("train")) throw lab::model::ConfigError("config: missing 'train'");
  if (!j.contains("corpus")) throw lab::model::ConfigError("config: missing 'corpus'");
  TrainConfigFile f;
  f.model = lab::report::model_config_from_json(j.at("model"));
  f.train = lab::report::train_config_from_json(j.at("train"));
  f.corpus_path = j.at("corpus").get<std::string>();
  f.out_dir = j.value("out_dir", std::string());
  f.train.seed = seed_override(f.train.seed);
  f.model.seed = f.train.seed;
  lab::model::validate(f.model);
  lab::train::validate(f.train);
  return f;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << j.dump(2) << "\n";
}

int run_train(const std::string& config_path, std::string out_dir) {
  TrainConfigFile cfg = load_train_config(config_path);
  if (out_dir.empty()) out_dir = cfg.out_dir;
  if (out_dir.empty()) {
    out_dir = "run_" + lab::report::hex64(lab::report::fnv1a64_file(config_path)).substr(0, 12);
  }
  fs::create_directories(out_dir);

  const auto corpus = lab::corpus::load_bytes(cfg.corpus_path);
  lab::model::Model m = lab::model::build(cfg.model, cfg.train.seed);
  std::cout << "training " << cfg.model.layers.size() << " layers, d_model "
            << cfg.model.d_model << ", " << cfg.train.total_steps << " steps, seed "
            << cfg.train.seed << "\n";
  const auto result = lab::train::train(m, corpus, cfg.train);

  json resolved = {{"model", lab::report::to_json(m.config)},
                   {"train", lab::report::to_json(cfg.train)},
                   {"corpus", cfg.corpus_path}};
  const json prov = lab::report::provenance(resolved, cfg.train.seed,
                                            {{"config", config_path}, {"corpus", cfg.corpus_path}});

  lab::probe::save_checkpoint(out_dir + "/checkpoint.safetensors", m,
                              {{"train_config", lab::report::to_json(cfg.train).dump()},
                               {"provenance", prov.dump()}});

  lab::report::Csv trace;
  trace.provenance_json = prov.dump();
  trace.header = {"step"};
  for (size_t l = 0; l < m.config.layers.size(); ++l) {
    trace.header.push_back("rank_l" + std::to_string(l));
  }
  trace.header.push_back("low_rank_fraction");
  for (const auto& row : result.trace.rows) {
    std::vector<std::string> r{std::to_string(row.step)};
    for (double v : row.layer_mean_routing_effrank) r.push_back(fmt(v));
    r.push_back(fmt(row.low_rank_fraction));
    trace.rows.push_back(std::move(r));
  }
  trace.write(out_dir + "/cascade_trace.csv");

  lab::report::Csv loss;
  loss.provenance_json = prov.dump();
  loss.header = {"step", "loss", "lr"};
  for (const auto& p : result.loss_curve) {
    loss.rows.push_back({std::to_string(p.step), fmt(p.loss), fmt(p.lr)});
  }
  loss.write(out_dir + "/loss_curve.csv");

  json outcome = {{"provenance", prov},
                  {"status", lab::train::to_string(result.outcome.status)},
                  {"divergence_step", result.outcome.divergence_step
                                          ? json(*result.outcome.divergence_step)
                                          : json(nullptr)},
                  {"final_val_ppl", lab::report::json_double(result.outcome.final_val_ppl)},
                  {"initial_val_ppl", lab::report::json_double(result.outcome.initial_val_ppl)},
                  {"final_train_loss", lab::report::json_double(result.outcome.final_train_loss)},
                  {"prop1_checks", result.outcome.prop1_checks},
                  {"prop1_worst_excess", lab::report::json_double(result.outcome.prop1_worst_excess)}};
  write_json_file(out_dir + "/run_outcome.json", outcome);

  std::cout << "status " << lab::train::to_string(result.outcome.status) << ", val ppl "
            << fmt(result.outcome.final_val_ppl) << " (untrained "
            << fmt(result.outcome.initial_val_ppl) << ")\nwrote " << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& corpus_path, int stride,
             const std::string& out_path) {
  const lab::model::Model m = lab::probe::load_checkpoint(ckpt);
  const auto corpus = lab::corpus::load_bytes(corpus_path);
  if (stride <= 0) stride = std::max(1, m.config.context / 2);
  const double ppl = lab::model::perplexity(m, corpus, stride);
  std::cout << "ppl " << fmt(ppl) << " (stride " << stride << ", " << corpus.size()
            << " tokens)\n";
  if (!out_path.empty()) {
    const json prov = lab::report::provenance(lab::report::to_json(m.config), m.config.seed,
                                              {{"checkpoint", ckpt}, {"corpus", corpus_path}});
    write_json_file(out_path, {{"provenance", prov}, {"ppl", ppl}, {"stride", stride}});
  }
  return 0;
}

json head_stats_json(const lab::probe::HeadStatsReport& rep) {
  json heads = json::array();
  for (const auto& h : rep.heads) {
    heads.push_back({{"layer", h.layer},
                     {"head", h.head},
                     {"rho_weight", lab::report::json_double(h.rho_weight)},
                     {"effrank_r_weight", h.effrank_r_weight},
                     {"effrank_f_weight", h.effrank_f_weight},
                     {"max_re_lambda_weight", h.max_re_lambda_weight}});
  }
  json layers = json::array();
  for (const auto& l : rep.layers) {
    layers.push_back({{"layer", l.layer},
                      {"mean_rho", lab::report::json_double(l.mean_rho)},
                      {"mean_effrank_r", l.mean_effrank_r},
                      {"mean_effrank_f", l.mean_effrank_f},
                      {"mean_max_re_lambda", l.mean_max_re_lambda}});
  }
  return {{"heads", heads}, {"layers", layers}};
}

int run_probe(const std::string& archive_path, const std::string& convention_name, int heads,
              std::string out_dir, bool sequence_level, const std::string& sequences_path,
              bool truncate_sequences) {
  fs::create_directories(out_dir);
  const auto archive = lab::probe::read_archive(archive_path);
  lab::probe::NamingConvention conv;
  if (convention_name == "toolkit") {
    conv.kind = lab::probe::NamingConvention::Kind::toolkit;
  } else if (convention_name == "gpt2-fused") {
    conv.kind = lab::probe::NamingConvention::Kind::gpt2_fused;
  } else {
    throw lab::model::ConfigError("unknown convention '" + convention_name + "'");
  }
  conv.heads = heads;

  const auto kernels = lab::probe::per_head_kernels(archive, conv);
  const auto rep = lab::probe::head_statistics(kernels);

  const json prov =
      lab::report::provenance({{"convention", convention_name}, {"heads", heads}}, 0,
                              {{"archive", archive_path}});
  lab::report::Csv csv;
  csv.provenance_json = prov.dump();
  csv.header = {"layer", "head", "rho_weight", "effrank_r_weight", "effrank_f_weight",
                "max_re_lambda_weight"};
  for (const auto& h : rep.heads) {
    csv.rows.push_back({std::to_string(h.layer), std::to_string(h.head), fmt(h.rho_weight),
                        fmt(h.effrank_r_weight), fmt(h.effrank_f_weight),
                        fmt(h.max_re_lambda_weight)});
  }
  csv.write(out_dir + "/head_stats.csv");

  lab::report::Csv layer_csv;
  layer_csv.provenance_json = prov.dump();
  layer_csv.header = {"layer", "mean_rho", "mean_effrank_r", "mean_effrank_f",
                      "mean_max_re_lambda"};
  for (const auto& l : rep.layers) {
    layer_csv.rows.push_back({std::to_string(l.layer), fmt(l.mean_rho), fmt(l.mean_effrank_r),
                              fmt(l.mean_effrank_f), fmt(l.mean_max_re_lambda)});
  }
  layer_csv.write(out_dir + "/layer_stats.csv");

  json out = head_stats_json(rep);
  out["provenance"] = prov;
  write_json_file(out_dir + "/head_stats.json", out);

  std::cout << kernels.size() << " head kernels analyzed\n";

  if (sequence_level) {
    if (sequences_path.empty()) {
      throw lab::model::ConfigError("--sequence-level requires --sequences <file>");
    }
    const lab::model::Model m = lab::probe::load_checkpoint(archive_path);
    auto sequences = lab::corpus::load_lines(sequences_path);
    if (truncate_sequences) {
      for (auto& seq : sequences) {
        if (static_cast<int>(seq.size()) > m.config.context) {
          seq.resize(m.config.context);
        }
      }
    }
    const auto seq = lab::probe::sequence_level_report(m, sequences);
    lab::report::Csv scsv;
    scsv.provenance_json = prov.dump();
    scsv.header = {"layer", "head", "rho", "effrank_r", "effrank_f", "max_re_lambda"};
    json sj = json::array();
    for (const auto& h : seq) {
      scsv.rows.push_back({std::to_string(h.layer), std::to_string(h.head), fmt(h.rho),
                           fmt(h.effrank_r), fmt(h.effrank_f), fmt(h.max_re_lambda)});
      sj.push_back({{"layer", h.layer},
                    {"head", h.head},
                    {"rho", lab::report::json_double(h.rho)},
                    {"effrank_r", h.effrank_r},
                    {"effrank_f", h.effrank_f},
                    {"max_re_lambda", h.max_re_lambda}});
    }
    scsv.write(out_dir + "/sequence_stats.csv");
    write_json_file(out_dir + "/sequence_stats.json",
                    {{"provenance", prov}, {"heads", sj}});
    std::cout << "sequence-level stats over " << sequences.size() << " sequences\n";
  }
  std::cout << "wrote " << out_dir << "\n";
  return 0;
}

lab::surgery::SurgeryPlan plan_from_json(const json& j, const lab::model::ModelConfig& cfg) {
  lab::report::reject_unknown_keys(j, {"layers"}, "surgery plan");
  lab::surgery::SurgeryPlan plan;
  for (const auto& lj : j.at("layers")) {
    lab::report::reject_unknown_keys(lj, {"layer", "routing", "filtering"}, "surgery plan layer");
    lab::surgery::LayerDirective d;
    d.layer = lj.at("layer").get<int>();
    const json r = lj.value("routing", json("full"));
    if (r.is_string()) {
      const std::string s = r.get<std::string>();
      if (s == "full") d.routing = lab::surgery::RoutingMode::full;
      else if (s == "zero") d.routing = lab::surgery::RoutingMode::zero;
      else throw lab::model::ConfigError("surgery plan: routing must be full|zero|<even int>");
    } else {
      d.routing = lab::surgery::RoutingMode::rank;
      d.routing_rank = r.get<int>();
    }
    const json f = lj.value("filtering", json("full"));
    if (f.is_string()) {
      const std::string s = f.get<std::string>();
      if (s == "full") d.filtering = lab::surgery::FilteringMode::full;
      else if (s == "zero") d.filtering = lab::surgery::FilteringMode::zero;
      else if (s == "mean") d.filtering = lab::surgery::FilteringMode::per_head_mean_scalar;
      else throw lab::model::ConfigError("surgery plan: filtering must be full|zero|mean|<int>");
    } else {
      d.filtering = lab::surgery::FilteringMode::rank;
      d.filtering_rank = f.get<int>();
    }
    plan.layers.push_back(d);
  }
  lab::surgery::validate(plan, cfg);
  return plan;
}

void write_sweep_csv(const std::string& path, const lab::surgery::SweepReport& rep,
                     const json& prov) {
  lab::report::Csv csv;
  csv.provenance_json = prov.dump();
  csv.header = {"plan", "ppl", "delta_ppl_pct"};
  csv.rows.push_back({"baseline", fmt(rep.baseline_ppl), "0"});
  for (const auto& r : rep.results) {
    csv.rows.push_back({"\"" + r.plan_desc + "\"", fmt(r.ppl), fmt(r.delta_ppl_pct)});
  }
  csv.write(path);
}

struct SurgeryArgs {
  std::string checkpoint;
  std::string corpus_path;
  std::string out_dir = "surgery_out";
  int stride = 0;
  int min_tokens_factor = 50;  // eval slice must cover >= factor * context tokens
};

int run_surgery(const std::string& mode, const SurgeryArgs& args, const std::string& plan_path,
                const std::string& routing_ranks_arg, const std::string& filtering_ranks_arg) {
  const lab::model::Model m = lab::probe::load_checkpoint(args.checkpoint);
  const auto corpus = lab::corpus::load_bytes(args.corpus_path);
  const int n = m.config.context;
  if (static_cast<long>(corpus.size()) < static_cast<long>(args.min_tokens_factor) * n) {
    throw lab::model::ConfigError("surgery eval slice has " + std::to_string(corpus.size()) +
                                  " tokens; protocol needs >= " +
                                  std::to_string(args.min_tokens_factor) + "*context = " +
                                  std::to_string(static_cast<long>(args.min_tokens_factor) * n));
  }
  const int stride = args.stride > 0 ? args.stride : std::max(1, n / 2);
  fs::create_directories(args.out_dir);
  const json prov = lab::report::provenance(
      {{"mode", mode}, {"stride", stride}, {"model", lab::report::to_json(m.config)}},
      m.config.seed, {{"checkpoint", args.checkpoint}, {"corpus", args.corpus_path}});

  auto all_layer_plan = [&](lab::surgery::RoutingMode rm, lab::surgery::FilteringMode fm) {
    lab::surgery::SurgeryPlan plan;
    for (size_t l = 0; l < m.config.layers.size(); ++l) {
      // Skip linear layers: no score matrix to intercept.
      if (m.config.layers[l].mechanism == lab::attn::Mechanism::linear) continue;
      lab::surgery::LayerDirective d;
      d.layer = static_cast<int>(l);
      d.routing = rm;
      d.filtering = fm;
      plan.layers.push_back(d);
    }
    return plan;
  };

  if (mode == "per-layer") {
    const auto rep = lab::surgery::per_layer_linearization_sweep(m, corpus, stride);
    write_sweep_csv(args.out_dir + "/per_layer.csv", rep, prov);
    // Rank profile of the current weights, for the cost-vs-rank correlation.
    const auto row = lab::train::cascade_row_for(m, 0);
    std::vector<double> costs;
    for (const auto& r : rep.results) costs.push_back(r.delta_ppl_pct);
    const double corr = lab::surgery::spearman(costs, row.layer_mean_routing_effrank);
    json out = {{"provenance", prov},
                {"baseline_ppl", rep.baseline_ppl},
                {"spearman_cost_vs_rank", lab::report::json_double(corr)},
                {"layer_ranks", row.layer_mean_routing_effrank}};
    json cells = json::array();
    for (const auto& r : rep.results) {
      cells.push_back({{"plan", r.plan_desc}, {"ppl", r.ppl}, {"delta_ppl_pct", r.delta_ppl_pct}});
    }
    out["results"] = cells;
    write_json_file(args.out_dir + "/per_layer.json", out);
    std::cout << "baseline " << fmt(rep.baseline_ppl) << ", spearman(cost, rank) " << fmt(corr)
              << "\n";
  } else if (mode == "cumulative") {
    const auto rep = lab::surgery::cumulative_linearization_sweep(m, corpus, stride);
    write_sweep_csv(args.out_dir + "/cumulative.csv", rep, prov);
    std::cout << "baseline " << fmt(rep.baseline_ppl) << ", full linearization "
              << fmt(rep.results.back().delta_ppl_pct) << "%\n";
  } else if (mode == "grid") {
    auto parse_ranks = [](const std::string& s) {
      std::vector<int> out;
      std::string cur;
      for (char c : s + ",") {
        if (c == ',') {
          if (cur == "full") out.push_back(-1);
          else if (!cur.empty()) out.push_back(std::stoi(cur));
          cur.clear();
        } else {
          cur += c;
        }
      }
      return out;
    };
    const auto rep = lab::surgery::joint_rank_grid(m, corpus, stride,
                                                   parse_ranks(routing_ranks_arg),
                                                   parse_ranks(filtering_ranks_arg));
    lab::report::Csv csv;
    csv.provenance_json = prov.dump();
    csv.header = {"routing_rank"};
    for (int fr : rep.filtering_ranks) {
      csv.header.push_back(fr < 0 ? "full" : std::to_string(fr));
    }
    for (size_t i = 0; i < rep.cells.size(); ++i) {
      std::vector<std::string> row{rep.routing_ranks[i] < 0
                                       ? std::string("full")
                                       : std::to_string(rep.routing_ranks[i])};
      for (const auto& cell : rep.cells[i]) row.push_back(fmt(cell.ppl));
      csv.rows.push_back(std::move(row));
    }
    csv.write(args.out_dir + "/grid.csv");
    std::cout << "grid " << rep.cells.size() << "x" << rep.filtering_ranks.size()
              << ", baseline " << fmt(rep.baseline_ppl) << "\n";
  } else if (mode == "collapse-damping" || mode == "zero-routing") {
    const double baseline = lab::model::perplexity(m, corpus, stride);
    const auto plan = mode == "collapse-damping"
                          ? all_layer_plan(lab::surgery::RoutingMode::full,
                                           lab::surgery::FilteringMode::per_head_mean_scalar)
                          : all_layer_plan(lab::surgery::RoutingMode::zero,
                                           lab::surgery::FilteringMode::full);
    const double ppl = lab::surgery::eval_with_plan(m, corpus, stride, plan);
    lab::surgery::SweepReport rep;
    rep.baseline_ppl = baseline;
    rep.results.push_back({mode, ppl, 100.0 * (ppl - baseline) / baseline});
    write_sweep_csv(args.out_dir + "/" + (mode == "collapse-damping" ? "collapse_damping.csv"
                                                                     : "zero_routing.csv"),
                    rep, prov);
    std::cout << mode << ": " << fmt(baseline) << " -> " << fmt(ppl) << " (+"
              << fmt(rep.results[0].delta_ppl_pct) << "%)\n";
  } else if (mode == "apply") {
    const auto plan = plan_from_json(read_json_file(plan_path), m.config);
    const double baseline = lab::model::perplexity(m, corpus, stride);
    const double ppl = lab::surgery::eval_with_plan(m, corpus, stride, plan);
    lab::surgery::SweepReport rep;
    rep.baseline_ppl = baseline;
    rep.results.push_back({"plan:" + plan_path, ppl, 100.0 * (ppl - baseline) / baseline});
    write_sweep_csv(args.out_dir + "/apply.csv", rep, prov);
    std::cout << "baseline " << fmt(baseline) << " -> " << fmt(ppl) << "\n";
  } else {
    throw lab::model::ConfigError("unknown surgery mode '" + mode + "'");
  }
  std::cout << "wrote " << args.out_dir << "\n";
  return 0;
}

lab::arch::RankProfile profile_from_file(const std::string& path) {
  lab::arch::RankProfile profile;
  if (path.size() > 4 && path.substr(path.size() - 4) == ".csv") {
    // cascade_trace.csv: use the last logged row.
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line, last;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (header.empty()) {
        std::string cur;
        for (char c : line + ",") {
          if (c == ',') {
            header.push_back(cur);
            cur.clear();
          } else {
            cur += c;
          }
        }
        continue;
      }
      last = line;
    }
    if (header.empty() || last.empty()) {
      throw lab::model::ConfigError("trace csv has no data rows: " + path);
    }
    std::vector<std::string> cells;
    std::string cur;
    for (char c : last + ",") {
      if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    for (size_t i = 0; i < header.size() && i < cells.size(); ++i) {
      if (header[i].rfind("rank_l", 0) == 0) profile.ranks.push_back(std::stod(cells[i]));
    }
    if (profile.ranks.empty()) {
      throw lab::model::ConfigError("trace csv has no rank_l* columns: " + path);
    }
  } else {
    const json j = read_json_file(path);
    lab::report::reject_unknown_keys(j, {"ranks", "d_head"}, "rank profile");
    profile.ranks = j.at("ranks").get<std::vector<double>>();
    profile.d_head_measured = j.value("d_head", 64);
  }
  return profile;
}

int run_prescribe(const std::string& profile_path, const std::string& policy_name, int k,
                  int d_model, int base_heads, int base_d_head, long context,
                  const std::string& out_path) {
  const auto profile = profile_from_file(profile_path);
  const auto policy = lab::arch::policy_from_string(policy_name);
  lab::arch::PrescribeOptions opts;
  opts.d_model = d_model;
  opts.base_heads = base_heads;
  opts.base_d_head = base_d_head;
  opts.context = context;
  opts.linear_boundary_k = k;
  const auto p = lab::arch::prescribe(profile, policy, opts);

  json layers = json::array();
  json model_layers = json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"mechanism", lab::attn::to_string(l.mechanism)},
                      {"heads", l.heads},
                      {"d_head", l.d_head}});
    model_layers.push_back({{"mechanism", lab::attn::to_string(l.mechanism)},
                            {"heads", l.heads},
                            {"d_head", l.d_head},
                            {"layer_norm", true}});
  }
  const json prov = lab::report::provenance(
      {{"policy", policy_name}, {"k", k}, {"d_model", d_model}}, 0, {{"profile", profile_path}});
  const json out = {{"provenance", prov},
                    {"policy", policy_name},
                    {"layers", layers},
                    {"model_layers", model_layers},
                    {"accounting",
                     {{"attn_params", p.attn_params},
                      {"baseline_attn_params", p.baseline_attn_params},
                      {"attn_param_savings_pct", p.attn_param_savings_pct},
                      {"attn_flops_per_token", p.attn_flops_per_token},
                      {"baseline_attn_flops_per_token", p.baseline_attn_flops_per_token},
                      {"attn_flops_savings_pct", p.attn_flops_savings_pct},
                      {"flop_convention", p.flop_convention}}}};
  write_json_file(out_path, out);

  std::cout << "policy " << policy_name << ": attn params " << p.attn_params << " ("
            << fmt(p.attn_param_savings_pct) << "% saved), flops/token "
            << p.attn_flops_per_token << " (" << fmt(p.attn_flops_savings_pct)
            << "% saved)\nwrote " << out_path << "\n";
  return 0;
}

int run_sweep_epsilon(const std::string& config_path, const std::string& eps_arg,
                      const std::string& seeds_arg, std::string out_dir) {
  TrainConfigFile cfg = load_train_config(config_path);
  if (out_dir.empty()) out_dir = "sweep_out";
  fs::create_directories(out_dir);
  auto parse_doubles = [](const std::string& s) {
    std::vector<double> out;
    std::string cur;
    for (char c : s + ",") {
      if (c == ',') {
        if (!cur.empty()) out.push_back(std::stod(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    return out;
  };
  std::vector<double> epsilons = parse_doubles(eps_arg);
  std::vector<uint64_t> seeds;
  for (double s : parse_doubles(seeds_arg)) seeds.push_back(static_cast<uint64_t>(s));

  const auto corpus = lab::corpus::load_bytes(cfg.corpus_path);
  const auto rows = lab::train::epsilon_sweep(cfg.model, cfg.train, corpus, epsilons, seeds);

  const json prov = lab::report::provenance(
      {{"model", lab::report::to_json(cfg.model)}, {"train", lab::report::to_json(cfg.train)}},
      cfg.train.seed, {{"config", config_path}, {"corpus", cfg.corpus_path}});
  lab::report::Csv csv;
  csv.provenance_json = prov.dump();
  csv.header = {"epsilon", "seed", "status", "divergence_step", "final_val_ppl"};
  for (const auto& r : rows) {
    csv.rows.push_back({fmt(r.epsilon), std::to_string(r.seed),
                        lab::train::to_string(r.outcome.status),
                        r.outcome.divergence_step ? std::to_string(*r.outcome.divergence_step)
                                                  : "",
                        fmt(r.outcome.final_val_ppl)});
  }
  csv.write(out_dir + "/epsilon_sweep.csv");

  // Per-epsilon convergence summary.
  lab::report::Csv summary;
  summary.provenance_json = prov.dump();
  summary.header = {"epsilon", "seeds", "converged", "diverged", "val_ppl_mean"};
  for (double e : epsilons) {
    int total = 0, conv = 0;
    double ppl_sum = 0.0;
    for (const auto& r : rows) {
      if (r.epsilon != e) continue;
      ++total;
      if (r.outcome.status == lab::train::RunStatus::converged) {
        ++conv;
        ppl_sum += r.outcome.final_val_ppl;
      }
    }
    summary.rows.push_back({fmt(e), std::to_string(total), std::to_string(conv),
                            std::to_string(total - conv),
                            conv > 0 ? fmt(ppl_sum / conv) : "nan"});
  }
  summary.write(out_dir + "/epsilon_summary.csv");
  std::cout << rows.size() << " runs, wrote " << out_dir << "\n";
  return 0;
}

int run_make_corpus(long bytes, uint64_t seed, const std::string& out_path) {
  if (bytes <= 0) throw lab::model::ConfigError("--bytes must be positive");
  lab::report::write_text_file(out_path, lab::corpus::generate(static_cast<size_t>(bytes), seed));
  std::cout << "wrote " << bytes << " bytes to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention spectrum lab"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  std::string config_path, out_dir;
  train->add_option("--config", config_path, "config JSON")->required();
  train->add_option("--out", out_dir, "output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "overlapping-stride perplexity of a checkpoint");
  std::string ckpt, corpus_path, eval_out;
  int stride = 0;
  eval->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
  eval->add_option("--corpus", corpus_path, "byte corpus")->required();
  eval->add_option("--stride", stride, "window stride (default context/2)");
  eval->add_option("--out", eval_out, "optional JSON output path");

  // probe
  auto* probe = app.add_subcommand("probe", "per-head spectral statistics of an archive");
  std::string archive_path, convention = "toolkit", sequences_path, probe_out = "probe_out";
  int heads = 0;
  bool sequence_level = false;
  probe->add_option("--archive", archive_path, "tensor archive")->required();
  probe->add_option("--convention", convention, "toolkit|gpt2-fused");
  probe->add_option("--heads", heads, "head count (required for gpt2-fused)");
  probe->add_option("--out", probe_out, "output directory");
  probe->add_flag("--sequence-level", sequence_level, "also run sequence-level probing");
  probe->add_option("--sequences", sequences_path, "text file, one sequence per line");
  bool no_truncate = false;
  probe->add_flag("--no-truncate-sequences", no_truncate,
                  "error on sequences longer than the model context instead of clipping");

  // surgery
  auto* surgery = app.add_subcommand("surgery", "inference-time spectral interventions");
  surgery->require_subcommand(1);
  SurgeryArgs sargs;
  std::string plan_path, routing_ranks = "full,4,2,0", filtering_ranks = "full,4,2,0";
  std::vector<CLI::App*> modes;
  for (const char* name : {"per-layer", "cumulative", "grid", "collapse-damping", "zero-routing",
                           "apply"}) {
    auto* sc = surgery->add_subcommand(name);
    sc->add_option("--checkpoint", sargs.checkpoint, "checkpoint archive")->required();
    sc->add_option("--corpus", sargs.corpus_path, "held-out eval corpus")->required();
    sc->add_option("--out", sargs.out_dir, "output directory");
    sc->add_option("--stride", sargs.stride, "eval stride (default context/2)");
    sc->add_option("--min-tokens-factor", sargs.min_tokens_factor,
                   "required eval tokens as a multiple of context");
    if (std::string(name) == "grid") {
      sc->add_option("--routing-ranks", routing_ranks, "comma list, 'full' or ints");
      sc->add_option("--filtering-ranks", filtering_ranks, "comma list, 'full' or ints");
    }
    if (std::string(name) == "apply") {
      sc->add_option("--plan", plan_path, "surgery plan JSON")->required();
    }
    modes.push_back(sc);
  }

  // prescribe
  auto* prescribe = app.add_subcommand("prescribe", "turn a rank profile into an architecture");
  std::string profile_path, policy = "compressed", prescription_out = "prescription.json";
  int boundary_k = 0, d_model = 768, base_heads = 12, base_d_head = 64;
  long context_n = 1024;
  prescribe->add_option("--profile", profile_path, "rank profile JSON or cascade trace CSV")
      ->required();
  prescribe->add_option("--policy", policy, "compressed|wide|deep|linear-boundary");
  prescribe->add_option("--k", boundary_k, "linear boundary K");
  prescribe->add_option("--d-model", d_model, "model width");
  prescribe->add_option("--heads", base_heads, "baseline head count");
  prescribe->add_option("--d-head", base_d_head, "baseline head dim");
  prescribe->add_option("--context", context_n, "context for FLOP accounting");
  prescribe->add_option("--out", prescription_out, "output JSON");

  // sweep-epsilon
  auto* sweep = app.add_subcommand("sweep-epsilon", "train across damping offsets and seeds");
  std::string eps_list = "0,0.01,0.05,0.1", seed_list = "1,2,3", sweep_config, sweep_out;
  sweep->add_option("--config", sweep_config, "base train config JSON")->required();
  sweep->add_option("--epsilons", eps_list, "comma-separated epsilon values");
  sweep->add_option("--seeds", seed_list, "comma-separated seeds");
  sweep->add_option("--out", sweep_out, "output directory");

  // make-corpus
  auto* mk = app.add_subcommand("make-corpus", "generate a deterministic synthetic byte corpus");
  long corpus_bytes = 6'000'000;
  uint64_t corpus_seed = 1;
  std::string corpus_out = "corpus.txt";
  mk->add_option("--bytes", corpus_bytes, "corpus size in bytes");
  mk->add_option("--seed", corpus_seed, "generator seed");
  mk->add_option("--out", corpus_out, "output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_train(config_path, out_dir);
    if (*eval) return run_eval(ckpt, corpus_path, stride, eval_out);
    if (*probe) {
      return run_probe(archive_path, convention, heads, probe_out, sequence_level, sequences_path,
                       !no_truncate);
    }
    if (*surgery) {
      for (auto* sc : modes) {
        if (sc->parsed()) {
          return run_surgery(sc->get_name(), sargs, plan_path, routing_ranks, filtering_ranks);
        }
      }
    }
    if (*prescribe) {
      return run_prescribe(profile_path, policy, boundary_k, d_model, base_heads, base_d_head,
                           context_n, prescription_out);
    }
    if (*sweep) return run_sweep_epsilon(sweep_config, eps_list, seed_list, sweep_out);
    if (*mk) return run_make_corpus(corpus_bytes, corpus_seed, corpus_out);
  } catch (const lab::model::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const lab::probe::ArchiveError& e) {
    std::cerr << "archive error: " << e.what() << "\n";
    return 4;
  } catch (const lab::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
