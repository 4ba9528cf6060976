#include "lab/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace lab::report {

uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for hashing: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    const auto got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

nlohmann::json json_double(double v) {
  if (std::isfinite(v)) return v;
  return fmt_double(v);
}

void reject_unknown_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                         const std::string& where) {
  if (!obj.is_object()) throw model::ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw model::ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

nlohmann::json to_json(const model::ModelConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) {
    layers.push_back({{"mechanism", attn::to_string(l.mechanism)},
                      {"heads", l.heads},
                      {"d_head", l.d_head},
                      {"layer_norm", l.layer_norm}});
  }
  return {{"vocab_size", cfg.vocab_size},
          {"d_model", cfg.d_model},
          {"context", cfg.context},
          {"ffn_mult", cfg.ffn_mult},
          {"tie_embeddings", cfg.tie_embeddings},
          {"sd_epsilon", cfg.sd_epsilon},
          {"seed", cfg.seed},
          {"layers", layers}};
}

model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"vocab_size", "d_model", "context", "ffn_mult", "tie_embeddings",
                       "sd_epsilon", "seed", "layers"},
                      "model config");
  model::ModelConfig cfg;
  try {
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.context = j.value("context", cfg.context);
    cfg.ffn_mult = j.value("ffn_mult", cfg.ffn_mult);
    cfg.tie_embeddings = j.value("tie_embeddings", cfg.tie_embeddings);
    cfg.sd_epsilon = j.value("sd_epsilon", cfg.sd_epsilon);
    cfg.seed = j.value("seed", cfg.seed);
    if (!j.contains("layers")) throw model::ConfigError("model config: missing 'layers'");
    cfg.layers.clear();
    for (const auto& lj : j.at("layers")) {
      reject_unknown_keys(lj, {"mechanism", "heads", "d_head", "layer_norm"},
                          "model config layers[]");
      model::LayerSpec l;
      l.mechanism = attn::mechanism_from_string(lj.value("mechanism", std::string("standard")));
      l.heads = lj.value("heads", l.heads);
      l.d_head = lj.value("d_head", l.d_head);
      l.layer_norm = lj.value("layer_norm", l.layer_norm);
      cfg.layers.push_back(l);
    }
  } catch (const nlohmann::json::exception& e) {
    throw model::ConfigError(std::string("model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw model::ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

nlohmann::json to_json(const train::TrainConfig& cfg) {
  return {{"lr", cfg.lr},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"weight_decay", cfg.weight_decay},
          {"warmup_steps", cfg.warmup_steps},
          {"total_steps", cfg.total_steps},
          {"min_lr_fraction", cfg.min_lr_fraction},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"epsilon", cfg.epsilon},
          {"log_every", cfg.log_every},
          {"rank_log_every", cfg.rank_log_every},
          {"val_fraction", cfg.val_fraction},
          {"eval_stride", cfg.eval_stride},
          {"prop1_monitor", cfg.prop1_monitor}};
}

train::TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"lr", "beta1", "beta2", "weight_decay", "warmup_steps", "total_steps",
                       "min_lr_fraction", "batch_size", "seed", "epsilon", "log_every",
                       "rank_log_every", "val_fraction", "eval_stride", "prop1_monitor"},
                      "train config");
  train::TrainConfig cfg;
  try {
    cfg.lr = j.value("lr", cfg.lr);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.total_steps = j.value("total_steps", cfg.total_steps);
    cfg.min_lr_fraction = j.value("min_lr_fraction", cfg.min_lr_fraction);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.epsilon = j.value("epsilon", cfg.epsilon);
    cfg.log_every = j.value("log_every", cfg.log_every);
    cfg.rank_log_every = j.value("rank_log_every", cfg.rank_log_every);
    cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
    cfg.eval_stride = j.value("eval_stride", cfg.eval_stride);
    cfg.prop1_monitor = j.value("prop1_monitor", cfg.prop1_monitor);
  } catch (const nlohmann::json::exception& e) {
    throw model::ConfigError(std::string("train config: ") + e.what());
  }
  return cfg;
}

void Csv::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (!provenance_json.empty()) out << "# provenance: " << provenance_json << "\n";
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
}

nlohmann::json provenance(const nlohmann::json& resolved_config, uint64_t seed,
                          const std::map<std::string, std::string>& input_paths) {
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& [label, path] : input_paths) {
    inputs[label] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
  }
  return {{"toolkit_version", kVersion},
          {"seed", seed},
          {"config", resolved_config},
          {"inputs", inputs}};
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

}  // namespace lab::report
