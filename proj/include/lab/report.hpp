#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lab/model.hpp"
#include "lab/trainer.hpp"

namespace lab::report {

inline constexpr const char* kVersion = "0.1.0";

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);  // throws std::runtime_error on IO failure
std::string hex64(uint64_t v);

// '.' decimal point, C locale; +-inf and nan spelled "inf"/"-inf"/"nan".
std::string fmt_double(double v);
nlohmann::json json_double(double v);  // numbers; non-finite values as strings

nlohmann::json to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const train::TrainConfig& cfg);
train::TrainConfig train_config_from_json(const nlohmann::json& j);

// Rejects keys outside `allowed`; throws model::ConfigError naming the key.
void reject_unknown_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                         const std::string& where);

// Comma-separated, '.' decimal, mandatory header row, LF line endings.
// Provenance is embedded as leading '#' comment lines.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::string provenance_json;  // emitted as "# provenance: <json>"
  void write(const std::string& path) const;
};

// Provenance block every output file embeds: toolkit version, resolved
// config, seed, and content hashes of the inputs.
nlohmann::json provenance(const nlohmann::json& resolved_config, uint64_t seed,
                          const std::map<std::string, std::string>& input_paths);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace lab::report
