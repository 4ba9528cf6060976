#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lab/model.hpp"
#include "lab/spectral.hpp"

namespace lab::probe {

enum class ArchiveFault { malformed_header, overlapping_ranges, truncated_payload, io };

struct ArchiveError : std::runtime_error {
  ArchiveFault fault;
  ArchiveError(ArchiveFault f, const std::string& msg) : std::runtime_error(msg), fault(f) {}
};

// The de facto safetensors layout: an 8-byte little-endian header length, a
// JSON object mapping tensor names to {dtype, shape, data_offsets}, then the
// contiguous row-major little-endian payload.
struct TensorEntry {
  std::string dtype;  // F32 | F64 | F16 | BF16
  std::vector<long long> shape;
  uint64_t begin = 0, end = 0;  // byte range within the payload
};

struct TensorArchive {
  std::map<std::string, TensorEntry> entries;
  std::vector<uint8_t> payload;
  std::map<std::string, std::string> metadata;  // __metadata__, string-valued

  bool has(const std::string& name) const { return entries.count(name) > 0; }
  // 16-bit floats are upcast to f32 on read; f64 stays f64.
  std::vector<float> f32(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  const TensorEntry& entry(const std::string& name) const;
};

TensorArchive read_archive(const std::string& path);

struct NamedTensor {
  std::string name;
  std::string dtype;  // F32 or F64
  std::vector<long long> shape;
  std::vector<float> f32;
  std::vector<double> f64;
};
void write_archive(const std::string& path, const std::vector<NamedTensor>& tensors,
                   const std::map<std::string, std::string>& metadata = {});

// Checkpoints: model weights plus the config embedded as metadata.
void save_checkpoint(const std::string& path, const model::Model& m,
                     const std::map<std::string, std::string>& extra_metadata = {});
model::Model load_checkpoint(const std::string& path);

// How (layer, head) indices map onto archive tensor names.
//  - toolkit: separate per-layer wq/wk of shape d_model x (heads*d_head)
//  - gpt2_fused: one d_model x 3*d_model c_attn matrix per layer, Q|K|V fused
struct NamingConvention {
  enum class Kind { toolkit, gpt2_fused };
  Kind kind = Kind::toolkit;
  int heads = 0;  // required for gpt2_fused; toolkit archives carry it in metadata
};

std::vector<spectral::WeightKernel> per_head_kernels(const TensorArchive& archive,
                                                     const NamingConvention& convention);

struct HeadStats {
  int layer = 0;
  int head = 0;
  double rho_weight = 0.0;
  double effrank_r_weight = 0.0;
  double effrank_f_weight = 0.0;
  double max_re_lambda_weight = 0.0;
};

struct LayerAggregate {
  int layer = 0;
  double mean_rho = 0.0;
  double mean_effrank_r = 0.0;
  double mean_effrank_f = 0.0;
  double mean_max_re_lambda = 0.0;
};

struct HeadStatsReport {
  std::vector<HeadStats> heads;
  std::vector<LayerAggregate> layers;
};
HeadStatsReport head_statistics(const std::vector<spectral::WeightKernel>& kernels);

// Sequence-level probing of a model built by this toolkit: run each byte
// sequence forward, intercept the unmasked per-head score matrices, decompose,
// and average the statistics across sequences.
struct SequenceHeadStats {
  int layer = 0;
  int head = 0;
  double rho = 0.0;
  double effrank_r = 0.0;
  double effrank_f = 0.0;
  double max_re_lambda = 0.0;
};
std::vector<SequenceHeadStats> sequence_level_report(const model::Model& m,
                                                     const std::vector<std::string>& sequences);

}  // namespace lab::probe
