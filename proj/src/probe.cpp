#include "lab/probe.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lab/report.hpp"

namespace lab::probe {

namespace {

size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw ArchiveError(ArchiveFault::malformed_header, "unsupported dtype '" + dtype + "'");
}

float half_to_float(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t man = h & 0x3ffu;
  uint32_t bits;
  if (exp == 0) {
    if (man == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while (!(man & 0x400u)) {
        man <<= 1;
        --exp;
      }
      man &= 0x3ffu;
      bits = sign | (exp << 23) | (man << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000u | (man << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (man << 13);
  }
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

float bf16_to_float(uint16_t h) {
  const uint32_t bits = static_cast<uint32_t>(h) << 16;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

long long numel_of(const std::vector<long long>& shape) {
  long long n = 1;
  for (long long d : shape) {
    if (d < 0) throw ArchiveError(ArchiveFault::malformed_header, "negative shape extent");
    n *= d;
  }
  return n;
}

}  // namespace

const TensorEntry& TensorArchive::entry(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) {
    throw std::invalid_argument("archive has no tensor named '" + name + "'");
  }
  return it->second;
}

std::vector<double> TensorArchive::f64(const std::string& name) const {
  const TensorEntry& e = entry(name);
  const long long n = numel_of(e.shape);
  std::vector<double> out(n);
  const uint8_t* p = payload.data() + e.begin;
  if (e.dtype == "F32") {
    for (long long i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, p + 4 * i, 4);
      out[i] = f;
    }
  } else if (e.dtype == "F64") {
    std::memcpy(out.data(), p, 8 * n);
  } else {
    for (long long i = 0; i < n; ++i) {
      uint16_t h;
      std::memcpy(&h, p + 2 * i, 2);
      out[i] = e.dtype == "F16" ? half_to_float(h) : bf16_to_float(h);
    }
  }
  return out;
}

std::vector<float> TensorArchive::f32(const std::string& name) const {
  const auto d = f64(name);
  std::vector<float> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>(d[i]);
  return out;
}

TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveFault::io, "cannot open archive: " + path);
  std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() < 8) {
    throw ArchiveError(ArchiveFault::malformed_header, "file too small for a header length field");
  }
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<uint64_t>(raw[i]) << (8 * i);
  if (8 + header_len > raw.size()) {
    throw ArchiveError(ArchiveFault::truncated_payload,
                       "header length " + std::to_string(header_len) + " exceeds file size " +
                           std::to_string(raw.size()));
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + 8, raw.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveFault::malformed_header, std::string("header JSON: ") + e.what());
  }
  if (!header.is_object()) {
    throw ArchiveError(ArchiveFault::malformed_header, "header is not a JSON object");
  }

  TensorArchive a;
  a.payload.assign(raw.begin() + 8 + header_len, raw.end());
  for (const auto& [name, val] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : val.items()) {
        if (!v.is_string()) {
          throw ArchiveError(ArchiveFault::malformed_header, "__metadata__ values must be strings");
        }
        a.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    TensorEntry e;
    try {
      e.dtype = val.at("dtype").get<std::string>();
      e.shape = val.at("shape").get<std::vector<long long>>();
      const auto off = val.at("data_offsets").get<std::vector<uint64_t>>();
      if (off.size() != 2) throw ArchiveError(ArchiveFault::malformed_header, "data_offsets arity");
      e.begin = off[0];
      e.end = off[1];
    } catch (const nlohmann::json::exception& ex) {
      throw ArchiveError(ArchiveFault::malformed_header,
                         "tensor '" + name + "': " + ex.what());
    }
    const size_t ds = dtype_size(e.dtype);
    const long long n = numel_of(e.shape);
    if (e.end < e.begin || e.end - e.begin != static_cast<uint64_t>(n) * ds) {
      throw ArchiveError(ArchiveFault::malformed_header,
                         "tensor '" + name + "': byte range does not match dtype*numel");
    }
    if (e.end > a.payload.size()) {
      throw ArchiveError(ArchiveFault::truncated_payload,
                         "tensor '" + name + "' extends past the payload (" +
                             std::to_string(e.end) + " > " + std::to_string(a.payload.size()) +
                             ")");
    }
    a.entries.emplace(name, std::move(e));
  }

  std::vector<std::pair<uint64_t, uint64_t>> ranges;
  for (const auto& [name, e] : a.entries) {
    if (e.end > e.begin) ranges.emplace_back(e.begin, e.end);
  }
  std::sort(ranges.begin(), ranges.end());
  for (size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw ArchiveError(ArchiveFault::overlapping_ranges, "tensor byte ranges overlap");
    }
  }
  return a;
}

void write_archive(const std::string& path, const std::vector<NamedTensor>& tensors,
                   const std::map<std::string, std::string>& metadata) {
  // Offsets assigned in name order so identical content gives identical bytes.
  std::vector<const NamedTensor*> sorted;
  sorted.reserve(tensors.size());
  for (const auto& t : tensors) sorted.push_back(&t);
  std::sort(sorted.begin(), sorted.end(),
            [](const NamedTensor* a, const NamedTensor* b) { return a->name < b->name; });

  nlohmann::json header = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto* t : sorted) {
    const long long n = numel_of(t->shape);
    const size_t ds = t->dtype == "F32" ? 4 : 8;
    if (t->dtype != "F32" && t->dtype != "F64") {
      throw std::invalid_argument("write_archive: dtype must be F32 or F64, got " + t->dtype);
    }
    const size_t have = t->dtype == "F32" ? t->f32.size() : t->f64.size();
    if (static_cast<long long>(have) != n) {
      throw std::invalid_argument("write_archive: tensor '" + t->name + "' has " +
                                  std::to_string(have) + " values for shape product " +
                                  std::to_string(n));
    }
    header[t->name] = {{"dtype", t->dtype},
                       {"shape", t->shape},
                       {"data_offsets", {offset, offset + n * ds}}};
    offset += static_cast<uint64_t>(n) * ds;
  }
  if (!metadata.empty()) {
    nlohmann::json md = nlohmann::json::object();
    for (const auto& [k, v] : metadata) md[k] = v;
    header["__metadata__"] = md;
  }

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArchiveError(ArchiveFault::io, "cannot write archive: " + path);
  const uint64_t hlen = hs.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((hlen >> (8 * i)) & 0xff));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto* t : sorted) {
    if (t->dtype == "F32") {
      out.write(reinterpret_cast<const char*>(t->f32.data()),
                static_cast<std::streamsize>(t->f32.size() * 4));
    } else {
      out.write(reinterpret_cast<const char*>(t->f64.data()),
                static_cast<std::streamsize>(t->f64.size() * 8));
    }
  }
  if (!out) throw ArchiveError(ArchiveFault::io, "short write: " + path);
}

void save_checkpoint(const std::string& path, const model::Model& m,
                     const std::map<std::string, std::string>& extra_metadata) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(m.params.size());
  for (const auto& p : m.params) {
    NamedTensor t;
    t.name = p.name;
    t.dtype = "F32";
    t.shape = {p.tensor.rows(), p.tensor.cols()};
    t.f32.assign(p.tensor.values().begin(), p.tensor.values().end());
    tensors.push_back(std::move(t));
  }
  std::map<std::string, std::string> md = extra_metadata;
  md["config"] = report::to_json(m.config).dump();
  md["toolkit_version"] = report::kVersion;
  md["seed"] = std::to_string(m.config.seed);
  write_archive(path, tensors, md);
}

model::Model load_checkpoint(const std::string& path) {
  TensorArchive a = read_archive(path);
  auto it = a.metadata.find("config");
  if (it == a.metadata.end()) {
    throw std::invalid_argument("checkpoint missing embedded config metadata: " + path);
  }
  model::ModelConfig cfg = report::model_config_from_json(nlohmann::json::parse(it->second));
  model::Model m = model::build(cfg, cfg.seed);
  for (auto& p : m.params) {
    const TensorEntry& e = a.entry(p.name);
    if (e.shape.size() != 2 || e.shape[0] != p.tensor.rows() || e.shape[1] != p.tensor.cols()) {
      throw std::invalid_argument("checkpoint tensor '" + p.name + "' has unexpected shape");
    }
    const auto vals = a.f32(p.name);
    p.tensor.values().assign(vals.begin(), vals.end());
  }
  return m;
}

namespace {

spectral::Mat mat_from(const TensorArchive& a, const std::string& name, int rows, int cols) {
  const auto vals = a.f64(name);
  if (static_cast<long long>(vals.size()) != static_cast<long long>(rows) * cols) {
    throw std::invalid_argument("tensor '" + name + "' is not " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  spectral::Mat m(rows, cols);
  m.a = vals;
  return m;
}

spectral::Mat col_slice(const spectral::Mat& m, int c0, int c1) {
  spectral::Mat out(m.rows, c1 - c0);
  for (int i = 0; i < m.rows; ++i)
    for (int j = c0; j < c1; ++j) out(i, j - c0) = m(i, j);
  return out;
}

}  // namespace

std::vector<spectral::WeightKernel> per_head_kernels(const TensorArchive& archive,
                                                     const NamingConvention& convention) {
  std::vector<spectral::WeightKernel> kernels;
  if (convention.kind == NamingConvention::Kind::toolkit) {
    std::vector<std::pair<int, int>> layer_geometry;  // heads, d_head
    auto it = archive.metadata.find("config");
    if (it != archive.metadata.end()) {
      const auto cfg = report::model_config_from_json(nlohmann::json::parse(it->second));
      for (const auto& l : cfg.layers) layer_geometry.emplace_back(l.heads, l.d_head);
    }
    for (int li = 0;; ++li) {
      const std::string pre = "layers." + std::to_string(li) + ".attn.";
      if (!archive.has(pre + "wq")) {
        if (li == 0) throw std::invalid_argument("archive has no 'layers.0.attn.wq' tensor");
        break;
      }
      if (!archive.has(pre + "wk")) {
        throw std::invalid_argument("missing tensor '" + pre + "wk'");
      }
      const auto& eq = archive.entry(pre + "wq");
      if (eq.shape.size() != 2) throw std::invalid_argument("wq must be 2-D");
      const int dm = static_cast<int>(eq.shape[0]);
      const int width = static_cast<int>(eq.shape[1]);
      int heads = convention.heads;
      if (li < static_cast<int>(layer_geometry.size())) heads = layer_geometry[li].first;
      if (heads <= 0 || width % heads != 0) {
        throw std::invalid_argument("layer " + std::to_string(li) +
                                    ": inconsistent head count for projection width " +
                                    std::to_string(width));
      }
      const int dh = width / heads;
      const spectral::Mat wq = mat_from(archive, pre + "wq", dm, width);
      const spectral::Mat wk = mat_from(archive, pre + "wk", dm, width);
      for (int h = 0; h < heads; ++h) {
        kernels.push_back(spectral::weight_kernel(col_slice(wq, h * dh, (h + 1) * dh),
                                                  col_slice(wk, h * dh, (h + 1) * dh), dh, li, h));
      }
    }
    return kernels;
  }

  // gpt2_fused: one d_model x 3*d_model c_attn weight per layer, Q|K|V fused.
  if (convention.heads <= 0) {
    throw std::invalid_argument("gpt2_fused convention requires a positive head count");
  }
  for (int li = 0;; ++li) {
    const std::string name = "h." + std::to_string(li) + ".attn.c_attn.weight";
    if (!archive.has(name)) {
      if (li == 0) throw std::invalid_argument("archive has no 'h.0.attn.c_attn.weight' tensor");
      break;
    }
    const auto& e = archive.entry(name);
    if (e.shape.size() != 2 || e.shape[1] != 3 * e.shape[0]) {
      throw std::invalid_argument("tensor '" + name + "' is not d_model x 3*d_model");
    }
    const int dm = static_cast<int>(e.shape[0]);
    if (dm % convention.heads != 0) {
      throw std::invalid_argument("layer " + std::to_string(li) + ": d_model " +
                                  std::to_string(dm) + " not divisible by heads " +
                                  std::to_string(convention.heads));
    }
    const int dh = dm / convention.heads;
    const spectral::Mat fused = mat_from(archive, name, dm, 3 * dm);
    const spectral::Mat wq = col_slice(fused, 0, dm);
    const spectral::Mat wk = col_slice(fused, dm, 2 * dm);
    for (int h = 0; h < convention.heads; ++h) {
      kernels.push_back(spectral::weight_kernel(col_slice(wq, h * dh, (h + 1) * dh),
                                                col_slice(wk, h * dh, (h + 1) * dh), dh, li, h));
    }
  }
  return kernels;
}

HeadStatsReport head_statistics(const std::vector<spectral::WeightKernel>& kernels) {
  HeadStatsReport rep;
  rep.heads.resize(kernels.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < kernels.size(); ++i) {
    const auto& k = kernels[i];
    const auto s = spectral::analyze(k.m);
    rep.heads[i] = {k.layer, k.head, s.rho, s.effrank_r, s.effrank_f, s.max_re_lambda};
  }
  int max_layer = -1;
  for (const auto& h : rep.heads) max_layer = std::max(max_layer, h.layer);
  for (int l = 0; l <= max_layer; ++l) {
    LayerAggregate agg;
    agg.layer = l;
    int count = 0;
    for (const auto& h : rep.heads) {
      if (h.layer != l) continue;
      agg.mean_rho += h.rho_weight;
      agg.mean_effrank_r += h.effrank_r_weight;
      agg.mean_effrank_f += h.effrank_f_weight;
      agg.mean_max_re_lambda += h.max_re_lambda_weight;
      ++count;
    }
    if (count > 0) {
      agg.mean_rho /= count;
      agg.mean_effrank_r /= count;
      agg.mean_effrank_f /= count;
      agg.mean_max_re_lambda /= count;
      rep.layers.push_back(agg);
    }
  }
  return rep;
}

std::vector<SequenceHeadStats> sequence_level_report(const model::Model& m,
                                                     const std::vector<std::string>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("sequence_level_report: no sequences");
  struct Acc {
    double rho = 0, er = 0, ef = 0, mre = 0;
  };
  std::map<std::pair<int, int>, Acc> acc;
  for (const std::string& seq : sequences) {
    if (seq.empty()) throw std::invalid_argument("sequence_level_report: empty sequence");
    if (static_cast<int>(seq.size()) > m.config.context) {
      throw std::invalid_argument("sequence of " + std::to_string(seq.size()) +
                                  " tokens is longer than the model context " +
                                  std::to_string(m.config.context));
    }
    std::vector<int> tokens;
    tokens.reserve(seq.size());
    for (unsigned char c : seq) tokens.push_back(static_cast<int>(c));
    attn::AttnIntercept hooks;
    hooks.on_scores = [&](int layer, int head, attn::Mechanism, int n, float* scores) {
      const auto rep = spectral::analyze(spectral::Mat::from_f32(scores, n, n));
      Acc& a = acc[{layer, head}];
      a.rho += rep.rho;
      a.er += rep.effrank_r;
      a.ef += rep.effrank_f;
      a.mre += rep.max_re_lambda;
    };
    Tape tape(false);
    m.forward(tape, tokens, &hooks);
  }
  std::vector<SequenceHeadStats> out;
  const double inv = 1.0 / static_cast<double>(sequences.size());
  for (const auto& [key, a] : acc) {
    out.push_back({key.first, key.second, a.rho * inv, a.er * inv, a.ef * inv, a.mre * inv});
  }
  return out;
}

}  // namespace lab::probe
