#include "lab/probe.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lab/rng.hpp"

using namespace lab;
using probe::ArchiveFault;
using probe::NamedTensor;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("lab_probe_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static inline int counter = 0;
};

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_raw_archive(const std::string& path, const std::string& header_json,
                       const std::vector<uint8_t>& payload, long forced_header_len = -1) {
  std::ofstream out(path, std::ios::binary);
  const uint64_t hlen =
      forced_header_len >= 0 ? static_cast<uint64_t>(forced_header_len) : header_json.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((hlen >> (8 * i)) & 0xff));
  out << header_json;
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
}

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = 256;
  cfg.d_model = 16;
  cfg.context = 20;
  cfg.layers.assign(2, {attn::Mechanism::sd, 2, 4, false});
  return cfg;
}

}  // namespace

TEST_CASE("archive round trip is bit-exact for f32 and f64") {
  TempDir dir;
  Rng rng(1);
  NamedTensor a{"alpha", "F32", {2, 3}, {1.0f, 2.5f, -3.25f, 0.0f, 1e-20f, 7.0f}, {}};
  NamedTensor b{"beta", "F64", {4}, {}, {0.1, -0.2, 12345.6789, 1e-300}};
  NamedTensor c{"gamma.weight", "F32", {2, 2}, {1, 2, 3, 4}, {}};
  probe::write_archive(dir.file("a.safetensors"), {a, b, c}, {{"note", "fixture"}});

  const auto arch = probe::read_archive(dir.file("a.safetensors"));
  CHECK(arch.metadata.at("note") == "fixture");
  CHECK(arch.f32("alpha") == a.f32);
  CHECK(arch.f64("beta") == b.f64);
  CHECK(arch.f32("gamma.weight") == std::vector<float>{1, 2, 3, 4});
  CHECK(arch.entry("alpha").shape == std::vector<long long>{2, 3});

  // Re-writing identical content produces identical bytes.
  probe::write_archive(dir.file("b.safetensors"), {a, b, c}, {{"note", "fixture"}});
  CHECK(read_all(dir.file("a.safetensors")) == read_all(dir.file("b.safetensors")));

  CHECK_THROWS_AS(arch.f32("missing"), std::invalid_argument);
}

TEST_CASE("archive faults are distinct errors") {
  TempDir dir;
  std::vector<uint8_t> payload(16, 0);

  // Header length exceeding the file size: truncation.
  write_raw_archive(dir.file("trunc.st"), "{}", payload, 4096);
  try {
    probe::read_archive(dir.file("trunc.st"));
    FAIL("expected truncation error");
  } catch (const probe::ArchiveError& e) {
    CHECK(e.fault == ArchiveFault::truncated_payload);
  }

  // Tensor range past the payload end: truncation.
  write_raw_archive(dir.file("short.st"),
                    R"({"t":{"dtype":"F32","shape":[8],"data_offsets":[0,32]}})", payload);
  try {
    probe::read_archive(dir.file("short.st"));
    FAIL("expected truncation error");
  } catch (const probe::ArchiveError& e) {
    CHECK(e.fault == ArchiveFault::truncated_payload);
  }

  // Broken JSON: malformed header.
  write_raw_archive(dir.file("bad.st"), R"({"t": {)", payload);
  try {
    probe::read_archive(dir.file("bad.st"));
    FAIL("expected malformed header");
  } catch (const probe::ArchiveError& e) {
    CHECK(e.fault == ArchiveFault::malformed_header);
  }

  // Unknown dtype and size mismatch: malformed header.
  write_raw_archive(dir.file("dtype.st"),
                    R"({"t":{"dtype":"I8","shape":[4],"data_offsets":[0,4]}})", payload);
  CHECK_THROWS_AS(probe::read_archive(dir.file("dtype.st")), probe::ArchiveError);
  write_raw_archive(dir.file("size.st"),
                    R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})", payload);
  CHECK_THROWS_AS(probe::read_archive(dir.file("size.st")), probe::ArchiveError);

  // Overlapping ranges.
  write_raw_archive(dir.file("overlap.st"),
                    R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                    R"("b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
                    payload);
  try {
    probe::read_archive(dir.file("overlap.st"));
    FAIL("expected overlap error");
  } catch (const probe::ArchiveError& e) {
    CHECK(e.fault == ArchiveFault::overlapping_ranges);
  }

  CHECK_THROWS_AS(probe::read_archive(dir.file("does_not_exist.st")), probe::ArchiveError);
}

TEST_CASE("single 2x2 f32 tensor recovers exact values; f16 upcasts") {
  TempDir dir;
  // 1.0f, 2.0f, 3.0f, 4.0f little-endian.
  std::vector<uint8_t> payload;
  for (float f : {1.0f, 2.0f, 3.0f, 4.0f}) {
    const auto* p = reinterpret_cast<const uint8_t*>(&f);
    payload.insert(payload.end(), p, p + 4);
  }
  write_raw_archive(dir.file("t.st"),
                    R"({"m":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})", payload);
  const auto arch = probe::read_archive(dir.file("t.st"));
  CHECK(arch.f32("m") == std::vector<float>{1, 2, 3, 4});

  // F16 1.0 = 0x3c00, -2.0 = 0xc000; BF16 1.5 = 0x3fc0.
  std::vector<uint8_t> p16{0x00, 0x3c, 0x00, 0xc0, 0xc0, 0x3f};
  write_raw_archive(dir.file("h.st"),
                    R"({"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},)"
                    R"("b":{"dtype":"BF16","shape":[1],"data_offsets":[4,6]}})",
                    p16);
  const auto arch16 = probe::read_archive(dir.file("h.st"));
  CHECK(arch16.f32("h") == std::vector<float>{1.0f, -2.0f});
  CHECK(arch16.f32("b") == std::vector<float>{1.5f});
}

TEST_CASE("checkpoint save/load round trip") {
  TempDir dir;
  model::Model m = model::build(tiny_config(), 77);
  probe::save_checkpoint(dir.file("ckpt.safetensors"), m);
  model::Model loaded = probe::load_checkpoint(dir.file("ckpt.safetensors"));
  REQUIRE(loaded.params.size() == m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    CHECK(loaded.params[i].name == m.params[i].name);
    CHECK(loaded.params[i].tensor.values() == m.params[i].tensor.values());
  }
  CHECK(loaded.config.layers.size() == m.config.layers.size());
  CHECK(loaded.config.seed == m.config.seed);
}

TEST_CASE("per-head kernels: toolkit layout, fused layout, layout invariance") {
  TempDir dir;
  Rng rng(5);
  const int dm = 8, heads = 2, dh = 4;

  // Known per-head blocks.
  std::vector<float> wq(dm * heads * dh), wk(dm * heads * dh);
  for (auto& x : wq) x = static_cast<float>(rng.normal());
  for (auto& x : wk) x = static_cast<float>(rng.normal());

  // Toolkit layout archive.
  {
    std::vector<NamedTensor> ts;
    ts.push_back({"layers.0.attn.wq", "F32", {dm, heads * dh}, wq, {}});
    ts.push_back({"layers.0.attn.wk", "F32", {dm, heads * dh}, wk, {}});
    probe::write_archive(dir.file("toolkit.st"), ts, {});
  }
  probe::NamingConvention tc;
  tc.kind = probe::NamingConvention::Kind::toolkit;
  tc.heads = heads;
  const auto kernels_toolkit =
      probe::per_head_kernels(probe::read_archive(dir.file("toolkit.st")), tc);
  REQUIRE(kernels_toolkit.size() == heads);

  // Hand-computed kernel for head h.
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < dh; ++i) {
      for (int j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (int r = 0; r < dm; ++r) {
          acc += static_cast<double>(wq[r * heads * dh + h * dh + i]) *
                 wk[r * heads * dh + h * dh + j];
        }
        acc /= std::sqrt(static_cast<double>(dh));
        CHECK(kernels_toolkit[h].m(i, j) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }

  // GPT-2 fused layout encoding the same mathematical weights (d_model = 8,
  // 2 heads of d_head 4; V block arbitrary).
  {
    std::vector<float> fused(dm * 3 * dm);
    for (int r = 0; r < dm; ++r) {
      for (int c = 0; c < dm; ++c) {
        fused[r * 3 * dm + c] = wq[r * dm + c];
        fused[r * 3 * dm + dm + c] = wk[r * dm + c];
        fused[r * 3 * dm + 2 * dm + c] = 0.123f;
      }
    }
    std::vector<NamedTensor> ts;
    ts.push_back({"h.0.attn.c_attn.weight", "F32", {dm, 3 * dm}, fused, {}});
    probe::write_archive(dir.file("fused.st"), ts, {});
  }
  probe::NamingConvention fc;
  fc.kind = probe::NamingConvention::Kind::gpt2_fused;
  fc.heads = heads;
  const auto kernels_fused = probe::per_head_kernels(probe::read_archive(dir.file("fused.st")), fc);
  REQUIRE(kernels_fused.size() == heads);
  for (int h = 0; h < heads; ++h) {
    for (size_t i = 0; i < kernels_fused[h].m.a.size(); ++i) {
      CHECK(std::fabs(kernels_fused[h].m.a[i] - kernels_toolkit[h].m.a[i]) <= 1e-12);
    }
  }

  // Identity Q, K blocks give I / sqrt(d_head).
  {
    std::vector<float> iq(dm * dm, 0.0f);
    for (int i = 0; i < dm; ++i) iq[i * dm + i] = 1.0f;
    std::vector<NamedTensor> ts;
    ts.push_back({"layers.0.attn.wq", "F32", {dm, dm}, iq, {}});
    ts.push_back({"layers.0.attn.wk", "F32", {dm, dm}, iq, {}});
    probe::write_archive(dir.file("eye.st"), ts, {});
    probe::NamingConvention ic;
    ic.heads = 2;
    const auto ks = probe::per_head_kernels(probe::read_archive(dir.file("eye.st")), ic);
    REQUIRE(ks.size() == 2);
    for (const auto& k : ks) {
      for (int i = 0; i < 4; ++i) {
        CHECK(k.m(i, i) == doctest::Approx(1.0 / std::sqrt(4.0)).epsilon(1e-12));
      }
    }
  }

  // Missing tensors and inconsistent head counts surface as errors.
  probe::NamingConvention wrong = fc;
  wrong.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_WITH_AS(
      probe::per_head_kernels(probe::read_archive(dir.file("fused.st")), wrong),
      doctest::Contains("divisible"), std::invalid_argument);
  probe::NamingConvention tk;
  tk.heads = 2;
  CHECK_THROWS_AS(probe::per_head_kernels(probe::read_archive(dir.file("fused.st")), tk),
                  std::invalid_argument);
}

TEST_CASE("head statistics: pure skew and identity kernels") {
  spectral::WeightKernel skew;
  skew.layer = 0;
  skew.head = 0;
  skew.m = spectral::Mat(4, 4);
  skew.m(0, 1) = 1.0;
  skew.m(1, 0) = -1.0;
  skew.m(2, 3) = 0.5;
  skew.m(3, 2) = -0.5;

  spectral::WeightKernel ident;
  ident.layer = 1;
  ident.head = 0;
  ident.m = spectral::Mat::identity(4);

  const auto rep = probe::head_statistics({skew, ident});
  REQUIRE(rep.heads.size() == 2);
  CHECK(std::isinf(rep.heads[0].rho_weight));
  CHECK(std::fabs(rep.heads[0].max_re_lambda_weight) <= 1e-9);
  CHECK(rep.heads[1].rho_weight == 0.0);
  CHECK(rep.heads[1].effrank_f_weight == doctest::Approx(4.0).epsilon(1e-9));
  REQUIRE(rep.layers.size() == 2);
  CHECK(rep.layers[0].layer == 0);
  CHECK(rep.layers[1].mean_effrank_f == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("sequence-level probing") {
  model::Model m = model::build(tiny_config(), 3);

  // Single-token sequence: 1x1 scores, no skew possible.
  const auto single = probe::sequence_level_report(m, {"a"});
  REQUIRE(single.size() == 4);  // 2 layers x 2 heads
  for (const auto& h : single) CHECK(h.rho == 0.0);

  // Duplicated sequences give identical reports.
  const auto once = probe::sequence_level_report(m, {"the cat sat"});
  const auto twice = probe::sequence_level_report(m, {"the cat sat", "the cat sat"});
  REQUIRE(once.size() == twice.size());
  for (size_t i = 0; i < once.size(); ++i) {
    CHECK(once[i].rho == doctest::Approx(twice[i].rho).epsilon(1e-12));
    CHECK(once[i].effrank_r == doctest::Approx(twice[i].effrank_r).epsilon(1e-12));
  }

  // The unmasked protocol: intercepted scores carry a nonzero upper triangle.
  attn::AttnIntercept hooks;
  double upper_mass = 0.0;
  hooks.on_scores = [&](int, int, attn::Mechanism, int n, float* scores) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) upper_mass += std::fabs(scores[i * n + j]);
  };
  Tape t(false);
  std::vector<int> toks{104, 101, 108, 108, 111};
  m.forward(t, toks, &hooks);
  CHECK(upper_mass > 0.0);

  CHECK_THROWS_WITH_AS(probe::sequence_level_report(m, {std::string(100, 'x')}),
                       doctest::Contains("longer"), std::invalid_argument);
  CHECK_THROWS_AS(probe::sequence_level_report(m, {}), std::invalid_argument);
}
