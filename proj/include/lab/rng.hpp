#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lab {

// mt19937_64 is bit-exact per the standard; the uniform/normal mappings are
// hand-rolled because std:: distributions are implementation-defined and the
// toolkit promises seed-reproducible runs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // 53-bit mantissa uniform in [0, 1).
  double uniform01() { return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u = 1.0 - uniform01();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double theta = 6.283185307179586 * uniform01();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n). Modulo bias is immaterial for sampling batch
  // offsets; determinism is what matters here.
  uint64_t uniform_below(uint64_t n) { return n ? eng_() % n : 0; }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lab
