#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lab::corpus {

// Deterministic synthetic byte corpus: seeded second-order word chains plus
// periodic key/echo recall lines whose digits can only be predicted by
// copying them from earlier in the window.
std::string generate(size_t n_bytes, uint64_t seed);

std::vector<uint8_t> load_bytes(const std::string& path);  // throws std::runtime_error on IO
std::vector<std::string> load_lines(const std::string& path);

}  // namespace lab::corpus
