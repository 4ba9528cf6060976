#include "lab/corpus.hpp"

#include <array>
#include <fstream>
#include <stdexcept>

#include "lab/rng.hpp"

namespace lab::corpus {

namespace {

constexpr std::array<const char*, 187> kWords = {
    "the", "a", "an", "this", "that", "these", "those", "some", "every", "each",
    "cat", "dog", "fox", "bird", "fish", "horse", "mouse", "wolf", "bear", "lion",
    "river", "mountain", "forest", "valley", "field", "garden", "road", "bridge", "tower", "wall",
    "house", "door", "window", "table", "chair", "book", "letter", "map", "clock", "lamp",
    "runs", "walks", "jumps", "sleeps", "waits", "watches", "carries", "builds", "breaks", "finds",
    "holds", "moves", "opens", "closes", "follows", "leads", "crosses", "climbs", "reads", "writes",
    "quick", "slow", "bright", "dark", "quiet", "loud", "small", "large", "old", "new",
    "red", "blue", "green", "grey", "warm", "cold", "heavy", "light", "sharp", "smooth",
    "under", "over", "near", "beside", "behind", "beyond", "through", "around", "across", "within",
    "morning", "evening", "night", "winter", "summer", "spring", "autumn", "today", "tomorrow",
    "yesterday", "stone", "water", "wind", "rain", "snow", "fire", "smoke", "cloud", "star",
    "moon", "sun", "shadow", "path", "trail", "gate", "fence", "barn", "mill", "well",
    "farmer", "sailor", "teacher", "doctor", "baker", "miller", "hunter", "keeper", "rider",
    "walker", "speaks", "listens", "answers", "asks", "remembers", "forgets", "begins", "ends",
    "returns", "arrives", "village", "city", "harbor", "market", "square", "street", "corner",
    "station", "library", "museum", "early", "late", "soon", "often", "rarely", "always", "never",
    "again", "still", "almost", "north", "south", "east", "west", "first", "second", "third",
    "last", "next", "other", "branch", "root", "leaf", "seed", "grain", "stack", "plank",
    "rope", "wheel", "cart", "boat", "sail", "anchor", "lantern", "candle", "mirror", "basket",
    "barrel",
};

uint64_t mix(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ull;
  x ^= x >> 33;
  return x;
}

}  // namespace

std::string generate(size_t n_bytes, uint64_t seed) {
  Rng rng(seed);
  std::string out;
  out.reserve(n_bytes + 512);
  const uint64_t table_salt = mix(seed ^ 0x9e3779b97f4a7c15ull);

  int w2 = static_cast<int>(rng.uniform_below(kWords.size()));
  int w1 = static_cast<int>(rng.uniform_below(kWords.size()));
  auto sentence = [&] {
    const int len = 6 + static_cast<int>(rng.uniform_below(9));
    for (int i = 0; i < len; ++i) {
      // 16 admissible successors per (w2, w1) context.
      const uint64_t h =
          mix(table_salt ^ (static_cast<uint64_t>(w2) << 32) ^ static_cast<uint64_t>(w1));
      const int pick = static_cast<int>(rng.uniform_below(16));
      const int next = static_cast<int>(
          (h + static_cast<uint64_t>(pick) * 0x632be59bd9b4e019ull) % kWords.size());
      std::string word = kWords[next];
      if (i == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      out += word;
      out += (i + 1 == len) ? "." : " ";
      w2 = w1;
      w1 = next;
    }
    out += "\n";
  };

  // Paragraphs interleave tagged key lines, plain sentences, and echo lines
  // that repeat the matching key's digits several sentences later. Predicting
  // an echo requires finding the right tag earlier in the window and copying
  // its digits: content-addressed, long-range routing work on top of the
  // local word statistics.
  while (out.size() < n_bytes) {
    const int n_keys = static_cast<int>(rng.uniform_below(4));  // 0..3
    char tags[3];
    char digits[3][7];
    for (int k = 0; k < n_keys; ++k) {
      tags[k] = static_cast<char>('a' + rng.uniform_below(5));
      for (int i = 0; i < 6; ++i) digits[k][i] = static_cast<char>('0' + rng.uniform_below(10));
      digits[k][6] = '\0';
      out += "key ";
      out += tags[k];
      out += ' ';
      out += digits[k];
      out += ".\n";
    }
    const int body = 2 + static_cast<int>(rng.uniform_below(3));
    for (int i = 0; i < body; ++i) sentence();
    // Echoes in a shuffled order.
    int order[3] = {0, 1, 2};
    for (int k = n_keys - 1; k > 0; --k) {
      std::swap(order[k], order[rng.uniform_below(static_cast<uint64_t>(k) + 1)]);
    }
    for (int k = 0; k < n_keys; ++k) {
      out += "echo ";
      out += tags[order[k]];
      out += ' ';
      out += digits[order[k]];
      out += ".\n";
    }
    sentence();
  }
  out.resize(n_bytes);
  return out;
}

std::vector<uint8_t> load_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus: " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

std::vector<std::string> load_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace lab::corpus
