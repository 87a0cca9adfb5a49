#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace frozenlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are raw little-endian buffers");

// Deterministic RNG. std::mt19937_64 state transitions are fixed by the
// standard; the distributions below are our own so that sampled values are
// bit-stable across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_{split(seed, 0x9e3779b97f4a7c15ull),
                                    split(seed, 0xbf58476d1ce4e5b9ull)} {}

  uint64_t next_u64() {
    // xoshiro-style mix over two splitmix streams
    uint64_t a = advance(s_[0]);
    uint64_t b = advance(s_[1]);
    return a ^ std::rotl(b, 23);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
    return uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

  // standard normal via Box-Muller (no spare caching; call order defines
  // the stream exactly)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // derive an independent stream, e.g. per example or per sample index
  Rng fork(uint64_t stream) const {
    Rng r(0);
    r.s_[0] = split(s_[0] ^ stream, 0x94d049bb133111ebull);
    r.s_[1] = split(s_[1] + stream, 0xd6e8feb86659fd93ull);
    return r;
  }

 private:
  static uint64_t split(uint64_t x, uint64_t mixer) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * mixer;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }
  static uint64_t advance(uint64_t& s) {
    s += 0x9e3779b97f4a7c15ull;
    uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  uint64_t s_[2];
};

// FNV-1a over raw bytes; used for frozen-parameter audits and config hashes.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[size_t(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Shortest round-trip decimal form; keeps emitted metric files bit-stable.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep = " ") {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Open-domain QA answer normalization: lowercase, drop punctuation, drop
// English articles, collapse whitespace.
inline std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    lowered.push_back(char(std::tolower(u)));
  }
  std::vector<std::string> kept;
  for (auto& tok : split_whitespace(lowered)) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    kept.push_back(tok);
  }
  return join(kept);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline void write_text(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out.write(content.data(), std::streamsize(content.size()));
}

}  // namespace frozenlm
