#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace debias {

// 64-bit FNV-1a. Used for manifest/provenance hashes, not security.
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Shortest-exact is not needed for CSV output; 17 significant digits always
// round-trips a double through strtod.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Deterministic splittable RNG (splitmix64). Distribution draws built on top
// of this are bit-stable across platforms, unlike <random> distributions.
struct SplitMix64 {
  std::uint64_t state;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Unbiased bounded draw by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }
  double next_unit() {  // uniform in [0,1)
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }
};

}  // namespace debias
