#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>
#include <type_traits>

namespace chainflow {

// 64-bit FNV-1a, used to fold string tags into stream seeds.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_combine(std::uint64_t h) { return h; }

// Hash-combines an arbitrary list of integer/string tags into one stream seed.
template <class T, class... Rest>
std::uint64_t seed_combine(std::uint64_t h, const T& v, Rest&&... rest) {
  if constexpr (std::is_convertible_v<T, std::string_view>) {
    h = splitmix64(h ^ fnv1a64(std::string_view(v)));
  } else {
    h = splitmix64(h ^ static_cast<std::uint64_t>(v));
  }
  return seed_combine(h, std::forward<Rest>(rest)...);
}

// One independent random stream. mt19937_64 is fully specified by the
// standard, so draws are identical across platforms; normal() uses
// Box-Muller instead of std::normal_distribution, whose output sequence
// is implementation-defined.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  template <class... Tags>
  static RngStream derived(std::uint64_t root, Tags&&... tags) {
    return RngStream(seed_combine(root, std::forward<Tags>(tags)...));
  }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased via rejection
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite
    const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Deterministic Fisher-Yates; std::shuffle is implementation-defined.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace chainflow
