#pragma once

// Counter-based random streams. Every random decision in the library is keyed
// on the tuple that identifies it (seed, node, round, ...), so results do not
// depend on iteration order or on how many draws other components made.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace retexo {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds a seed and an ordered list of integer tags into one stream key.
constexpr std::uint64_t derive_key(std::uint64_t seed,
                                   std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t k = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
  for (auto p : parts) k = splitmix64(k ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return k;
}

// Tags that separate independent streams drawn from the same user seed.
namespace stream {
inline constexpr std::uint64_t neighbors = 0x6e65696768ULL;
inline constexpr std::uint64_t clients = 0x636c69656e74ULL;
inline constexpr std::uint64_t split = 0x73706c6974ULL;
inline constexpr std::uint64_t init = 0x696e6974ULL;
inline constexpr std::uint64_t contact = 0x636f6e74ULL;
inline constexpr std::uint64_t synth = 0x73796e7468ULL;
}  // namespace stream

class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

  constexpr std::uint64_t next() noexcept {
    return splitmix64(key_ ^ splitmix64(counter_++));
  }

  /// Uniform integer in [0, n); n must be > 0. Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Uniform double in [0, 1).
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// k distinct entries of `population`, chosen uniformly (partial Fisher-Yates).
  template <class T>
  std::vector<T> sample(std::span<const T> population, std::size_t k) {
    std::vector<T> pool(population.begin(), population.end());
    if (k >= pool.size()) return pool;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + static_cast<std::size_t>(below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace retexo
