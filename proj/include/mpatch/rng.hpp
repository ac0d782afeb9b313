#pragma once

// Portable counter-based random numbers.
//
// Every draw is a pure function of (key, counter): value = mix(key + counter
// * 0x9E3779B97F4A7C15), where mix is the SplitMix64 finalizer. Streams are
// derived by hashing a parent key with a stream label, so independent
// consumers (per sample, per epoch, per tensor) never share counters and the
// order in which streams are created does not matter. Uniform floats take the
// top 24 bits, uniform doubles the top 53 bits; normals use Box-Muller.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mpatch {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t stream) {
  return splitmix64_mix(key ^ splitmix64_mix(stream + 0x632BE59BD9B4E019ULL));
}

// FNV-1a, used to turn stream labels into stream ids.
constexpr std::uint64_t label_hash(std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  constexpr CounterRng stream(std::uint64_t id) const {
    return CounterRng(derive_key(key_, id));
  }
  constexpr CounterRng stream(std::string_view label) const {
    return stream(label_hash(label));
  }
  constexpr CounterRng stream(std::string_view label, std::uint64_t id) const {
    return stream(label).stream(id);
  }

  constexpr std::uint64_t next_u64() {
    return splitmix64_mix(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL);
  }

  // Uniform in [0, 1).
  float uniform_f32() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0. Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

// Fisher-Yates over an index container.
template <class Container>
void shuffle(Container& items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace mpatch
