#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace dare {

/// Purpose tags mixed into stream keys so that independent consumers never
/// share a random stream.
enum class StreamTag : std::uint64_t {
  kWorld = 1,
  kInitPolicy,
  kRollout,
  kHintRollout,
  kSampler,
  kReference,
  kCurrentFr,
  kEntropy,
  kBayes,
  kDrift,
  kBound,
  kPanel,
  kTest,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic random stream keyed by an arbitrary tuple of integers.
///
/// Streams are counter-based in the sense that the key alone fixes the whole
/// sequence: the key (run seed, step, prompt id, rollout index, ...) is
/// hashed into the engine seed, so the order in which streams are created or
/// consumed across threads never changes any draw.
class Stream {
 public:
  using result_type = std::uint64_t;

  explicit Stream(std::span<const std::uint64_t> key) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    std::vector<std::uint32_t> words;
    words.reserve(2 * key.size() + 2);
    for (const std::uint64_t k : key) {
      h = detail::splitmix64(h ^ k);
      words.push_back(static_cast<std::uint32_t>(h));
      words.push_back(static_cast<std::uint32_t>(h >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Index drawn proportionally to non-negative `weights` (sum must be > 0).
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_positive = i;
      if (u < acc) return i;
    }
    return last_positive;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(*this);
  }

  /// Beta(a, b) draw via the ratio of two gamma variates.
  double beta(double a, double b) {
    std::gamma_distribution<double> ga(a, 1.0);
    std::gamma_distribution<double> gb(b, 1.0);
    const double x = ga(*this);
    const double y = gb(*this);
    if (x + y <= 0.0) return a >= b ? 1.0 : 0.0;
    return x / (x + y);
  }

 private:
  std::mt19937_64 engine_;
};

inline Stream make_stream(std::uint64_t seed, StreamTag tag,
                          std::initializer_list<std::uint64_t> rest = {}) {
  std::vector<std::uint64_t> key;
  key.reserve(rest.size() + 2);
  key.push_back(seed);
  key.push_back(static_cast<std::uint64_t>(tag));
  key.insert(key.end(), rest.begin(), rest.end());
  return Stream(key);
}

}  // namespace dare
