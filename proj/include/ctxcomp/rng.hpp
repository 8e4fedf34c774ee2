#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace ctxcomp {

// Deterministic PRNG with a fully pinned algorithm (splitmix64). We do not
// use <random> distributions because their output is implementation-defined;
// corpus generation and model init must be byte-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Unbiased integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t threshold = -bound % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  int range(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Marsaglia polar method; deterministic given the stream.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double mul = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * mul;
    has_spare_ = true;
    return u * mul;
  }

  // Weighted pick: weights need not be normalized.
  template <typename Container>
  int pick_weighted(const Container& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double x = uniform() * total;
    int idx = 0;
    for (double w : weights) {
      x -= w;
      if (x < 0.0) return idx;
      ++idx;
    }
    return static_cast<int>(weights.size()) - 1;
  }

  // Derive an independent stream, e.g. one per corpus family.
  Rng fork(std::uint64_t salt) {
    Rng child(state_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL));
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ctxcomp
