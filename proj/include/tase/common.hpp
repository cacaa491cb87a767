#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tase {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using VectorD = Vector<double>;

// Error taxonomy mirrors the CLI exit codes: config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// Named substream seed: keeps data shuffling, clustering, and weight init on
// independent, individually reconstructible streams.
inline uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index = 0) {
  return detail::splitmix64(seed) ^ detail::splitmix64(detail::fnv1a(stream) + 0x9e3779b97f4a7c15ull * index);
}

// Deterministic PRNG with named substreams. Distribution sampling is done
// here (not via <random> distributions) so that the exact draw sequence is
// pinned by this code alone, independent of the standard library build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(detail::splitmix64(seed ^ 0x6a09e667f3bcc908ull)) {}

  Rng(uint64_t seed, std::string_view stream, uint64_t index = 0) : Rng(derive_seed(seed, stream, index)) {}

  uint64_t next_u64() {
    state_ = detail::splitmix64(state_ + 0x9e3779b97f4a7c15ull);
    return state_;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n); n > 0.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  uint64_t state_;
};

// Fisher-Yates over [0, n).
inline std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

template <class T>
void require_finite(const Matrix<T>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite values");
}

}  // namespace tase
