#ifndef PRGP_RNG_HPP
#define PRGP_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

namespace prgp {

/// Seeded random stream with platform-independent draw functions.
///
/// All randomized operations in the toolkit are pure functions of
/// (input, seed), so the mapping from engine output to doubles is spelled
/// out here instead of relying on implementation-defined std distributions.
/// The engine state serializes to a string for deterministic resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes exactly two engine draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // guard log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(gen_() % static_cast<std::uint64_t>(n));
  }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace prgp

#endif  // PRGP_RNG_HPP
