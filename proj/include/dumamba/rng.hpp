#pragma once

#include <array>
#include <cstdint>

namespace dumamba {

/// Philox4x32-10 counter-based generator (Salmon et al., Random123).
///
/// A stream is identified by (seed, stream). Draw number `i` of a stream is a
/// pure function of (seed, stream, i), so generators can be forked per sample
/// or per layer without any shared state, and a draw can be recomputed
/// without replaying the sequence.
class Philox {
 public:
  struct State {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;
  };

  explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : state_{seed, stream, 0} {}
  explicit Philox(const State& s) : state_(s) {}

  /// Independent generator for a sub-stream. Mixing goes through the block
  /// function so nested forks do not collide.
  Philox fork(std::uint64_t tag) const;

  std::uint64_t next_u64() { return at(state_.counter++); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return to_unit(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes two draws.
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Random access: the value `next_u64` would return at position `index`.
  std::uint64_t at(std::uint64_t index) const;
  double uniform_at(std::uint64_t index) const { return to_unit(at(index)); }
  double normal_at(std::uint64_t index) const;

  const State& state() const { return state_; }

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key);
  static double to_unit(std::uint64_t v) {
    return static_cast<double>(v >> 11) * 0x1.0p-53;
  }

 private:
  State state_;
};

}  // namespace dumamba
