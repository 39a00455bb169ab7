#include "dumamba/rng.hpp"

#include <cmath>
#include <numbers>

namespace dumamba {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::array<std::uint32_t, 4> Philox::block(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

std::uint64_t Philox::at(std::uint64_t index) const {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
      static_cast<std::uint32_t>(state_.stream),
      static_cast<std::uint32_t>(state_.stream >> 32)};
  const std::array<std::uint32_t, 2> key = {
      static_cast<std::uint32_t>(state_.seed),
      static_cast<std::uint32_t>(state_.seed >> 32)};
  const auto out = block(ctr, key);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Philox Philox::fork(std::uint64_t tag) const {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
      static_cast<std::uint32_t>(state_.stream),
      static_cast<std::uint32_t>(state_.stream >> 32)};
  // Second key word is perturbed so fork(t) never equals at(t).
  const std::array<std::uint32_t, 2> key = {
      static_cast<std::uint32_t>(state_.seed),
      static_cast<std::uint32_t>(state_.seed >> 32) ^ 0xA5A5A5A5u};
  const auto out = block(ctr, key);
  const std::uint64_t stream = (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  return Philox(state_.seed, stream);
}

double Philox::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Philox::normal_at(std::uint64_t index) const {
  const double u1 = uniform_at(2 * index);
  const double u2 = uniform_at(2 * index + 1);
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Philox::below(std::uint64_t n) {
  // Reject the biased tail.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

}  // namespace dumamba
