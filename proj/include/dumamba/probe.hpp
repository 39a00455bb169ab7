#pragma once

// Precision-neutral handles onto the gradient cases, so one translation unit
// can drive both builds (analytic gradient in one, finite differences in the
// other).

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dumamba/gradcheck.hpp"

namespace dumamba::check {

class CaseHandle {
 public:
  virtual ~CaseHandle() = default;
  virtual const std::string& name() const = 0;
  virtual std::vector<std::size_t> input_sizes() const = 0;
  /// Inputs then constants, flattened.
  virtual std::vector<double> values() const = 0;
  virtual void set_values(const std::vector<double>& v) = 0;
  virtual std::vector<Coordinate> sample(std::size_t per_input, Philox& rng) const = 0;
  virtual std::vector<double> analytic(const std::vector<Coordinate>& coords) = 0;
  virtual std::vector<double> numeric(const std::vector<Coordinate>& coords, double h) = 0;
  virtual double loss() = 0;
};

std::vector<std::string> grad_case_names();
std::unique_ptr<CaseHandle> open_grad_case_f32(const std::string& name, std::uint64_t seed);
std::unique_ptr<CaseHandle> open_grad_case_f64(const std::string& name, std::uint64_t seed);

inline std::unique_ptr<CaseHandle> open_grad_case(bool f64, const std::string& name,
                                                  std::uint64_t seed) {
  return f64 ? open_grad_case_f64(name, seed) : open_grad_case_f32(name, seed);
}

inline constexpr double kFiniteDifferenceStep = 1e-6;

/// Analytic gradient of `subject` against central differences of the f64
/// build on identical values.
inline GradComparison check_against_oracle(CaseHandle& subject, std::uint64_t seed,
                                           std::size_t per_input = 6) {
  auto oracle = open_grad_case_f64(subject.name(), seed);
  oracle->set_values(subject.values());
  Philox rng = Philox(seed).fork(7);
  const auto coords = subject.sample(per_input, rng);
  return compare_gradients(subject.name(), subject.analytic(coords),
                           oracle->numeric(coords, kFiniteDifferenceStep));
}

/// Needs both builds linked.
inline GradComparison check_case(bool f64, const std::string& name, std::uint64_t seed,
                                 std::size_t per_input = 6) {
  auto subject = open_grad_case(f64, name, seed);
  return check_against_oracle(*subject, seed, per_input);
}

}  // namespace dumamba::check
