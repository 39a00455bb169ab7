#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "dumamba/rng.hpp"
#include "dumamba/tensor.hpp"

namespace test {

using namespace dumamba;

/// Comparisons on results of this build's precision.
inline double tol(double f32, double f64) { return kDoublePrecision ? f64 : f32; }

inline std::vector<double> values(const Tensor& t) {
  const auto d = t.data();
  return {d.begin(), d.end()};
}

inline Tensor make(Shape shape, std::vector<double> v, bool grad = false) {
  return Tensor::from(std::move(shape), std::vector<Scalar>(v.begin(), v.end()), grad);
}

inline Tensor random_tensor(Shape shape, Philox& rng, bool grad = false, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), grad);
  for (auto& v : t.mutable_data()) v = static_cast<Scalar>(scale * rng.normal());
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  const auto x = a.data(), y = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(double(x[i]) - double(y[i])));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::memcmp(&x[i], &y[i], sizeof(Scalar)) != 0) return false;
  }
  return true;
}

/// Gradient of the scalar `f()` with respect to the leaf `x`.
template <class F>
std::vector<double> grad_of(Tensor& x, F&& f) {
  x.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(f());
  }
  auto g = x.grad();
  return {g.begin(), g.end()};
}

}  // namespace test
