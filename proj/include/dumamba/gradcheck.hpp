#pragma once

// Finite-difference gradient checking, generic over the precision build.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "dumamba/error.hpp"
#include "dumamba/rng.hpp"

namespace dumamba::check {

struct Coordinate {
  std::size_t input;
  std::size_t index;
};

struct GradComparison {
  std::string name;
  std::size_t coordinates = 0;
  double rel_err = 0.0;  // ||g_a - g_n|| / max(||g_a||, ||g_n||)
  double max_abs = 0.0;
  double norm = 0.0;     // ||g_n||
};

/// Up to `per_input` distinct coordinates of every input, drawn with `rng`.
template <class Case>
std::vector<Coordinate> sample_coordinates(const Case& c, std::size_t per_input, Philox& rng) {
  std::vector<Coordinate> out;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    const auto n = static_cast<std::size_t>(c.inputs[i].numel());
    if (n <= per_input) {
      for (std::size_t j = 0; j < n; ++j) out.push_back({i, j});
      continue;
    }
    std::vector<std::size_t> picked;
    while (picked.size() < per_input) {
      const auto j = static_cast<std::size_t>(rng.below(n));
      if (std::find(picked.begin(), picked.end(), j) == picked.end()) picked.push_back(j);
    }
    std::sort(picked.begin(), picked.end());
    for (auto j : picked) out.push_back({i, j});
  }
  return out;
}

/// Reverse-mode gradient at `coords`, via the case's own tape type.
template <class Tape, class TapeScope, class Case>
std::vector<double> analytic_gradient(Case& c, const std::vector<Coordinate>& coords) {
  for (auto& t : c.inputs) t.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    auto loss = c.loss();
    tape.backward(loss);
  }
  std::vector<double> g;
  g.reserve(coords.size());
  std::vector<std::vector<double>> cache(c.inputs.size());
  for (const auto& co : coords) {
    auto& grad = cache[co.input];
    if (grad.empty()) {
      const auto v = c.inputs[co.input].grad();
      grad.assign(v.begin(), v.end());
    }
    g.push_back(grad[co.index]);
  }
  for (auto& t : c.inputs) t.zero_grad();
  return g;
}

/// Central differences (L(x + h) - L(x - h)) / 2h, evaluated without a tape.
template <class Case>
std::vector<double> numeric_gradient(Case& c, const std::vector<Coordinate>& coords, double h) {
  std::vector<double> g;
  g.reserve(coords.size());
  for (const auto& co : coords) {
    auto data = c.inputs[co.input].mutable_data();
    const auto saved = data[co.index];
    using S = std::remove_reference_t<decltype(data[0])>;
    data[co.index] = static_cast<S>(saved + h);
    const double up = static_cast<double>(c.loss().item());
    data[co.index] = static_cast<S>(saved - h);
    const double down = static_cast<double>(c.loss().item());
    data[co.index] = saved;
    g.push_back((up - down) / (2.0 * h));
  }
  return g;
}

inline GradComparison compare_gradients(const std::string& name, const std::vector<double>& ga,
                                        const std::vector<double>& gn) {
  GradComparison r;
  r.name = name;
  r.coordinates = ga.size();
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    diff += (ga[i] - gn[i]) * (ga[i] - gn[i]);
    na += ga[i] * ga[i];
    nn += gn[i] * gn[i];
    r.max_abs = std::max(r.max_abs, std::abs(ga[i] - gn[i]));
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-30});
  r.rel_err = std::sqrt(diff) / denom;
  r.norm = std::sqrt(nn);
  return r;
}

/// Copies every input and constant of `src` into `dst` (same structure,
/// possibly another precision).
template <class Dst, class Src>
void copy_case_values(Dst& dst, const Src& src) {
  auto copy = [](auto& d, const auto& s) {
    if (d.size() != s.size()) throw ShapeError("cases differ in structure");
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto to = d[i].mutable_data();
      const auto from = s[i].data();
      if (to.size() != from.size()) throw ShapeError("cases differ in tensor sizes");
      using S = std::remove_reference_t<decltype(to[0])>;
      for (std::size_t j = 0; j < to.size(); ++j) to[j] = static_cast<S>(from[j]);
    }
  };
  copy(dst.inputs, src.inputs);
  copy(dst.constants, src.constants);
}

}  // namespace dumamba::check
