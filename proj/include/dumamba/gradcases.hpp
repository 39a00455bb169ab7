#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dumamba/tensor.hpp"

DUMAMBA_BEGIN_NAMESPACE

/// A scalar function of some leaf tensors, used for finite-difference checks.
///
/// `loss` reads `inputs` and `constants` by handle, so a check may perturb
/// input values in place and re-evaluate. Two cases built from the same name
/// have the same structure in both precisions; copying `inputs` and
/// `constants` value by value makes them the same function.
struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;     // differentiable leaves
  std::vector<Tensor> constants;  // fixed data (targets, projections, labels)
  std::function<Tensor()> loss;
};

std::vector<std::string> grad_case_names();
GradCase make_grad_case(const std::string& name, std::uint64_t seed);

DUMAMBA_END_NAMESPACE
