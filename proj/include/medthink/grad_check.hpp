#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "medthink/autograd.hpp"

namespace medthink {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> tensors;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor),
  // so entries whose true gradient is ~0 are judged on absolute error.
  double floor = 1e-6;
};

// Builds a scalar loss on the given tape from leaves bound to `params`
// (same order).
using LossBuilder = std::function<Var(Tape&, std::span<const Var> leaves)>;

// Compares the tape gradient of `loss` against central differences for every
// entry of every parameter. Parameters are perturbed in place and restored.
// Throws OracleInvalidError when two evaluations at the same point differ.
GradCheckReport grad_check(const LossBuilder& loss, std::span<const NamedParam> params,
                           const GradCheckOptions& options = {});

}  // namespace medthink
