#pragma once

#include <vector>

#include "medthink/grad_check.hpp"
#include "medthink/model.hpp"

namespace test_support {

struct ToyItem {
  std::vector<int> input;
  medthink::Image image;
  std::vector<int> target;
};

// Two fixed samples sized for `config` (n <= n_max, image per config).
std::vector<ToyItem> toy_batch(const medthink::ModelConfig& config);

// Mean NLL over the two-sample toy batch (d=16, n=8, m=4, vocab=32), checked
// against central differences for every parameter tensor.
medthink::GradCheckReport full_model_grad_check();

// Attention rows sum to 1 within 1e-9, gate strictly inside (0, 1), fused
// entries between text and attended entries.
bool fusion_invariants_hold(const medthink::FusionTrace& trace);

}  // namespace test_support
