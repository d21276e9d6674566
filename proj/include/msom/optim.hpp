#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "msom/tensor.hpp"

namespace msom {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First and second moments per parameter, kept in double.
struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

struct StepReport {
    bool applied = true;
    std::string reason;
};

// One bias-corrected Adam update from each parameter's accumulated grad
// (parameters without a grad are treated as having a zero gradient). A
// non-finite gradient anywhere skips the whole step and leaves the state
// untouched.
StepReport adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config = {});

// Scales all grads so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

void zero_grads(std::span<Tensor> params);

}  // namespace msom
