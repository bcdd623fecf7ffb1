#pragma once

#include <vector>

#include "instructtime/tensor.hpp"

namespace instructtime::nn {

// Adam with decoupled weight decay. `step` is 1-indexed and drives the bias
// correction; callers pass the already-scheduled learning rate.
struct AdamConfig {
    Real lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.0;
};

void adamw_step(const std::vector<Parameter*>& params, const AdamConfig& cfg, int step);

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
Real clip_global_norm(const std::vector<Parameter*>& params, Real max_norm);

// Linear warmup to `peak` over the first `warmup` steps, then cosine decay
// to zero at `total`. Steps are 1-indexed; lr(warmup) = peak exactly.
Real warmup_cosine_lr(Real peak, int step, int warmup, int total);

// Warmup step count for a ratio of total steps, guarded against the ratio
// being an ulp off an integer product.
int warmup_steps_for(Real ratio, int total);

}  // namespace instructtime::nn
