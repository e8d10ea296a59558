#pragma once

#include "mega/nn/parameter.hpp"

namespace mega::nn {

struct AdamWConfig {
  double beta1{0.9};
  double beta2{0.99};
  double weight_decay{0.05};
  double eps{1e-8};
};

/// One decoupled-weight-decay Adam update using each parameter's grad.
/// `step` counts from 1. Throws Divergence on a non-finite gradient.
void adamw_step(ParameterSet& params, double lr, int step, const AdamWConfig& cfg = {});

/// Linear warmup to base_lr, then half-cosine decay to zero at total_steps.
double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr);

}  // namespace mega::nn
