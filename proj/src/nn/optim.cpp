#include "mega/nn/optim.hpp"

#include <cmath>
#include <numbers>

#include "mega/error.hpp"

namespace mega::nn {

void adamw_step(ParameterSet& params, double lr, int step, const AdamWConfig& cfg) {
  if (step < 1) fail(ErrorKind::Config, "adamw_step: step counts from 1");
  for (const Parameter& p : params)
    if (!p.grad.allFinite()) fail(ErrorKind::Divergence, "non-finite gradient in parameter " + p.name);
  const double c1 = 1.0 - std::pow(cfg.beta1, step);
  const double c2 = 1.0 - std::pow(cfg.beta2, step);
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    p.first_moment = cfg.beta1 * p.first_moment + (1.0 - cfg.beta1) * p.grad;
    p.second_moment = cfg.beta2 * p.second_moment + (1.0 - cfg.beta2) * p.grad.cwiseAbs2();
    if (p.decay) p.value *= 1.0 - lr * cfg.weight_decay;
    p.value.array() -= lr * (p.first_moment.array() / c1) / ((p.second_moment.array() / c2).sqrt() + cfg.eps);
  }
}

double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr) {
  if (step < 0 || step > total_steps || warmup_steps < 0 || warmup_steps >= total_steps)
    fail(ErrorKind::Schedule, "cosine_lr: need 0 <= step <= total and warmup < total");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mega::nn
