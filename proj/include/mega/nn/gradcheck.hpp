#pragma once

#include <cstdint>
#include <functional>

#include "mega/nn/tape.hpp"

namespace mega::nn {

struct GradcheckOptions {
  int coords_per_param{6};
  double step{1e-5};
  double floor{1e-6};  // smallest denominator
};

/// Max relative error between reverse-mode gradients and central differences
/// over randomly chosen coordinates of every parameter.
double gradcheck(const std::function<Var(Tape&)>& computation, ParameterSet& params, std::uint64_t seed,
                 const GradcheckOptions& opts = {});

}  // namespace mega::nn
