#include "mega/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mega/rng.hpp"

namespace mega::nn {

double gradcheck(const std::function<Var(Tape&)>& computation, ParameterSet& params, std::uint64_t seed,
                 const GradcheckOptions& opts) {
  params.zero_grad();
  double base = 0.0;
  {
    Tape tape;
    const Var out = computation(tape);
    base = std::abs(out.scalar());
    tape.backward(out, params);
  }
  auto eval = [&] {
    Tape tape(false);
    return computation(tape).scalar();
  };
  // below this the difference quotient is dominated by cancellation in f(x+h) - f(x-h)
  const double noise = 1e6 * std::numeric_limits<double>::epsilon() * base / opts.step;
  Rng rng(seed);
  double worst = 0.0;
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    const auto n = static_cast<std::uint64_t>(p.value.size());
    const int draws = static_cast<int>(std::min<std::uint64_t>(n, static_cast<std::uint64_t>(opts.coords_per_param)));
    for (int d = 0; d < draws; ++d) {
      const auto idx = static_cast<Eigen::Index>(rng.below(n));
      double& x = p.value.data()[idx];
      const double saved = x;
      x = saved + opts.step;
      const double up = eval();
      x = saved - opts.step;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p.grad.data()[idx];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.floor, noise});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace mega::nn
