// Error propagation in a toy dynamical system: the Lipschitz bound on a
// traced error, and the full-history versus sliding-window conditioning gap.

#include <cstdio>

#include "arlab/cascade.hpp"

using namespace arlab;
using namespace arlab::cascade;

int main() {
  Rng rng(5);
  const System sys = random_linear_system(4, 1.2, 0.1, rng);
  const ErrorTrace tr = simulate_error(sys, 12, random_delta(0.05), 7);
  const std::vector<double> bound = bound_values(tr, sys.lipschitz());
  std::printf("L = %.3f\n  step  error     bound\n", sys.lipschitz());
  for (std::size_t t = 0; t < bound.size(); ++t) std::printf("  %4zu  %.5f  %.5f\n", t + 1, tr.error[t + 1], bound[t]);
  std::printf("violations: %zu\n", check_bound(tr, sys.lipschitz()).size());

  ConditioningConfig cfg;
  const RatioEstimate r = compare_conditioning(cfg);
  std::printf("sliding-window / full-history error: %.3f (95%% CI %.3f to %.3f)\n", r.ratio, r.ratio_ci[0],
              r.ratio_ci[1]);
}
