#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "arlab/cascade.hpp"

using namespace arlab;
using namespace arlab::cascade;

namespace {

// One-sided Jacobi SVD: orthogonalize column pairs until converged, the
// singular values are then the column norms.
double jacobi_largest_singular_value(Matrix a) {
  const int n = static_cast<int>(a.cols());
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm(), beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        if (gamma == 0.0) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        const Vector cp = a.col(p), cq = a.col(q);
        a.col(p) = c * cp - s * cq;
        a.col(q) = s * cp + c * cq;
      }
    }
    if (off < 1e-15) break;
  }
  double best = 0.0;
  for (int j = 0; j < n; ++j) best = std::max(best, a.col(j).norm());
  return best;
}

}  // namespace

TEST(SpectralNorm, ClosedForms) {
  EXPECT_NEAR(spectral_norm(0.5 * Matrix::Identity(4, 4)), 0.5, 1e-15);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 2.0;
  d(1, 1) = 0.1;
  EXPECT_NEAR(spectral_norm(d), 2.0, 1e-15);
}

TEST(SpectralNorm, MatchesJacobiSvd) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = gaussian_matrix(8, 8, rng);
    const double oracle = jacobi_largest_singular_value(a);
    EXPECT_NEAR(spectral_norm(a) / oracle, 1.0, 1e-8);
  }
}

TEST(SpectralNorm, NonFiniteRejected) {
  Matrix a = Matrix::Identity(2, 2);
  a(0, 1) = std::nan("");
  EXPECT_THROW(spectral_norm(a), nn::NumericError);
}

TEST(RandomLinearSystem, HasRequestedLipschitzConstant) {
  Rng rng(3);
  for (double l : {0.3, 1.0, 2.5}) EXPECT_NEAR(random_linear_system(6, l, 0.0, rng).lipschitz(), l, 1e-12);
}

TEST(SimulateError, HalvingClosedForm) {
  const System sys = linear_system(0.5 * Matrix::Identity(3, 3));
  const ErrorTrace tr = simulate_error(sys, 10, zero_delta(), 7, 1.0);
  ASSERT_EQ(tr.error.size(), 11u);
  ASSERT_EQ(tr.steps(), 10u);
  for (int t = 0; t <= 10; ++t) EXPECT_NEAR(tr.error[t], std::pow(0.5, t), 1e-15);
}

TEST(SimulateError, IdentityWithConstantDelta) {
  const System sys = linear_system(Matrix::Identity(3, 3), 0.2);
  Vector e0(3), c(3);
  e0 << 1.0, 0.0, 0.0;
  c << 0.0, 0.3, 0.0;
  const ErrorTrace tr = simulate_error(sys, 12, constant_delta(c), 9, e0);
  for (int t = 0; t <= 12; ++t) EXPECT_LE(tr.error[t], 1.0 + 0.3 * t + 1e-12);
  // Aligned perturbation attains the triangle bound.
  const ErrorTrace aligned = simulate_error(sys, 12, constant_delta(e0 * 0.3), 9, e0);
  for (int t = 0; t <= 12; ++t) EXPECT_NEAR(aligned.error[t], 1.0 + 0.3 * t, 1e-12);
}

TEST(SimulateError, DivergenceReported) {
  const System sys = linear_system(1e200 * Matrix::Identity(2, 2));
  EXPECT_THROW(simulate_error(sys, 10, zero_delta(), 1), nn::NumericError);
  EXPECT_THROW(simulate_error(sys, 0, zero_delta(), 1), std::invalid_argument);
}

TEST(CheckBound, LinearSystemsNeverViolate) {
  for (int seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(17, static_cast<std::uint64_t>(seed)));
    const double l = uniform(rng, 0.2, 1.6);
    const System sys = random_linear_system(4, l, 0.1, rng);
    const ErrorTrace tr = simulate_error(sys, 20, random_delta(0.05), seed);
    ASSERT_TRUE(check_bound(tr, sys.lipschitz()).empty()) << "seed " << seed;
  }
}

TEST(CheckBound, TanhFamilyWithCertifiedConstant) {
  for (int seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(23, static_cast<std::uint64_t>(seed)));
    const System sys = random_tanh_system(5, uniform(rng, 0.5, 2.0), 0.05, rng);
    const ErrorTrace tr = simulate_error(sys, 20, random_delta(0.05), seed);
    ASSERT_TRUE(check_bound(tr, sys.lipschitz()).empty()) << "seed " << seed;
  }
}

TEST(CheckBound, InjectedFaultFlagsExactlyThatStep) {
  Rng rng(4);
  const System sys = random_linear_system(4, 0.9, 0.0, rng);
  ErrorTrace tr = simulate_error(sys, 15, random_delta(0.01), 3);
  ASSERT_TRUE(check_bound(tr, 0.9).empty());
  tr.error[7] = 0.9 * tr.error[6] + tr.delta[6] + 1.0;
  // Step 8 is bounded by 0.9 * the inflated entry, so only step 7 trips.
  EXPECT_EQ(check_bound(tr, 0.9), std::vector<int>{7});
}

TEST(CheckBound, EqualityAlongTopSingularVector) {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 0) = 1.5;
  a(1, 1) = 0.5;
  a(2, 2) = 0.2;
  Vector e0 = Vector::Zero(3), dir = Vector::Zero(3);
  e0(0) = 1.0;
  dir(0) = 0.1;
  const ErrorTrace tr = simulate_error(linear_system(a), 8, constant_delta(dir), 2, e0);
  const std::vector<double> bound = bound_values(tr, spectral_norm(a));
  for (std::size_t t = 0; t < bound.size(); ++t) EXPECT_NEAR(tr.error[t + 1], bound[t], 1e-12 * bound[t]);
}

TEST(CompareConditioning, RegimeAtStepOneFavoursFullHistory) {
  ConditioningConfig cfg;
  cfg.trials = 1000;
  const RatioEstimate r = compare_conditioning(cfg);
  EXPECT_GT(r.ratio, 1.0);
  EXPECT_GT(r.ratio_ci[0], 1.0);
  EXPECT_GT(r.ci_ff[0], r.ci_base[1]);
}

TEST(CompareConditioning, MemorylessChainTies) {
  ConditioningConfig cfg;
  cfg.coupling = 0.0;
  const RatioEstimate r = compare_conditioning(cfg);
  // Mean intervals overlap.
  EXPECT_LE(r.ci_ff[0], r.ci_base[1]);
  EXPECT_LE(r.ci_base[0], r.ci_ff[1]);
}

TEST(CompareConditioning, SingleBlockHorizonIsIdentical) {
  ConditioningConfig cfg;
  cfg.horizon = 1;
  const RatioEstimate r = compare_conditioning(cfg);
  EXPECT_EQ(r.mean_ff, r.mean_base);
}

TEST(CompareConditioning, Errors) {
  ConditioningConfig cfg;
  cfg.trials = 50;
  EXPECT_THROW(compare_conditioning(cfg), std::invalid_argument);
  cfg = ConditioningConfig{};
  cfg.noise = 0.0;
  cfg.coupling = 0.0;
  cfg.transition_norm = 0.0;
  // T_1 = r still varies, but every later block is identically zero.
  EXPECT_THROW(compare_conditioning(cfg), std::invalid_argument);
}

TEST(RecoEffect, TenfoldGapBetweenContractionAndExpansion) {
  const RecoEffect e = reco_effect({0.5, 1.0, 2.0}, 4, 20, 200, 0.01, 3);
  EXPECT_GE(e.curve[2].mean_terminal_error, 10.0 * e.curve[0].mean_terminal_error);
}

TEST(RecoEffect, ZeroLipschitzLeavesLastDelta) {
  const RecoEffect e = reco_effect({0.0, 0.5, 1.0}, 4, 10, 50, 0.01, 3);
  EXPECT_NEAR(e.curve[0].mean_terminal_error, 0.01, 1e-15);
}

TEST(RecoEffect, MonotoneInMostSeeds) {
  const RecoEffect e = reco_effect({0.3, 0.7, 1.0, 1.5, 2.0}, 4, 20, 1000, 0.01, 5);
  EXPECT_GE(e.monotone_fraction, 0.95);
  for (std::size_t i = 1; i < e.curve.size(); ++i) {
    EXPECT_GE(e.curve[i].mean_terminal_error, e.curve[i - 1].mean_terminal_error);
  }
}

TEST(Determinism, SimulationsRepeatPerSeed) {
  Rng a(8), b(8);
  const System sa = random_tanh_system(4, 1.2, 0.1, a), sb = random_tanh_system(4, 1.2, 0.1, b);
  EXPECT_EQ(simulate_error(sa, 30, random_delta(0.1), 4).error, simulate_error(sb, 30, random_delta(0.1), 4).error);
}
