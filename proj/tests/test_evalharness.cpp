#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "arlab/evalharness.hpp"
#include "test_support.hpp"

using namespace arlab;
using arlab::testing::random_tokens;
using arlab::testing::tiny_model;

namespace {

std::vector<TokenSequence> random_set(int n, int blocks, int spatial, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    TokenSequence s;
    s.condition = i % 4;
    s.blocks = blocks;
    s.spatial = spatial;
    s.tokens = random_tokens(static_cast<std::size_t>(blocks) * spatial, vocab, rng);
    out.push_back(s);
  }
  return out;
}

TokenSequence layout(std::vector<int> tokens, int blocks, int spatial) {
  TokenSequence s;
  s.tokens = std::move(tokens);
  s.blocks = blocks;
  s.spatial = spatial;
  return s;
}

}  // namespace

TEST(PerPositionLoss, UntrainedModelIsFlatNearLogM) {
  ModelConfig c = tiny_model(64, 41);
  c.init_std = 0.002;
  const Model m(c, 1);
  const auto set = random_set(4, 5, 4, 64, 1);
  GenerationPlan plan;
  plan.sampling.seed = 3;
  for (LossMode mode : {LossMode::TeacherForced, LossMode::FreeRunning}) {
    const LossCurve curve = per_position_loss(m, set, mode, plan);
    ASSERT_EQ(curve.length(), 20u);
    for (double v : curve.mean) EXPECT_NEAR(v, std::log(64.0), 0.02);
  }
}

TEST(PerPositionLoss, FreeRunningGreedyEqualsNegatedRecordScores) {
  const Model m(tiny_model(), 2);
  const auto set = random_set(3, 5, 4, 16, 2);
  GenerationPlan plan;
  plan.sampling.mode = SamplingMode::Greedy;
  const LossCurve curve = per_position_loss(m, set, LossMode::FreeRunning, plan);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const GenerationRecord r = generate_full(m, set[i].condition, 20, plan.sampling, {}, 4);
    for (std::size_t p = 0; p < 20; ++p) ASSERT_EQ(curve.per_sequence[i][p], -r.log_probs[p]);
  }
}

TEST(PerPositionLoss, ShapeAndMarkers) {
  const Model m(ModelConfig{}, 1);
  const CorpusConfig cc;
  const TokenSequence s = quantize(gen_trajectory(cc, 0, 4), make_codebook(cc));
  const LossCurve curve = per_position_loss(m, std::span(&s, 1), LossMode::TeacherForced);
  EXPECT_EQ(curve.length(), 256u);
  const std::vector<int> markers = curve.markers();
  ASSERT_EQ(markers.size(), 16u);
  for (std::size_t i = 0; i < markers.size(); ++i) EXPECT_EQ(markers[i], static_cast<int>(16 * i));
}

TEST(PerPositionLoss, TeacherForcedDecomposesBaselineLoss) {
  const Model m(tiny_model(), 3);
  const auto set = random_set(3, 5, 4, 16, 3);
  const LossCurve curve = per_position_loss(m, set, LossMode::TeacherForced);
  for (std::size_t i = 0; i < set.size(); ++i) {
    double sum = 0.0;
    for (double v : curve.per_sequence[i]) sum += v;
    EXPECT_NEAR(sum / 20.0, baseline_loss(m, set[i]), 1e-12);
  }
}

TEST(PerPositionLoss, EmptySetRejected) {
  const Model m(tiny_model(), 3);
  EXPECT_THROW(per_position_loss(m, {}, LossMode::TeacherForced), std::invalid_argument);
  EXPECT_THROW(first_frame_augmented_eval(m, {}), std::invalid_argument);
}

TEST(FirstFrameAugmented, BlockOneIsTeacherForced) {
  const Model m(tiny_model(), 4);
  const auto set = random_set(3, 5, 4, 16, 4);
  GenerationPlan plan;
  plan.sampling.seed = 8;
  const LossCurve aug = first_frame_augmented_eval(m, set, plan);
  const LossCurve tf = per_position_loss(m, set, LossMode::TeacherForced);
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (int p = 0; p < 4; ++p) EXPECT_NEAR(aug.per_sequence[i][p], tf.per_sequence[i][p], 1e-12);
  }
}

TEST(FirstFrameAugmented, EqualsFreeRunningWhenBlockOneMatches) {
  const Model m(tiny_model(), 5);
  GenerationPlan plan;
  plan.sampling.mode = SamplingMode::Greedy;
  // Ground truth = the model's own greedy output.
  const GenerationRecord r = generate_full(m, 1, 20, plan.sampling, {}, 4);
  TokenSequence s = r.tokens;
  s.condition = 1;
  const LossCurve a = first_frame_augmented_eval(m, std::span(&s, 1), plan);
  const LossCurve b = per_position_loss(m, std::span(&s, 1), LossMode::FreeRunning, plan);
  EXPECT_EQ(a.mean, b.mean);
}

TEST(PsnrProxy, IdenticalIsInfinite) {
  const Codebook cb{4, 1, {0.0, 0.5, -0.5, 1.0}};
  const TokenSequence s = layout({0, 1, 2, 3, 0, 1}, 3, 2);
  for (double v : psnr_proxy(s, s, cb, 1.0)) EXPECT_EQ(v, std::numeric_limits<double>::infinity());
}

TEST(PsnrProxy, HandComputedTwoBlockExample) {
  // d = 1, R = 1, one sub-vector per block.
  const Codebook cb{3, 1, {0.0, 0.5, 0.2}};
  const TokenSequence gen = layout({0, 1}, 2, 1), ref = layout({0, 2}, 2, 1);
  const std::vector<double> v = psnr_proxy(gen, ref, cb, 1.0);
  ASSERT_EQ(v.size(), 1u);
  // D = 1: only frame 2 enters, MSE = (0.5 - 0.2)^2.
  EXPECT_NEAR(v[0], 10.0 * std::log10(1.0 / (0.3 * 0.3)), 1e-12);
}

TEST(PsnrProxy, LocalityOfOneReplacedBlock) {
  const Codebook cb{4, 1, {0.0, 0.5, -0.5, 1.0}};
  const TokenSequence ref = layout({0, 1, 2, 3, 1, 2, 0, 3}, 4, 2);
  TokenSequence gen = ref;
  gen.tokens[0] = 3;  // block 1 changed: no interval D >= 1 looks at frame 1
  gen.tokens[1] = 2;
  for (double v : psnr_proxy(gen, ref, cb, 1.0)) EXPECT_EQ(v, std::numeric_limits<double>::infinity());
  gen = ref;
  gen.tokens[6] = 1;  // block 4 changed: every interval includes frame 4
  for (double v : psnr_proxy(gen, ref, cb, 1.0)) EXPECT_TRUE(std::isfinite(v));
}

TEST(PsnrProxy, LayoutMismatch) {
  const Codebook cb{2, 1, {0.0, 1.0}};
  EXPECT_THROW(psnr_proxy(layout({0, 1}, 2, 1), layout({0, 1, 0}, 3, 1), cb, 1.0), std::invalid_argument);
}

TEST(PsnrProxy, DegradesWithCorruption) {
  const CorpusConfig cc;
  const Codebook cb = make_codebook(cc);
  const TokenSequence ref = quantize(gen_trajectory(cc, 2, 17), cb);
  double previous = std::numeric_limits<double>::infinity();
  for (double fraction : {0.1, 0.3, 0.6, 1.0}) {
    double mean_psnr = 0.0;
    const int reps = 10;
    for (int rep = 0; rep < reps; ++rep) {
      Rng rng(derive_seed(static_cast<std::uint64_t>(fraction * 1000), rep));
      TokenSequence gen = ref;
      for (int& t : gen.tokens) {
        if (uniform01(rng) < fraction) t = static_cast<int>(uniform_index(rng, cb.size));
      }
      mean_psnr += psnr_proxy(gen, ref, cb, cc.amplitude)[0] / reps;
    }
    EXPECT_LT(mean_psnr, previous) << "fraction " << fraction;
    previous = mean_psnr;
  }
}

TEST(FlowProxy, FrozenCorpusIsZero) {
  CorpusConfig cc;
  cc.motion_scale = 0.0;
  const Codebook cb = make_codebook(cc);
  const TokenSequence s = quantize(gen_trajectory(cc, 1, 3), cb);
  for (int d = 1; d < s.blocks; ++d) EXPECT_EQ(flow_proxy(s, cb, d), 0.0);
}

TEST(FlowProxy, TriangleInequalityAndRange) {
  const CorpusConfig cc;
  const Codebook cb = make_codebook(cc);
  const TokenSequence s = quantize(gen_trajectory(cc, 1, 3), cb);
  const std::vector<double> one = flow_terms(s, cb, 1), two = flow_terms(s, cb, 2);
  for (std::size_t i = 0; i < two.size(); ++i) EXPECT_LE(two[i], one[i] + one[i + 1] + 1e-12);
  for (double v : one) EXPECT_GE(v, 0.0);
  EXPECT_THROW(flow_proxy(s, cb, 0), std::out_of_range);
  EXPECT_THROW(flow_proxy(s, cb, s.blocks), std::out_of_range);
}

TEST(FlowProxy, GrowsWithMotionScale) {
  CorpusConfig cc;
  const Codebook cb = make_codebook(cc);
  double previous = -1.0;
  for (double motion : {0.25, 0.5, 1.0}) {
    cc.motion_scale = motion;
    double mean = 0.0;
    for (int i = 0; i < 100; ++i) mean += flow_proxy(quantize(gen_trajectory(cc, i % 8, 50 + i), cb), cb, 1) / 100;
    EXPECT_GT(mean, previous) << "motion " << motion;
    previous = mean;
  }
}

TEST(ContinuityProfile, IdentityWithRecoLoss) {
  Rng rng(6);
  Tensor h({9, 5});
  for (double& x : h.values()) x = normal(rng);
  const HiddenTrace tr{h, 0};
  const std::vector<double> prof = continuity_profile(tr);
  ASSERT_EQ(prof.size(), 8u);
  EXPECT_EQ(profile_mean(prof), reco_loss(tr));
  EXPECT_EQ(profile_mean(continuity_profile(HiddenTrace{Tensor({4, 3}, 0.5), 0})), 0.0);
  EXPECT_THROW(continuity_profile(HiddenTrace{Tensor({1, 3}, 0.0), 0}), std::invalid_argument);
}

TEST(ContinuityProfile, IdentityOnModelWindows) {
  const Model m(tiny_model(), 7);
  const auto set = random_set(1, 5, 4, 16, 7);
  for (int start : {1, 5, 9}) {
    const WindowLoss w = local_opt_loss(m, set[0], {start, 8, 4});
    EXPECT_EQ(profile_mean(continuity_profile(w.trace)), reco_loss(w.trace));
  }
}

TEST(ErrorPropagation, ZeroWhenGenerationMatchesTruth) {
  const Model m(tiny_model(), 8);
  SamplingConfig greedy{SamplingMode::Greedy};
  const GenerationRecord r = generate_full(m, 2, 20, greedy, {}, 4);
  TokenSequence truth = r.tokens;
  truth.condition = 2;
  for (double e : error_propagation_trace(m, truth, greedy)) EXPECT_LT(e, 1e-12);
}

TEST(ErrorPropagation, FirstPositionDependsOnlyOnCondition) {
  const Model m(tiny_model(), 9);
  auto set = random_set(1, 5, 4, 16, 9);
  SamplingConfig s;
  s.seed = 1;
  const std::vector<double> e = error_propagation_trace(m, set[0], s);
  ASSERT_EQ(e.size(), 20u);
  EXPECT_LT(e[0], 1e-12);
  for (double v : e) EXPECT_TRUE(std::isfinite(v));
  GenerationRecord short_run = generate_full(m, 0, 8, s);
  EXPECT_THROW(error_propagation_trace(m, set[0], short_run), std::invalid_argument);
}

TEST(Bench, ContractAndMemoryOrdering) {
  CorpusConfig cc;
  const Dataset ds = make_dataset(cc, 20, 1);
  ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 16;
  mc.n_heads = 2;
  StrategyConfig base, ff, lo;
  ff.strategy = Strategy::FewerFrames;
  lo.strategy = Strategy::LocalOpt;
  const BenchReport rb = bench_step(base, mc, ds.train, 5, 30, 1);
  const BenchReport rf = bench_step(ff, mc, ds.train, 5, 30, 1);
  const BenchReport rl = bench_step(lo, mc, ds.train, 5, 30, 1);
  for (const BenchReport* r : {&rb, &rf, &rl}) {
    EXPECT_TRUE(r->timer_ok);
    EXPECT_GT(r->mean_ms, 0.0);
    EXPECT_GE(r->std_ms, 0.0);
    EXPECT_EQ(r->reps, 30);
  }
  EXPECT_LT(rf.tracked_scalars, rl.tracked_scalars);
  EXPECT_LT(rl.tracked_scalars, rb.tracked_scalars);
  EXPECT_EQ(rb.parameter_count, Model(mc, 0).parameter_count());
  EXPECT_THROW(bench_step(base, mc, ds.train, 4, 30, 1), std::invalid_argument);
  EXPECT_THROW(bench_step(base, mc, ds.train, 5, 29, 1), std::invalid_argument);
}
