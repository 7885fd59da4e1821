#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "arlab/experiment.hpp"

using namespace arlab;
using namespace arlab::experiment;

namespace {

std::string error_of(const std::string& yaml) {
  try {
    parse_config(yaml, "cfg.yaml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ParseConfig, EmptyDocumentGivesDefaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.corpus.tokens_per_sequence(), 256);
  EXPECT_EQ(c.corpus.blocks(), 16);
  EXPECT_EQ(c.model.codebook_size, 256);
  EXPECT_EQ(c.model.max_positions, 257);
  EXPECT_EQ(c.model.condition_vocab, c.corpus.classes);
  EXPECT_EQ(c.sweep.lambda, (std::vector<double>{0.0, 0.01, 0.05, 0.1, 0.5, 1.0}));
  EXPECT_EQ(c.sweep.overlap, (std::vector<double>{0.0, 0.5, 0.75}));
}

TEST(ParseConfig, SectionsAndSeedSplitting) {
  const ExperimentConfig c = parse_config(R"(
seed: 7
output_dir: out/x
corpus:
  frames: 17
  spatial: 4
strategy:
  name: reco
  window: 8
  stride: 4
  p_first: uniform
  learning_rate: 0.001
sampling:
  mode: greedy
)");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.output_dir, "out/x");
  EXPECT_EQ(c.corpus.tokens_per_sequence(), 20);
  EXPECT_EQ(c.strategy.strategy, Strategy::ReCo);
  EXPECT_FALSE(c.strategy.p_first.has_value());
  EXPECT_EQ(c.strategy.optimizer.learning_rate, 0.001);
  EXPECT_EQ(c.sampling.mode, SamplingMode::Greedy);
  EXPECT_EQ(c.corpus.seed, derive_seed(7, "corpus"));
  EXPECT_EQ(c.strategy.seed, derive_seed(7, "strategy"));
  EXPECT_NE(c.corpus.seed, c.strategy.seed);
  const ExperimentConfig o = parse_config("seed: 7\n", "x", 9);
  EXPECT_EQ(o.seed, 9u);
  EXPECT_NE(hash_of(o), hash_of(parse_config("seed: 7\n")));
}

TEST(ParseConfig, ErrorsCarryPositions) {
  EXPECT_EQ(error_of("corpus:\n  frames: 17\n  bogus: 1\n"), "cfg.yaml:3:3: unknown key 'bogus' in section 'corpus'");
  EXPECT_EQ(error_of("model:\n  d_model: sixty\n"), "cfg.yaml:2:12: 'd_model' must be an integer, got 'sixty'");
  EXPECT_EQ(error_of("whatever: 1\n"), "cfg.yaml:1:1: unknown top-level key 'whatever'");
  EXPECT_EQ(error_of("sweep:\n  lambda: 0.1\n"), "cfg.yaml:2:11: 'lambda' must be a list");
  EXPECT_NE(error_of("corpus: [1, 2\n").find("cfg.yaml:"), std::string::npos);
  // Semantic errors point at the section.
  EXPECT_EQ(error_of("x: 1\n").substr(0, 11), "cfg.yaml:1:");
  const std::string e = error_of("\ncorpus:\n  frames: 18\n");
  EXPECT_EQ(e.rfind("cfg.yaml:2:1: corpus: ", 0), 0u) << e;
}

TEST(ParseConfig, CrossSectionChecks) {
  EXPECT_NE(error_of("strategy:\n  name: local_opt\n  window: 60\n"), "");
  EXPECT_NE(error_of("strategy:\n  name: nope\n"), "");
  EXPECT_NE(error_of("sweep:\n  axis: depth\n"), "");
  EXPECT_NE(error_of("sweep:\n  overlap: [1.0]\n"), "");
  EXPECT_NE(error_of("bench:\n  reps: 10\n"), "");
  EXPECT_NE(error_of("generation:\n  w_gen: 32\n  slide: 12\n"), "");
  EXPECT_EQ(error_of("generation:\n  w_gen: 128\n  slide: 64\n"), "");
}

TEST(SweepPoints, GridsMapToConfigs) {
  ExperimentConfig c = parse_config("strategy:\n  name: local_opt\n  window: 64\n");
  c.sweep.axis = "lambda";
  auto pts = sweep_points(c);
  ASSERT_EQ(pts.size(), 6u);
  for (const auto& p : pts) {
    EXPECT_EQ(p.config.strategy.strategy, Strategy::ReCo);
    EXPECT_EQ(p.config.strategy.lambda, p.value);
    EXPECT_EQ(p.config.seed, pts[0].config.seed);  // matched twins
  }
  c.sweep.axis = "overlap";
  pts = sweep_points(c);
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[0].config.strategy.stride, 64);
  EXPECT_EQ(pts[1].config.strategy.stride, 32);
  EXPECT_EQ(pts[2].config.strategy.stride, 16);
  c.sweep.axis = "horizon";
  pts = sweep_points(c);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].config.corpus.tokens_per_sequence(), 256);
  EXPECT_EQ(pts[1].config.corpus.tokens_per_sequence(), 512);
  EXPECT_EQ(pts[1].config.model.max_positions, 513);
  c.sweep.axis = "motion";
  c.sweep.seeds = 2;
  pts = sweep_points(c);
  ASSERT_EQ(pts.size(), 8u);
  EXPECT_NE(pts[0].config.seed, pts[4].config.seed);
  EXPECT_EQ(pts[2].config.corpus.motion_scale, 1.0);
}

TEST(SampleConfigs, AllParseAndDefaultFileMatchesBuiltins) {
  const std::filesystem::path dir = std::filesystem::path(ARLAB_SAMPLES_DIR) / "configs";
  int seen = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".yaml") continue;
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
    ++seen;
  }
  EXPECT_GE(seen, 5);
  const ExperimentConfig spelled = load_config(dir / "default.yaml");
  EXPECT_EQ(echo(spelled), echo(parse_config("")));
}
