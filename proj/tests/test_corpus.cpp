#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "arlab/corpus.hpp"

using namespace arlab;

namespace {

double mean_step_displacement(const CorpusConfig& c, int n) {
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    const LatentTrajectory z = gen_trajectory(c, i % c.classes, 1000 + i);
    for (int b = 1; b + 1 < z.blocks; ++b) {
      for (int s = 0; s < z.spatial; ++s) {
        double d = 0.0;
        for (int k = 0; k < z.dim; ++k) d += std::pow(z.vec(b + 1, s)[k] - z.vec(b, s)[k], 2);
        total += std::sqrt(d);
        ++count;
      }
    }
  }
  return total / count;
}

}  // namespace

TEST(BlockCount, Formula) {
  EXPECT_EQ(block_count(17, 4), 5);
  EXPECT_EQ(block_count(1, 4), 1);
  EXPECT_EQ(block_count(33, 4), 9);
  EXPECT_EQ(block_count(61, 4), 16);
  EXPECT_THROW(block_count(18, 4), std::invalid_argument);
}

TEST(CorpusConfig, DefaultGeometry) {
  const CorpusConfig c;
  EXPECT_EQ(c.blocks(), 16);
  EXPECT_EQ(c.tokens_per_sequence(), 256);
  EXPECT_EQ(c.codebook_size, 256);
  EXPECT_EQ(c.dim, 8);
}

TEST(Codebook, EntriesDistinct) {
  const Codebook cb = make_codebook(CorpusConfig{});
  EXPECT_EQ(cb.size, 256);
  EXPECT_GT(cb.min_pairwise_distance(), 0.0);
}

TEST(GenTrajectory, DeterministicAndBounded) {
  const CorpusConfig c;
  const LatentTrajectory a = gen_trajectory(c, 3, 77), b = gen_trajectory(c, 3, 77);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.regime, b.regime);
  for (double v : a.values) {
    EXPECT_LE(v, c.amplitude);
    EXPECT_GE(v, -c.amplitude);
  }
}

TEST(GenTrajectory, FrozenDynamicsAtZeroMotion) {
  CorpusConfig c;
  c.motion_scale = 0.0;
  const LatentTrajectory z = gen_trajectory(c, 1, 5);
  for (int b = 1; b < z.blocks; ++b) {
    for (int s = 0; s < z.spatial; ++s) {
      for (int k = 0; k < z.dim; ++k) ASSERT_EQ(z.vec(b, s)[k], z.vec(0, s)[k]);
    }
  }
}

TEST(GenTrajectory, DisplacementGrowsWithMotion) {
  CorpusConfig c;
  double previous = 0.0;
  for (double m : {0.5, 1.0, 2.0}) {
    c.motion_scale = m;
    const double d = mean_step_displacement(c, 100);
    EXPECT_GT(d, previous) << "motion " << m;
    previous = d;
  }
}

TEST(GenTrajectory, RejectsBadInputs) {
  CorpusConfig c;
  EXPECT_THROW(gen_trajectory(c, c.classes, 1), std::out_of_range);
  c.motion_scale = -1.0;
  EXPECT_THROW(gen_trajectory(c, 0, 1), ConfigError);
}

TEST(Quantize, ExactEntryAndTieBreak) {
  Codebook cb{8, 1, {0.0, 1.0, -1.0, 5.0, 6.0, 7.0, 8.0, 9.5}};
  LatentTrajectory z;
  z.blocks = 1;
  z.spatial = 2;
  z.dim = 1;
  z.values = {9.5, 0.5};  // entry 7; equidistant to 0 and 1
  const TokenSequence t = quantize(z, cb);
  EXPECT_EQ(t.tokens, (std::vector<int>{7, 0}));

  Codebook tie{6, 1, {10.0, 11.0, 0.0, 12.0, 13.0, 2.0}};
  z.spatial = 1;
  z.values = {1.0};  // equidistant to entries 2 and 5
  EXPECT_EQ(quantize(z, tie).tokens[0], 2);
}

TEST(Quantize, MatchesExhaustiveScan) {
  const CorpusConfig c;
  const Codebook cb = make_codebook(c);
  const LatentTrajectory z = gen_trajectory(c, 2, 9);
  const TokenSequence t = quantize(z, cb);
  for (int i = 0; i < z.vectors(); ++i) {
    const auto v = z.vec(i / z.spatial, i % z.spatial);
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int e = 0; e < cb.size; ++e) {
      double d = 0.0;
      for (int k = 0; k < cb.dim; ++k) d += (v[k] - cb.entries[e * cb.dim + k]) * (v[k] - cb.entries[e * cb.dim + k]);
      if (d < best_d) {
        best_d = d;
        best = e;
      }
    }
    ASSERT_EQ(t.tokens[i], best);
  }
}

TEST(Quantize, DimensionMismatch) {
  LatentTrajectory z;
  z.blocks = z.spatial = 1;
  z.dim = 3;
  z.values = {0, 0, 0};
  EXPECT_THROW(quantize(z, Codebook{2, 2, {0, 0, 1, 1}}), std::invalid_argument);
}

TEST(Decode, RoundTripAndErrorBound) {
  const CorpusConfig c;
  const Codebook cb = make_codebook(c);
  // Codebook entries themselves round-trip exactly.
  LatentTrajectory lattice;
  lattice.blocks = 1;
  lattice.spatial = cb.size;
  lattice.dim = cb.dim;
  lattice.values = cb.entries;
  EXPECT_EQ(decode(quantize(lattice, cb), cb).values, cb.entries);

  const LatentTrajectory z = gen_trajectory(c, 4, 21);
  const TokenSequence t = quantize(z, cb);
  const LatentTrajectory back = decode(t, cb);
  for (int i = 0; i < z.vectors(); ++i) {
    const auto v = z.vec(i / z.spatial, i % z.spatial);
    double nearest = std::numeric_limits<double>::infinity();
    for (int e = 0; e < cb.size; ++e) {
      double d = 0.0;
      for (int k = 0; k < cb.dim; ++k) d += std::pow(v[k] - cb.entry(e)[k], 2);
      nearest = std::min(nearest, std::sqrt(d));
    }
    double err = 0.0;
    for (int k = 0; k < cb.dim; ++k) err += std::pow(v[k] - back.vec(i / z.spatial, i % z.spatial)[k], 2);
    ASSERT_NEAR(std::sqrt(err), nearest, 1e-12);
  }
  // quantize is idempotent through decode.
  EXPECT_EQ(quantize(back, cb).tokens, t.tokens);
}

TEST(Decode, SingleTokenAndRangeCheck) {
  const Codebook cb{3, 2, {0, 1, 2, 3, 4, 5}};
  TokenSequence t;
  t.tokens = {2};
  const LatentTrajectory z = decode(t, cb);
  EXPECT_EQ(z.vectors(), 1);
  EXPECT_EQ(z.values, (std::vector<double>{4, 5}));
  t.tokens = {3};
  EXPECT_THROW(decode(t, cb), std::out_of_range);
}

TEST(MakeDataset, SplitBalanceDeterminism) {
  CorpusConfig c;
  c.frames = 17;
  const Dataset a = make_dataset(c, 100, 5), b = make_dataset(c, 100, 5);
  EXPECT_EQ(a.train.size(), 90u);
  EXPECT_EQ(a.eval.size(), 10u);
  std::map<int, int> hist;
  for (const auto* split : {&a.train, &a.eval}) {
    for (const TokenSequence& s : *split) {
      ++hist[s.condition];
      EXPECT_EQ(s.tokens.size(), static_cast<std::size_t>(c.tokens_per_sequence()));
      for (int t : s.tokens) ASSERT_LT(t, c.codebook_size);
    }
  }
  int lo = 1 << 30, hi = 0;
  for (const auto& [cls, n] : hist) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  EXPECT_EQ(static_cast<int>(hist.size()), c.classes);
  EXPECT_LE(hi - lo, 1);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].tokens, b.train[i].tokens);
  EXPECT_THROW(make_dataset(c, 1, 5), std::invalid_argument);
}

TEST(MakeDataset, RegimeIdentifiableOnlyFromFirstBlock) {
  const CorpusConfig c;
  const Dataset ds = make_dataset(c, 1000, 13);
  EXPECT_GT(regime_probe_accuracy(ds.train, ds.eval, ds.codebook, 0, c.regimes), 0.9);
  for (int block : {1, 5, 10, 15}) {
    const double acc = regime_probe_accuracy(ds.train, ds.eval, ds.codebook, block, c.regimes);
    EXPECT_LT(acc, 0.45) << "block " << block;
  }
}

TEST(DatasetFile, JsonRoundTrip) {
  CorpusConfig c;
  c.frames = 9;
  const Dataset ds = make_dataset(c, 20, 3);
  const nlohmann::json j = dataset_to_json(ds, 20, 3);
  EXPECT_EQ(j.at("format"), kDatasetFormat);
  EXPECT_EQ(j.at("config_hash").get<std::string>().size(), 16u);
  const Dataset back = dataset_from_json(j);
  EXPECT_EQ(back.config, ds.config);
  EXPECT_EQ(back.codebook.entries, ds.codebook.entries);
  ASSERT_EQ(back.eval.size(), ds.eval.size());
  for (std::size_t i = 0; i < ds.eval.size(); ++i) {
    EXPECT_EQ(back.eval[i].tokens, ds.eval[i].tokens);
    EXPECT_EQ(back.eval[i].regime, ds.eval[i].regime);
    EXPECT_EQ(back.eval[i].blocks, ds.eval[i].blocks);
  }
  EXPECT_EQ(dataset_to_json(back, 20, 3).dump(), j.dump());
}
