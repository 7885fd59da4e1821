#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "arlab/model.hpp"
#include "arlab/nn/grad_check.hpp"
#include "test_support.hpp"

using namespace arlab;
using arlab::testing::random_tokens;
using arlab::testing::tiny_model;

TEST(Forward, ShapeIsTokensPlusConditionByVocab) {
  const Model m(tiny_model(), 1);
  Rng rng(1);
  const auto toks = random_tokens(12, 16, rng);
  const Model::Forward f = m.forward(toks, 2);
  EXPECT_EQ(f.logits.rows(), 13u);
  EXPECT_EQ(f.logits.cols(), static_cast<std::size_t>(m.config().vocab_size()));
  EXPECT_EQ(f.trace.length(), 13u);
  EXPECT_TRUE(f.trace.states.all_finite());
}

TEST(Forward, ConditionOnlyGivesSingleRow) {
  const Model m(tiny_model(), 1);
  const Model::Forward f = m.forward({}, 0);
  EXPECT_EQ(f.logits.rows(), 1u);
}

TEST(Forward, CausalityIsExact) {
  const Model m(tiny_model(), 5);
  Rng rng(5);
  const auto toks = random_tokens(20, 16, rng);
  const Model::Forward base = m.forward(toks, 1);
  for (int j : {0, 7, 19}) {
    auto changed = toks;
    for (std::size_t i = j; i < changed.size(); ++i) changed[i] = (changed[i] + 3) % 16;
    const Model::Forward f = m.forward(changed, 1);
    // Slot i (0 = condition) sees tokens < i, so slots 0..j are unaffected.
    for (std::size_t r = 0; r <= static_cast<std::size_t>(j); ++r) {
      for (std::size_t c = 0; c < base.logits.cols(); ++c) ASSERT_EQ(f.logits(r, c), base.logits(r, c));
    }
  }
}

TEST(Forward, Errors) {
  const Model m(tiny_model(16, 9), 1);
  const std::vector<int> long_seq(9, 0), bad = {0, 16};
  EXPECT_THROW(m.forward(long_seq, 0), std::length_error);
  EXPECT_THROW(m.forward(bad, 0), std::out_of_range);
  EXPECT_THROW(m.forward({}, 4), std::out_of_range);
}

TEST(Forward, DeterministicTrace) {
  const Model a(tiny_model(), 9), b(tiny_model(), 9);
  Rng rng(3);
  const auto toks = random_tokens(15, 16, rng);
  EXPECT_EQ(a.forward(toks, 3).trace.states, b.forward(toks, 3).trace.states);
}

TEST(ContextCache, WindowAfterCacheMatchesFullForward) {
  const Model m(tiny_model(), 2);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto toks = random_tokens(30, 16, rng);
    const std::size_t split = uniform_index(rng, 29);
    const std::span<const int> all(toks);
    const Model::Forward full = m.forward(all.first(29), 0);
    const ContextCache cache = m.build_context_cache(all.first(split), 0);
    const Model::Forward w = m.forward_window(cache, all.subspan(split, 29 - split));
    ASSERT_EQ(w.logits.rows(), 29 - split);
    for (std::size_t r = 0; r < w.logits.rows(); ++r) {
      for (std::size_t c = 0; c < w.logits.cols(); ++c) {
        ASSERT_NEAR(w.logits(r, c), full.logits(r + split + 1, c), 1e-12);
      }
    }
  }
}

TEST(ContextCache, DisjointWindowsConcatenateToFullForward) {
  const Model m(tiny_model(), 4);
  Rng rng(4);
  const auto toks = random_tokens(24, 16, rng);
  const std::span<const int> all(toks);
  const Model::Forward full = m.forward(all, 1);
  ContextCache cache = m.build_context_cache({}, 1);
  std::vector<double> joined(full.logits.values().begin(), full.logits.values().begin() + full.logits.cols());
  for (std::size_t start = 0; start < toks.size(); start += 8) {
    const Model::Forward w = m.forward_window(cache, all.subspan(start, 8));
    joined.insert(joined.end(), w.logits.values().begin(), w.logits.values().end());
    cache = m.build_context_cache(all.first(start + 8), 1);
  }
  ASSERT_EQ(joined.size(), full.logits.size());
  for (std::size_t i = 0; i < joined.size(); ++i) ASSERT_NEAR(joined[i], full.logits[i], 1e-12);
}

TEST(ContextCache, WholeSequenceWindowEqualsForward) {
  const Model m(tiny_model(), 4);
  Rng rng(8);
  const auto toks = random_tokens(10, 16, rng);
  const Model::Forward full = m.forward(toks, 2);
  const Model::Forward w = m.forward_window(m.build_context_cache({}, 2), toks);
  for (std::size_t i = full.logits.cols(); i < full.logits.size(); ++i) {
    ASSERT_EQ(w.logits[i - full.logits.cols()], full.logits[i]);
  }
}

TEST(ContextCache, OverflowRejected) {
  const Model m(tiny_model(16, 9), 1);
  const std::vector<int> prefix(5, 1), window(4, 1), too_long(9, 0);
  const ContextCache c = m.build_context_cache(prefix, 0);
  EXPECT_THROW(m.forward_window(c, window), std::length_error);
  EXPECT_THROW(m.build_context_cache(too_long, 0), std::length_error);
}

// Gradients of a window loss computed through the cache: context token rows
// of the embedding get nothing, attention weights get something.
TEST(ContextCache, FrozenContextGradientContract) {
  const Model m(tiny_model(), 6);
  Rng rng(6);
  // Context uses tokens {0..7}, window uses tokens {8..15}.
  std::vector<int> ctx = random_tokens(12, 8, rng), win = random_tokens(6, 8, rng);
  for (int& t : win) t += 8;
  const ContextCache cache = m.build_context_cache(ctx, 1);
  Graph g;
  const BoundParams p = m.bind(g);
  ModelOutput o = m.run(g, p, std::span(win).first(5), 1, &cache);
  const std::vector<int> targets(win.begin() + 1, win.end());
  g.backward(nn::cross_entropy(nn::slice_cols(o.logits, 0, 16), targets));
  const Tensor& emb = *g.grad(p.vars[Model::kTokEmb]);
  for (int tok = 0; tok < 8; ++tok) {
    for (std::size_t c = 0; c < emb.cols(); ++c) ASSERT_EQ(emb(tok, c), 0.0);
  }
  // The condition token row belongs to the frozen context as well.
  for (std::size_t c = 0; c < emb.cols(); ++c) ASSERT_EQ(emb(m.config().condition_token(1), c), 0.0);
  double wq = 0.0;
  for (double x : g.grad(p.vars[m.layer_param(0, Model::kWq)])->values()) wq += std::abs(x);
  EXPECT_GT(wq, 0.0);
}

TEST(GradCheck, FullTinyTransformer) {
  ModelConfig c = tiny_model(6, 12);
  c.d_model = 4;
  c.condition_vocab = 2;
  const Model m(c, 10);
  Rng rng(10);
  const auto toks = random_tokens(8, 6, rng);
  const std::vector<int> slots = m.slots_for(1, std::span(toks).first(7));
  std::vector<Tensor> params = m.parameters();
  nn::LossBuilder build = [&](Graph& g, std::span<const Var> vars) {
    const BoundParams p{std::vector<Var>(vars.begin(), vars.end())};
    ModelOutput o = m.run(g, p, slots, 1);
    return nn::add(nn::cross_entropy(nn::slice_cols(o.logits, 0, 6), toks), nn::continuity_loss(o.hidden, 8));
  };
  const auto r = nn::grad_check(build, params, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-5);
  EXPECT_EQ(r.checked_entries, m.parameter_count());
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_model();
  c.n_heads = 3;
  EXPECT_THROW(Model(c, 0), ConfigError);
  c = tiny_model();
  c.max_positions = 1;
  EXPECT_THROW(Model(c, 0), ConfigError);
}

TEST(ModelConfig, DefaultScale) {
  const ModelConfig c;
  EXPECT_EQ(c.vocab_size(), 320);
  EXPECT_EQ(c.d_model, 64);
  EXPECT_EQ(c.n_layers, 4);
  EXPECT_EQ(c.n_heads, 4);
  EXPECT_EQ(c.max_positions, 257);
}
