#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "arlab/model.hpp"
#include "arlab/nn/ops.hpp"
#include "arlab/random.hpp"
#include "arlab/strategies.hpp"

namespace arlab::testing {

inline ModelConfig tiny_model(int codebook = 16, int max_positions = 41) {
  ModelConfig c;
  c.codebook_size = codebook;
  c.condition_vocab = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_positions = max_positions;
  c.mlp_ratio = 2;
  c.init_std = 0.3;
  return c;
}

inline std::vector<int> random_tokens(std::size_t n, int vocab, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(uniform_index(rng, vocab));
  return t;
}

// Independent re-statement of the architecture: every slot runs in one graph,
// and the key/value rows of the first `frozen` slots pass through an explicit
// stop-gradient. The returned logits cover all slots.
inline nn::Var stop_gradient_forward(nn::Graph&, const Model& model, const BoundParams& p,
                                     std::span<const int> slots, std::size_t frozen) {
  using namespace arlab::nn;
  const ModelConfig& c = model.config();
  const auto& v = p.vars;
  std::vector<int> pos(slots.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Var x = add(embedding(v[Model::kTokEmb], slots), embedding(v[Model::kPosEmb], pos));
  const std::size_t n = slots.size();
  auto freeze = [&](const Var& t) {
    if (frozen == 0) return t;
    Var head = stop_gradient(slice_rows(t, 0, frozen));
    if (frozen == n) return head;
    return concat_rows(head, slice_rows(t, frozen, n - frozen));
  };
  for (int l = 0; l < c.n_layers; ++l) {
    auto w = [&](Model::LayerSlot s) { return v[model.layer_param(l, s)]; };
    Var a = layer_norm(x, w(Model::kLn1Gain), w(Model::kLn1Bias));
    Var q = matmul(a, w(Model::kWq));
    Var k = freeze(matmul(a, w(Model::kWk)));
    Var val = freeze(matmul(a, w(Model::kWv)));
    x = add(x, matmul(causal_attention(q, k, val, 1, c.n_heads), w(Model::kWo)));
    Var m = layer_norm(x, w(Model::kLn2Gain), w(Model::kLn2Bias));
    x = add(x, add_bias(matmul(gelu(add_bias(matmul(m, w(Model::kW1)), w(Model::kB1))), w(Model::kW2)), w(Model::kB2)));
  }
  return matmul(layer_norm(x, v[model.final_gain()], v[model.final_bias()]), v[model.head()]);
}

inline double relative_difference(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return den == 0.0 ? num : num / den;
}

inline TokenSequence random_sequence(int blocks, int spatial, int vocab, int condition, Rng& rng) {
  TokenSequence s;
  s.condition = condition;
  s.blocks = blocks;
  s.spatial = spatial;
  s.tokens = random_tokens(static_cast<std::size_t>(blocks) * spatial, vocab, rng);
  return s;
}

// CE over the codebook columns of a full teacher-forced forward, restricted
// to 0-based positions [first, first + count).
inline double masked_full_ce(const Model& m, const TokenSequence& s, int first, int count) {
  const Model::Forward f = m.forward(std::span(s.tokens).first(s.tokens.size() - 1), s.condition);
  const std::size_t v = m.config().vocab_size(), cb = m.config().codebook_size;
  double total = 0.0;
  for (int i = first; i < first + count; ++i) {
    const double* row = f.logits.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < cb; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cb; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[s.tokens[i]];
  }
  return total / count;
}

}  // namespace arlab::testing
