#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arlab/corpus.hpp"
#include "arlab/model.hpp"
#include "arlab/random.hpp"

namespace arlab {

enum class SamplingMode { Greedy, Sample };

// Sample mode draws from softmax(logits / temperature), optionally truncated
// to the top_k entries (0 keeps all).
struct SamplingConfig {
  SamplingMode mode = SamplingMode::Sample;
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (mode == SamplingMode::Sample && !(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (top_k < 0) throw ConfigError("top_k must be >= 0");
  }

  friend bool operator==(const SamplingConfig&, const SamplingConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SamplingConfig& c) {
  j = {{"mode", c.mode == SamplingMode::Greedy ? "greedy" : "sample"},
       {"temperature", c.temperature},
       {"top_k", c.top_k},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SamplingConfig& c) {
  c = SamplingConfig{};
  const std::string mode = j.value("mode", std::string("sample"));
  if (mode == "greedy") {
    c.mode = SamplingMode::Greedy;
  } else if (mode == "sample") {
    c.mode = SamplingMode::Sample;
  } else {
    throw ConfigError("sampling mode must be 'greedy' or 'sample', got '" + mode + "'");
  }
  c.temperature = j.value("temperature", c.temperature);
  c.top_k = j.value("top_k", c.top_k);
  c.seed = j.value("seed", c.seed);
}

inline int argmax_lowest(std::span<const double> logits) {
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  }
  return best;
}

inline int sample_token(std::span<const double> logits, const SamplingConfig& sampling, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("sample_token: empty logits");
  for (double x : logits) {
    if (!std::isfinite(x)) throw nn::NumericError("sample_token: non-finite logit");
  }
  if (sampling.mode == SamplingMode::Greedy) return argmax_lowest(logits);
  sampling.validate();

  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  if (sampling.top_k > 0 && static_cast<std::size_t>(sampling.top_k) < logits.size()) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    order.resize(sampling.top_k);
    std::sort(order.begin(), order.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : order) mx = std::max(mx, logits[i]);
  std::vector<double> weight(order.size());
  double z = 0.0;
  for (std::size_t a = 0; a < order.size(); ++a) {
    weight[a] = std::exp((logits[order[a]] - mx) / sampling.temperature);
    z += weight[a];
  }
  double u = uniform01(rng) * z;
  for (std::size_t a = 0; a < order.size(); ++a) {
    u -= weight[a];
    if (u < 0.0) return order[a];
  }
  // Rounding left u marginally non-negative: take the last positive entry.
  for (std::size_t a = order.size(); a-- > 0;) {
    if (weight[a] > 0.0) return order[a];
  }
  return order.back();
}

inline double log_softmax_at(std::span<const double> logits, int index) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  return logits[index] - mx - std::log(z);
}

struct GenerationRecord {
  int condition = 0;
  TokenSequence tokens;
  std::vector<double> log_probs;  // model log-probability of each emitted token
  HiddenTrace trace;              // state that produced each token, one row per token
  int passes = 0;                 // forward passes started from raw tokens
};

// One pass of the sliding scheme: re-feed `context` raw tokens (the tail of
// what exists so far) and emit `count` new tokens starting at `first`.
struct IterativePass {
  int first = 0;
  int context = 0;
  int count = 0;
};

// Pass plan: an initial pass of w_gen tokens from the condition alone, then
// re-feed passes that keep the last (w_gen - slide) tokens and emit `slide`
// more, until `total` tokens exist.
inline std::vector<IterativePass> iterative_schedule(std::int64_t w_gen, std::int64_t slide, std::int64_t total,
                                                     std::int64_t align = 1) {
  if (w_gen < 1 || slide < 1 || total < 1 || align < 1) throw std::invalid_argument("schedule extents must be positive");
  if (slide > w_gen) throw std::invalid_argument("slide exceeds generation window");
  if (w_gen > total) throw std::invalid_argument("generation window exceeds total length");
  if (w_gen % align || slide % align || total % align) {
    throw std::invalid_argument("schedule parameters are not block aligned");
  }
  if ((total - w_gen) % slide != 0) {
    throw std::invalid_argument("total - w_gen is not a multiple of slide");
  }
  std::vector<IterativePass> plan{{0, 0, static_cast<int>(w_gen)}};
  for (std::int64_t have = w_gen; have < total; have += slide) {
    plan.push_back({static_cast<int>(have), static_cast<int>(w_gen - slide), static_cast<int>(slide)});
  }
  return plan;
}

namespace detail {

// Runs one pass with an incremental cache primed from [condition, context].
// Positions below forced.size() take the forced token instead of sampling.
inline void run_pass(const Model& model, const IterativePass& pass, std::span<const int> forced,
                     const SamplingConfig& sampling, Rng& rng, GenerationRecord& rec) {
  const ModelConfig& mc = model.config();
  const std::size_t cb = mc.codebook_size, d = mc.d_model;
  std::vector<int> slots{mc.condition_token(rec.condition)};
  slots.insert(slots.end(), rec.tokens.tokens.end() - pass.context, rec.tokens.tokens.end());
  int slot = slots.back();
  slots.pop_back();
  ContextCache cache = model.build_cache_from_slots(slots, 1), next;
  ++rec.passes;
  for (int i = 0; i < pass.count; ++i) {
    Graph g;
    g.set_grad_enabled(false);
    const BoundParams p = model.bind(g);
    const int one[1] = {slot};
    ModelOutput o = model.run(g, p, one, 1, cache.empty() ? nullptr : &cache, &next);
    std::swap(cache, next);
    const std::span<const double> row(o.logits.value().data(), cb);
    const std::size_t pos = static_cast<std::size_t>(pass.first) + i;
    int tok;
    if (pos < forced.size()) {
      tok = forced[pos];
      if (tok < 0 || tok >= mc.codebook_size) throw std::out_of_range("forced token outside codebook");
    } else {
      tok = sample_token(row, sampling, rng);
    }
    rec.tokens.tokens.push_back(tok);
    rec.log_probs.push_back(log_softmax_at(row, tok));
    std::copy_n(o.hidden.value().data(), d, rec.trace.states.data() + pos * d);
    slot = tok;
  }
}

inline GenerationRecord start_record(const Model& model, int condition, int total, std::span<const int> forced) {
  model.check_condition(condition);
  if (forced.size() > static_cast<std::size_t>(total)) throw std::invalid_argument("forced prefix longer than request");
  GenerationRecord rec;
  rec.condition = condition;
  rec.tokens.condition = condition;
  rec.trace.states = Tensor::matrix(total, model.config().d_model);
  return rec;
}

inline void finish_layout(GenerationRecord& rec, int spatial) {
  const int n = static_cast<int>(rec.tokens.tokens.size());
  if (spatial > 0 && n % spatial == 0) {
    rec.tokens.spatial = spatial;
    rec.tokens.blocks = n / spatial;
  } else {
    rec.tokens.spatial = n;
    rec.tokens.blocks = 1;
  }
}

}  // namespace detail

// Token-by-token decoding over the full generated history. Tokens of
// `forced` are teacher-forced (scored, not sampled) before free generation.
inline GenerationRecord generate_full(const Model& model, int condition, int length, const SamplingConfig& sampling,
                                      std::span<const int> forced = {}, int spatial = 0) {
  const ModelConfig& mc = model.config();
  if (length < 1 || length > mc.max_positions - 1) {
    throw std::length_error("generation length " + std::to_string(length) + " outside [1, " +
                            std::to_string(mc.max_positions - 1) + "]");
  }
  GenerationRecord rec = detail::start_record(model, condition, length, forced);
  Rng rng(sampling.seed);
  detail::run_pass(model, {0, 0, length}, forced, sampling, rng, rec);
  detail::finish_layout(rec, spatial);
  return rec;
}

// Sliding scheme: each re-feed pass sees only raw tokens of the last
// (w_gen - slide) positions, never cached states of earlier passes.
inline GenerationRecord generate_iterative(const Model& model, int condition, int w_gen, int slide, int total,
                                           const SamplingConfig& sampling, int spatial = 1,
                                           std::span<const int> forced = {}) {
  const std::vector<IterativePass> plan = iterative_schedule(w_gen, slide, total, std::max(1, spatial));
  if (w_gen > model.config().max_positions - 1) throw std::length_error("generation window exceeds model context");
  GenerationRecord rec = detail::start_record(model, condition, total, forced);
  Rng rng(sampling.seed);
  for (const IterativePass& pass : plan) detail::run_pass(model, pass, forced, sampling, rng, rec);
  detail::finish_layout(rec, std::max(1, spatial));
  return rec;
}

}  // namespace arlab
