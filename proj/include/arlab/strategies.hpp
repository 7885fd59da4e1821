#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "arlab/corpus.hpp"
#include "arlab/model.hpp"
#include "arlab/nn/graph.hpp"
#include "arlab/nn/ops.hpp"
#include "arlab/nn/optim.hpp"
#include "arlab/random.hpp"

namespace arlab {

enum class Strategy { Baseline, FewerFrames, LocalOpt, LocalOptBalanced, ReCo };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Baseline: return "baseline";
    case Strategy::FewerFrames: return "fewer_frames";
    case Strategy::LocalOpt: return "local_opt";
    case Strategy::LocalOptBalanced: return "local_opt_balanced";
    case Strategy::ReCo: return "reco";
  }
  return "unknown";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::Baseline, Strategy::FewerFrames, Strategy::LocalOpt,
                     Strategy::LocalOptBalanced, Strategy::ReCo}) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

// Window over 1-based token positions [start, start + width - 1].
struct WindowSpec {
  int start = 1;
  int width = 1;
  int stride = 1;

  int end() const { return start + width - 1; }

  void validate(int n) const {
    if (start < 1 || width < 1 || stride < 1 || end() > n) {
      throw std::invalid_argument("invalid window (start " + std::to_string(start) + ", width " +
                                  std::to_string(width) + ", stride " + std::to_string(stride) +
                                  ") for " + std::to_string(n) + " tokens");
    }
  }
};

struct StrategyConfig {
  Strategy strategy = Strategy::Baseline;
  int window = 64;  // W in tokens
  int stride = 32;  // S in tokens
  int k_blocks = 2;  // Fewer-Frames crop length
  // Probability of the first window for balanced sampling; unset means the
  // uniform share 1/|starts|. Plain LocalOpt always uses the uniform share.
  std::optional<double> p_first = 0.5;
  double lambda = 0.1;
  bool reco_all_layers = false;
  int batch = 4;
  nn::AdamWConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    if (window < 1 || stride < 1) throw ConfigError("window and stride must be positive");
    if (k_blocks < 1) throw ConfigError("k_blocks must be positive");
    if (p_first && !(*p_first >= 0.0 && *p_first <= 1.0)) throw ConfigError("p_first must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (batch < 1) throw ConfigError("batch must be positive");
    if (strategy == Strategy::ReCo && window < 2) throw ConfigError("ReCo needs window >= 2");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  }

  friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

inline void to_json(nlohmann::json& j, const StrategyConfig& c) {
  j = {{"strategy", strategy_name(c.strategy)},
       {"window", c.window},
       {"stride", c.stride},
       {"k_blocks", c.k_blocks},
       {"p_first", c.p_first ? nlohmann::json(*c.p_first) : nlohmann::json("uniform")},
       {"lambda", c.lambda},
       {"reco_all_layers", c.reco_all_layers},
       {"batch", c.batch},
       {"learning_rate", c.optimizer.learning_rate},
       {"beta1", c.optimizer.beta1},
       {"beta2", c.optimizer.beta2},
       {"epsilon", c.optimizer.epsilon},
       {"weight_decay", c.optimizer.weight_decay},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, StrategyConfig& c) {
  c = StrategyConfig{};
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.window = j.value("window", c.window);
  c.stride = j.value("stride", c.stride);
  c.k_blocks = j.value("k_blocks", c.k_blocks);
  if (j.contains("p_first")) {
    const auto& p = j.at("p_first");
    if (p.is_string()) {
      if (p.get<std::string>() != "uniform") throw ConfigError("p_first must be a number or 'uniform'");
      c.p_first.reset();
    } else {
      c.p_first = p.get<double>();
    }
  }
  c.lambda = j.value("lambda", c.lambda);
  c.reco_all_layers = j.value("reco_all_layers", c.reco_all_layers);
  c.batch = j.value("batch", c.batch);
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.optimizer.epsilon = j.value("epsilon", c.optimizer.epsilon);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.seed = j.value("seed", c.seed);
}

// Starts {1 + kS : 1 + kS <= N - W + 1}, ascending.
inline std::vector<int> enumerate_window_starts(int n, int width, int stride) {
  if (width < 1 || stride < 1) throw std::invalid_argument("window width and stride must be positive");
  if (width > n) {
    throw std::invalid_argument("window width " + std::to_string(width) + " exceeds sequence length " +
                                std::to_string(n));
  }
  std::vector<int> starts;
  for (int s = 1; s <= n - width + 1; s += stride) starts.push_back(s);
  return starts;
}

// First start with probability p_first, otherwise uniform over the rest.
inline int sample_window_start(std::span<const int> starts, double p_first, Rng& rng) {
  if (starts.empty()) throw std::invalid_argument("sample_window: no window starts");
  if (!(p_first >= 0.0 && p_first <= 1.0)) throw std::invalid_argument("sample_window: p_first outside [0, 1]");
  if (starts.size() == 1) return starts[0];
  if (uniform01(rng) < p_first) return starts[0];
  return starts[1 + uniform_index(rng, starts.size() - 1)];
}

inline WindowSpec sample_window(std::span<const int> starts, int width, int stride, double p_first, Rng& rng) {
  return WindowSpec{sample_window_start(starts, p_first, rng), width, stride};
}

// Contiguous run of k frame blocks starting at a uniformly drawn block.
struct Crop {
  TokenSequence sequence;
  int start_block = 0;  // 0-based
  int offset = 0;       // token offset of the crop in the source
};

inline int sample_crop_block(int blocks, int k_blocks, Rng& rng) {
  if (k_blocks < 1 || k_blocks > blocks) {
    throw std::invalid_argument("k_blocks " + std::to_string(k_blocks) + " outside [1, " +
                                std::to_string(blocks) + "]");
  }
  return static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(blocks - k_blocks + 1)));
}

inline Crop crop_at(const TokenSequence& seq, int start_block, int k_blocks) {
  if (k_blocks < 1 || start_block < 0 || start_block + k_blocks > seq.blocks) {
    throw std::invalid_argument("crop outside sequence");
  }
  Crop c;
  c.start_block = start_block;
  c.offset = start_block * seq.spatial;
  c.sequence.condition = seq.condition;
  c.sequence.blocks = k_blocks;
  c.sequence.spatial = seq.spatial;
  c.sequence.regime = seq.regime;
  c.sequence.tokens.assign(seq.tokens.begin() + c.offset, seq.tokens.begin() + c.offset + k_blocks * seq.spatial);
  return c;
}

inline Crop fewer_frames_crop(const TokenSequence& seq, int k_blocks, Rng& rng) {
  return crop_at(seq, sample_crop_block(seq.blocks, k_blocks, rng), k_blocks);
}

// Graph pieces of one objective evaluation over a batch.
struct LossTerms {
  Var ce;
  Var hidden;                      // final hidden states of the scored slots
  std::vector<Var> layer_states;   // per-layer residual streams of the same slots
  std::size_t segment = 0;         // scored slots per sequence
};

namespace detail {

inline void check_batch(std::span<const TokenSequence* const> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  for (const TokenSequence* s : batch) {
    if (s->tokens.size() != batch[0]->tokens.size()) throw std::invalid_argument("ragged batch");
  }
}

}  // namespace detail

// CE for tokens at 0-based positions [first, first + count) of every batch
// sequence. Slots [0, first) (condition and tokens 1..first-1) are run
// without gradient into a cache; only the scored slots enter `g`. Logits are
// restricted to the codebook columns.
inline LossTerms span_terms(Graph& g, const Model& model, const BoundParams& params,
                            std::span<const TokenSequence* const> batch, int first, int count) {
  detail::check_batch(batch);
  const int n = static_cast<int>(batch[0]->tokens.size());
  if (first < 0 || count < 1 || first + count > n) throw std::invalid_argument("span outside sequence");
  const std::size_t b = batch.size();
  std::vector<int> prefix_slots, slots, targets;
  for (const TokenSequence* s : batch) {
    const std::vector<int> all = model.slots_for(s->condition, std::span(s->tokens).first(n - 1));
    prefix_slots.insert(prefix_slots.end(), all.begin(), all.begin() + first);
    slots.insert(slots.end(), all.begin() + first, all.begin() + first + count);
    targets.insert(targets.end(), s->tokens.begin() + first, s->tokens.begin() + first + count);
  }
  ContextCache cache;
  if (first > 0) cache = model.build_cache_from_slots(prefix_slots, b);
  ModelOutput o = model.run(g, params, slots, b, first > 0 ? &cache : nullptr);
  LossTerms t;
  t.ce = nn::cross_entropy(nn::slice_cols(o.logits, 0, model.config().codebook_size), targets);
  t.hidden = o.hidden;
  t.layer_states = std::move(o.layer_states);
  t.segment = static_cast<std::size_t>(count);
  return t;
}

inline LossTerms baseline_terms(Graph& g, const Model& model, const BoundParams& params,
                                std::span<const TokenSequence* const> batch) {
  detail::check_batch(batch);
  return span_terms(g, model, params, batch, 0, static_cast<int>(batch[0]->tokens.size()));
}

inline LossTerms window_terms(Graph& g, const Model& model, const BoundParams& params,
                              std::span<const TokenSequence* const> batch, const WindowSpec& w) {
  detail::check_batch(batch);
  w.validate(static_cast<int>(batch[0]->tokens.size()));
  return span_terms(g, model, params, batch, w.start - 1, w.width);
}

inline Var reco_loss(const Var& hidden, std::size_t width) { return nn::continuity_loss(hidden, width); }

// Tensor form over one trace: (1/(W-1)) sum ||h[i+1] - h[i]||^2.
inline double reco_loss(const HiddenTrace& trace) {
  Graph g;
  g.set_grad_enabled(false);
  return nn::continuity_loss(g.reference(trace.states), trace.length()).value().item();
}

inline Var reco_terms(const LossTerms& t, bool all_layers) {
  if (!all_layers) return reco_loss(t.hidden, t.segment);
  Var acc = reco_loss(t.hidden, t.segment);
  for (const Var& h : t.layer_states) acc = nn::add(acc, reco_loss(h, t.segment));
  return nn::scale(acc, 1.0 / static_cast<double>(t.layer_states.size() + 1));
}

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
}

inline double total_loss(double ce, double reco, double lambda) {
  check_lambda(lambda);
  return ce + lambda * reco;
}

inline Var total_loss(const Var& ce, const Var& reco, double lambda) {
  check_lambda(lambda);
  if (lambda == 0.0) return ce;
  return nn::add(ce, nn::scale(reco, lambda));
}

// Single-sequence convenience forms (values only).
inline double baseline_loss(const Model& model, const TokenSequence& seq) {
  Graph g;
  g.set_grad_enabled(false);
  const TokenSequence* p = &seq;
  return baseline_terms(g, model, model.bind(g), std::span(&p, 1)).ce.value().item();
}

struct WindowLoss {
  double ce = 0.0;
  HiddenTrace trace;
};

inline WindowLoss local_opt_loss(const Model& model, const TokenSequence& seq, const WindowSpec& w) {
  Graph g;
  g.set_grad_enabled(false);
  const TokenSequence* p = &seq;
  LossTerms t = window_terms(g, model, model.bind(g), std::span(&p, 1), w);
  return {t.ce.value().item(), HiddenTrace{t.hidden.value(), static_cast<std::size_t>(w.start - 1)}};
}

// ---- training ---------------------------------------------------------------

struct TrainLogRow {
  std::int64_t step = 0;
  Strategy strategy = Strategy::Baseline;
  int window_start = 1;
  double ce = 0.0;
  double reco = 0.0;
  double total = 0.0;
  double step_wall_ms = 0.0;
};

inline constexpr const char* kTrainLogHeader = "step,strategy,window_start,ce,reco,total,step_wall_ms";

struct TrainState {
  nn::OptimizerState optimizer;
  Rng rng;
  std::int64_t step = 0;
};

inline TrainState init_train_state(const StrategyConfig& config) {
  TrainState s;
  s.optimizer.config = config.optimizer;
  s.rng.seed(derive_seed(config.seed, "train"));
  return s;
}

// Effective first-window probability for the windowed strategies.
inline double effective_p_first(const StrategyConfig& c, std::size_t n_starts) {
  const double uniform_share = 1.0 / static_cast<double>(n_starts);
  if (c.strategy == Strategy::LocalOpt) return uniform_share;
  return c.p_first.value_or(uniform_share);
}

// Forward graph of one training step, ready for backward.
struct PreparedStep {
  std::unique_ptr<Graph> graph;
  BoundParams params;
  LossTerms terms;
  Var reco;
  Var total;
  TrainLogRow row;
};

// Draws batch indices, then the window start (or crop block), from the
// trainer's RNG stream and builds the loss graph.
inline PreparedStep prepare_step(const Model& model, std::span<const TokenSequence> data,
                                 const StrategyConfig& config, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  std::vector<const TokenSequence*> batch;
  for (int i = 0; i < config.batch; ++i) batch.push_back(&data[uniform_index(rng, data.size())]);
  const int n = static_cast<int>(batch[0]->tokens.size());
  const int spatial = std::max(1, batch[0]->spatial);

  PreparedStep st;
  st.graph = std::make_unique<Graph>();
  Graph& g = *st.graph;
  st.row.strategy = config.strategy;
  st.params = model.bind(g);
  switch (config.strategy) {
    case Strategy::Baseline:
      st.terms = baseline_terms(g, model, st.params, batch);
      break;
    case Strategy::FewerFrames: {
      const int start_block = sample_crop_block(batch[0]->blocks, config.k_blocks, rng);
      std::vector<Crop> crops;
      for (const TokenSequence* s : batch) crops.push_back(crop_at(*s, start_block, config.k_blocks));
      std::vector<const TokenSequence*> crop_ptrs;
      for (const Crop& c : crops) crop_ptrs.push_back(&c.sequence);
      st.row.window_start = start_block * spatial + 1;
      st.terms = baseline_terms(g, model, st.params, crop_ptrs);
      break;
    }
    case Strategy::LocalOpt:
    case Strategy::LocalOptBalanced:
    case Strategy::ReCo: {
      if (config.window % spatial != 0 || config.stride % spatial != 0) {
        throw ConfigError("window and stride must be multiples of the block size " + std::to_string(spatial));
      }
      const std::vector<int> starts = enumerate_window_starts(n, config.window, config.stride);
      const WindowSpec w = sample_window(starts, config.window, config.stride,
                                         effective_p_first(config, starts.size()), rng);
      st.row.window_start = w.start;
      st.terms = window_terms(g, model, st.params, batch, w);
      break;
    }
  }

  const double lambda = config.strategy == Strategy::ReCo ? config.lambda : 0.0;
  if (lambda > 0.0) {
    st.reco = reco_terms(st.terms, config.reco_all_layers);
  } else {
    // Diagnostic only: evaluated outside the tape.
    nn::NoGradGuard guard(g);
    st.reco = reco_terms(st.terms, config.reco_all_layers);
  }
  st.total = total_loss(st.terms.ce, st.reco, lambda);
  st.row.ce = st.terms.ce.value().item();
  st.row.reco = st.reco.value().item();
  st.row.total = st.total.value().item();
  return st;
}

// One optimizer step.
inline TrainLogRow train_step(Model& model, std::span<const TokenSequence> data, const StrategyConfig& config,
                              TrainState& state) {
  const auto t0 = std::chrono::steady_clock::now();
  PreparedStep st = prepare_step(model, data, config, state.rng);
  st.graph->backward(st.total);
  std::vector<Tensor*> ps;
  std::vector<const Tensor*> gs;
  for (std::size_t i = 0; i < st.params.vars.size(); ++i) {
    ps.push_back(&model.parameters()[i]);
    gs.push_back(st.graph->grad(st.params.vars[i]));
  }
  nn::optimizer_step(ps, gs, state.optimizer, model.decay_mask());
  ++state.step;
  st.row.step = state.step;
  st.row.step_wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return st.row;
}

inline void train(Model& model, std::span<const TokenSequence> data, const StrategyConfig& config,
                  std::int64_t steps, TrainState& state,
                  const std::function<void(const TrainLogRow&)>& on_step = {}) {
  config.validate();
  if (steps < 0) throw std::invalid_argument("train: negative step count");
  for (std::int64_t i = 0; i < steps; ++i) {
    const TrainLogRow row = train_step(model, data, config, state);
    if (on_step) on_step(row);
  }
}

}  // namespace arlab
