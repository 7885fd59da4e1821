#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/nn/graph.hpp"
#include "arlab/nn/ops.hpp"
#include "arlab/nn/tensor.hpp"
#include "arlab/random.hpp"

namespace arlab {

using nn::Graph;
using nn::Tensor;
using nn::Var;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token ids share one vocabulary: [0, codebook_size) are codebook indices,
// [codebook_size, codebook_size + condition_vocab) are condition tokens.
struct ModelConfig {
  int codebook_size = 256;
  int condition_vocab = 64;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int max_positions = 257;
  int mlp_ratio = 4;
  double init_std = 0.02;

  int vocab_size() const { return codebook_size + condition_vocab; }
  int condition_token(int condition) const { return codebook_size + condition; }

  void validate() const {
    if (codebook_size <= 0 || condition_vocab <= 0) throw ConfigError("vocabulary sizes must be positive");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || mlp_ratio <= 0) {
      throw ConfigError("model extents must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (max_positions < 2) throw ConfigError("max_positions must be at least 2");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Final-layer hidden states for a run of consecutive input slots. Slot 0 is
// the condition token, slot i >= 1 holds token i; the state at slot i is the
// one that predicts token i + 1.
struct HiddenTrace {
  Tensor states;  // [slots x d_model]
  std::size_t first_slot = 0;

  std::size_t length() const { return states.rows(); }
};

// Per-layer keys/values of a prefix, recorded without gradient tracking.
struct ContextCache {
  std::size_t batch = 1;
  std::size_t length = 0;  // prefix slots per sequence
  std::vector<Tensor> keys;
  std::vector<Tensor> values;

  bool empty() const { return length == 0; }
};

// Graph handles for every parameter of a model.
struct BoundParams {
  std::vector<Var> vars;
};

struct ModelOutput {
  Var logits;  // [batch * slots x vocab]
  Var hidden;  // [batch * slots x d_model], final layer after the last norm
  std::vector<Var> layer_states;  // residual stream after each block
};

class Model {
 public:
  // Parameter layout per layer.
  enum LayerSlot : std::size_t {
    kLn1Gain, kLn1Bias, kWq, kWk, kWv, kWo, kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2, kLayerSlots
  };

  Model() = default;

  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.d_model, v = config_.vocab_size(), p = config_.max_positions;
    const std::size_t hidden = d * config_.mlp_ratio;
    const double resid_std = config_.init_std / std::sqrt(2.0 * config_.n_layers);
    add("tok_emb", random_tensor({v, d}, config_.init_std, rng), true);
    add("pos_emb", random_tensor({p, d}, config_.init_std, rng), true);
    for (int l = 0; l < config_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      add(pre + "ln1.gain", Tensor({d}, 1.0), false);
      add(pre + "ln1.bias", Tensor({d}, 0.0), false);
      add(pre + "wq", random_tensor({d, d}, config_.init_std, rng), true);
      add(pre + "wk", random_tensor({d, d}, config_.init_std, rng), true);
      add(pre + "wv", random_tensor({d, d}, config_.init_std, rng), true);
      add(pre + "wo", random_tensor({d, d}, resid_std, rng), true);
      add(pre + "ln2.gain", Tensor({d}, 1.0), false);
      add(pre + "ln2.bias", Tensor({d}, 0.0), false);
      add(pre + "w1", random_tensor({d, hidden}, config_.init_std, rng), true);
      add(pre + "b1", Tensor({hidden}, 0.0), false);
      add(pre + "w2", random_tensor({hidden, d}, resid_std, rng), true);
      add(pre + "b2", Tensor({d}, 0.0), false);
    }
    add("lnf.gain", Tensor({d}, 1.0), false);
    add("lnf.bias", Tensor({d}, 0.0), false);
    add("head", random_tensor({d, v}, config_.init_std, rng), true);
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  const std::vector<std::uint8_t>& decay_mask() const { return decay_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
  }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    throw std::out_of_range("no parameter named " + name);
  }
  static constexpr std::size_t kTokEmb = 0;
  static constexpr std::size_t kPosEmb = 1;
  std::size_t layer_param(int layer, LayerSlot slot) const {
    return 2 + static_cast<std::size_t>(layer) * kLayerSlots + slot;
  }
  std::size_t final_gain() const { return 2 + config_.n_layers * kLayerSlots; }
  std::size_t final_bias() const { return final_gain() + 1; }
  std::size_t head() const { return final_gain() + 2; }

  BoundParams bind(Graph& g) const {
    BoundParams b;
    b.vars.reserve(params_.size());
    for (const Tensor& t : params_) b.vars.push_back(g.parameter(t));
    return b;
  }

  // Core forward over `batch` runs of input slots that continue `cache`
  // (nullptr or empty for no prefix). When `extend` is non-null it receives
  // the cache covering prefix + these slots.
  ModelOutput run(Graph& g, const BoundParams& p, std::span<const int> slots, std::size_t batch,
                  const ContextCache* cache = nullptr, ContextCache* extend = nullptr) const {
    if (batch == 0 || slots.empty() || slots.size() % batch != 0) {
      throw std::invalid_argument("run: slot count must be a positive multiple of batch");
    }
    if (cache && cache == extend) throw std::invalid_argument("run: cache and extend must differ");
    const std::size_t prefix = cache ? cache->length : 0;
    if (cache && !cache->empty() && cache->batch != batch) {
      throw std::invalid_argument("run: cache batch differs from input batch");
    }
    const std::size_t t_len = slots.size() / batch;
    if (prefix + t_len > static_cast<std::size_t>(config_.max_positions)) {
      throw std::length_error("sequence of " + std::to_string(prefix + t_len) +
                              " slots exceeds max_positions " +
                              std::to_string(config_.max_positions));
    }
    for (int s : slots) {
      if (s < 0 || s >= config_.vocab_size()) {
        throw std::out_of_range("token " + std::to_string(s) + " outside model vocabulary");
      }
    }
    std::vector<int> positions(slots.size());
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < t_len; ++t) positions[b * t_len + t] = static_cast<int>(prefix + t);
    }

    const auto& v = p.vars;
    Var x = nn::add(nn::embedding(v[kTokEmb], slots), nn::embedding(v[kPosEmb], positions));
    ModelOutput out;
    if (extend) {
      extend->batch = batch;
      extend->length = prefix + t_len;
      extend->keys.assign(config_.n_layers, Tensor{});
      extend->values.assign(config_.n_layers, Tensor{});
    }
    for (int l = 0; l < config_.n_layers; ++l) {
      auto w = [&](LayerSlot s) { return v[layer_param(l, s)]; };
      Var a = nn::layer_norm(x, w(kLn1Gain), w(kLn1Bias));
      Var q = nn::matmul(a, w(kWq));
      Var k = nn::matmul(a, w(kWk));
      Var val = nn::matmul(a, w(kWv));
      if (prefix > 0) {
        k = nn::concat_seq(g.reference(cache->keys[l]), k, batch);
        val = nn::concat_seq(g.reference(cache->values[l]), val, batch);
      }
      if (extend) {
        extend->keys[l] = k.value();
        extend->values[l] = val.value();
      }
      Var att = nn::causal_attention(q, k, val, batch, config_.n_heads);
      x = nn::add(x, nn::matmul(att, w(kWo)));
      Var m = nn::layer_norm(x, w(kLn2Gain), w(kLn2Bias));
      Var f = nn::add_bias(nn::matmul(nn::gelu(nn::add_bias(nn::matmul(m, w(kW1)), w(kB1))), w(kW2)),
                           w(kB2));
      x = nn::add(x, f);
      out.layer_states.push_back(x);
    }
    out.hidden = nn::layer_norm(x, v[final_gain()], v[final_bias()]);
    out.logits = nn::matmul(out.hidden, v[head()]);
    return out;
  }

  // Input slots for (condition, tokens): [condition token, tokens...].
  std::vector<int> slots_for(int condition, std::span<const int> tokens) const {
    check_condition(condition);
    std::vector<int> slots;
    slots.reserve(tokens.size() + 1);
    slots.push_back(config_.condition_token(condition));
    for (int t : tokens) {
      if (t < 0 || t >= config_.codebook_size) {
        throw std::out_of_range("token " + std::to_string(t) + " outside codebook");
      }
      slots.push_back(t);
    }
    return slots;
  }

  struct Forward {
    Tensor logits;  // [(N+1) x vocab]
    HiddenTrace trace;
  };

  // Teacher-forced pass over condition + N tokens; row i scores token i + 1.
  Forward forward(std::span<const int> tokens, int condition) const {
    const std::vector<int> slots = slots_for(condition, tokens);
    Graph g;
    g.set_grad_enabled(false);
    const BoundParams p = bind(g);
    ModelOutput o = run(g, p, slots, 1);
    return {o.logits.value(), HiddenTrace{o.hidden.value(), 0}};
  }

  // Cache for slots [condition, prefix...], computed without gradients.
  ContextCache build_context_cache(std::span<const int> prefix, int condition) const {
    return build_cache_from_slots(slots_for(condition, prefix), 1);
  }

  ContextCache build_cache_from_slots(std::span<const int> slots, std::size_t batch) const {
    ContextCache cache;
    cache.batch = batch;
    if (slots.empty()) return cache;
    Graph g;
    g.set_grad_enabled(false);
    const BoundParams p = bind(g);
    run(g, p, slots, batch, nullptr, &cache);
    return cache;
  }

  // Continues `cache` with codebook tokens; returns logits/trace for the
  // window slots only.
  Forward forward_window(const ContextCache& cache, std::span<const int> window_tokens) const {
    if (cache.empty()) {
      throw std::invalid_argument("forward_window: empty cache needs the condition slot; use forward");
    }
    for (int t : window_tokens) {
      if (t < 0 || t >= config_.codebook_size) {
        throw std::out_of_range("token " + std::to_string(t) + " outside codebook");
      }
    }
    Graph g;
    g.set_grad_enabled(false);
    const BoundParams p = bind(g);
    ModelOutput o = run(g, p, window_tokens, 1, &cache);
    return {o.logits.value(), HiddenTrace{o.hidden.value(), cache.length}};
  }

  void check_condition(int condition) const {
    if (condition < 0 || condition >= config_.condition_vocab) {
      throw std::out_of_range("condition " + std::to_string(condition) + " outside condition vocabulary");
    }
  }

 private:
  static Tensor random_tensor(nn::Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape), 0.0);
    for (double& x : t.values()) x = stddev * normal(rng);
    return t;
  }

  void add(std::string name, Tensor t, bool decay) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
    decay_.push_back(decay ? 1 : 0);
  }

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<std::uint8_t> decay_;
};

}  // namespace arlab
