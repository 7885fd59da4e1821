#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "arlab/model.hpp"
#include "arlab/report.hpp"
#include "arlab/strategies.hpp"

namespace arlab {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"codebook_size", c.codebook_size}, {"condition_vocab", c.condition_vocab},
       {"d_model", c.d_model},             {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},             {"max_positions", c.max_positions},
       {"mlp_ratio", c.mlp_ratio},         {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.condition_vocab = j.value("condition_vocab", c.condition_vocab);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.init_std = j.value("init_std", c.init_std);
}

inline constexpr char kCheckpointMagic[8] = {'A', 'R', 'L', 'A', 'B', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything needed to continue training exactly where it stopped.
struct Checkpoint {
  ModelConfig model_config;
  StrategyConfig strategy;
  nlohmann::json experiment;  // free-form echo of the producing config
  std::vector<Tensor> params;
  nn::OptimizerState optimizer;
  std::string rng_state;
  std::int64_t step = 0;
};

inline Checkpoint make_checkpoint(const Model& model, const StrategyConfig& strategy, const TrainState& state,
                                  nlohmann::json experiment = nlohmann::json::object()) {
  return {model.config(), strategy, std::move(experiment), model.parameters(), state.optimizer,
          arlab::rng_state(state.rng), state.step};
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline void put_tensors(std::string& out, const std::vector<Tensor>& ts) {
  put_u64(out, ts.size());
  for (const Tensor& t : ts) {
    put_u64(out, t.rank());
    for (std::size_t e : t.shape()) put_u64(out, e);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError("checkpoint truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, b_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<Tensor> tensors() {
    const std::uint64_t count = u64();
    std::vector<Tensor> ts;
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t rank = u64();
      if (rank > 8) throw IoError("checkpoint tensor rank out of range");
      nn::Shape shape;
      std::size_t n = 1;
      for (std::uint64_t r = 0; r < rank; ++r) {
        shape.push_back(u64());
        n *= shape.back();
      }
      need(n * sizeof(double));
      Tensor t(shape);
      std::memcpy(t.data(), b_.data() + pos_, n * sizeof(double));
      pos_ += n * sizeof(double);
      ts.push_back(std::move(t));
    }
    return ts;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Layout: magic, u64 version, u64 header length, JSON header, then three
// tensor lists (parameters, first moments, second moments) as raw doubles.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json head = {{"model", c.model_config},
                         {"strategy", c.strategy},
                         {"experiment", c.experiment},
                         {"rng_state", c.rng_state},
                         {"step", c.step},
                         {"optimizer_step", c.optimizer.step}};
  head["config_hash"] = config_hash({{"model", c.model_config}, {"strategy", c.strategy}, {"experiment", c.experiment}});
  const std::string text = head.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out += text;
  detail::put_tensors(out, c.params);
  detail::put_tensors(out, c.optimizer.first_moment);
  detail::put_tensors(out, c.optimizer.second_moment);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw IoError("not a checkpoint file");
  }
  detail::Reader r(bytes);
  r.bytes(8);
  const std::uint64_t version = r.u64();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(r.bytes(r.u64()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint c;
  c.model_config = head.at("model").get<ModelConfig>();
  c.strategy = head.at("strategy").get<StrategyConfig>();
  c.experiment = head.at("experiment");
  c.rng_state = head.at("rng_state").get<std::string>();
  c.step = head.at("step").get<std::int64_t>();
  c.optimizer.config = c.strategy.optimizer;
  c.optimizer.step = head.at("optimizer_step").get<std::int64_t>();
  c.params = r.tensors();
  c.optimizer.first_moment = r.tensors();
  c.optimizer.second_moment = r.tensors();
  if (!r.done()) throw IoError("trailing bytes in checkpoint");
  return c;
}

// Rebuilds a model whose parameters are exactly the stored ones.
inline Model restore_model(const Checkpoint& c) {
  Model m(c.model_config, 0);
  if (m.parameters().size() != c.params.size()) throw IoError("checkpoint parameter count does not match model");
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    if (!m.parameters()[i].same_shape(c.params[i])) throw IoError("checkpoint parameter shape mismatch");
    m.parameters()[i] = c.params[i];
  }
  return m;
}

inline TrainState restore_train_state(const Checkpoint& c) {
  TrainState s;
  s.optimizer = c.optimizer;
  restore_rng_state(s.rng, c.rng_state);
  s.step = c.step;
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c, bool force) {
  write_text(path, serialize_checkpoint(c), force);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_text(path));
}

}  // namespace arlab
