#pragma once

// Experiment runner shared by the command-line tool and the acceptance
// driver: YAML config loading with positioned errors, master-seed
// splitting, and one function per subcommand.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "arlab/cascade.hpp"
#include "arlab/checkpoint.hpp"
#include "arlab/corpus.hpp"
#include "arlab/evalharness.hpp"
#include "arlab/inference.hpp"
#include "arlab/model.hpp"
#include "arlab/report.hpp"
#include "arlab/strategies.hpp"

namespace arlab::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

struct DataSection {
  int sequences = 1000;
  std::string path;  // empty: <output_dir>/dataset.json when present, else generated
};

struct TrainSection {
  std::int64_t steps = 1500;
  std::int64_t checkpoint_every = 0;
  bool svg = false;
};

struct GenerationSection {
  int w_gen = 0;  // 0: full-history decoding
  int slide = 0;
  int samples = 8;
};

struct EvalSection {
  int sequences = 64;  // cap on held-out sequences
  std::vector<std::string> checkpoints;  // "id=path"
  bool svg = false;
};

struct CascadeSection {
  cascade::ConditioningConfig conditioning;
  int bound_traces = 1000;
  int bound_dim = 4;
  int bound_steps = 20;
  double bound_sigma = 0.1;
  double bound_delta = 0.05;
  std::vector<double> reco_grid = {0.3, 0.7, 1.0, 1.5, 2.0};
  int reco_trials = 1000;
  int reco_horizon = 20;
};

struct SweepSection {
  std::string axis = "lambda";
  std::vector<double> lambda = {0.0, 0.01, 0.05, 0.1, 0.5, 1.0};
  std::vector<double> overlap = {0.0, 0.5, 0.75};
  std::vector<double> horizon = {1.0, 2.0};
  std::vector<double> motion = {0.25, 0.5, 1.0, 2.0};
  int seeds = 1;
  bool svg = false;
};

struct BenchSection {
  int warmup = 5;
  int reps = 30;
  std::vector<std::string> strategies = {"baseline", "fewer_frames", "local_opt", "local_opt_balanced", "reco"};
};

struct ExperimentConfig {
  std::uint64_t seed = 1234;
  std::string output_dir = "runs/default";
  CorpusConfig corpus;
  DataSection data;
  ModelConfig model;
  StrategyConfig strategy;
  TrainSection train;
  SamplingConfig sampling;
  GenerationSection generation;
  EvalSection eval;
  CascadeSection cascade;
  SweepSection sweep;
  BenchSection bench;

  // Seeds of the individual components, split from the master seed.
  std::uint64_t component_seed(const std::string& name) const { return derive_seed(seed, name); }
};

// ---- echo --------------------------------------------------------------------

inline json echo(const ExperimentConfig& c) {
  const auto& k = c.cascade;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"corpus", c.corpus},
      {"data", {{"sequences", c.data.sequences}, {"path", c.data.path}}},
      {"model", c.model},
      {"strategy", c.strategy},
      {"train", {{"steps", c.train.steps}, {"checkpoint_every", c.train.checkpoint_every}, {"svg", c.train.svg}}},
      {"sampling", c.sampling},
      {"generation", {{"w_gen", c.generation.w_gen}, {"slide", c.generation.slide}, {"samples", c.generation.samples}}},
      {"eval", {{"sequences", c.eval.sequences}, {"checkpoints", c.eval.checkpoints}, {"svg", c.eval.svg}}},
      {"cascade",
       {{"dim", k.conditioning.dim},
        {"horizon", k.conditioning.horizon},
        {"transition_norm", k.conditioning.transition_norm},
        {"coupling", k.conditioning.coupling},
        {"noise", k.conditioning.noise},
        {"fit_trials", k.conditioning.fit_trials},
        {"trials", k.conditioning.trials},
        {"conditioning_seed", k.conditioning.seed},
        {"bound_traces", k.bound_traces},
        {"bound_dim", k.bound_dim},
        {"bound_steps", k.bound_steps},
        {"bound_sigma", k.bound_sigma},
        {"bound_delta", k.bound_delta},
        {"reco_grid", k.reco_grid},
        {"reco_trials", k.reco_trials},
        {"reco_horizon", k.reco_horizon}}},
      {"sweep",
       {{"axis", c.sweep.axis},
        {"lambda", c.sweep.lambda},
        {"overlap", c.sweep.overlap},
        {"horizon", c.sweep.horizon},
        {"motion", c.sweep.motion},
        {"seeds", c.sweep.seeds},
        {"svg", c.sweep.svg}}},
      {"bench", {{"warmup", c.bench.warmup}, {"reps", c.bench.reps}, {"strategies", c.bench.strategies}}},
  };
}

inline std::string hash_of(const ExperimentConfig& c) { return config_hash(echo(c)); }

// ---- YAML loading ------------------------------------------------------------

enum class Kind { Int, Number, Bool, String, NumberList, StringList, NumberOrUniform };

using SectionSchema = std::map<std::string, Kind>;

inline const std::map<std::string, SectionSchema>& schema() {
  static const std::map<std::string, SectionSchema> s = {
      {"corpus",
       {{"frames", Kind::Int},
        {"temporal_compression", Kind::Int},
        {"spatial", Kind::Int},
        {"dim", Kind::Int},
        {"codebook_size", Kind::Int},
        {"amplitude", Kind::Number},
        {"classes", Kind::Int},
        {"regimes", Kind::Int},
        {"stamp_vectors", Kind::Int},
        {"motion_scale", Kind::Number},
        {"pattern_scale", Kind::Number},
        {"drift", Kind::Number},
        {"noise", Kind::Number}}},
      {"data", {{"sequences", Kind::Int}, {"path", Kind::String}}},
      {"model",
       {{"d_model", Kind::Int},
        {"n_layers", Kind::Int},
        {"n_heads", Kind::Int},
        {"mlp_ratio", Kind::Int},
        {"init_std", Kind::Number}}},
      {"strategy",
       {{"name", Kind::String},
        {"window", Kind::Int},
        {"stride", Kind::Int},
        {"k_blocks", Kind::Int},
        {"p_first", Kind::NumberOrUniform},
        {"lambda", Kind::Number},
        {"reco_all_layers", Kind::Bool},
        {"batch", Kind::Int},
        {"learning_rate", Kind::Number},
        {"beta1", Kind::Number},
        {"beta2", Kind::Number},
        {"epsilon", Kind::Number},
        {"weight_decay", Kind::Number}}},
      {"train", {{"steps", Kind::Int}, {"checkpoint_every", Kind::Int}, {"svg", Kind::Bool}}},
      {"sampling", {{"mode", Kind::String}, {"temperature", Kind::Number}, {"top_k", Kind::Int}}},
      {"generation", {{"w_gen", Kind::Int}, {"slide", Kind::Int}, {"samples", Kind::Int}}},
      {"eval", {{"sequences", Kind::Int}, {"checkpoints", Kind::StringList}, {"svg", Kind::Bool}}},
      {"cascade",
       {{"dim", Kind::Int},
        {"horizon", Kind::Int},
        {"transition_norm", Kind::Number},
        {"coupling", Kind::Number},
        {"noise", Kind::Number},
        {"fit_trials", Kind::Int},
        {"trials", Kind::Int},
        {"bound_traces", Kind::Int},
        {"bound_dim", Kind::Int},
        {"bound_steps", Kind::Int},
        {"bound_sigma", Kind::Number},
        {"bound_delta", Kind::Number},
        {"reco_grid", Kind::NumberList},
        {"reco_trials", Kind::Int},
        {"reco_horizon", Kind::Int}}},
      {"sweep",
       {{"axis", Kind::String},
        {"lambda", Kind::NumberList},
        {"overlap", Kind::NumberList},
        {"horizon", Kind::NumberList},
        {"motion", Kind::NumberList},
        {"seeds", Kind::Int},
        {"svg", Kind::Bool}}},
      {"bench", {{"warmup", Kind::Int}, {"reps", Kind::Int}, {"strategies", Kind::StringList}}},
  };
  return s;
}

namespace detail {

inline std::string where(const std::string& source, const YAML::Mark& m) {
  if (m.is_null()) return source;
  return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

inline json scalar_as(const YAML::Node& n, Kind kind, const std::string& source, const std::string& key) {
  auto fail = [&](const std::string& what) -> json {
    throw ConfigError(where(source, n.Mark()) + ": '" + key + "' " + what);
  };
  if (!n.IsScalar()) return fail("must be a scalar");
  try {
    switch (kind) {
      case Kind::Int: return n.as<long long>();
      case Kind::Number: return n.as<double>();
      case Kind::Bool: return n.as<bool>();
      case Kind::String: return n.Scalar();
      case Kind::NumberOrUniform:
        if (n.Scalar() == "uniform") return "uniform";
        return n.as<double>();
      default: break;
    }
  } catch (const YAML::BadConversion&) {
  }
  switch (kind) {
    case Kind::Int: return fail("must be an integer, got '" + n.Scalar() + "'");
    case Kind::Bool: return fail("must be true or false, got '" + n.Scalar() + "'");
    case Kind::NumberOrUniform: return fail("must be a number or 'uniform', got '" + n.Scalar() + "'");
    default: return fail("must be a number, got '" + n.Scalar() + "'");
  }
}

inline json value_as(const YAML::Node& n, Kind kind, const std::string& source, const std::string& key) {
  if (kind != Kind::NumberList && kind != Kind::StringList) return scalar_as(n, kind, source, key);
  if (!n.IsSequence()) throw ConfigError(where(source, n.Mark()) + ": '" + key + "' must be a list");
  json out = json::array();
  for (const auto& item : n) {
    out.push_back(scalar_as(item, kind == Kind::NumberList ? Kind::Number : Kind::String, source, key));
  }
  return out;
}

template <class T>
void set_if(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace detail

// Parses YAML text into a resolved config. Every error names file, line and
// column of the offending node.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>",
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(detail::where(source, e.mark) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError(detail::where(source, root.Mark()) + ": top level must be a mapping");

  json raw = json::object();
  std::map<std::string, YAML::Mark> marks;
  for (const auto& kv : root) {
    const std::string key = kv.first.Scalar();
    if (key == "seed") {
      raw[key] = detail::scalar_as(kv.second, Kind::Int, source, key);
    } else if (key == "output_dir") {
      raw[key] = detail::scalar_as(kv.second, Kind::String, source, key);
    } else if (auto it = schema().find(key); it != schema().end()) {
      if (!kv.second.IsMap()) throw ConfigError(detail::where(source, kv.second.Mark()) + ": '" + key + "' must be a mapping");
      marks[key] = kv.first.Mark();
      json section = json::object();
      for (const auto& entry : kv.second) {
        const std::string name = entry.first.Scalar();
        auto field = it->second.find(name);
        if (field == it->second.end()) {
          throw ConfigError(detail::where(source, entry.first.Mark()) + ": unknown key '" + name + "' in section '" +
                            key + "'");
        }
        section[name] = detail::value_as(entry.second, field->second, source, name);
      }
      raw[key] = section;
    } else {
      throw ConfigError(detail::where(source, kv.first.Mark()) + ": unknown top-level key '" + key + "'");
    }
  }

  ExperimentConfig c;
  if (raw.contains("seed")) {
    const long long s = raw["seed"].get<long long>();
    if (s < 0) throw ConfigError(source + ": seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(s);
  }
  if (seed_override) c.seed = *seed_override;
  if (raw.contains("output_dir")) c.output_dir = raw["output_dir"].get<std::string>();

  auto section = [&](const std::string& name, const std::function<void(const json&)>& fill) {
    const json j = raw.value(name, json::object());
    try {
      fill(j);
    } catch (const ConfigError& e) {
      throw ConfigError(detail::where(source, marks.count(name) ? marks[name] : YAML::Mark::null_mark()) + ": " +
                        name + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(detail::where(source, marks.count(name) ? marks[name] : YAML::Mark::null_mark()) + ": " +
                        name + ": " + e.what());
    }
  };

  section("corpus", [&](const json& j) {
    json full = j;
    full["seed"] = c.component_seed("corpus");
    c.corpus = full.get<CorpusConfig>();
    c.corpus.validate();
  });
  section("data", [&](const json& j) {
    detail::set_if(j, "sequences", c.data.sequences);
    detail::set_if(j, "path", c.data.path);
    if (c.data.sequences < 10) throw ConfigError("sequences must be >= 10");
  });
  section("model", [&](const json& j) {
    detail::set_if(j, "d_model", c.model.d_model);
    detail::set_if(j, "n_layers", c.model.n_layers);
    detail::set_if(j, "n_heads", c.model.n_heads);
    detail::set_if(j, "mlp_ratio", c.model.mlp_ratio);
    detail::set_if(j, "init_std", c.model.init_std);
    c.model.codebook_size = c.corpus.codebook_size;
    c.model.condition_vocab = c.corpus.classes;
    c.model.max_positions = c.corpus.tokens_per_sequence() + 1;
    c.model.validate();
  });
  section("strategy", [&](const json& j) {
    json s = j;
    if (s.contains("name")) {
      s["strategy"] = s["name"];
      s.erase("name");
    }
    c.strategy = s.get<StrategyConfig>();
    c.strategy.seed = c.component_seed("strategy");
    c.strategy.validate();
    const int spatial = c.corpus.spatial, n = c.corpus.tokens_per_sequence();
    if (c.strategy.strategy == Strategy::LocalOpt || c.strategy.strategy == Strategy::LocalOptBalanced ||
        c.strategy.strategy == Strategy::ReCo) {
      if (c.strategy.window % spatial != 0 || c.strategy.stride % spatial != 0) {
        throw ConfigError("window and stride must be multiples of corpus.spatial (" + std::to_string(spatial) + ")");
      }
      if (c.strategy.window > n) throw ConfigError("window exceeds the sequence length " + std::to_string(n));
    }
    if (c.strategy.strategy == Strategy::FewerFrames && c.strategy.k_blocks > c.corpus.blocks()) {
      throw ConfigError("k_blocks exceeds the number of blocks");
    }
  });
  section("train", [&](const json& j) {
    detail::set_if(j, "steps", c.train.steps);
    detail::set_if(j, "checkpoint_every", c.train.checkpoint_every);
    detail::set_if(j, "svg", c.train.svg);
    if (c.train.steps < 0 || c.train.checkpoint_every < 0) throw ConfigError("step counts must be non-negative");
  });
  section("sampling", [&](const json& j) {
    c.sampling = j.get<SamplingConfig>();
    c.sampling.seed = c.component_seed("sampling");
    c.sampling.validate();
  });
  section("generation", [&](const json& j) {
    detail::set_if(j, "w_gen", c.generation.w_gen);
    detail::set_if(j, "slide", c.generation.slide);
    detail::set_if(j, "samples", c.generation.samples);
    if (c.generation.samples < 1) throw ConfigError("samples must be positive");
    if (c.generation.w_gen > 0) {
      // Throws on inconsistent arithmetic.
      iterative_schedule(c.generation.w_gen, c.generation.slide, c.corpus.tokens_per_sequence(), c.corpus.spatial);
      if (c.generation.w_gen >= c.model.max_positions) throw ConfigError("w_gen must be < max_positions");
    }
  });
  section("eval", [&](const json& j) {
    detail::set_if(j, "sequences", c.eval.sequences);
    detail::set_if(j, "checkpoints", c.eval.checkpoints);
    detail::set_if(j, "svg", c.eval.svg);
    if (c.eval.sequences < 1) throw ConfigError("sequences must be positive");
  });
  section("cascade", [&](const json& j) {
    auto& k = c.cascade;
    detail::set_if(j, "dim", k.conditioning.dim);
    detail::set_if(j, "horizon", k.conditioning.horizon);
    detail::set_if(j, "transition_norm", k.conditioning.transition_norm);
    detail::set_if(j, "coupling", k.conditioning.coupling);
    detail::set_if(j, "noise", k.conditioning.noise);
    detail::set_if(j, "fit_trials", k.conditioning.fit_trials);
    detail::set_if(j, "trials", k.conditioning.trials);
    k.conditioning.seed = c.component_seed("cascade.conditioning");
    detail::set_if(j, "bound_traces", k.bound_traces);
    detail::set_if(j, "bound_dim", k.bound_dim);
    detail::set_if(j, "bound_steps", k.bound_steps);
    detail::set_if(j, "bound_sigma", k.bound_sigma);
    detail::set_if(j, "bound_delta", k.bound_delta);
    detail::set_if(j, "reco_grid", k.reco_grid);
    detail::set_if(j, "reco_trials", k.reco_trials);
    detail::set_if(j, "reco_horizon", k.reco_horizon);
    k.conditioning.validate();
    if (k.bound_traces < 1 || k.bound_dim < 1 || k.bound_steps < 1 || k.reco_trials < 1 || k.reco_horizon < 1) {
      throw ConfigError("cascade counts must be positive");
    }
    if (k.reco_grid.empty()) throw ConfigError("reco_grid must not be empty");
  });
  section("sweep", [&](const json& j) {
    auto& s = c.sweep;
    detail::set_if(j, "axis", s.axis);
    detail::set_if(j, "lambda", s.lambda);
    detail::set_if(j, "overlap", s.overlap);
    detail::set_if(j, "horizon", s.horizon);
    detail::set_if(j, "motion", s.motion);
    detail::set_if(j, "seeds", s.seeds);
    detail::set_if(j, "svg", s.svg);
    if (s.axis != "lambda" && s.axis != "overlap" && s.axis != "horizon" && s.axis != "motion") {
      throw ConfigError("axis must be one of lambda, overlap, horizon, motion");
    }
    if (s.seeds < 1) throw ConfigError("seeds must be positive");
    for (double v : s.lambda) {
      if (!(v >= 0.0)) throw ConfigError("lambda values must be >= 0");
    }
    for (double v : s.overlap) {
      if (!(v >= 0.0 && v < 1.0)) throw ConfigError("overlap values must lie in [0, 1)");
    }
    for (double v : s.horizon) {
      if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("horizon values must be integers >= 1");
    }
    for (double v : s.motion) {
      if (!(v >= 0.0)) throw ConfigError("motion values must be >= 0");
    }
  });
  section("bench", [&](const json& j) {
    detail::set_if(j, "warmup", c.bench.warmup);
    detail::set_if(j, "reps", c.bench.reps);
    detail::set_if(j, "strategies", c.bench.strategies);
    if (c.bench.warmup < 5 || c.bench.reps < 30) throw ConfigError("bench needs warmup >= 5 and reps >= 30");
    for (const auto& s : c.bench.strategies) parse_strategy(s);
  });
  return c;
}

inline ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  return parse_config(read_text(path), path.string(), seed_override);
}

// ---- shared helpers ------------------------------------------------------------

// Tracks every file a command writes.
struct Outputs {
  std::vector<fs::path> files;
  bool force = false;

  void text(const fs::path& p, const std::string& s) {
    write_text(p, s, force);
    files.push_back(p);
  }
};

inline fs::path out_dir(const ExperimentConfig& c) { return fs::path(c.output_dir); }

inline Dataset build_dataset(const ExperimentConfig& c) {
  return make_dataset(c.corpus, c.data.sequences, c.component_seed("dataset"));
}

// Dataset file if one exists, else regenerated from the config.
inline Dataset obtain_dataset(const ExperimentConfig& c) {
  const fs::path file = c.data.path.empty() ? out_dir(c) / "dataset.json" : fs::path(c.data.path);
  if (fs::exists(file)) {
    Dataset ds = load_dataset(file);
    if (!(ds.config == c.corpus)) {
      throw ConfigError("dataset " + file.string() + " was generated from a different corpus config");
    }
    return ds;
  }
  if (!c.data.path.empty()) throw IoError("dataset " + file.string() + " not found");
  return build_dataset(c);
}

inline std::span<const TokenSequence> eval_slice(const ExperimentConfig& c, const Dataset& ds) {
  const std::size_t n = std::min<std::size_t>(ds.eval.size(), static_cast<std::size_t>(c.eval.sequences));
  return std::span<const TokenSequence>(ds.eval).first(n);
}

inline GenerationPlan plan_of(const ExperimentConfig& c) {
  return {c.sampling, c.generation.w_gen, c.generation.slide};
}

inline Table train_table() { return Table({"step", "strategy", "window_start", "ce", "reco", "total", "step_wall_ms"}); }

inline std::vector<std::string> train_cells(const TrainLogRow& r) {
  return {std::to_string(r.step), std::string(strategy_name(r.strategy)), std::to_string(r.window_start),
          format_number(r.ce),   format_number(r.reco),                   format_number(r.total),
          format_number(r.step_wall_ms)};
}

// ---- gen-data ----------------------------------------------------------------

inline std::vector<fs::path> cmd_gen_data(const ExperimentConfig& c, bool force) {
  Outputs out{{}, force};
  const Dataset ds = build_dataset(c);
  json j = dataset_to_json(ds, c.data.sequences, c.component_seed("dataset"));
  j["experiment_hash"] = hash_of(c);
  out.text(c.data.path.empty() ? out_dir(c) / "dataset.json" : fs::path(c.data.path), j.dump() + "\n");
  return out.files;
}

// ---- train -------------------------------------------------------------------

struct TrainResult {
  Model model;
  TrainState state;
  std::vector<TrainLogRow> rows;
};

// Trains from scratch (or from `resume`) up to c.train.steps. `on_checkpoint`
// receives periodic snapshots.
inline TrainResult run_training(const ExperimentConfig& c, const Dataset& ds, const Checkpoint* resume = nullptr,
                                const std::function<void(const Checkpoint&)>& on_checkpoint = {}) {
  TrainResult r{Model(c.model, c.component_seed("model")), init_train_state(c.strategy), {}};
  if (resume) {
    if (!(resume->model_config == c.model)) throw ConfigError("checkpoint model config differs from the config");
    if (!(resume->strategy == c.strategy)) throw ConfigError("checkpoint strategy config differs from the config");
    if (resume->step > c.train.steps) throw ConfigError("checkpoint is past train.steps");
    r.model = restore_model(*resume);
    r.state = restore_train_state(*resume);
  }
  const json exp = echo(c);
  c.strategy.validate();
  while (r.state.step < c.train.steps) {
    const TrainLogRow row = train_step(r.model, ds.train, c.strategy, r.state);
    if (!std::isfinite(row.total)) {
      throw nn::NumericError("training diverged at step " + std::to_string(row.step) + " (loss " +
                             format_number(row.total) + ")");
    }
    r.rows.push_back(row);
    if (on_checkpoint && c.train.checkpoint_every > 0 && r.state.step % c.train.checkpoint_every == 0 &&
        r.state.step < c.train.steps) {
      on_checkpoint(make_checkpoint(r.model, c.strategy, r.state, exp));
    }
  }
  return r;
}

inline std::vector<fs::path> cmd_train(const ExperimentConfig& c, bool force,
                                       const std::optional<fs::path>& resume_path = std::nullopt) {
  Outputs out{{}, force};
  const Dataset ds = obtain_dataset(c);
  const fs::path dir = out_dir(c);
  const fs::path csv = dir / "train.csv", model_file = dir / "model.ckpt";
  // Refuse early rather than after a long run.
  if (!force) {
    for (const auto& p : {csv, model_file}) {
      if (fs::exists(p)) throw IoError("refusing to overwrite " + p.string() + " (use --force)");
    }
  }
  std::optional<Checkpoint> resume;
  Table table = train_table();
  if (resume_path) {
    resume = load_checkpoint(*resume_path);
    if (fs::exists(csv)) {
      const ParsedCsv old = parse_csv(read_text(csv));
      for (const auto& row : old.table.rows) {
        if (std::stoll(row.at(0)) <= resume->step) table.add(row);
      }
    }
  }
  const json exp = echo(c);
  TrainResult r = run_training(c, ds, resume ? &*resume : nullptr, [&](const Checkpoint& ck) {
    out.force = true;  // snapshots are re-derivable; overwriting them is harmless
    out.text(dir / "checkpoints" / ("step_" + std::to_string(ck.step) + ".ckpt"), serialize_checkpoint(ck));
    out.force = force;
  });
  for (const auto& row : r.rows) table.add(train_cells(row));
  out.text(csv, render_csv("train", exp, table));
  out.text(model_file, serialize_checkpoint(make_checkpoint(r.model, c.strategy, r.state, exp)));
  if (c.train.svg) out.text(dir / "train.svg", render_svg(table, "step", "ce", "", "training loss"));
  return out.files;
}

// ---- evaluation ----------------------------------------------------------------

// Everything the comparison experiments need from one trained model.
struct RunSummary {
  LossCurve teacher_forced;
  LossCurve free_running;
  LossCurve first_frame;
  std::vector<double> continuity;          // per held-out sequence, mean free-running profile
  std::vector<std::vector<double>> flow;   // [sequence][D - 1], free-running generations
  std::vector<std::vector<double>> psnr;   // [sequence][D - 1], first-frame generations vs reference
  std::vector<std::vector<double>> error;  // [sequence][position]

  double continuity_mean() const { return std::accumulate(continuity.begin(), continuity.end(), 0.0) / continuity.size(); }
  double flow_mean(int delta) const {
    double s = 0.0;
    for (const auto& f : flow) s += f.at(delta - 1);
    return s / flow.size();
  }
  double psnr_mean(int delta) const {
    // Identical blocks give +inf; report the mean over finite values.
    double s = 0.0;
    int n = 0;
    for (const auto& p : psnr) {
      if (std::isfinite(p.at(delta - 1))) {
        s += p[delta - 1];
        ++n;
      }
    }
    return n ? s / n : std::numeric_limits<double>::infinity();
  }
};

inline LossCurve curve_from_records(const std::vector<GenerationRecord>& recs, int spatial) {
  LossCurve c;
  c.mode = LossMode::FreeRunning;
  c.spatial = spatial;
  for (const auto& r : recs) {
    std::vector<double> row;
    for (double lp : r.log_probs) row.push_back(-lp);
    c.per_sequence.push_back(std::move(row));
  }
  arlab::detail::finish_curve(c);
  return c;
}

inline RunSummary summarize_run(const Model& model, std::span<const TokenSequence> eval_set, const Codebook& codebook,
                                const CorpusConfig& corpus, const GenerationPlan& plan) {
  RunSummary s;
  s.teacher_forced = per_position_loss(model, eval_set, LossMode::TeacherForced);
  const int spatial = std::max(1, eval_set[0].spatial);
  std::vector<GenerationRecord> free, forced;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const TokenSequence& ref = eval_set[i];
    const int n = static_cast<int>(ref.tokens.size());
    free.push_back(generate_with_plan(model, ref.condition, n, plan, i, spatial));
    forced.push_back(generate_with_plan(model, ref.condition, n, plan, i, spatial,
                                        std::span(ref.tokens).first(static_cast<std::size_t>(spatial))));
  }
  s.free_running = curve_from_records(free, spatial);
  s.first_frame = curve_from_records(forced, spatial);
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const TokenSequence& ref = eval_set[i];
    s.continuity.push_back(profile_mean(continuity_profile(free[i].trace)));
    std::vector<double> fl;
    for (int d = 1; d < ref.blocks; ++d) fl.push_back(flow_proxy(free[i].tokens, codebook, d));
    s.flow.push_back(std::move(fl));
    s.psnr.push_back(psnr_proxy(forced[i].tokens, ref, codebook, corpus.amplitude));
    s.error.push_back(error_propagation_trace(model, ref, free[i]));
  }
  return s;
}

inline std::vector<std::pair<std::string, fs::path>> parse_checkpoint_specs(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size()) {
      throw ConfigError("checkpoint '" + s + "' must look like id=path");
    }
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

inline std::vector<fs::path> cmd_eval(ExperimentConfig c, bool force, const std::vector<std::string>& extra = {}) {
  Outputs out{{}, force};
  for (const auto& e : extra) c.eval.checkpoints.push_back(e);
  if (c.eval.checkpoints.empty()) c.eval.checkpoints.push_back("model=" + (out_dir(c) / "model.ckpt").string());
  const auto runs = parse_checkpoint_specs(c.eval.checkpoints);
  const Dataset ds = obtain_dataset(c);
  const auto eval_set = eval_slice(c, ds);
  const json exp = echo(c);
  const GenerationPlan plan = plan_of(c);

  Table curves({"run", "mode", "position", "block", "loss"});
  Table consistency({"run", "delta", "psnr", "flow"});
  Table continuity({"run", "sequence", "condition", "continuity"});
  Table errors({"run", "position", "error"});
  Table summary({"run", "strategy", "steps", "tf_mean", "fr_mean", "fr_area", "ff_mean", "fr_block1", "fr_final4",
                 "continuity", "flow_last", "psnr_last"});
  for (const auto& [id, path] : runs) {
    const Checkpoint ck = load_checkpoint(path);
    if (!(ck.model_config == c.model)) throw ConfigError("checkpoint " + path.string() + " has a different model config");
    const Model model = restore_model(ck);
    const RunSummary s = summarize_run(model, eval_set, ds.codebook, c.corpus, plan);
    const std::pair<const char*, const LossCurve*> modes[] = {
        {"teacher_forced", &s.teacher_forced}, {"free_running", &s.free_running}, {"first_frame", &s.first_frame}};
    for (const auto& [name, curve] : modes) {
      for (std::size_t p = 0; p < curve->length(); ++p) {
        curves.add({id, name, std::to_string(p), std::to_string(p / curve->spatial), format_number(curve->mean[p])});
      }
    }
    const int blocks = eval_set[0].blocks;
    for (int d = 1; d < blocks; ++d) {
      consistency.add({id, std::to_string(d), format_number(s.psnr_mean(d)), format_number(s.flow_mean(d))});
    }
    for (std::size_t i = 0; i < s.continuity.size(); ++i) {
      continuity.add({id, std::to_string(i), std::to_string(eval_set[i].condition), format_number(s.continuity[i])});
    }
    for (std::size_t p = 0; p < s.error.front().size(); ++p) {
      double m = 0.0;
      for (const auto& e : s.error) m += e[p];
      errors.add({id, std::to_string(p), format_number(m / s.error.size())});
    }
    const int spatial = s.free_running.spatial;
    summary.add({id, std::string(strategy_name(ck.strategy.strategy)), std::to_string(ck.step),
                 format_number(profile_mean(s.teacher_forced.mean)), format_number(profile_mean(s.free_running.mean)),
                 format_number(s.free_running.area()), format_number(profile_mean(s.first_frame.mean)),
                 format_number(s.free_running.block_mean(0)),
                 format_number(s.free_running.range_mean((blocks - 4) * spatial, blocks * spatial)),
                 format_number(s.continuity_mean()), format_number(s.flow_mean(blocks - 1)),
                 format_number(s.psnr_mean(blocks - 1))});
  }
  const fs::path dir = out_dir(c) / "eval";
  out.text(dir / "loss_curves.csv", render_csv("loss_curves", exp, curves));
  out.text(dir / "consistency.csv", render_csv("consistency", exp, consistency));
  out.text(dir / "continuity.csv", render_csv("continuity", exp, continuity));
  out.text(dir / "error_trace.csv", render_csv("error_trace", exp, errors));
  out.text(dir / "summary.csv", render_csv("summary", exp, summary));
  if (c.eval.svg) {
    Table fr({"run", "position", "loss"});
    for (const auto& r : curves.rows) {
      if (r[1] == "free_running") fr.add({r[0], r[2], r[4]});
    }
    out.text(dir / "loss_curves.svg", render_svg(fr, "position", "loss", "run", "free-running per-position loss"));
  }
  return out.files;
}

// ---- generate ------------------------------------------------------------------

inline std::vector<fs::path> cmd_generate(const ExperimentConfig& c, bool force,
                                          const std::optional<fs::path>& checkpoint = std::nullopt) {
  Outputs out{{}, force};
  const Checkpoint ck = load_checkpoint(checkpoint.value_or(out_dir(c) / "model.ckpt"));
  const Model model = restore_model(ck);
  const GenerationPlan plan = plan_of(c);
  const int n = c.corpus.tokens_per_sequence();
  if (n + 1 > model.config().max_positions && !plan.iterative()) {
    throw ConfigError("sequence length exceeds the model's positions; set generation.w_gen");
  }
  json records = json::array();
  for (int i = 0; i < c.generation.samples; ++i) {
    const int cond = i % c.corpus.classes;
    const GenerationRecord r = generate_with_plan(model, cond, n, plan, static_cast<std::uint64_t>(i), c.corpus.spatial);
    json lp = json::array();
    for (double v : r.log_probs) lp.push_back(format_number(v));
    records.push_back({{"index", i},
                       {"condition", cond},
                       {"blocks", r.tokens.blocks},
                       {"spatial", r.tokens.spatial},
                       {"passes", r.passes},
                       {"tokens", r.tokens.tokens},
                       {"log_probs", lp}});
  }
  const json exp = echo(c);
  json dump = {{"format", "arlab-generations"},
               {"version", 1},
               {"config_hash", config_hash(exp)},
               {"config", exp},
               {"records", records}};
  out.text(out_dir(c) / "generations.json", dump.dump() + "\n");
  return out.files;
}

// ---- cascade -------------------------------------------------------------------

inline std::vector<fs::path> cmd_cascade(const ExperimentConfig& c, bool force) {
  using namespace cascade;
  Outputs out{{}, force};
  const json exp = echo(c);
  const auto& k = c.cascade;
  const fs::path dir = out_dir(c) / "cascade";

  const RatioEstimate r = compare_conditioning(k.conditioning);
  Table cond({"mean_ff", "mean_base", "ci_ff_lo", "ci_ff_hi", "ci_base_lo", "ci_base_hi", "ratio", "ratio_ci_lo",
              "ratio_ci_hi", "trials"});
  cond.add({format_number(r.mean_ff), format_number(r.mean_base), format_number(r.ci_ff[0]), format_number(r.ci_ff[1]),
            format_number(r.ci_base[0]), format_number(r.ci_base[1]), format_number(r.ratio),
            format_number(r.ratio_ci[0]), format_number(r.ratio_ci[1]), std::to_string(r.trials)});
  out.text(dir / "conditioning.csv", render_csv("cascade_conditioning", exp, cond));

  Table bound({"family", "traces", "violations", "max_error_over_bound"});
  for (const std::string family : {"linear", "tanh"}) {
    int violations = 0;
    double worst = 0.0;
    for (int t = 0; t < k.bound_traces; ++t) {
      Rng rng(derive_seed(c.component_seed("cascade.bound." + family), static_cast<std::uint64_t>(t)));
      const System sys = family == "linear"
                             ? random_linear_system(k.bound_dim, uniform(rng, 0.2, 1.6), k.bound_sigma, rng)
                             : random_tanh_system(k.bound_dim, uniform(rng, 0.5, 2.0), k.bound_sigma, rng);
      const ErrorTrace tr = simulate_error(sys, k.bound_steps, random_delta(k.bound_delta), static_cast<std::uint64_t>(t));
      violations += static_cast<int>(check_bound(tr, sys.lipschitz()).size());
      const std::vector<double> b = bound_values(tr, sys.lipschitz());
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (b[i] > 0.0) worst = std::max(worst, tr.error[i + 1] / b[i]);
      }
    }
    bound.add({family, std::to_string(k.bound_traces), std::to_string(violations), format_number(worst)});
  }
  out.text(dir / "lipschitz_bound.csv", render_csv("cascade_bound", exp, bound));

  const RecoEffect e = reco_effect(k.reco_grid, k.bound_dim, k.reco_horizon, k.reco_trials, k.bound_delta,
                                   c.component_seed("cascade.reco"));
  Table eff({"lipschitz", "mean_terminal_error"});
  for (const auto& p : e.curve) eff.add({format_number(p.lipschitz), format_number(p.mean_terminal_error)});
  out.text(dir / "reco_effect.csv", render_csv("cascade_reco_effect", exp, eff));
  return out.files;
}

// ---- sweep ---------------------------------------------------------------------

struct SweepPoint {
  std::string label;
  double value = 0.0;
  int seed_index = 0;
  ExperimentConfig config;
};

// Same experiment under another master seed, with every component seed
// re-derived.
inline ExperimentConfig reseeded(const ExperimentConfig& base, std::uint64_t seed) {
  ExperimentConfig c = base;
  c.seed = seed;
  c.corpus.seed = c.component_seed("corpus");
  c.strategy.seed = c.component_seed("strategy");
  c.sampling.seed = c.component_seed("sampling");
  c.cascade.conditioning.seed = c.component_seed("cascade.conditioning");
  return c;
}

inline std::vector<SweepPoint> sweep_points(const ExperimentConfig& base) {
  const auto& s = base.sweep;
  const std::vector<double>& values = s.axis == "lambda"    ? s.lambda
                                      : s.axis == "overlap" ? s.overlap
                                      : s.axis == "horizon" ? s.horizon
                                                            : s.motion;
  if (values.empty()) throw ConfigError("sweep axis '" + s.axis + "' has no values");
  std::vector<SweepPoint> pts;
  for (int seed = 0; seed < s.seeds; ++seed) {
    for (double v : values) {
      SweepPoint p;
      p.value = v;
      p.seed_index = seed;
      p.label = s.axis + "_" + format_number(v) + "_seed" + std::to_string(seed);
      ExperimentConfig& c = p.config;
      // Matched seeds across the axis: twins differ only in the swept value.
      c = reseeded(base, derive_seed(base.seed, static_cast<std::uint64_t>(seed)));
      c.output_dir = (out_dir(base) / "sweep" / p.label).string();
      c.data.path.clear();
      if (s.axis == "lambda") {
        c.strategy.strategy = Strategy::ReCo;
        c.strategy.lambda = v;
      } else if (s.axis == "overlap") {
        if (c.strategy.strategy == Strategy::Baseline || c.strategy.strategy == Strategy::FewerFrames) {
          throw ConfigError("overlap sweep needs a windowed strategy");
        }
        const int spatial = c.corpus.spatial;
        const int stride = static_cast<int>(std::lround(c.strategy.window * (1.0 - v) / spatial)) * spatial;
        if (stride < spatial) throw ConfigError("overlap " + format_number(v) + " leaves no stride");
        c.strategy.stride = stride;
      } else if (s.axis == "horizon") {
        const int blocks = base.corpus.blocks() * static_cast<int>(v);
        c.corpus.frames = (blocks - 1) * c.corpus.temporal_compression + 1;
        c.model.max_positions = c.corpus.tokens_per_sequence() + 1;
      } else {
        c.corpus.motion_scale = v;
      }
      c.corpus.validate();
      c.model.validate();
      c.strategy.validate();
      pts.push_back(std::move(p));
    }
  }
  return pts;
}

inline Table sweep_table() {
  return Table({"axis", "value", "seed", "strategy", "window", "stride", "lambda", "motion", "tokens", "steps",
                "train_ce_tail", "step_ms_mean", "tf_mean", "fr_mean", "fr_area", "fr_first_half", "fr_second_half",
                "continuity", "flow_last", "psnr_last"});
}

inline std::vector<std::string> run_sweep_point(const SweepPoint& p, bool force) {
  const ExperimentConfig& c = p.config;
  Outputs out{{}, force};
  const Dataset ds = build_dataset(c);
  TrainResult r = run_training(c, ds);
  const json exp = echo(c);
  Table t = train_table();
  for (const auto& row : r.rows) t.add(train_cells(row));
  out.text(out_dir(c) / "train.csv", render_csv("train", exp, t));
  out.text(out_dir(c) / "model.ckpt", serialize_checkpoint(make_checkpoint(r.model, c.strategy, r.state, exp)));

  const auto eval_set = eval_slice(c, ds);
  const RunSummary s = summarize_run(r.model, eval_set, ds.codebook, c.corpus, plan_of(c));
  double tail = 0.0, ms = 0.0;
  const std::size_t n_tail = std::max<std::size_t>(1, r.rows.size() / 10);
  for (std::size_t i = r.rows.size() - std::min(n_tail, r.rows.size()); i < r.rows.size(); ++i) tail += r.rows[i].ce;
  for (const auto& row : r.rows) ms += row.step_wall_ms;
  const int len = static_cast<int>(s.free_running.length()), blocks = eval_set[0].blocks;
  return {c.sweep.axis,
          format_number(p.value),
          std::to_string(p.seed_index),
          std::string(strategy_name(c.strategy.strategy)),
          std::to_string(c.strategy.window),
          std::to_string(c.strategy.stride),
          format_number(c.strategy.strategy == Strategy::ReCo ? c.strategy.lambda : 0.0),
          format_number(c.corpus.motion_scale),
          std::to_string(c.corpus.tokens_per_sequence()),
          std::to_string(r.rows.size()),
          format_number(r.rows.empty() ? 0.0 : tail / std::min(n_tail, r.rows.size())),
          format_number(r.rows.empty() ? 0.0 : ms / r.rows.size()),
          format_number(profile_mean(s.teacher_forced.mean)),
          format_number(profile_mean(s.free_running.mean)),
          format_number(s.free_running.area()),
          format_number(s.free_running.range_mean(0, len / 2)),
          format_number(s.free_running.range_mean(len / 2, len)),
          format_number(s.continuity_mean()),
          format_number(s.flow_mean(blocks - 1)),
          format_number(s.psnr_mean(blocks - 1))};
}

// Runs the points on up to `jobs` threads. Each point owns its directory;
// rows are assembled in point order afterwards, so the aggregate does not
// depend on scheduling.
inline std::vector<fs::path> cmd_sweep(const ExperimentConfig& c, bool force, int jobs) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  const std::vector<SweepPoint> pts = sweep_points(c);
  const fs::path agg = out_dir(c) / ("sweep_" + c.sweep.axis + ".csv");
  if (!force && fs::exists(agg)) throw IoError("refusing to overwrite " + agg.string() + " (use --force)");
  std::vector<std::vector<std::string>> rows(pts.size());
  std::vector<std::exception_ptr> errors(pts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < pts.size(); i = next++) {
      try {
        rows[i] = run_sweep_point(pts[i], force);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 1; j < std::min<int>(jobs, static_cast<int>(pts.size())); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Outputs out{{}, force};
  Table t = sweep_table();
  for (auto& r : rows) t.add(std::move(r));
  out.text(agg, render_csv("sweep", echo(c), t));
  if (c.sweep.svg) out.text(out_dir(c) / ("sweep_" + c.sweep.axis + ".svg"), render_svg(t, "value", "fr_area", "seed"));
  for (const auto& p : pts) {
    out.files.push_back(out_dir(p.config) / "train.csv");
    out.files.push_back(out_dir(p.config) / "model.ckpt");
  }
  return out.files;
}

// ---- bench ---------------------------------------------------------------------

// Sequential on purpose: timings are only meaningful without concurrent load.
inline std::vector<fs::path> cmd_bench(const ExperimentConfig& c, bool force) {
  Outputs out{{}, force};
  const Dataset ds = obtain_dataset(c);
  std::vector<StrategyConfig> configs;
  for (const auto& name : c.bench.strategies) {
    StrategyConfig s = c.strategy;
    s.strategy = parse_strategy(name);
    configs.push_back(s);
  }
  const std::vector<BenchReport> reports =
      bench_set(configs, c.model, ds.train, c.bench.warmup, c.bench.reps, c.component_seed("bench"));
  Table t({"strategy", "mean_ms", "std_ms", "warmup", "reps", "tracked_scalars", "activation_bytes", "parameter_count",
           "timer_ok"});
  for (const auto& r : reports) {
    t.add({std::string(strategy_name(r.strategy)), format_number(r.mean_ms), format_number(r.std_ms),
           std::to_string(r.warmup), std::to_string(r.reps), std::to_string(r.tracked_scalars),
           std::to_string(r.activation_bytes), std::to_string(r.parameter_count), r.timer_ok ? "1" : "0"});
  }
  out.text(out_dir(c) / "bench.csv", render_csv("bench", echo(c), t));
  return out.files;
}

}  // namespace arlab::experiment
