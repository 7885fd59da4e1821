#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arlab/model.hpp"
#include "arlab/random.hpp"
#include "arlab/report.hpp"

namespace arlab {

// Latent blocks per clip when the first frame is kept and the remaining
// t - 1 frames are compressed alpha-to-one.
inline int block_count(int frames, int alpha) {
  if (frames < 1 || alpha < 1) throw std::invalid_argument("block_count: frames and alpha must be positive");
  if ((frames - 1) % alpha != 0) {
    throw std::invalid_argument("block_count: frames - 1 = " + std::to_string(frames - 1) +
                                " is not divisible by alpha = " + std::to_string(alpha));
  }
  return 1 + (frames - 1) / alpha;
}

struct CorpusConfig {
  int frames = 61;
  int temporal_compression = 4;
  int spatial = 16;         // sub-vectors per frame block
  int dim = 8;              // latent dimension, must be even
  int codebook_size = 256;
  double amplitude = 1.0;   // latents live in [-amplitude, amplitude]
  int classes = 8;
  int regimes = 4;
  int stamp_vectors = 4;    // sub-vectors of frame 1 overwritten by the regime stamp
  double motion_scale = 1.0;
  double pattern_scale = 0.7;
  double drift = 0.01;
  double noise = 0.05;
  std::uint64_t seed = 1234;  // fixes codebook, class patterns and stamps

  int blocks() const { return block_count(frames, temporal_compression); }
  int tokens_per_sequence() const { return blocks() * spatial; }
  // Phase lattice size: rates are harmonics of the clip so every clip closes.
  int phase_steps() const { return std::max(1, blocks() - 1); }

  void validate() const {
    blocks();
    if (spatial < 1 || dim < 2 || dim % 2 != 0) throw ConfigError("corpus: spatial >= 1 and even dim >= 2 required");
    if (codebook_size < 2) throw ConfigError("corpus: codebook_size must be at least 2");
    if (!(amplitude > 0.0)) throw ConfigError("corpus: amplitude must be positive");
    if (classes < 1 || regimes < 1) throw ConfigError("corpus: classes and regimes must be positive");
    if (stamp_vectors < 0 || stamp_vectors > spatial) throw ConfigError("corpus: stamp_vectors out of range");
    if (!(motion_scale >= 0.0)) throw ConfigError("corpus: motion_scale must be >= 0");
    if (!(pattern_scale > 0.0) || pattern_scale * std::numbers::sqrt2 > amplitude) {
      throw ConfigError("corpus: pattern_scale must keep rotated patterns inside the amplitude");
    }
    if (!(drift >= 0.0) || !(noise >= 0.0)) throw ConfigError("corpus: drift and noise must be >= 0");
  }

  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"frames", c.frames},       {"temporal_compression", c.temporal_compression},
       {"spatial", c.spatial},     {"dim", c.dim},
       {"codebook_size", c.codebook_size}, {"amplitude", c.amplitude},
       {"classes", c.classes},     {"regimes", c.regimes},
       {"stamp_vectors", c.stamp_vectors}, {"motion_scale", c.motion_scale},
       {"pattern_scale", c.pattern_scale}, {"drift", c.drift},
       {"noise", c.noise},         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.frames = j.value("frames", d.frames);
  c.temporal_compression = j.value("temporal_compression", d.temporal_compression);
  c.spatial = j.value("spatial", d.spatial);
  c.dim = j.value("dim", d.dim);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.amplitude = j.value("amplitude", d.amplitude);
  c.classes = j.value("classes", d.classes);
  c.regimes = j.value("regimes", d.regimes);
  c.stamp_vectors = j.value("stamp_vectors", d.stamp_vectors);
  c.motion_scale = j.value("motion_scale", d.motion_scale);
  c.pattern_scale = j.value("pattern_scale", d.pattern_scale);
  c.drift = j.value("drift", d.drift);
  c.noise = j.value("noise", d.noise);
  c.seed = j.value("seed", d.seed);
}

struct Codebook {
  int size = 0;
  int dim = 0;
  std::vector<double> entries;  // [size x dim]

  std::span<const double> entry(int i) const {
    return {entries.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }

  double min_pairwise_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a < size; ++a) {
      for (int b = a + 1; b < size; ++b) {
        double s = 0.0;
        for (int k = 0; k < dim; ++k) {
          const double diff = entry(a)[k] - entry(b)[k];
          s += diff * diff;
        }
        best = std::min(best, std::sqrt(s));
      }
    }
    return best;
  }
};

inline Codebook make_codebook(int size, int dim, double amplitude, std::uint64_t seed) {
  if (size < 1 || dim < 1) throw ConfigError("codebook extents must be positive");
  Rng rng(seed);
  Codebook cb{size, dim, std::vector<double>(static_cast<std::size_t>(size) * dim)};
  for (double& x : cb.entries) x = uniform(rng, -amplitude, amplitude);
  if (size > 1 && !(cb.min_pairwise_distance() > 0.0)) {
    throw std::runtime_error("codebook has coincident entries");
  }
  return cb;
}

inline Codebook make_codebook(const CorpusConfig& config) {
  return make_codebook(config.codebook_size, config.dim, config.amplitude,
                       derive_seed(config.seed, "codebook"));
}

struct LatentTrajectory {
  int blocks = 0;
  int spatial = 0;
  int dim = 0;
  std::vector<double> values;  // [blocks x spatial x dim]
  int class_id = -1;
  int regime = -1;
  double motion_scale = 0.0;
  double amplitude = 1.0;

  std::size_t offset(int block, int sub) const {
    return (static_cast<std::size_t>(block) * spatial + sub) * dim;
  }
  std::span<double> vec(int block, int sub) { return {values.data() + offset(block, sub), static_cast<std::size_t>(dim)}; }
  std::span<const double> vec(int block, int sub) const {
    return {values.data() + offset(block, sub), static_cast<std::size_t>(dim)};
  }
  int vectors() const { return blocks * spatial; }

  // Mean latent of one frame block.
  std::vector<double> block_mean(int block) const {
    std::vector<double> m(dim, 0.0);
    for (int s = 0; s < spatial; ++s) {
      for (int k = 0; k < dim; ++k) m[k] += vec(block, s)[k];
    }
    for (double& x : m) x /= spatial;
    return m;
  }
};

struct TokenSequence {
  int condition = 0;
  std::vector<int> tokens;  // frame-block order
  int blocks = 0;
  int spatial = 0;
  int regime = -1;  // generator metadata, -1 when unknown

  std::size_t size() const { return tokens.size(); }
};

namespace detail {

// Class patterns, drift directions and regime stamps are fixed by the corpus
// seed alone, so every sequence of a dataset shares them.
struct CorpusTables {
  std::vector<double> patterns;  // [classes x spatial x dim]
  std::vector<double> drifts;    // [classes x dim]
  std::vector<double> stamps;    // [regimes x stamp_vectors x dim]
};

inline CorpusTables corpus_tables(const CorpusConfig& c) {
  CorpusTables t;
  Rng rng(derive_seed(c.seed, "corpus.tables"));
  t.patterns.resize(static_cast<std::size_t>(c.classes) * c.spatial * c.dim);
  for (double& x : t.patterns) x = uniform(rng, -c.pattern_scale, c.pattern_scale);
  t.drifts.resize(static_cast<std::size_t>(c.classes) * c.dim);
  for (double& x : t.drifts) x = c.drift * (uniform01(rng) < 0.5 ? -1.0 : 1.0);
  t.stamps.resize(static_cast<std::size_t>(c.regimes) * c.stamp_vectors * c.dim);
  for (double& x : t.stamps) x = uniform(rng, -c.amplitude, c.amplitude);
  return t;
}

// Rotates consecutive coordinate pairs by `angle`.
inline void rotate_pairs(std::span<const double> in, double angle, std::span<double> out) {
  const double cs = std::cos(angle), sn = std::sin(angle);
  for (std::size_t k = 0; k + 1 < in.size(); k += 2) {
    out[k] = cs * in[k] - sn * in[k + 1];
    out[k + 1] = sn * in[k] + cs * in[k + 1];
  }
}

}  // namespace detail

// Latent clip for one sequence. A regime r (hidden) sets the angular rate
// theta_r = motion_scale * 2*pi*(r+1)/phase_steps; frame k shows the class
// pattern rotated by phi + k*theta_r plus drift and noise, with phi drawn
// from the phase lattice. Frame 1 additionally carries a regime stamp on its
// first sub-vectors which dissolves into the pattern as motion proceeds, so
// only the first block (or a long run of later blocks) reveals the regime.
inline LatentTrajectory gen_trajectory(const CorpusConfig& config, int class_id, std::uint64_t seed) {
  config.validate();
  if (class_id < 0 || class_id >= config.classes) {
    throw std::out_of_range("class id " + std::to_string(class_id) + " outside [0, " +
                            std::to_string(config.classes) + ")");
  }
  const detail::CorpusTables tables = detail::corpus_tables(config);
  Rng rng(seed);
  LatentTrajectory z;
  z.blocks = config.blocks();
  z.spatial = config.spatial;
  z.dim = config.dim;
  z.values.assign(static_cast<std::size_t>(z.blocks) * z.spatial * z.dim, 0.0);
  z.class_id = class_id;
  z.regime = static_cast<int>(uniform_index(rng, config.regimes));
  z.motion_scale = config.motion_scale;
  z.amplitude = config.amplitude;

  const int steps = config.phase_steps();
  const double phase = 2.0 * std::numbers::pi * static_cast<double>(uniform_index(rng, steps)) / steps;
  const double rate = config.motion_scale * 2.0 * std::numbers::pi * (z.regime + 1) / steps;
  const double noise = config.noise * config.motion_scale;
  const std::size_t d = config.dim;

  std::vector<double> rotated(d);
  for (int b = 0; b < z.blocks; ++b) {
    // stamp weight: 1 in frame 1, fades out at the motion rate
    const double stamp_weight = std::max(0.0, 1.0 - b * config.motion_scale);
    for (int s = 0; s < z.spatial; ++s) {
      std::span<const double> pattern(
          tables.patterns.data() + (static_cast<std::size_t>(class_id) * z.spatial + s) * d, d);
      detail::rotate_pairs(pattern, phase + b * rate, rotated);
      std::span<double> out = z.vec(b, s);
      for (std::size_t k = 0; k < d; ++k) {
        double v = rotated[k] + b * config.motion_scale * tables.drifts[class_id * d + k];
        if (s < config.stamp_vectors) {
          const double stamp = tables.stamps[(static_cast<std::size_t>(z.regime) * config.stamp_vectors + s) * d + k];
          v = stamp_weight * stamp + (1.0 - stamp_weight) * v;
        }
        if (noise > 0.0) v += noise * normal(rng);
        out[k] = std::clamp(v, -config.amplitude, config.amplitude);
      }
    }
  }
  return z;
}

// Nearest codebook entry per sub-vector, ties to the lowest index.
inline int nearest_entry(std::span<const double> v, const Codebook& codebook) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < codebook.size; ++i) {
    const std::span<const double> e = codebook.entry(i);
    double s = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double diff = v[k] - e[k];
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = i;
    }
  }
  return best;
}

inline TokenSequence quantize(const LatentTrajectory& traj, const Codebook& codebook) {
  if (traj.dim != codebook.dim) {
    throw std::invalid_argument("quantize: latent dim " + std::to_string(traj.dim) +
                                " differs from codebook dim " + std::to_string(codebook.dim));
  }
  TokenSequence seq;
  seq.condition = std::max(traj.class_id, 0);
  seq.blocks = traj.blocks;
  seq.spatial = traj.spatial;
  seq.regime = traj.regime;
  seq.tokens.reserve(traj.vectors());
  for (int b = 0; b < traj.blocks; ++b) {
    for (int s = 0; s < traj.spatial; ++s) seq.tokens.push_back(nearest_entry(traj.vec(b, s), codebook));
  }
  return seq;
}

// Codebook lookup. Sequences whose length is not a whole number of blocks
// decode to a single block row of that many sub-vectors.
inline LatentTrajectory decode(const TokenSequence& seq, const Codebook& codebook) {
  LatentTrajectory z;
  const int n = static_cast<int>(seq.tokens.size());
  if (seq.spatial > 0 && seq.blocks * seq.spatial == n) {
    z.blocks = seq.blocks;
    z.spatial = seq.spatial;
  } else {
    z.blocks = n > 0 ? 1 : 0;
    z.spatial = n;
  }
  z.dim = codebook.dim;
  z.class_id = seq.condition;
  z.regime = seq.regime;
  z.values.reserve(static_cast<std::size_t>(n) * codebook.dim);
  for (int t : seq.tokens) {
    if (t < 0 || t >= codebook.size) {
      throw std::out_of_range("token " + std::to_string(t) + " outside codebook of size " +
                              std::to_string(codebook.size));
    }
    const std::span<const double> e = codebook.entry(t);
    z.values.insert(z.values.end(), e.begin(), e.end());
  }
  return z;
}

struct Dataset {
  CorpusConfig config;
  Codebook codebook;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> eval;
};

// Sequence i has class i mod classes and an independent counter-derived seed;
// the eval split is the n/10 indices with the smallest split hash.
inline Dataset make_dataset(const CorpusConfig& config, int n_sequences, std::uint64_t seed) {
  config.validate();
  if (n_sequences < 2) throw std::invalid_argument("make_dataset: need at least 2 sequences");
  Dataset ds{config, make_codebook(config), {}, {}};
  const std::uint64_t split_key = derive_seed(seed, "split");
  std::vector<std::pair<std::uint64_t, int>> order;
  for (int i = 0; i < n_sequences; ++i) order.emplace_back(splitmix64(split_key ^ static_cast<std::uint64_t>(i)), i);
  std::sort(order.begin(), order.end());
  const int n_eval = std::max(1, n_sequences / 10);
  std::vector<std::uint8_t> is_eval(n_sequences, 0);
  for (int r = 0; r < n_eval; ++r) is_eval[order[r].second] = 1;

  const std::uint64_t seq_key = derive_seed(seed, "sequences");
  for (int i = 0; i < n_sequences; ++i) {
    const int cls = i % config.classes;
    TokenSequence s = quantize(gen_trajectory(config, cls, derive_seed(seq_key, static_cast<std::uint64_t>(i))),
                               ds.codebook);
    (is_eval[i] ? ds.eval : ds.train).push_back(std::move(s));
  }
  return ds;
}

// Nearest-centroid regime classifier over the decoded latents of one block:
// centroids from `fit`, accuracy measured on `test`.
inline double regime_probe_accuracy(std::span<const TokenSequence> fit, std::span<const TokenSequence> test,
                                    const Codebook& codebook, int block, int regimes) {
  if (fit.empty() || test.empty()) throw std::invalid_argument("regime probe needs data");
  auto features = [&](const TokenSequence& s) {
    if (block < 0 || block >= s.blocks) throw std::out_of_range("probe block out of range");
    std::vector<double> f;
    f.reserve(static_cast<std::size_t>(s.spatial) * codebook.dim);
    for (int j = 0; j < s.spatial; ++j) {
      const std::span<const double> e = codebook.entry(s.tokens[static_cast<std::size_t>(block) * s.spatial + j]);
      f.insert(f.end(), e.begin(), e.end());
    }
    return f;
  };
  std::vector<std::vector<double>> centroid(regimes);
  std::vector<int> count(regimes, 0);
  for (const TokenSequence& s : fit) {
    std::vector<double> f = features(s);
    auto& c = centroid.at(s.regime);
    if (c.empty()) c.assign(f.size(), 0.0);
    for (std::size_t k = 0; k < f.size(); ++k) c[k] += f[k];
    ++count[s.regime];
  }
  for (int r = 0; r < regimes; ++r) {
    for (double& x : centroid[r]) x /= count[r];
  }
  int correct = 0;
  for (const TokenSequence& s : test) {
    const std::vector<double> f = features(s);
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int r = 0; r < regimes; ++r) {
      if (centroid[r].empty()) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) d += (f[k] - centroid[r][k]) * (f[k] - centroid[r][k]);
      if (d < best_d) {
        best_d = d;
        best = r;
      }
    }
    correct += best == s.regime;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---- dataset file ----------------------------------------------------------

inline constexpr const char* kDatasetFormat = "arlab-dataset";
inline constexpr int kDatasetVersion = 1;

inline nlohmann::json dataset_to_json(const Dataset& ds, int n_sequences, std::uint64_t seed) {
  nlohmann::json cfg = {{"corpus", ds.config}, {"n_sequences", n_sequences}, {"seed", seed}};
  nlohmann::json j;
  j["format"] = kDatasetFormat;
  j["version"] = kDatasetVersion;
  j["config"] = cfg;
  j["config_hash"] = config_hash(cfg);
  j["codebook"] = {{"size", ds.codebook.size}, {"dim", ds.codebook.dim}, {"entries", ds.codebook.entries}};
  auto seqs = [](const std::vector<TokenSequence>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const TokenSequence& s : v) {
      a.push_back({{"condition", s.condition}, {"regime", s.regime}, {"tokens", s.tokens}});
    }
    return a;
  };
  j["train"] = seqs(ds.train);
  j["eval"] = seqs(ds.eval);
  return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kDatasetFormat) throw std::runtime_error("not an arlab dataset file");
  if (j.value("version", 0) != kDatasetVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(j.value("version", 0)));
  }
  Dataset ds;
  ds.config = j.at("config").at("corpus").get<CorpusConfig>();
  const auto& cb = j.at("codebook");
  ds.codebook.size = cb.at("size").get<int>();
  ds.codebook.dim = cb.at("dim").get<int>();
  ds.codebook.entries = cb.at("entries").get<std::vector<double>>();
  if (ds.codebook.entries.size() != static_cast<std::size_t>(ds.codebook.size) * ds.codebook.dim) {
    throw std::runtime_error("dataset codebook has wrong number of values");
  }
  auto load = [&](const nlohmann::json& a, std::vector<TokenSequence>& out) {
    for (const auto& e : a) {
      TokenSequence s;
      s.condition = e.at("condition").get<int>();
      s.regime = e.value("regime", -1);
      s.tokens = e.at("tokens").get<std::vector<int>>();
      s.blocks = ds.config.blocks();
      s.spatial = ds.config.spatial;
      if (static_cast<int>(s.tokens.size()) != ds.config.tokens_per_sequence()) {
        throw std::runtime_error("dataset sequence has wrong length");
      }
      out.push_back(std::move(s));
    }
  };
  load(j.at("train"), ds.train);
  load(j.at("eval"), ds.eval);
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset " + path.string() + ": " + e.what());
  }
  return dataset_from_json(j);
}

}  // namespace arlab
