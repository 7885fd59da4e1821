#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/corpus.hpp"
#include "arlab/inference.hpp"
#include "arlab/model.hpp"
#include "arlab/strategies.hpp"

namespace arlab {

enum class LossMode { TeacherForced, FreeRunning };

inline const char* loss_mode_name(LossMode m) {
  return m == LossMode::TeacherForced ? "teacher_forced" : "free_running";
}

// How free-running sequences are produced: full-history decoding, or the
// sliding re-feed scheme when w_gen > 0. Sequence i samples with seed
// derive_seed(sampling.seed, i).
struct GenerationPlan {
  SamplingConfig sampling;
  int w_gen = 0;
  int slide = 0;

  bool iterative() const { return w_gen > 0; }
};

inline GenerationRecord generate_with_plan(const Model& model, int condition, int length, const GenerationPlan& plan,
                                           std::uint64_t index, int spatial, std::span<const int> forced = {}) {
  SamplingConfig s = plan.sampling;
  s.seed = derive_seed(plan.sampling.seed, index);
  if (plan.iterative()) {
    return generate_iterative(model, condition, plan.w_gen, plan.slide, length, s, spatial, forced);
  }
  return generate_full(model, condition, length, s, forced, spatial);
}

struct LossCurve {
  LossMode mode = LossMode::TeacherForced;
  std::vector<double> mean;                       // per token position
  std::vector<std::vector<double>> per_sequence;  // [sequence][position]
  int spatial = 1;

  std::size_t length() const { return mean.size(); }
  // Positions (0-based) where a new frame block begins.
  std::vector<int> markers() const {
    std::vector<int> m;
    for (int p = 0; p < static_cast<int>(mean.size()); p += std::max(1, spatial)) m.push_back(p);
    return m;
  }
  double block_mean(int block) const { return range_mean(block * spatial, (block + 1) * spatial); }
  double range_mean(int begin, int end) const {
    double s = 0.0;
    for (int p = begin; p < end; ++p) s += mean.at(p);
    return s / (end - begin);
  }
  double area() const { return std::accumulate(mean.begin(), mean.end(), 0.0); }
};

namespace detail {

inline void check_eval_set(std::span<const TokenSequence> eval_set) {
  if (eval_set.empty()) throw std::invalid_argument("evaluation set is empty");
}

inline void finish_curve(LossCurve& c) {
  const std::size_t n = c.per_sequence.front().size();
  c.mean.assign(n, 0.0);
  for (const auto& row : c.per_sequence) {
    if (row.size() != n) throw std::invalid_argument("ragged loss curves");
    for (std::size_t p = 0; p < n; ++p) c.mean[p] += row[p];
  }
  for (double& v : c.mean) v /= static_cast<double>(c.per_sequence.size());
}

}  // namespace detail

// Teacher-forced CE of the true token at every position.
inline std::vector<double> teacher_forced_losses(const Model& model, const TokenSequence& seq) {
  const Model::Forward f = model.forward(std::span(seq.tokens).first(seq.tokens.size() - 1), seq.condition);
  const std::size_t cb = model.config().codebook_size, v = model.config().vocab_size();
  std::vector<double> out;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    out.push_back(-log_softmax_at(std::span(f.logits.data() + i * v, cb), seq.tokens[i]));
  }
  return out;
}

// Teacher-forced: CE of the true continuation. Free-running: self-surprisal
// -log p(token) of each token the model emitted, at generation time.
inline LossCurve per_position_loss(const Model& model, std::span<const TokenSequence> eval_set, LossMode mode,
                                   const GenerationPlan& plan = {}) {
  detail::check_eval_set(eval_set);
  LossCurve c;
  c.mode = mode;
  c.spatial = std::max(1, eval_set[0].spatial);
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const TokenSequence& s = eval_set[i];
    if (mode == LossMode::TeacherForced) {
      c.per_sequence.push_back(teacher_forced_losses(model, s));
    } else {
      const GenerationRecord r =
          generate_with_plan(model, s.condition, static_cast<int>(s.tokens.size()), plan, i, c.spatial);
      std::vector<double> row;
      for (double lp : r.log_probs) row.push_back(-lp);
      c.per_sequence.push_back(std::move(row));
    }
  }
  detail::finish_curve(c);
  return c;
}

// Free-running with the first block taken from ground truth.
inline LossCurve first_frame_augmented_eval(const Model& model, std::span<const TokenSequence> eval_set,
                                            const GenerationPlan& plan = {}) {
  detail::check_eval_set(eval_set);
  LossCurve c;
  c.mode = LossMode::FreeRunning;
  c.spatial = std::max(1, eval_set[0].spatial);
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const TokenSequence& s = eval_set[i];
    const std::span<const int> first_block = std::span(s.tokens).first(static_cast<std::size_t>(c.spatial));
    const GenerationRecord r =
        generate_with_plan(model, s.condition, static_cast<int>(s.tokens.size()), plan, i, c.spatial, first_block);
    std::vector<double> row;
    for (double lp : r.log_probs) row.push_back(-lp);
    c.per_sequence.push_back(std::move(row));
  }
  detail::finish_curve(c);
  return c;
}

// ---- consistency proxies -----------------------------------------------------

inline double block_mse(const LatentTrajectory& a, const LatentTrajectory& b, int block) {
  double s = 0.0;
  for (int j = 0; j < a.spatial; ++j) {
    for (int k = 0; k < a.dim; ++k) {
      const double d = a.vec(block, j)[k] - b.vec(block, j)[k];
      s += d * d;
    }
  }
  return s / (static_cast<double>(a.spatial) * a.dim);
}

// For each interval D = 1..blocks-1: mean over s of the MSE between generated
// and reference frame s + D, as PSNR 10 log10(R^2 / MSE); +inf when MSE = 0.
inline std::vector<double> psnr_proxy(const TokenSequence& gen, const TokenSequence& ref, const Codebook& codebook,
                                      double amplitude) {
  if (gen.tokens.size() != ref.tokens.size() || gen.blocks != ref.blocks || gen.spatial != ref.spatial) {
    throw std::invalid_argument("psnr_proxy: layout mismatch");
  }
  const LatentTrajectory a = decode(gen, codebook), b = decode(ref, codebook);
  std::vector<double> out;
  for (int delta = 1; delta < gen.blocks; ++delta) {
    double mse = 0.0;
    for (int s = 0; s + delta < gen.blocks; ++s) mse += block_mse(a, b, s + delta);
    mse /= (gen.blocks - delta);
    out.push_back(mse > 0.0 ? 10.0 * std::log10(amplitude * amplitude / mse)
                            : std::numeric_limits<double>::infinity());
  }
  return out;
}

inline double vector_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

// ||z_{s+D} - z_s|| between decoded frame-block mean latents, per start s.
inline std::vector<double> flow_terms(const TokenSequence& seq, const Codebook& codebook, int delta) {
  if (delta < 1 || delta > seq.blocks - 1) {
    throw std::out_of_range("flow_proxy: interval " + std::to_string(delta) + " outside [1, " +
                            std::to_string(seq.blocks - 1) + "]");
  }
  const LatentTrajectory z = decode(seq, codebook);
  std::vector<double> out;
  for (int s = 0; s + delta < seq.blocks; ++s) out.push_back(vector_distance(z.block_mean(s + delta), z.block_mean(s)));
  return out;
}

inline double flow_proxy(const TokenSequence& seq, const Codebook& codebook, int delta) {
  const std::vector<double> t = flow_terms(seq, codebook, delta);
  return std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
}

struct ConsistencyReport {
  std::vector<double> psnr;  // index D - 1
  std::vector<double> flow;  // index D - 1
};

// ---- hidden-state metrics ----------------------------------------------------

// ||h_{t+1} - h_t||^2 for consecutive rows.
inline std::vector<double> continuity_profile(const HiddenTrace& trace) {
  const std::size_t n = trace.length(), d = trace.states.cols();
  if (trace.states.empty() || n < 2) throw std::invalid_argument("continuity_profile needs at least two states");
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double* a = trace.states.data() + i * d;
    const double* b = a + d;
    double step = 0.0;
    for (std::size_t j = 0; j < d; ++j) step += (b[j] - a[j]) * (b[j] - a[j]);
    out.push_back(step);
  }
  return out;
}

inline double profile_mean(const std::vector<double>& p) {
  double s = 0.0;
  for (double v : p) s += v;
  return s / static_cast<double>(p.size());
}

// ||h^_t - h_t|| per position: teacher-forced states of `seq` against the
// states of a free-running generation from the same condition.
inline std::vector<double> error_propagation_trace(const Model& model, const TokenSequence& seq,
                                                   const GenerationRecord& free_run) {
  const std::size_t n = seq.tokens.size();
  if (free_run.trace.length() != n) throw std::invalid_argument("error trace: length mismatch");
  const Model::Forward f = model.forward(std::span(seq.tokens).first(n - 1), seq.condition);
  const std::size_t d = model.config().d_model;
  std::vector<double> out;
  for (std::size_t t = 0; t < n; ++t) {
    out.push_back(vector_distance(std::span(free_run.trace.states.data() + t * d, d),
                                  std::span(f.trace.states.data() + t * d, d)));
  }
  return out;
}

inline std::vector<double> error_propagation_trace(const Model& model, const TokenSequence& seq,
                                                   const SamplingConfig& sampling) {
  return error_propagation_trace(
      model, seq, generate_full(model, seq.condition, static_cast<int>(seq.tokens.size()), sampling, {}, seq.spatial));
}

// ---- throughput / memory -----------------------------------------------------

struct BenchReport {
  Strategy strategy = Strategy::Baseline;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int warmup = 0;
  int reps = 0;
  std::size_t tracked_scalars = 0;
  std::size_t activation_bytes = 0;
  std::size_t parameter_count = 0;
  bool timer_ok = true;
};

// Times full optimizer steps (>= 5 warmup, >= 30 timed) on a private copy of
// a freshly initialized model. Memory is the count of gradient-tracked values
// in the step graph, at 8 bytes each.
inline BenchReport bench_step(const StrategyConfig& config, const ModelConfig& model_config,
                              std::span<const TokenSequence> data, int warmup, int reps, std::uint64_t seed) {
  if (warmup < 5 || reps < 30) throw std::invalid_argument("bench_step needs >= 5 warmup and >= 30 timed steps");
  config.validate();
  Model model(model_config, seed);
  TrainState state = init_train_state(config);
  BenchReport r;
  r.strategy = config.strategy;
  r.warmup = warmup;
  r.reps = reps;
  r.parameter_count = model.parameter_count();
  {
    Rng probe(derive_seed(seed, "bench.memory"));
    PreparedStep st = prepare_step(model, data, config, probe);
    r.tracked_scalars = st.graph->tracked_scalars();
    r.activation_bytes = r.tracked_scalars * sizeof(double);
  }
  for (int i = 0; i < warmup; ++i) train_step(model, data, config, state);
  std::vector<double> ms;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    train_step(model, data, config, state);
    const double dt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!(dt > 0.0)) r.timer_ok = false;
    ms.push_back(dt);
  }
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / reps;
  double v = 0.0;
  for (double x : ms) v += (x - r.mean_ms) * (x - r.mean_ms);
  r.std_ms = std::sqrt(v / (reps - 1));
  return r;
}

// One report per strategy config, run back to back on the same data.
inline std::vector<BenchReport> bench_set(const std::vector<StrategyConfig>& configs, const ModelConfig& model_config,
                                          std::span<const TokenSequence> data, int warmup, int reps,
                                          std::uint64_t seed) {
  std::vector<BenchReport> out;
  for (const auto& c : configs) out.push_back(bench_step(c, model_config, data, warmup, reps, seed));
  return out;
}

}  // namespace arlab
