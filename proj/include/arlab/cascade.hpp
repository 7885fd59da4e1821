#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arlab/nn/tensor.hpp"
#include "arlab/random.hpp"

namespace arlab::cascade {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline void require_finite(const Matrix& a, const char* what) {
  if (!a.allFinite()) throw nn::NumericError(std::string(what) + ": non-finite entries");
}

// Largest singular value, as the square root of the top eigenvalue of A^T A.
inline double spectral_norm(const Matrix& a) {
  require_finite(a, "spectral_norm");
  if (a.size() == 0) return 0.0;
  const Matrix gram = a.cols() <= a.rows() ? Matrix(a.transpose() * a) : Matrix(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
}

inline Matrix gaussian_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = scale * normal(rng);
  }
  return m;
}

inline Vector gaussian_vector(int n, Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = scale * normal(rng);
  return v;
}

inline Matrix random_orthogonal(int n, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(n, n, rng));
  Matrix q = qr.householderQ();
  // Fix column signs so the result is a deterministic function of the draw.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < n; ++i) {
    if (r(i, i) < 0) q.col(i) *= -1.0;
  }
  return q;
}

// h' = act(A h + B u + bias) + sigma * noise, with act = identity or tanh.
// For tanh, |tanh'| <= 1 makes ||A||_2 a certified global Lipschitz constant.
struct System {
  Matrix a;
  Matrix b;
  Vector bias;
  double sigma = 0.0;
  bool use_tanh = false;

  int dim() const { return static_cast<int>(a.rows()); }
  double lipschitz() const { return spectral_norm(a); }

  Vector step(const Vector& h, const Vector& u) const {
    Vector pre = a * h;
    if (b.size() > 0) pre += b * u;
    if (bias.size() > 0) pre += bias;
    if (use_tanh) pre = pre.array().tanh().matrix();
    return pre;
  }
};

inline System linear_system(const Matrix& a, double sigma = 0.0) {
  require_finite(a, "linear_system");
  if (a.rows() != a.cols()) throw std::invalid_argument("transition matrix must be square");
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  System s;
  s.a = a;
  s.b = Matrix::Identity(a.rows(), a.rows());
  s.sigma = sigma;
  return s;
}

// Random system whose transition has spectral norm exactly `lipschitz`.
inline System random_linear_system(int dim, double lipschitz, double sigma, Rng& rng) {
  const Matrix u = random_orthogonal(dim, rng), v = random_orthogonal(dim, rng);
  Vector sv(dim);
  for (int i = 0; i < dim; ++i) sv(i) = lipschitz * (i == 0 ? 1.0 : uniform(rng, 0.1, 1.0));
  return linear_system(u * sv.asDiagonal() * v.transpose(), sigma);
}

inline System random_tanh_system(int dim, double weight_scale, double sigma, Rng& rng) {
  System s;
  s.a = gaussian_matrix(dim, dim, rng, weight_scale / std::sqrt(static_cast<double>(dim)));
  s.b = Matrix::Identity(dim, dim);
  s.bias = gaussian_vector(dim, rng, 0.1);
  s.sigma = sigma;
  s.use_tanh = true;
  return s;
}

// error[t] = ||eps_t|| for t = 0..T (eps_0 included); delta[t] = ||delta_t||
// for the T simulated steps.
struct ErrorTrace {
  std::vector<double> error;
  std::vector<double> delta;

  std::size_t steps() const { return delta.size(); }
};

// Perturbation injected into the perturbed trajectory at step t.
using DeltaSchedule = std::function<Vector(int t, int dim, Rng& rng)>;

inline DeltaSchedule zero_delta() {
  return [](int, int dim, Rng&) { return Vector::Zero(dim).eval(); };
}

// Fixed vector every step.
inline DeltaSchedule constant_delta(Vector direction) {
  return [d = std::move(direction)](int, int dim, Rng&) {
    if (d.size() != dim) throw std::invalid_argument("delta dimension mismatch");
    return d;
  };
}

// Fresh uniformly oriented vector of norm `magnitude` every step.
inline DeltaSchedule random_delta(double magnitude) {
  return [magnitude](int, int dim, Rng& rng) {
    Vector v = gaussian_vector(dim, rng);
    return (v * (magnitude / v.norm())).eval();
  };
}

// Evolves a true and a perturbed trajectory under the same inputs and noise:
//   h_{t+1} = g(h_t, u_t) + n_t,  h^_{t+1} = g(h^_t, u_t) + n_t + delta_t.
inline ErrorTrace simulate_error(const System& sys, int steps, const DeltaSchedule& delta, std::uint64_t seed,
                                 const Vector& initial_error) {
  if (steps < 1) throw std::invalid_argument("simulate_error: steps must be >= 1");
  const int d = sys.dim();
  if (initial_error.size() != d) throw std::invalid_argument("initial error dimension mismatch");
  Rng rng(seed);
  Rng delta_rng(derive_seed(seed, "delta"));
  Vector h = gaussian_vector(d, rng);
  Vector hp = h + initial_error;
  ErrorTrace tr;
  tr.error.push_back(initial_error.norm());
  for (int t = 0; t < steps; ++t) {
    const Vector u = gaussian_vector(static_cast<int>(sys.b.cols()), rng);
    const Vector noise = gaussian_vector(d, rng, sys.sigma);
    const Vector dt = delta(t, d, delta_rng);
    h = sys.step(h, u) + noise;
    hp = sys.step(hp, u) + noise + dt;
    const double e = (hp - h).norm();
    if (!std::isfinite(e) || !h.allFinite()) {
      throw nn::NumericError("simulate_error: trajectory diverged at step " + std::to_string(t + 1));
    }
    tr.error.push_back(e);
    tr.delta.push_back(dt.norm());
  }
  return tr;
}

inline ErrorTrace simulate_error(const System& sys, int steps, const DeltaSchedule& delta, std::uint64_t seed,
                                 double initial_norm = 1.0) {
  Rng rng(derive_seed(seed, "initial"));
  Vector e0 = gaussian_vector(sys.dim(), rng);
  e0 *= initial_norm / e0.norm();
  return simulate_error(sys, steps, delta, seed, e0);
}

// Steps t (1-based) with ||eps_t|| > L ||eps_{t-1}|| + ||delta_{t-1}|| + tol.
inline std::vector<int> check_bound(const ErrorTrace& trace, double lipschitz, double tol = 1e-10) {
  if (trace.error.size() != trace.delta.size() + 1) throw std::invalid_argument("malformed error trace");
  std::vector<int> bad;
  for (std::size_t t = 1; t < trace.error.size(); ++t) {
    if (trace.error[t] > lipschitz * trace.error[t - 1] + trace.delta[t - 1] + tol) bad.push_back(static_cast<int>(t));
  }
  return bad;
}

// Bound value L ||eps_{t-1}|| + ||delta_{t-1}|| for each step t = 1..T.
inline std::vector<double> bound_values(const ErrorTrace& trace, double lipschitz) {
  std::vector<double> b;
  for (std::size_t t = 1; t < trace.error.size(); ++t) b.push_back(lipschitz * trace.error[t - 1] + trace.delta[t - 1]);
  return b;
}

// ---- context-limited vs full-history conditioning --------------------------

// Blocks T_1..T_{K+1} in R^dim. A hidden regime r ~ N(0, I) is observed
// only through T_1 = r + noise; afterwards
//   T_{k+1} = A T_k + coupling * C r + noise.
// With coupling = 0 the chain is Markov: the previous block is sufficient.
struct ConditioningConfig {
  int dim = 4;
  int horizon = 8;  // predicted blocks K
  double transition_norm = 0.8;
  double coupling = 1.0;
  double noise = 0.1;
  int fit_trials = 4000;
  int trials = 1000;
  std::uint64_t seed = 11;

  void validate() const {
    if (dim < 1 || horizon < 1) throw std::invalid_argument("conditioning: dim and horizon must be positive");
    if (trials < 100) throw std::invalid_argument("conditioning: need at least 100 trials");
    if (fit_trials < 10 * dim * (horizon + 1)) throw std::invalid_argument("conditioning: too few fit trials");
    if (!(noise >= 0.0) || !(coupling >= 0.0)) throw std::invalid_argument("conditioning: negative scale");
  }
};

struct RatioEstimate {
  double mean_ff = 0.0;
  double mean_base = 0.0;
  double ci_ff[2] = {0, 0};
  double ci_base[2] = {0, 0};
  double ratio = 0.0;
  double ratio_ci[2] = {0, 0};
  int trials = 0;
};

namespace detail {

struct RegimeChain {
  Matrix a, c;
};

inline RegimeChain regime_chain(const ConditioningConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "chain"));
  RegimeChain ch;
  ch.a = cfg.transition_norm * random_orthogonal(cfg.dim, rng);
  ch.c = random_orthogonal(cfg.dim, rng);
  return ch;
}

// Returns blocks as columns: [dim x (K+1)].
inline Matrix sample_chain(const ConditioningConfig& cfg, const RegimeChain& ch, Rng& rng) {
  Matrix t(cfg.dim, cfg.horizon + 1);
  const Vector r = gaussian_vector(cfg.dim, rng);
  t.col(0) = r + gaussian_vector(cfg.dim, rng, cfg.noise);
  for (int k = 0; k < cfg.horizon; ++k) {
    t.col(k + 1) = ch.a * t.col(k) + cfg.coupling * (ch.c * r) + gaussian_vector(cfg.dim, rng, cfg.noise);
  }
  return t;
}

// Least-squares map from [features, 1] to target.
inline Matrix fit_affine(const Matrix& x, const Matrix& y) {
  Matrix xa(x.rows(), x.cols() + 1);
  xa << x, Vector::Ones(x.rows());
  Eigen::ColPivHouseholderQR<Matrix> qr(xa);
  if (qr.rank() < xa.cols()) throw std::invalid_argument("conditioning: degenerate system (rank-deficient features)");
  return qr.solve(y);
}

inline Vector apply_affine(const Matrix& w, const Vector& x) {
  Vector xa(x.size() + 1);
  xa << x, 1.0;
  return w.transpose() * xa;
}

inline void mean_ci(const std::vector<double>& v, double& mean, double ci[2]) {
  const double n = static_cast<double>(v.size());
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= (n - 1.0);
  const double half = 1.96 * std::sqrt(var / n);
  ci[0] = mean - half;
  ci[1] = mean + half;
}

}  // namespace detail

// Fits both one-block predictors by least squares on fresh chains, then rolls
// them out from the true first block. Per-trial error is ||T - T^|| over the
// K predicted blocks.
inline RatioEstimate compare_conditioning(const ConditioningConfig& cfg) {
  cfg.validate();
  const detail::RegimeChain ch = detail::regime_chain(cfg);
  const int d = cfg.dim, k_max = cfg.horizon;

  Rng fit_rng(derive_seed(cfg.seed, "fit"));
  std::vector<Matrix> fit(cfg.fit_trials);
  for (auto& t : fit) t = detail::sample_chain(cfg, ch, fit_rng);
  double variance = 0.0;
  for (const auto& t : fit) variance += t.squaredNorm();
  if (!(variance > 0.0)) throw std::invalid_argument("conditioning: degenerate system (zero variance)");

  // Full history: one map per step from T_1..T_k to T_{k+1}.
  std::vector<Matrix> base_w;
  for (int k = 1; k <= k_max; ++k) {
    Matrix x(cfg.fit_trials, k * d), y(cfg.fit_trials, d);
    for (int i = 0; i < cfg.fit_trials; ++i) {
      for (int j = 0; j < k; ++j) x.block(i, j * d, 1, d) = fit[i].col(j).transpose();
      y.row(i) = fit[i].col(k).transpose();
    }
    base_w.push_back(detail::fit_affine(x, y));
  }
  // Previous block only: one shared map over all consecutive pairs, as a
  // model trained on isolated short crops would learn.
  Matrix fx(cfg.fit_trials * k_max, d), fy(cfg.fit_trials * k_max, d);
  for (int i = 0; i < cfg.fit_trials; ++i) {
    for (int k = 0; k < k_max; ++k) {
      fx.row(i * k_max + k) = fit[i].col(k).transpose();
      fy.row(i * k_max + k) = fit[i].col(k + 1).transpose();
    }
  }
  const Matrix ff_w = detail::fit_affine(fx, fy);

  Rng eval_rng(derive_seed(cfg.seed, "eval"));
  std::vector<double> err_ff, err_base;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const Matrix t = detail::sample_chain(cfg, ch, eval_rng);
    Matrix gen_ff = t, gen_base = t;
    for (int k = 1; k <= k_max; ++k) {
      gen_ff.col(k) = detail::apply_affine(ff_w, gen_ff.col(k - 1));
      Vector hist(k * d);
      for (int j = 0; j < k; ++j) hist.segment(j * d, d) = gen_base.col(j);
      gen_base.col(k) = detail::apply_affine(base_w[k - 1], hist);
    }
    err_ff.push_back((t - gen_ff).rightCols(k_max).norm());
    err_base.push_back((t - gen_base).rightCols(k_max).norm());
  }

  RatioEstimate est;
  est.trials = cfg.trials;
  detail::mean_ci(err_ff, est.mean_ff, est.ci_ff);
  detail::mean_ci(err_base, est.mean_base, est.ci_base);
  est.ratio = est.mean_ff / est.mean_base;
  // Delta-method interval for a ratio of paired means.
  const double n = cfg.trials, mf = est.mean_ff, mb = est.mean_base;
  double vff = 0, vbb = 0, vfb = 0;
  for (int i = 0; i < cfg.trials; ++i) {
    vff += (err_ff[i] - mf) * (err_ff[i] - mf);
    vbb += (err_base[i] - mb) * (err_base[i] - mb);
    vfb += (err_ff[i] - mf) * (err_base[i] - mb);
  }
  vff /= n - 1;
  vbb /= n - 1;
  vfb /= n - 1;
  const double var_ratio = (vff / (mb * mb) - 2.0 * mf * vfb / (mb * mb * mb) + mf * mf * vbb / (mb * mb * mb * mb)) / n;
  const double half = 1.96 * std::sqrt(std::max(0.0, var_ratio));
  est.ratio_ci[0] = est.ratio - half;
  est.ratio_ci[1] = est.ratio + half;
  return est;
}

// ---- error growth versus Lipschitz constant --------------------------------

struct RecoEffectPoint {
  double lipschitz = 0.0;
  double mean_terminal_error = 0.0;
};

struct RecoEffect {
  std::vector<RecoEffectPoint> curve;
  double monotone_fraction = 0.0;  // share of seeds whose terminal error is non-decreasing in L
};

// Symmetric: A = L U diag(s) U^T with s_1 = 1, s_i in (0, 1], and a constant
// delta of fixed norm in a per-seed random direction; non-oscillatory, so
// every error component grows with L. Rotation: A = L Q with Q orthogonal and
// a fresh random delta direction each step; phases can cancel, so terminal
// error need not be monotone in L.
enum class EffectFamily { Symmetric, Rotation };

// eps_0 = 0; terminal error ||eps_K|| per grid value, same draws across the grid.
inline RecoEffect reco_effect(const std::vector<double>& grid, int dim, int horizon, int trials, double delta,
                              std::uint64_t seed, EffectFamily family = EffectFamily::Symmetric) {
  if (grid.size() < 3) throw std::invalid_argument("reco_effect: need at least 3 grid values");
  if (trials < 1 || horizon < 1 || dim < 1) throw std::invalid_argument("reco_effect: extents must be positive");
  RecoEffect out;
  std::vector<double> sum(grid.size(), 0.0);
  int monotone = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(trial));
    Rng rng(s);
    Matrix shape;
    DeltaSchedule schedule;
    if (family == EffectFamily::Symmetric) {
      const Matrix u = random_orthogonal(dim, rng);
      Vector sv(dim);
      for (int i = 0; i < dim; ++i) sv(i) = i == 0 ? 1.0 : uniform(rng, 0.1, 1.0);
      shape = u * sv.asDiagonal() * u.transpose();
      Vector dir = gaussian_vector(dim, rng);
      schedule = constant_delta(dir * (delta / dir.norm()));
    } else {
      shape = random_orthogonal(dim, rng);
      schedule = random_delta(delta);
    }
    std::vector<double> terminal;
    for (double l : grid) {
      const ErrorTrace tr = simulate_error(linear_system(l * shape), horizon, schedule, s, Vector::Zero(dim));
      terminal.push_back(tr.error.back());
    }
    bool ok = true;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      sum[i] += terminal[i];
      if (i > 0 && terminal[i] < terminal[i - 1]) ok = false;
    }
    monotone += ok;
  }
  for (std::size_t i = 0; i < grid.size(); ++i) out.curve.push_back({grid[i], sum[i] / trials});
  out.monotone_fraction = static_cast<double>(monotone) / trials;
  return out;
}

}  // namespace arlab::cascade
