#pragma once

// Synthetic oracle worlds and executable versions of the approximation
// results: the kernel-ratio to metric-gap bound, the tail bound and sample
// complexity, the Gaussian quadratic-form MGF, and the convergence
// experiment that fits the GP on oracle draws.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "i2i/errors.hpp"
#include "i2i/gp.hpp"
#include "i2i/ssl.hpp"

namespace i2i {

struct OracleWorld {
  Eigen::MatrixXd points; ///< n x dim
  double scale = 4.0;     ///< D*(a, b) = scale * |a - b|^2
  Eigen::MatrixXd D_star, K_star;
  double lambda_max = 0.0;
  double d_const = 0.0;     ///< lambda_max / min k*
  double alpha_const = 0.0; ///< filled in after a fit
  double sigma2 = 0.01;

  Eigen::Index size() const { return points.rows(); }
  double true_distance(const Eigen::VectorXd &a, const Eigen::VectorXd &b) const {
    return scale * (a - b).squaredNorm();
  }
  double true_kernel(const Eigen::VectorXd &a, const Eigen::VectorXd &b) const {
    return std::exp(-0.5 * true_distance(a, b));
  }
};

inline OracleWorld make_oracle_from_points(Eigen::MatrixXd points, double sigma2, double scale = 4.0) {
  if (points.rows() < 2)
    throw DomainError("oracle world needs at least 2 points");
  if (!(sigma2 > 0.0))
    throw DomainError("noise variance must be positive");
  OracleWorld w;
  w.points = std::move(points);
  w.scale = scale;
  w.sigma2 = sigma2;
  const auto n = w.points.rows();
  w.D_star.resize(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i <= j; ++i) {
      const double d = scale * (w.points.row(i) - w.points.row(j)).squaredNorm();
      w.D_star(i, j) = d;
      w.D_star(j, i) = d;
    }
  w.K_star = kernel_from_distance(w.D_star);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w.K_star, Eigen::EigenvaluesOnly);
  w.lambda_max = es.eigenvalues().maxCoeff();
  w.d_const = w.lambda_max / w.K_star.minCoeff();
  return w;
}

/// n points uniform in [0, 1]^dim.
inline OracleWorld make_oracle(Eigen::Index n, Eigen::Index dim, std::uint64_t seed, double sigma2,
                               double scale = 4.0) {
  if (n < 2)
    throw DomainError("oracle world needs at least 2 points");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd pts(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < dim; ++k)
      pts(i, k) = u(rng);
  return make_oracle_from_points(std::move(pts), sigma2, scale);
}

namespace detail {
/// Symmetric square root V sqrt(max(L, 0)) of a PSD matrix.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd &K) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  if (es.info() != Eigen::Success)
    throw NumericalError("eigendecomposition failed");
  if (es.eigenvalues().minCoeff() < -1e-8 * std::max(1.0, es.eigenvalues().maxCoeff()))
    throw NumericalError("matrix is not positive semidefinite");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}
} // namespace detail

/// `draws` samples of r ~ N(0, K*), one per column.
inline Eigen::MatrixXd sample_surrogates(const Eigen::MatrixXd &K_star, Eigen::Index draws,
                                         std::uint64_t seed) {
  const Eigen::MatrixXd S = detail::psd_sqrt(K_star);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd Z(K_star.rows(), draws);
  for (Eigen::Index j = 0; j < draws; ++j)
    for (Eigen::Index i = 0; i < K_star.rows(); ++i)
      Z(i, j) = g(rng);
  return S * Z;
}

inline Eigen::VectorXd sample_surrogate(const OracleWorld &world, std::uint64_t seed) {
  return sample_surrogates(world.K_star, 1, seed).col(0);
}

/// 2 log(1 / (1 - eps)) for eps in (0, 1).
inline double metric_gap_bound(double eps) {
  if (!(eps > 0.0 && eps < 1.0))
    throw DomainError("eps must lie in (0, 1)");
  return -2.0 * std::log1p(-eps);
}

using PointDistance = std::function<double(const Eigen::VectorXd &, const Eigen::VectorXd &)>;
using PointPair = std::pair<Eigen::VectorXd, Eigen::VectorXd>;

struct LemmaCheck {
  double eps_hat = 0.0;        ///< max |k - k*| / k* over the pairs
  double max_metric_gap = 0.0; ///< max |D - D*|
  double sup_kernel_gap = 0.0; ///< max |k - k*|
  double bound = std::numeric_limits<double>::quiet_NaN();
  std::optional<bool> holds; ///< unset when eps_hat >= 1
};

/// Compares a learned distance (kernel exp(-D/2)) against the world's truth
/// on the given pairs.
inline LemmaCheck check_lemma(const PointDistance &learned, const OracleWorld &world,
                              const std::vector<PointPair> &pairs) {
  LemmaCheck c;
  for (const auto &[a, b] : pairs) {
    const double d = learned(a, b), ds = world.true_distance(a, b);
    const double k = std::exp(-0.5 * d), ks = std::exp(-0.5 * ds);
    c.eps_hat = std::max(c.eps_hat, std::abs(k - ks) / ks);
    c.max_metric_gap = std::max(c.max_metric_gap, std::abs(d - ds));
    c.sup_kernel_gap = std::max(c.sup_kernel_gap, std::abs(k - ks));
  }
  if (c.eps_hat < 1.0) {
    c.bound = c.eps_hat == 0.0 ? 0.0 : metric_gap_bound(c.eps_hat);
    c.holds = c.max_metric_gap <= c.bound + 1e-12 * (1.0 + c.bound);
  }
  return c;
}

/// All unordered pairs of world points plus `heldout` pairs of fresh
/// uniform points.
inline std::vector<PointPair> world_pairs(const OracleWorld &world, std::size_t heldout,
                                          std::uint64_t seed) {
  std::vector<PointPair> pairs;
  const auto n = world.size();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      pairs.emplace_back(world.points.row(i).transpose(), world.points.row(j).transpose());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto dim = world.points.cols();
  for (std::size_t k = 0; k < heldout; ++k) {
    Eigen::VectorXd a(dim), b(dim);
    for (Eigen::Index t = 0; t < dim; ++t)
      a[t] = u(rng);
    for (Eigen::Index t = 0; t < dim; ++t)
      b[t] = u(rng);
    pairs.emplace_back(std::move(a), std::move(b));
  }
  return pairs;
}

struct TheoryConstants {
  double sigma2 = 0.0;
  double alpha = 0.0;
  double lambda_max = 0.0;
  double d = 0.0;
};

inline TheoryConstants constants_of(const OracleWorld &w) {
  return {w.sigma2, w.alpha_const, w.lambda_max, w.d_const};
}

/// g(tau) = log(tau) + 1/tau - 1.
inline double g_tau(double tau) {
  if (!(tau > 0.0))
    throw DomainError("g(tau) needs tau > 0");
  return std::log(tau) + 1.0 / tau - 1.0;
}

/// (sigma^4 / alpha) (1 - eps lambda_max / d) lambda_max.
inline double tail_argument(double eps, const TheoryConstants &c) {
  if (!(c.alpha > 0.0) || !(c.d > 0.0) || !(c.sigma2 > 0.0) || !(c.lambda_max > 0.0))
    throw DomainError("tail bound needs sigma2, alpha, lambda_max, d > 0");
  const double c_eps = eps * c.lambda_max / c.d;
  if (!(c_eps < 1.0))
    throw DomainError("c_eps = eps * lambda_max / d must be < 1");
  const double tau = c.sigma2 * c.sigma2 / c.alpha * (1.0 - c_eps) * c.lambda_max;
  if (!(tau > 0.0))
    throw DomainError("tail argument must be positive");
  return tau;
}

inline double tail_from_g(double n, double g) { return std::exp(-0.5 * n * g); }

/// exp(-n g(tau) / 2), the probability bound on a kernel ratio error >= eps.
inline double theorem1_tail(double n, double eps, const TheoryConstants &c) {
  return tail_from_g(n, g_tau(tail_argument(eps, c)));
}

/// Natural log of the tail; stays finite where the tail itself underflows.
inline double theorem1_log_tail(double n, double eps, const TheoryConstants &c) {
  return -0.5 * n * g_tau(tail_argument(eps, c));
}

inline double theorem1_tail(double n, double eps, const OracleWorld &w) {
  return theorem1_tail(n, eps, constants_of(w));
}

/// Smallest integer n >= (2 / g) log(1 / delta).
inline long sample_complexity_from_g(double g, double delta) {
  if (!(g > 0.0))
    throw DomainError("g_eps must be positive");
  if (!(delta > 0.0 && delta < 1.0))
    throw DomainError("delta must lie in (0, 1)");
  return static_cast<long>(std::ceil(2.0 / g * std::log(1.0 / delta)));
}

inline long theorem2_sample_complexity(double eps, double delta, const TheoryConstants &c) {
  return sample_complexity_from_g(g_tau(tail_argument(eps, c)), delta);
}

inline long theorem2_sample_complexity(double eps, double delta, const OracleWorld &w) {
  return theorem2_sample_complexity(eps, delta, constants_of(w));
}

/// Tightest alpha for which the residual-coupled kernel error condition
/// holds: (1 - sup|k - k*|) (r - r_hat)^T (K + sigma^2 I)^2 / n (r - r_hat).
inline double alpha_a_posteriori(double sup_kernel_gap, const Eigen::VectorXd &r,
                                 const Eigen::VectorXd &r_hat, const Eigen::MatrixXd &K,
                                 double sigma2) {
  Eigen::MatrixXd B = K;
  B.diagonal().array() += sigma2;
  const Eigen::VectorXd e = B * (r - r_hat);
  return (1.0 - sup_kernel_gap) * e.squaredNorm() / static_cast<double>(r.size());
}

struct MgfCheck {
  double monte_carlo = 0.0;
  double closed_form = 0.0;
  double rel_err = 0.0;
};

/// E[exp(lambda r^T A r)] for r ~ N(0, K*) by sampling, against
/// det(I - 2 lambda A K*)^{-1/2}.
inline MgfCheck mgf_identity_check(const Eigen::MatrixXd &K_star, double lambda, const Eigen::MatrixXd &A,
                                   Eigen::Index draws, std::uint64_t seed) {
  const Eigen::MatrixXd S = detail::psd_sqrt(K_star);
  const Eigen::MatrixXd M = S * (0.5 * (A + A.transpose())) * S;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd mu = es.eigenvalues();
  if (((1.0 - 2.0 * lambda * mu.array()) <= 0.0).any())
    throw DomainError("I - 2 lambda A K* is not positive definite; the MGF is infinite");
  MgfCheck out;
  out.closed_form = std::exp(-0.5 * (1.0 - 2.0 * lambda * mu.array()).log().sum());
  const Eigen::MatrixXd R = sample_surrogates(K_star, draws, seed);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < draws; ++j)
    acc += std::exp(lambda * R.col(j).dot(A * R.col(j)));
  out.monte_carlo = acc / static_cast<double>(draws);
  out.rel_err = std::abs(out.monte_carlo - out.closed_form) / out.closed_form;
  return out;
}

inline MgfCheck mgf_identity_check(const OracleWorld &world, double lambda, const Eigen::MatrixXd &A,
                                   Eigen::Index draws, std::uint64_t seed) {
  return mgf_identity_check(world.K_star, lambda, A, draws, seed);
}

// ---------------------------------------------------------------------------
// Convergence experiment

struct ConvergenceConfig {
  std::vector<Eigen::Index> n_grid{16, 32, 64, 128, 256};
  int trials = 5;
  std::uint64_t seed = 0;
  Eigen::Index dim = 2;
  double scale = 4.0;
  double sigma2 = 0.01;
  Eigen::Index hidden = 8;
  std::size_t heldout_factor = 10;
  int threads = 1; ///< trials run on up to this many workers
  TrainConfig train = [] {
    TrainConfig t;
    t.steps = 1000;
    t.learning_rate = 0.1;
    return t;
  }();
};

struct FittedMetric {
  PointDistance distance;
  Eigen::VectorXd r_hat; ///< fitted values on the world points
  Eigen::MatrixXd K;     ///< learned Gram on the world points
  double sigma2 = 0.0;   ///< fitted noise variance
};

/// Fits a metric on (world, r); the default runs the SSL trainer.
using MetricFitter = std::function<FittedMetric(const OracleWorld &, const Eigen::VectorXd &, std::uint64_t)>;

struct TrialResult {
  Eigen::Index n = 0;
  int trial = 0;
  double sup_gap = std::numeric_limits<double>::quiet_NaN();
  double eps_hat = std::numeric_limits<double>::quiet_NaN();
  double lemma_bound = std::numeric_limits<double>::quiet_NaN();
  double theorem1_tail = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  std::optional<bool> lemma_holds;
  bool failed = false;
};

struct TheoryReport {
  std::vector<TrialResult> trials;
  std::vector<Eigen::Index> n_grid;
  std::vector<double> mean_sup_gap; ///< per n, over non-failed trials
  std::vector<double> mean_lemma_bound;
  std::size_t failed = 0;
};

/// Single-channel model with learned scales over the raw point coordinates,
/// fitted by SSL with the noise initialised at the world's sigma2.
inline MetricFitter ssl_fitter(const ConvergenceConfig &cfg) {
  return [cfg](const OracleWorld &world, const Eigen::VectorXd &r, std::uint64_t seed) {
    const auto n = world.size();
    std::vector<std::string> ids;
    std::unordered_map<std::string, Eigen::VectorXd> vals;
    for (Eigen::Index i = 0; i < n; ++i) {
      ids.push_back("p" + std::to_string(i));
      vals.emplace(ids.back(), world.points.row(i).transpose());
    }
    auto cat = make_catalog(ids);
    add_channel(cat, "coords", ChannelKind::numeric, world.points.cols(), vals);
    auto shared = std::make_shared<const ItemCatalog>(std::move(cat));
    ModelConfig mc;
    mc.hidden = cfg.hidden;
    mc.ensemble = false;
    mc.lambda_mode = LambdaMode::learned;
    const auto dims = channel_dims(*shared);
    auto init = init_params(dims, shared->size(), mc, seed);
    std::vector<std::size_t> items(static_cast<std::size_t>(n));
    std::iota(items.begin(), items.end(), 0);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    auto res = fit_ssl(shared, items, r, init, std::log(world.sigma2), tc);
    FittedMetric f;
    auto channel = std::make_shared<ChannelMetricParams>(res.state.metric.channels[0]);
    f.distance = [channel](const Eigen::VectorXd &a, const Eigen::VectorXd &b) {
      return channel_distance(*channel, a, b);
    };
    f.r_hat = fitted_values(res.state);
    f.K = res.state.K;
    f.sigma2 = res.state.noise();
    return f;
  };
}

inline TrialResult run_trial(const OracleWorld &world_in, int trial, std::uint64_t trial_seed,
                             std::size_t heldout, const MetricFitter &fitter) {
  OracleWorld world = world_in;
  TrialResult t;
  t.n = world.size();
  t.trial = trial;
  const Eigen::VectorXd r = sample_surrogate(world, trial_seed ^ 0x5u);
  FittedMetric fit;
  try {
    fit = fitter(world, r, trial_seed);
  } catch (const Error &) {
    t.failed = true;
    return t;
  }
  const auto pairs = world_pairs(world, heldout, trial_seed ^ 0xAu);
  const auto check = check_lemma(fit.distance, world, pairs);
  t.sup_gap = check.max_metric_gap;
  t.eps_hat = check.eps_hat;
  t.lemma_bound = check.bound;
  t.lemma_holds = check.holds;
  if (!std::isfinite(t.sup_gap)) {
    t.failed = true;
    return t;
  }
  if (fit.K.size() > 0) {
    t.alpha = alpha_a_posteriori(check.sup_kernel_gap, r, fit.r_hat, fit.K, fit.sigma2);
    TheoryConstants c{fit.sigma2, t.alpha, world.lambda_max, world.d_const};
    try {
      t.theorem1_tail = theorem1_tail(static_cast<double>(t.n), check.eps_hat, c);
    } catch (const DomainError &) {
    }
  }
  return t;
}

/// Fits on oracle draws for every n in the grid and measures the sup metric
/// gap on all world pairs plus heldout_factor * n fresh pairs.
inline TheoryReport convergence_experiment(const ConvergenceConfig &cfg,
                                           const MetricFitter &fitter_in = nullptr) {
  if (cfg.trials < 1)
    throw ConfigError("trials must be >= 1");
  for (std::size_t k = 1; k < cfg.n_grid.size(); ++k)
    if (cfg.n_grid[k] <= cfg.n_grid[k - 1])
      throw ConfigError("n_grid must be increasing");
  if (cfg.threads < 1)
    throw ConfigError("threads must be >= 1");
  const MetricFitter fitter = fitter_in ? fitter_in : ssl_fitter(cfg);
  const auto per_n = static_cast<std::size_t>(cfg.trials);
  std::vector<TrialResult> results(cfg.n_grid.size() * per_n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t job = next++; job < results.size(); job = next++) {
      const auto n = cfg.n_grid[job / per_n];
      const int trial = static_cast<int>(job % per_n);
      const std::uint64_t ts = (cfg.seed ^ static_cast<std::uint64_t>(trial)) * 1000003ULL +
                               static_cast<std::uint64_t>(n);
      auto world = make_oracle(n, cfg.dim, ts, cfg.sigma2, cfg.scale);
      results[job] = run_trial(world, trial, ts, cfg.heldout_factor * static_cast<std::size_t>(n), fitter);
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), results.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < workers; ++k)
      pool.emplace_back(work);
    for (auto &t : pool)
      t.join();
  }

  TheoryReport rep;
  rep.n_grid = cfg.n_grid;
  for (std::size_t g = 0; g < cfg.n_grid.size(); ++g) {
    double gap_sum = 0.0, bound_sum = 0.0;
    int ok = 0, bound_ok = 0;
    for (std::size_t trial = 0; trial < per_n; ++trial) {
      const auto &t = results[g * per_n + trial];
      if (t.failed) {
        ++rep.failed;
      } else {
        gap_sum += t.sup_gap;
        ++ok;
        if (std::isfinite(t.lemma_bound)) {
          bound_sum += t.lemma_bound;
          ++bound_ok;
        }
      }
      rep.trials.push_back(t);
    }
    rep.mean_sup_gap.push_back(ok ? gap_sum / ok : std::numeric_limits<double>::quiet_NaN());
    rep.mean_lemma_bound.push_back(bound_ok ? bound_sum / bound_ok
                                            : std::numeric_limits<double>::quiet_NaN());
  }
  return rep;
}

inline void write_theory_csv(const TheoryReport &rep, const std::string &path) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write theory report to " + path);
  out.precision(17);
  auto num = [&](double v) {
    if (std::isnan(v))
      out << "nan";
    else
      out << v;
  };
  out << "n,trial,sup_gap,eps_hat,lemma_bound,theorem1_tail\n";
  for (const auto &t : rep.trials) {
    out << t.n << ',' << t.trial << ',';
    num(t.sup_gap);
    out << ',';
    num(t.eps_hat);
    out << ',';
    num(t.lemma_bound);
    out << ',';
    num(t.theorem1_tail);
    out << '\n';
  }
}

} // namespace i2i
