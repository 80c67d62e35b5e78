#pragma once

// Gaussian-process regression with a Siamese-parameterised kernel
// k(a, b) = exp(-D(a, b) / 2): Gram assembly, negative log marginal
// likelihood and its gradient, posterior prediction, and the Nystrom
// low-rank path.

#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "i2i/errors.hpp"
#include "i2i/siamese.hpp"

namespace i2i {

/// Step halvings tried when a proposed point cannot be factorised.
inline constexpr int kMaxRetreats = 20;

inline constexpr double kJitterStart = 1e-10;
inline constexpr double kJitterMax = 1e-4;

inline Eigen::MatrixXd kernel_from_distance(const Eigen::MatrixXd &D) {
  return (-0.5 * D.array()).exp().matrix();
}

inline double kernel(const SiameseEnsembleParams &metric, const ItemCatalog &catalog,
                     std::size_t a, std::size_t b) {
  return std::exp(-0.5 * ensemble_distance(metric, catalog, a, b));
}

inline Eigen::MatrixXd gram(const SiameseEnsembleParams &metric, const ItemCatalog &catalog,
                            std::span<const std::size_t> items) {
  if (items.empty())
    throw DataError("gram needs at least one item");
  return kernel_from_distance(distance_matrix(metric, embed(metric, catalog, items)));
}

/// Cholesky factor of `A + jitter * I`, escalating jitter from 0 through
/// 1e-10 ... 1e-4 until the factorisation succeeds.
struct JitteredCholesky {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
};

inline JitteredCholesky cholesky_with_jitter(const Eigen::MatrixXd &A) {
  std::vector<double> ladder{0.0};
  for (double j = kJitterStart; j <= kJitterMax * (1 + 1e-9); j *= 10.0)
    ladder.push_back(j);
  const auto n = A.rows();
  for (double j : ladder) {
    JitteredCholesky out;
    out.jitter = j;
    out.llt.compute(A + j * Eigen::MatrixXd::Identity(n, n));
    if (out.llt.info() == Eigen::Success && out.llt.matrixLLT().diagonal().allFinite() &&
        (out.llt.matrixLLT().diagonal().array() > 0.0).all())
      return out;
  }
  throw NumericalError("Cholesky failed for every jitter in the ladder", ladder);
}

/// Everything needed to evaluate the GP objective on a training set.
struct GPState {
  std::shared_ptr<const ItemCatalog> catalog;
  SiameseEnsembleParams metric;
  double log_noise = std::log(0.1);
  std::vector<std::size_t> train_items;
  Eigen::VectorXd r;

  // Cached by factorize().
  Eigen::MatrixXd K;
  std::optional<Eigen::LLT<Eigen::MatrixXd>> chol; ///< of K + (noise + jitter) I
  Eigen::VectorXd alpha;                           ///< (K + (noise + jitter) I)^{-1} r
  double jitter = 0.0;

  double noise() const { return std::exp(log_noise); }
  double effective_noise() const { return noise() + jitter; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(train_items.size()); }
};

inline void factorize(GPState &s) {
  if (!s.catalog)
    throw DataError("GP state has no catalog");
  if (s.r.size() != s.size())
    throw DimensionError("target vector length does not match the training set");
  if (!std::isfinite(s.log_noise))
    throw DomainError("noise variance must be positive and finite");
  s.K = gram(s.metric, *s.catalog, s.train_items);
  Eigen::MatrixXd A = s.K;
  A.diagonal().array() += s.noise();
  auto jc = cholesky_with_jitter(A);
  s.jitter = jc.jitter;
  s.chol = std::move(jc.llt);
  s.alpha = s.chol->solve(s.r);
}

inline GPState make_gp_state(std::shared_ptr<const ItemCatalog> catalog,
                             SiameseEnsembleParams metric, double log_noise,
                             std::vector<std::size_t> train_items, Eigen::VectorXd r,
                             bool factor = true) {
  GPState s;
  s.catalog = std::move(catalog);
  s.metric = std::move(metric);
  s.log_noise = log_noise;
  s.train_items = std::move(train_items);
  s.r = std::move(r);
  if (s.train_items.empty())
    throw DataError("GP needs at least one training item");
  if (factor)
    factorize(s);
  return s;
}

namespace detail {
inline const GPState &factored(const GPState &s, std::optional<GPState> &scratch) {
  if (s.chol)
    return s;
  scratch = s;
  factorize(*scratch);
  return *scratch;
}
} // namespace detail

/// 0.5 log|K + noise I| + 0.5 r^T (K + noise I)^{-1} r from the cached factor.
inline double nll(const GPState &state) {
  std::optional<GPState> scratch;
  const auto &s = detail::factored(state, scratch);
  const double logdet = 2.0 * s.chol->matrixLLT().diagonal().array().log().sum();
  return 0.5 * logdet + 0.5 * s.r.dot(s.alpha);
}

struct GPGradient {
  SiameseEnsembleParams metric;
  double log_noise = 0.0;
};

/// d nll / d theta = sum_ab W_ab dK_ab/dtheta with W = 0.5 (A^{-1} - alpha alpha^T),
/// dK_ab/dtheta = -0.5 k_ab dD_ab/dtheta.
inline GPGradient nll_grad(const GPState &state) {
  std::optional<GPState> scratch;
  const auto &s = detail::factored(state, scratch);
  const auto n = s.size();
  const Eigen::MatrixXd Ainv = s.chol->solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd W = 0.5 * (Ainv - s.alpha * s.alpha.transpose());
  auto e = embed(s.metric, *s.catalog, s.train_items);
  DistanceBackprop bp(s.metric, e);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i <= j; ++i) {
      const double mult = (i == j) ? 1.0 : 2.0;
      bp.add(i, j, mult * W(i, j) * (-0.5 * s.K(i, j)));
    }
  GPGradient g;
  g.metric = bp.finish();
  g.log_noise = 0.5 * s.noise() * (Ainv.trace() - s.alpha.squaredNorm());
  return g;
}

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
  bool clamped = false; ///< variance was slightly negative and reset to 0
};

inline Prediction predict(const GPState &state, std::size_t x_star) {
  std::optional<GPState> scratch;
  const auto &s = detail::factored(state, scratch);
  auto train = embed(s.metric, *s.catalog, s.train_items);
  const std::size_t star[1] = {x_star};
  auto es = embed(s.metric, *s.catalog, star);
  const Eigen::VectorXd k_star = kernel_from_distance(cross_distance_matrix(s.metric, train, es)).col(0);
  const double k_ss = std::exp(-0.5 * distance_matrix(s.metric, es)(0, 0));
  Prediction p;
  p.mean = k_star.dot(s.alpha);
  const Eigen::VectorXd v = s.chol->matrixL().solve(k_star);
  p.variance = k_ss - v.squaredNorm();
  if (p.variance < 0.0) {
    if (p.variance < -1e-10)
      throw NumericalError("predictive variance " + std::to_string(p.variance) +
                           " is negative beyond tolerance");
    p.variance = 0.0;
    p.clamped = true;
  }
  return p;
}

/// r_hat = K (K + noise I)^{-1} r on the training items.
inline Eigen::VectorXd fitted_values(const GPState &state) {
  std::optional<GPState> scratch;
  const auto &s = detail::factored(state, scratch);
  return s.K * s.alpha;
}

// ---------------------------------------------------------------------------
// Nystrom: K replaced by Q = K_nm K_mm^{-1} K_mn, evaluated through the
// m x m system M = I + V V^T / noise with V = L_m^{-1} K_mn.

struct InducingSet {
  std::vector<std::size_t> items;
  Eigen::MatrixXd K_pp;
};

inline InducingSet make_inducing_set(const GPState &s, std::vector<std::size_t> items) {
  if (items.empty())
    throw DataError("inducing set must be nonempty");
  if (items.size() > s.train_items.size())
    throw DataError("inducing set larger than the training set");
  InducingSet out;
  out.K_pp = gram(s.metric, *s.catalog, items);
  out.items = std::move(items);
  return out;
}

/// m training items drawn uniformly without replacement.
inline InducingSet choose_inducing(const GPState &s, std::size_t m, std::uint64_t seed) {
  if (m == 0 || m > s.train_items.size())
    throw DataError("inducing count must lie in [1, n]");
  std::vector<std::size_t> pool = s.train_items;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < m; ++k) {
    std::uniform_int_distribution<std::size_t> u(k, pool.size() - 1);
    std::swap(pool[k], pool[u(rng)]);
  }
  pool.resize(m);
  return make_inducing_set(s, std::move(pool));
}

namespace detail {

struct NystromParts {
  Embedded train, inducing;
  Eigen::MatrixXd K_nm, K_mm;
  JitteredCholesky Lm;
  Eigen::MatrixXd V; ///< m x n
  Eigen::LLT<Eigen::MatrixXd> LM;
  double noise;
};

inline NystromParts nystrom_parts(const GPState &s, const InducingSet &ind) {
  NystromParts p;
  p.train = embed(s.metric, *s.catalog, s.train_items);
  p.inducing = embed(s.metric, *s.catalog, ind.items);
  p.K_nm = kernel_from_distance(cross_distance_matrix(s.metric, p.train, p.inducing));
  p.K_mm = kernel_from_distance(distance_matrix(s.metric, p.inducing));
  p.Lm = cholesky_with_jitter(p.K_mm);
  p.V = p.Lm.llt.matrixL().solve(p.K_nm.transpose());
  p.noise = s.noise();
  const auto m = p.K_mm.rows();
  Eigen::MatrixXd M = Eigen::MatrixXd::Identity(m, m);
  M.noalias() += (p.V * p.V.transpose()) / p.noise;
  p.LM.compute(M);
  if (p.LM.info() != Eigen::Success)
    throw NumericalError("Nystrom inner system is not positive definite");
  return p;
}

} // namespace detail

inline double nystrom_nll(const GPState &s, const InducingSet &ind) {
  auto p = detail::nystrom_parts(s, ind);
  const auto n = static_cast<double>(s.size());
  const double logdet = n * std::log(p.noise) + 2.0 * p.LM.matrixLLT().diagonal().array().log().sum();
  const Eigen::VectorXd beta = p.LM.matrixL().solve(p.V * s.r);
  const double quad = s.r.squaredNorm() / p.noise - beta.squaredNorm() / (p.noise * p.noise);
  return 0.5 * logdet + 0.5 * quad;
}

/// dl/dK_nm = 2 W C^T and dl/dK_mm = -C W C^T with C = K_mm^{-1} K_mn and
/// W = 0.5 (A^{-1} - alpha alpha^T); A^{-1} is applied through Woodbury.
inline GPGradient nystrom_grad(const GPState &s, const InducingSet &ind) {
  auto p = detail::nystrom_parts(s, ind);
  const double s2 = p.noise;
  const auto n = s.size();
  const auto m = p.K_mm.rows();
  auto apply_Ainv = [&](const Eigen::MatrixXd &X) -> Eigen::MatrixXd {
    return X / s2 - p.V.transpose() * p.LM.solve(p.V * X) / (s2 * s2);
  };
  const Eigen::VectorXd alpha = apply_Ainv(s.r);
  const Eigen::MatrixXd C = p.Lm.llt.matrixU().solve(p.V); // m x n
  const Eigen::MatrixXd Ct = C.transpose();
  const Eigen::MatrixXd WCt = 0.5 * (apply_Ainv(Ct) - alpha * (C * alpha).transpose()); // n x m
  const Eigen::MatrixXd G_nm = 2.0 * WCt;
  const Eigen::MatrixXd G_mm = -C * WCt;

  // One embedding over train followed by inducing rows.
  Embedded all = p.train;
  all.items.insert(all.items.end(), p.inducing.items.begin(), p.inducing.items.end());
  for (std::size_t c = 0; c < all.z.size(); ++c) {
    auto stack = [&](const Eigen::MatrixXd &a, const Eigen::MatrixXd &b) {
      Eigen::MatrixXd out(a.rows() + b.rows(), a.cols());
      out << a, b;
      return out;
    };
    all.z[c] = stack(p.train.z[c], p.inducing.z[c]);
    all.sig[c] = stack(p.train.sig[c], p.inducing.sig[c]);
    all.relu[c] = stack(p.train.relu[c], p.inducing.relu[c]);
    all.input[c] = stack(p.train.input[c], p.inducing.input[c]);
  }
  DistanceBackprop bp(s.metric, all);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      bp.add(i, n + j, G_nm(i, j) * (-0.5 * p.K_nm(i, j)));
  for (Eigen::Index l = 0; l < m; ++l)
    for (Eigen::Index j = 0; j <= l; ++j) {
      const double coef = (j == l) ? G_mm(j, j) : G_mm(j, l) + G_mm(l, j);
      bp.add(n + j, n + l, coef * (-0.5 * p.K_mm(j, l)));
    }
  GPGradient g;
  g.metric = bp.finish();
  const Eigen::MatrixXd MinvVVt = p.LM.solve(p.V * p.V.transpose());
  const double trace_Ainv = static_cast<double>(n) / s2 - MinvVVt.trace() / (s2 * s2);
  g.log_noise = 0.5 * s2 * (trace_Ainv - alpha.squaredNorm());
  return g;
}

} // namespace i2i
