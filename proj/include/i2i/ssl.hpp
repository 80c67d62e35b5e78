#pragma once

// Fits the Siamese-kernel GP by minimising its negative log marginal
// likelihood over metric parameters and log noise.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "i2i/errors.hpp"
#include "i2i/gp.hpp"
#include "i2i/optim.hpp"
#include "i2i/siamese.hpp"

namespace i2i {

/// Training sets above this size use the Nystrom objective.
inline constexpr std::size_t kExactLimit = 4096;

struct TrainConfig {
  int steps = 500;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adaptive_moment;
  std::optional<std::size_t> batch_items; ///< unset: full batch
  std::uint64_t seed = 0;
  int eval_every = 50;
  std::vector<std::string> frozen; ///< selectors, see freeze_mask()
  std::size_t inducing = 256;      ///< Nystrom size when n > kExactLimit
};

struct TraceRow {
  int step;
  double nll;
  double grad_norm;
  double sigma2;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
};

inline void write_trace_csv(const TrainTrace &trace, const std::string &path) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write trace to " + path);
  out.precision(17);
  out << "step,nll,grad_norm,sigma2\n";
  for (const auto &r : trace.rows)
    out << r.step << ',' << r.nll << ',' << r.grad_norm << ',' << r.sigma2 << '\n';
}

/// Raised when the objective turns non-finite or cannot be factorised;
/// carries the trace recorded so far.
struct TrainingAborted : DivergenceError {
  TrainingAborted(const std::string &what, long step_, TrainTrace t)
      : DivergenceError(what, step_), trace(std::move(t)) {}
  TrainTrace trace;
};

/// Coordinate mask over [metric coordinates..., log_noise]. A zero marks a
/// coordinate that must not move. Selectors: psi, w, towers, lambda,
/// id_embed, agg_h, agg_b, channel<m>, noise.
inline std::vector<char> freeze_mask(const SiameseEnsembleParams &p,
                                     const std::vector<std::string> &frozen) {
  auto base = trainable_mask(p);
  base.push_back(1);
  const auto groups = param_groups(p);
  auto zero = [&](const ParamGroup &g) {
    std::fill(base.begin() + g.offset, base.begin() + g.offset + g.size, 0);
  };
  for (const auto &sel : frozen) {
    bool known = false;
    if (sel == "noise") {
      base.back() = 0;
      continue;
    }
    for (const auto &g : groups) {
      const bool is_tower = g.name.ends_with(".tower");
      const bool is_lambda = g.name.ends_with(".lambda");
      const bool is_channel_group = is_tower || is_lambda;
      bool hit = false;
      if (sel == "psi")
        hit = is_channel_group || g.name == "id_embed";
      else if (sel == "w")
        hit = g.name == "agg_h" || g.name == "agg_b";
      else if (sel == "towers")
        hit = is_tower;
      else if (sel == "lambda")
        hit = is_lambda;
      else if (sel == "id_embed" || sel == "agg_h" || sel == "agg_b")
        hit = g.name == sel;
      else if (sel.starts_with("channel"))
        hit = is_channel_group && g.name.substr(0, g.name.find('.')) == sel;
      if (sel == "psi" || sel == "w" || sel == "towers" || sel == "lambda" || sel == "id_embed" ||
          sel == "agg_h" || sel == "agg_b" || hit)
        known = true;
      if (hit)
        zero(g);
    }
    if (!known)
      throw ConfigError("unknown parameter group '" + sel + "'");
  }
  return base;
}

namespace detail {

struct Objective {
  double value;
  Eigen::VectorXd coord_grad; ///< includes log_noise as the last entry
};

inline Objective evaluate_objective(const std::shared_ptr<const ItemCatalog> &catalog,
                                    const SiameseEnsembleParams &metric, double log_noise,
                                    const std::vector<std::size_t> &items, const Eigen::VectorXd &r,
                                    const std::optional<std::vector<std::size_t>> &inducing) {
  auto s = make_gp_state(catalog, metric, log_noise, items, r, !inducing);
  GPGradient g;
  double value;
  if (inducing) {
    auto ind = make_inducing_set(s, *inducing);
    value = nystrom_nll(s, ind);
    g = nystrom_grad(s, ind);
  } else {
    value = nll(s);
    g = nll_grad(s);
  }
  Eigen::VectorXd cg = coordinate_gradient(metric, g.metric);
  Eigen::VectorXd out(cg.size() + 1);
  out << cg, g.log_noise;
  return {value, out};
}

inline double full_objective(const std::shared_ptr<const ItemCatalog> &catalog,
                             const SiameseEnsembleParams &metric, double log_noise,
                             const std::vector<std::size_t> &items, const Eigen::VectorXd &r,
                             const std::optional<std::vector<std::size_t>> &inducing) {
  auto s = make_gp_state(catalog, metric, log_noise, items, r, !inducing);
  if (inducing)
    return nystrom_nll(s, make_inducing_set(s, *inducing));
  return nll(s);
}

inline std::vector<std::size_t> sample_subset(const std::vector<std::size_t> &n_items,
                                              std::size_t k, std::mt19937_64 &rng) {
  std::vector<std::size_t> idx(n_items.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, idx.size() - 1);
    std::swap(idx[i], idx[u(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

} // namespace detail

struct SSLResult {
  GPState state;
  TrainTrace trace;
};

/// Minimises the GP NLL from `init`. Returns the best state seen at
/// evaluation points (every step in full-batch mode) and the per-step trace.
inline SSLResult fit_ssl(std::shared_ptr<const ItemCatalog> catalog,
                         const std::vector<std::size_t> &train_items, const Eigen::VectorXd &r,
                         const SiameseEnsembleParams &init, double init_log_noise,
                         const TrainConfig &config) {
  if (!(config.learning_rate > 0.0))
    throw ConfigError("learning rate must be positive");
  if (config.steps < 0)
    throw ConfigError("steps must be nonnegative");
  if (config.eval_every < 1)
    throw ConfigError("eval_every must be >= 1");
  if (r.size() != static_cast<Eigen::Index>(train_items.size()))
    throw DimensionError("target vector length does not match the training set");
  if (train_items.empty())
    throw DataError("SSL needs at least one training item");
  const std::size_t n = train_items.size();
  if (config.batch_items && (*config.batch_items == 0 || *config.batch_items > n))
    throw ConfigError("batch_items must lie in [1, n]");

  std::mt19937_64 rng(config.seed);
  std::optional<std::vector<std::size_t>> inducing;
  if (n > kExactLimit) {
    std::vector<std::size_t> pos = detail::sample_subset(train_items, std::min(config.inducing, n), rng);
    inducing.emplace();
    for (auto k : pos)
      inducing->push_back(train_items[k]);
  }
  const bool full_batch = !config.batch_items || *config.batch_items == n;

  SiameseEnsembleParams metric = init;
  const auto mask = freeze_mask(metric, config.frozen);
  Eigen::VectorXd x(static_cast<Eigen::Index>(count_parameters(metric)) + 1);
  x << to_coordinates(metric), init_log_noise;
  auto unpack = [&](const Eigen::VectorXd &v, SiameseEnsembleParams &m, double &ln) {
    from_coordinates(m, v.head(v.size() - 1));
    ln = v[v.size() - 1];
  };
  double log_noise = init_log_noise;
  const Eigen::VectorXd x0 = x;

  Optimizer opt(config.optimizer, config.learning_rate);
  TrainTrace trace;
  Eigen::VectorXd best_x = x;
  double best = std::numeric_limits<double>::infinity();

  auto masked_norm = [&](const Eigen::VectorXd &g) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if (mask[static_cast<std::size_t>(i)])
        s += g[i] * g[i];
    return std::sqrt(s);
  };
  auto abort = [&](const std::string &why, int step) {
    throw TrainingAborted("SSL training aborted at step " + std::to_string(step) + ": " + why, step,
                          trace);
  };

  // Objective on the current point; mini-batch mode samples a fresh batch.
  std::vector<std::size_t> batch;
  Eigen::VectorXd r_batch;
  auto draw_batch = [&] {
    auto pos = detail::sample_subset(train_items, *config.batch_items, rng);
    batch.clear();
    r_batch.resize(static_cast<Eigen::Index>(pos.size()));
    for (std::size_t k = 0; k < pos.size(); ++k) {
      batch.push_back(train_items[pos[k]]);
      r_batch[static_cast<Eigen::Index>(k)] = r[static_cast<Eigen::Index>(pos[k])];
    }
  };
  auto objective = [&] {
    if (full_batch)
      return detail::evaluate_objective(catalog, metric, log_noise, train_items, r, inducing);
    return detail::evaluate_objective(catalog, metric, log_noise, batch, r_batch, std::nullopt);
  };

  if (!full_batch)
    draw_batch();
  detail::Objective obj;
  try {
    obj = objective();
  } catch (const NumericalError &e) {
    abort(e.what(), 0);
  }
  for (int step = 0;; ++step) {
    if (!std::isfinite(obj.value) || !obj.coord_grad.allFinite())
      abort("non-finite objective", step);
    trace.rows.push_back({step, obj.value, masked_norm(obj.coord_grad), std::exp(log_noise)});

    double score = obj.value;
    const bool eval_point = full_batch || step % config.eval_every == 0 || step == config.steps;
    if (!full_batch && eval_point) {
      try {
        score = detail::full_objective(catalog, metric, log_noise, train_items, r, inducing);
      } catch (const NumericalError &e) {
        abort(e.what(), step);
      }
      if (!std::isfinite(score))
        abort("non-finite full-data objective", step);
    }
    if (eval_point && score < best) {
      best = score;
      best_x = x;
    }
    if (step == config.steps)
      break;

    // A proposed point whose Gram cannot be factorised is pulled back
    // toward the last accepted point.
    const Eigen::VectorXd x_prev = x;
    opt.step(x, obj.coord_grad, &mask);
    if (!full_batch)
      draw_batch();
    for (int retreat = 0;; ++retreat) {
      unpack(x, metric, log_noise);
      try {
        obj = objective();
        break;
      } catch (const NumericalError &e) {
        if (retreat == kMaxRetreats)
          abort(e.what(), step + 1);
        x = x_prev + 0.5 * (x - x_prev);
      }
    }
  }

  SiameseEnsembleParams best_metric = init;
  double best_log_noise = init_log_noise;
  unpack(best_x, best_metric, best_log_noise);
  // Coordinates that never moved keep their exact initial values rather than
  // a softplus round trip.
  Eigen::VectorXd raw = flatten(best_metric);
  const Eigen::VectorXd raw0 = flatten(init);
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    if (best_x[i] == x0[i])
      raw[i] = raw0[i];
  unflatten(best_metric, raw);
  SSLResult out{make_gp_state(catalog, std::move(best_metric), best_log_noise, train_items, r,
                              n <= kExactLimit),
                std::move(trace)};
  return out;
}

} // namespace i2i
