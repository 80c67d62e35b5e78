#pragma once

// The staged workflow: split, baseline, SSL, meta-learned personalization
// and ranking evaluation, with all knobs gathered in one settings struct.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"
#include "i2i/evaluation.hpp"
#include "i2i/gp.hpp"
#include "i2i/personalization.hpp"
#include "i2i/siamese.hpp"
#include "i2i/ssl.hpp"

namespace i2i {

struct PipelineSettings {
  double test_fraction = 0.05;
  AnnotationConfig annotation;
  ModelConfig model;
  BaselineConfig baseline;
  TrainConfig train;
  double init_noise = 0.1;        ///< sigma^2 at the start of SSL
  bool standardize_targets = false; ///< also divide targets by their RMS
  MetaConfig meta;
  UserSelection users;
  std::size_t k = 10;
  std::int64_t horizon = kDefaultHorizonSeconds;
  std::uint64_t seed = 0;
};

struct Dataset {
  InteractionLog log;
  std::shared_ptr<const ItemCatalog> catalog;
  TimeSplit split;
};

inline Dataset prepare_dataset(InteractionLog log, ItemCatalog catalog, double test_fraction) {
  Dataset d;
  d.split = split_by_time(log, catalog, test_fraction);
  d.log = std::move(log);
  d.catalog = std::make_shared<const ItemCatalog>(std::move(catalog));
  return d;
}

inline SiameseEnsembleParams initial_params(const Dataset &d, const PipelineSettings &s) {
  const auto dims = channel_dims(*d.catalog);
  return init_params(dims, d.catalog->size(), s.model, s.seed);
}

/// Contrastive training on pairs annotated from the train window.
inline BaselineResult run_baseline(const Dataset &d, const SiameseEnsembleParams &init,
                                   const PipelineSettings &s) {
  AnnotationConfig ac = s.annotation;
  ac.seed = s.seed;
  auto ann = generate_pair_annotations(d.log, *d.catalog, d.split.train_items, ac);
  return train_siamese_baseline(*d.catalog, ann.pairs, init, s.baseline);
}

/// Divisor applied to ratings before they reach a GP: the RMS of the centred
/// train targets when standardising, else 1.
inline double target_scale(const Dataset &d, const PipelineSettings &s) {
  if (!s.standardize_targets)
    return 1.0;
  const Eigen::VectorXd r = surrogate_targets(d.log, *d.catalog, d.split.train_items);
  if (r.size() < 2)
    return 1.0;
  const double sd = std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
  return sd > 0.0 ? sd : 1.0;
}

/// Mean rating per train item, centred and divided by target_scale().
inline Eigen::VectorXd training_targets(const Dataset &d, const PipelineSettings &s) {
  return surrogate_targets(d.log, *d.catalog, d.split.train_items) / target_scale(d, s);
}

/// Most negative eigenvalue of the train Gram (0 when it is PSD). The
/// sigmoid-aggregated distance does not give a PSD kernel in general.
inline double gram_deficit(const Dataset &d, const SiameseEnsembleParams &p) {
  const Eigen::MatrixXd K = gram(p, *d.catalog, d.split.train_items);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K, Eigen::EigenvaluesOnly);
  return std::max(0.0, -es.eigenvalues().minCoeff());
}

/// Starting noise: the configured value on top of whatever the initial Gram
/// lacks to be PSD, so step 0 can be factorised.
inline double starting_noise(const Dataset &d, const SiameseEnsembleParams &init, const PipelineSettings &s) {
  if (d.split.train_items.size() > kExactLimit)
    return s.init_noise;
  return s.init_noise + gram_deficit(d, init);
}

inline SSLResult run_ssl(const Dataset &d, const SiameseEnsembleParams &init, const PipelineSettings &s) {
  TrainConfig tc = s.train;
  tc.seed = s.seed;
  return fit_ssl(d.catalog, d.split.train_items, training_targets(d, s), init,
                 std::log(starting_noise(d, init, s)), tc);
}

/// Test items whose population ground truth is non-empty.
inline std::vector<std::size_t> population_queries(const Dataset &d, const GroundTruth &G) {
  std::vector<std::size_t> q;
  for (auto i : d.split.test_items)
    if (!G[i].empty())
      q.push_back(i);
  return q;
}

inline std::vector<std::size_t> all_items(const Dataset &d) {
  std::vector<std::size_t> c(d.catalog->size());
  std::iota(c.begin(), c.end(), 0);
  return c;
}

inline RankingReport evaluate_population(const SiameseEnsembleParams &params, const Dataset &d,
                                         const PipelineSettings &s) {
  const auto G = build_ground_truth(d.log, *d.catalog, s.horizon);
  const auto queries = population_queries(d, G);
  if (queries.empty())
    throw DataError("no test item has a non-empty ground truth set");
  return evaluate(make_evaluator(params, *d.catalog), queries, all_items(d), G, s.k);
}

struct PersonalizationResult {
  Eigen::VectorXd meta_w;
  std::vector<double> meta_trace;
  std::vector<std::pair<std::string, Eigen::VectorXd>> user_w;
};

/// Meta-learns the aggregation weights over every eligible user, then takes
/// the local step for each of them. The towers stay frozen.
inline PersonalizationResult run_personalization(const Dataset &d, const SiameseEnsembleParams &psi,
                                                 double noise, const PipelineSettings &s) {
  auto users = build_user_contexts(d.log, *d.catalog, d.split.train_items, psi, s.users);
  if (users.empty())
    throw DataError("no user has enough rated train items to personalize");
  // same units as the population fit that produced `noise`
  const double scale = target_scale(d, s);
  for (auto &u : users)
    u.r_u /= scale;
  const auto losses = make_user_losses(users, noise);
  const auto weights = user_weights(users);
  MetaConfig mc = s.meta;
  mc.seed = s.seed;
  auto meta = fit_meta(losses, weights, psi.aggregation(), mc);
  PersonalizationResult out{meta.w, meta.loss_trace, {}};
  for (std::size_t u = 0; u < users.size(); ++u)
    out.user_w.emplace_back(users[u].user, personalize_user(losses[u], meta.w, mc, users[u].user));
  return out;
}

inline SiameseEnsembleParams with_aggregation(SiameseEnsembleParams p, const Eigen::VectorXd &w) {
  p.set_aggregation(w);
  return p;
}

/// The user's interacted items with a non-empty single-user ground truth,
/// scored against that ground truth.
inline RankingReport evaluate_user(const SiameseEnsembleParams &params, const Dataset &d,
                                   const std::string &user, const PipelineSettings &s) {
  const auto G = build_ground_truth(d.log, *d.catalog, s.horizon, user);
  std::vector<std::size_t> queries;
  for (std::size_t i = 0; i < G.size(); ++i)
    if (!G[i].empty())
      queries.push_back(i);
  if (queries.empty())
    throw DataError("user " + user + " has no co-interactions within the horizon");
  return evaluate(make_evaluator(params, *d.catalog), queries, all_items(d), G, s.k);
}

} // namespace i2i
