#pragma once

// Top-k retrieval under a learned metric and the HR / MRR / NDCG scores.
// NDCG uses the discount 1 / log2(i) for positions i >= 2 and no discount
// at position 1.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"
#include "i2i/siamese.hpp"

namespace i2i {

/// Score between two catalog indices; smaller is closer.
using MetricEvaluator = std::function<double(std::size_t, std::size_t)>;

/// Embeds the whole catalog once; each call is then one aggregation.
/// Ensemble models score by the pre-sigmoid sum, which orders pairs exactly
/// as the distance does but does not round to 1.0 for far pairs.
inline MetricEvaluator make_evaluator(const SiameseEnsembleParams &params,
                                      const ItemCatalog &catalog) {
  std::vector<std::size_t> all(catalog.size());
  std::iota(all.begin(), all.end(), 0);
  auto e = std::make_shared<Embedded>(embed(params, catalog, all));
  auto p = std::make_shared<SiameseEnsembleParams>(params);
  return [e, p](std::size_t a, std::size_t b) {
    if (a == b && !p->ensemble)
      return 0.0;
    return aggregate_logit(*p, component_distances(*p, *e, static_cast<Eigen::Index>(a),
                                                   static_cast<Eigen::Index>(b)));
  };
}

struct RankedList {
  std::size_t query = 0;
  std::vector<std::size_t> ranked;
  std::vector<double> distances;
  bool truncated = false; ///< fewer than k candidates were available
};

/// The k candidates closest to `query` (query itself excluded), ties by
/// ascending catalog index.
inline RankedList rank_items(const MetricEvaluator &metric, std::size_t query,
                             const std::vector<std::size_t> &candidates, std::size_t k) {
  if (k == 0)
    throw DomainError("k must be >= 1");
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(candidates.size());
  for (auto c : candidates)
    if (c != query)
      scored.emplace_back(metric(query, c), c);
  if (scored.empty())
    throw DataError("no candidates to rank");
  RankedList out;
  out.query = query;
  const std::size_t take = std::min(k, scored.size());
  out.truncated = take < k;
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
  for (std::size_t i = 0; i < take; ++i) {
    out.distances.push_back(scored[i].first);
    out.ranked.push_back(scored[i].second);
  }
  return out;
}

using RelevantSet = std::unordered_set<std::size_t>;

/// Hits / k, where k is the requested list length.
inline double hr_at_k(const std::vector<std::size_t> &ranked, const RelevantSet &G, std::size_t k) {
  if (k == 0)
    throw DomainError("k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i)
    hits += G.count(ranked[i]);
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline double hr_at_k(const std::vector<std::size_t> &ranked, const RelevantSet &G) {
  return hr_at_k(ranked, G, ranked.size());
}

inline double mrr_at_k(const std::vector<std::size_t> &ranked, const RelevantSet &G) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (G.count(ranked[i]))
      return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

namespace detail {
inline double position_gain(std::size_t pos) { // 1-based
  return pos == 1 ? 1.0 : 1.0 / std::log2(static_cast<double>(pos));
}
} // namespace detail

/// DCG over the list divided by the DCG with the same hits moved to the
/// front; 0 when the list has no hit.
inline double ndcg_at_k(const std::vector<std::size_t> &ranked, const RelevantSet &G) {
  double dcg = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (G.count(ranked[i])) {
      dcg += detail::position_gain(i + 1);
      ++hits;
    }
  if (hits == 0)
    return 0.0;
  double ideal = 0.0;
  for (std::size_t i = 1; i <= hits; ++i)
    ideal += detail::position_gain(i);
  return dcg / ideal;
}

struct QueryScore {
  std::size_t query;
  double hr, mrr, ndcg;
};

struct RankingReport {
  std::size_t k = 10;
  double mean_hr = 0.0, mean_mrr = 0.0, mean_ndcg = 0.0;
  std::vector<QueryScore> per_query;
  std::size_t num_queries = 0;
  std::size_t empty_g_count = 0;
};

/// Scores every query against its relevant set `G[query]` and averages.
inline RankingReport evaluate(const MetricEvaluator &metric, const std::vector<std::size_t> &queries,
                              const std::vector<std::size_t> &candidates, const GroundTruth &G,
                              std::size_t k) {
  RankingReport rep;
  rep.k = k;
  for (auto q : queries) {
    if (q >= G.size())
      throw DataError("query has no ground-truth entry");
    const RelevantSet g(G[q].begin(), G[q].end());
    if (g.empty())
      ++rep.empty_g_count;
    auto list = rank_items(metric, q, candidates, k);
    QueryScore s{q, hr_at_k(list.ranked, g, k), mrr_at_k(list.ranked, g), ndcg_at_k(list.ranked, g)};
    rep.per_query.push_back(s);
  }
  rep.num_queries = rep.per_query.size();
  if (rep.num_queries > 0) {
    for (const auto &s : rep.per_query) {
      rep.mean_hr += s.hr;
      rep.mean_mrr += s.mrr;
      rep.mean_ndcg += s.ndcg;
    }
    const double n = static_cast<double>(rep.num_queries);
    rep.mean_hr /= n;
    rep.mean_mrr /= n;
    rep.mean_ndcg /= n;
  }
  return rep;
}

/// `query,hr,mrr,ndcg` rows keyed by item id (or any label), then a `mean` row.
inline void write_report_csv(const RankingReport &rep, const std::string &path,
                             const std::function<std::string(const QueryScore &)> &label) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write report to " + path);
  out.precision(17);
  out << "query,hr,mrr,ndcg\n";
  for (const auto &s : rep.per_query)
    out << label(s) << ',' << s.hr << ',' << s.mrr << ',' << s.ndcg << '\n';
  out << "mean," << rep.mean_hr << ',' << rep.mean_mrr << ',' << rep.mean_ndcg << '\n';
}

} // namespace i2i
