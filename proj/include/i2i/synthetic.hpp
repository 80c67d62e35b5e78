#pragma once

// Clustered two-channel catalog with a user population split between two
// archetypes. Items carry two latent labels; channel "attr_a" (numeric) is a
// noisy view of the first, channel "attr_b" (multi-hot) of the second.
// Archetype-A users browse sessions within one first-label cluster and
// archetype-B users within one second-label cluster. Ratings combine a
// global quality of the user's label with their own taste on it; the other
// label's quality enters with weight `cross_quality`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"

namespace i2i {

struct SyntheticConfig {
  std::size_t items = 400;
  std::size_t users = 50;
  int clusters = 20;             ///< per latent label
  Eigen::Index numeric_dim = 4;  ///< attr_a width
  Eigen::Index noise_bits = 3;   ///< extra random bits in attr_b
  double feature_noise = 0.5;    ///< std of attr_a around its centroid
  double label_flip = 0.1;       ///< chance attr_b shows a wrong cluster bit
  int sessions_per_user = 12;
  int items_per_session = 5;
  double days = 365.0;
  double recency_days = 45.0;    ///< newer releases are preferred with this decay
  double quality_scale = 0.8;    ///< spread of global per-cluster quality
  double cross_quality = 0.0;    ///< weight of the other label's quality in a rating
  double taste_scale = 1.2;      ///< spread of a user's own cluster taste
  double rating_noise = 0.3;
  std::uint64_t seed = 7;
};

struct SyntheticDataset {
  InteractionLog log;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, Eigen::VectorXd> attr_a, attr_b;
  std::vector<int> label_a, label_b;        ///< per item
  std::vector<std::string> user_ids;
  std::vector<int> archetype;               ///< per user, 0 browses by label_a
  Eigen::Index attr_b_dim = 0;
};

inline SyntheticDataset generate_synthetic(const SyntheticConfig &c) {
  if (c.items < 2 || c.users < 1 || c.clusters < 1 || c.numeric_dim < 1 || c.sessions_per_user < 1 ||
      c.items_per_session < 2 || !(c.days > 0.0) || !(c.recency_days > 0.0))
    throw ConfigError("invalid synthetic generator settings");
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick_cluster(0, c.clusters - 1);

  SyntheticDataset d;
  d.attr_b_dim = c.clusters + c.noise_bits;
  const int width = static_cast<int>(std::to_string(c.items - 1).size());
  Eigen::MatrixXd centroid(c.clusters, c.numeric_dim);
  for (Eigen::Index k = 0; k < centroid.size(); ++k)
    centroid.data()[k] = 1.5 * g(rng);
  std::vector<double> release(c.items);
  for (std::size_t i = 0; i < c.items; ++i) {
    std::ostringstream id;
    id << 'i' << std::setw(width) << std::setfill('0') << i;
    d.item_ids.push_back(id.str());
    const int a = static_cast<int>(i % static_cast<std::size_t>(c.clusters));
    const int b = pick_cluster(rng);
    d.label_a.push_back(a);
    d.label_b.push_back(b);
    Eigen::VectorXd va = centroid.row(a).transpose();
    for (Eigen::Index k = 0; k < va.size(); ++k)
      va[k] += c.feature_noise * g(rng);
    Eigen::VectorXd vb = Eigen::VectorXd::Zero(d.attr_b_dim);
    vb[u(rng) < c.label_flip ? pick_cluster(rng) : b] = 1.0;
    for (Eigen::Index k = 0; k < c.noise_bits; ++k)
      vb[c.clusters + k] = u(rng) < 0.5 ? 1.0 : 0.0;
    d.attr_a.emplace(d.item_ids.back(), std::move(va));
    d.attr_b.emplace(d.item_ids.back(), std::move(vb));
    release[i] = u(rng) * c.days;
  }

  std::vector<double> quality_a(c.clusters), quality_b(c.clusters);
  for (int k = 0; k < c.clusters; ++k) {
    quality_a[k] = c.quality_scale * g(rng);
    quality_b[k] = c.quality_scale * g(rng);
  }

  const int uwidth = static_cast<int>(std::to_string(c.users - 1).size());
  const double slot = c.days / c.sessions_per_user;
  for (std::size_t usr = 0; usr < c.users; ++usr) {
    std::ostringstream id;
    id << 'u' << std::setw(uwidth) << std::setfill('0') << usr;
    d.user_ids.push_back(id.str());
    const int arche = static_cast<int>(usr % 2);
    d.archetype.push_back(arche);
    const auto &own = arche == 0 ? d.label_a : d.label_b;
    std::vector<double> taste(c.clusters);
    for (auto &t : taste)
      t = c.taste_scale * g(rng);
    std::vector<double> cluster_weight(c.clusters);
    for (int k = 0; k < c.clusters; ++k)
      cluster_weight[k] = std::exp(taste[k]);
    std::discrete_distribution<int> favourite(cluster_weight.begin(), cluster_weight.end());

    for (int s = 0; s < c.sessions_per_user; ++s) {
      // sessions sit in separate slots, each lasting at most a few hours
      const double t0 = (s + 0.1 + 0.5 * u(rng)) * slot;
      const int cluster = favourite(rng);
      std::vector<std::size_t> pool;
      std::vector<double> weight;
      for (std::size_t i = 0; i < c.items; ++i)
        if (own[i] == cluster && release[i] <= t0) {
          pool.push_back(i);
          weight.push_back(std::exp(-(t0 - release[i]) / c.recency_days));
        }
      const auto take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(c.items_per_session));
      for (std::size_t k = 0; k < take; ++k) {
        std::discrete_distribution<std::size_t> pick(weight.begin(), weight.end());
        const std::size_t j = pick(rng);
        const std::size_t item = pool[j];
        weight[j] = 0.0;
        const double qa = quality_a[d.label_a[item]], qb = quality_b[d.label_b[item]];
        const double rating = 3.0 + (arche == 0 ? qa + c.cross_quality * qb : qb + c.cross_quality * qa) +
                              taste[own[item]] + c.rating_noise * g(rng);
        const auto ts = static_cast<std::int64_t>(std::llround((t0 + 0.05 * k) * 86400.0));
        d.log.push_back({d.user_ids.back(), d.item_ids[item], std::round(rating * 100.0) / 100.0, ts});
      }
    }
  }
  std::stable_sort(d.log.begin(), d.log.end(),
                   [](const Interaction &x, const Interaction &y) { return x.timestamp < y.timestamp; });
  return d;
}

/// Catalog in item-id order with both channels.
inline ItemCatalog synthetic_catalog(const SyntheticDataset &d) {
  auto cat = make_catalog(d.item_ids);
  add_channel(cat, "attr_a", ChannelKind::numeric, d.attr_a.begin()->second.size(), d.attr_a);
  add_channel(cat, "attr_b", ChannelKind::multi_hot, d.attr_b_dim, d.attr_b);
  return cat;
}

/// interactions.csv, attr_a.csv, attr_b.csv, manifest.csv and latent.csv.
inline void write_synthetic(const SyntheticDataset &d, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  save_interactions(dir / "interactions.csv", d.log);
  auto write_channel = [&](const std::string &file, const std::unordered_map<std::string, Eigen::VectorXd> &vals) {
    std::ofstream out(dir / file);
    if (!out)
      throw DataError("cannot write " + (dir / file).string());
    out.precision(17);
    const auto dim = vals.begin()->second.size();
    out << "item";
    for (Eigen::Index k = 0; k < dim; ++k)
      out << ",v" << k;
    out << '\n';
    for (const auto &id : d.item_ids) {
      out << id;
      const auto &v = vals.at(id);
      for (Eigen::Index k = 0; k < dim; ++k)
        out << ',' << v[k];
      out << '\n';
    }
  };
  write_channel("attr_a.csv", d.attr_a);
  write_channel("attr_b.csv", d.attr_b);
  {
    std::ofstream out(dir / "manifest.csv");
    out << "name,kind,dim,path\n";
    out << "attr_a,numeric," << d.attr_a.begin()->second.size() << ",attr_a.csv\n";
    out << "attr_b,multi_hot," << d.attr_b_dim << ",attr_b.csv\n";
  }
  std::ofstream out(dir / "latent.csv");
  out << "kind,id,label_a,label_b,archetype\n";
  for (std::size_t i = 0; i < d.item_ids.size(); ++i)
    out << "item," << d.item_ids[i] << ',' << d.label_a[i] << ',' << d.label_b[i] << ",\n";
  for (std::size_t k = 0; k < d.user_ids.size(); ++k)
    out << "user," << d.user_ids[k] << ",,," << d.archetype[k] << '\n';
}

} // namespace i2i
