#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/siamese.hpp"

namespace i2i::testing {

/// n items with p channels of the given dims, values drawn from N(0, 1)
/// (multi-hot channels get random 0/1 entries).
inline ItemCatalog random_catalog(std::size_t n, const std::vector<Eigen::Index> &dims,
                                  std::uint64_t seed, bool with_multi_hot = false) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i)
    ids.push_back("item" + std::to_string(i));
  auto cat = make_catalog(ids);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t m = 0; m < dims.size(); ++m) {
    const bool hot = with_multi_hot && m == 1;
    std::unordered_map<std::string, Eigen::VectorXd> vals;
    for (const auto &id : ids) {
      Eigen::VectorXd v(dims[m]);
      for (Eigen::Index k = 0; k < v.size(); ++k)
        v[k] = hot ? (coin(rng) ? 1.0 : 0.0) : g(rng);
      vals.emplace(id, v);
    }
    add_channel(cat, "c" + std::to_string(m), hot ? ChannelKind::multi_hot : ChannelKind::numeric,
                dims[m], vals);
  }
  return cat;
}

/// Gives every parameter a random value so no gradient path is trivially zero.
inline void randomize(SiameseEnsembleParams &p, std::uint64_t seed, double scale = 0.8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd x = flatten(p);
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x[i] = u(rng);
  unflatten(p, x);
  for (auto &c : p.channels)
    for (Eigen::Index k = 0; k < c.lambda_diag.size(); ++k)
      c.lambda_diag[k] = 0.5 + std::abs(u(rng));
}

/// Central differences of f over the flat parameter vector.
inline Eigen::VectorXd fd_gradient(const SiameseEnsembleParams &p,
                                   const std::function<double(const SiameseEnsembleParams &)> &f,
                                   double step = 1e-5) {
  Eigen::VectorXd x = flatten(p);
  Eigen::VectorXd g(x.size());
  SiameseEnsembleParams q = p;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    unflatten(q, xp);
    const double fp = f(q);
    unflatten(q, xm);
    const double fm = f(q);
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

inline Eigen::VectorXd fd_gradient(const Eigen::VectorXd &x,
                                   const std::function<double(const Eigen::VectorXd &)> &f,
                                   double step = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    g[i] = (f(xp) - f(xm)) / (2.0 * step);
  }
  return g;
}

inline double rel_err(const Eigen::VectorXd &a, const Eigen::VectorXd &b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / denom;
}

} // namespace i2i::testing
