#pragma once

// Per-channel Siamese towers, Mahalanobis channel distances, the
// sigmoid-aggregated ensemble distance, contrastive training and exact
// reverse-mode gradients for every parameter.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"
#include "i2i/optim.hpp"

namespace i2i {

inline double sigmoid(double z) {
  if (z >= 0.0)
    return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }

inline double softplus_inverse(double y) {
  if (!(y > 0.0))
    throw DomainError("softplus inverse needs a positive argument");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Three dense layers: relu(2h) -> sigmoid(h) -> tanh(h).
struct TowerParams {
  Eigen::MatrixXd W_o; ///< 2h x d
  Eigen::VectorXd b_o; ///< 2h
  Eigen::MatrixXd W_s; ///< h x 2h
  Eigen::VectorXd b_s; ///< h
  Eigen::MatrixXd W_t; ///< h x h
  Eigen::VectorXd b_t; ///< h

  Eigen::Index input_dim() const { return W_o.cols(); }
  Eigen::Index hidden() const { return W_t.rows(); }

  static TowerParams zeros(Eigen::Index d, Eigen::Index h) {
    return {Eigen::MatrixXd::Zero(2 * h, d), Eigen::VectorXd::Zero(2 * h),
            Eigen::MatrixXd::Zero(h, 2 * h), Eigen::VectorXd::Zero(h),
            Eigen::MatrixXd::Zero(h, h),     Eigen::VectorXd::Zero(h)};
  }
};

struct ChannelMetricParams {
  TowerParams tower;
  Eigen::VectorXd lambda_diag;
};

struct IdEmbeddingTable {
  Eigen::MatrixXd table; ///< n x p_id
};

enum class LambdaMode { fixed_identity, learned };

/// Tower and scale parameters per channel (psi), the ID table, and the
/// aggregation weights w = (agg_h, agg_b). The same struct doubles as the
/// gradient container.
struct SiameseEnsembleParams {
  std::vector<ChannelMetricParams> channels;
  IdEmbeddingTable id_embed;
  bool use_id = false;
  bool ensemble = true;
  LambdaMode lambda_mode = LambdaMode::fixed_identity;
  Eigen::VectorXd agg_h;
  double agg_b = 0.0;

  std::size_t num_components() const { return channels.size() + (use_id ? 1 : 0); }

  Eigen::VectorXd aggregation() const {
    Eigen::VectorXd w(agg_h.size() + 1);
    w << agg_h, agg_b;
    return w;
  }
  void set_aggregation(const Eigen::VectorXd &w) {
    if (w.size() != agg_h.size() + 1)
      throw DimensionError("aggregation vector has wrong length");
    agg_h = w.head(agg_h.size());
    agg_b = w[w.size() - 1];
  }
};

inline SiameseEnsembleParams zeros_like(const SiameseEnsembleParams &p) {
  SiameseEnsembleParams z = p;
  for (auto &c : z.channels) {
    c.tower = TowerParams::zeros(c.tower.input_dim(), c.tower.hidden());
    c.lambda_diag.setZero();
  }
  z.id_embed.table.setZero();
  z.agg_h.setZero();
  z.agg_b = 0.0;
  return z;
}

struct ModelConfig {
  Eigen::Index hidden = 50;
  Eigen::Index id_dim = 30;
  bool use_id = false;
  bool ensemble = true;
  LambdaMode lambda_mode = LambdaMode::fixed_identity;
  double init_agg_h = 1.0;
  double init_agg_b = 0.0;
};

namespace detail {
inline void glorot(Eigen::MatrixXd &m, std::mt19937_64 &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  std::uniform_real_distribution<double> u(-a, a);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      m(i, j) = u(rng);
}
} // namespace detail

/// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases,
/// unit scales.
inline SiameseEnsembleParams init_params(std::span<const Eigen::Index> channel_dims,
                                         std::size_t num_items, const ModelConfig &config,
                                         std::uint64_t seed) {
  if (config.hidden < 1)
    throw ConfigError("hidden width must be >= 1");
  if (!config.ensemble && channel_dims.size() + (config.use_id ? 1 : 0) != 1)
    throw ConfigError("single-channel mode needs exactly one distance component");
  std::mt19937_64 rng(seed);
  SiameseEnsembleParams p;
  p.use_id = config.use_id;
  p.ensemble = config.ensemble;
  p.lambda_mode = config.lambda_mode;
  const auto h = config.hidden;
  for (auto d : channel_dims) {
    ChannelMetricParams c{TowerParams::zeros(d, h), Eigen::VectorXd::Ones(h)};
    detail::glorot(c.tower.W_o, rng);
    detail::glorot(c.tower.W_s, rng);
    detail::glorot(c.tower.W_t, rng);
    p.channels.push_back(std::move(c));
  }
  if (config.use_id) {
    p.id_embed.table = Eigen::MatrixXd(static_cast<Eigen::Index>(num_items), config.id_dim);
    detail::glorot(p.id_embed.table, rng);
  } else {
    p.id_embed.table = Eigen::MatrixXd(0, 0);
  }
  p.agg_h = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(p.num_components()), config.init_agg_h);
  p.agg_b = config.init_agg_b;
  return p;
}

inline std::vector<Eigen::Index> channel_dims(const ItemCatalog &catalog) {
  std::vector<Eigen::Index> dims;
  for (const auto &c : catalog.channels)
    dims.push_back(c.dim);
  return dims;
}

inline std::size_t count_parameters(const SiameseEnsembleParams &p) {
  std::size_t total = 0;
  for (const auto &c : p.channels) {
    const auto &t = c.tower;
    total += static_cast<std::size_t>(t.W_o.size() + t.b_o.size() + t.W_s.size() + t.b_s.size() +
                                      t.W_t.size() + t.b_t.size() + c.lambda_diag.size());
  }
  total += static_cast<std::size_t>(p.id_embed.table.size());
  total += static_cast<std::size_t>(p.agg_h.size()) + 1;
  return total;
}

inline Eigen::VectorXd tower_forward(const TowerParams &t, const Eigen::VectorXd &v) {
  if (v.size() != t.input_dim())
    throw DimensionError("tower input has length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(t.input_dim()));
  Eigen::VectorXd a = (t.W_o * v + t.b_o).cwiseMax(0.0);
  Eigen::VectorXd s = (t.W_s * a + t.b_s).unaryExpr([](double z) { return sigmoid(z); });
  return (t.W_t * s + t.b_t).array().tanh().matrix();
}

inline void check_lambda(const ChannelMetricParams &c) {
  if (c.lambda_diag.size() != c.tower.hidden())
    throw DimensionError("lambda_diag length does not match tower width");
  if ((c.lambda_diag.array() < 0.0).any())
    throw DomainError("lambda_diag has a negative entry");
}

/// (F(a) - F(b))^T diag(lambda) (F(a) - F(b)).
inline double channel_distance(const ChannelMetricParams &c, const Eigen::VectorXd &va,
                               const Eigen::VectorXd &vb) {
  check_lambda(c);
  Eigen::VectorXd dz = tower_forward(c.tower, va) - tower_forward(c.tower, vb);
  return (c.lambda_diag.array() * dz.array().square()).sum();
}

/// Tower outputs and activations for a set of catalog items (row k belongs to
/// items[k]); everything backward() needs.
struct Embedded {
  std::vector<std::size_t> items;
  std::vector<Eigen::MatrixXd> relu;  ///< per channel, n x 2h
  std::vector<Eigen::MatrixXd> sig;   ///< per channel, n x h
  std::vector<Eigen::MatrixXd> z;     ///< per channel, n x h
  std::vector<Eigen::MatrixXd> input; ///< per channel, n x d

  Eigen::Index size() const { return static_cast<Eigen::Index>(items.size()); }
};

inline Embedded embed(const SiameseEnsembleParams &p, const ItemCatalog &catalog,
                      std::span<const std::size_t> items) {
  if (catalog.channels.size() != p.channels.size())
    throw DimensionError("catalog has " + std::to_string(catalog.channels.size()) +
                         " channels, metric expects " + std::to_string(p.channels.size()));
  if (p.agg_h.size() != static_cast<Eigen::Index>(p.num_components()))
    throw DimensionError("agg_h length does not match the number of distance components");
  if (p.use_id && p.id_embed.table.rows() != static_cast<Eigen::Index>(catalog.size()))
    throw DimensionError("ID table rows do not match catalog size");
  Embedded e;
  e.items.assign(items.begin(), items.end());
  const auto n = static_cast<Eigen::Index>(items.size());
  for (std::size_t m = 0; m < p.channels.size(); ++m) {
    const auto &t = p.channels[m].tower;
    check_lambda(p.channels[m]);
    const auto &values = catalog.channels[m].values;
    if (values.cols() != t.input_dim())
      throw DimensionError("channel " + std::to_string(m) + " dim mismatch");
    Eigen::MatrixXd x(n, t.input_dim());
    for (Eigen::Index k = 0; k < n; ++k)
      x.row(k) = values.row(static_cast<Eigen::Index>(items[static_cast<std::size_t>(k)]));
    Eigen::MatrixXd a = ((x * t.W_o.transpose()).rowwise() + t.b_o.transpose()).cwiseMax(0.0);
    Eigen::MatrixXd s = ((a * t.W_s.transpose()).rowwise() + t.b_s.transpose())
                            .unaryExpr([](double v) { return sigmoid(v); });
    Eigen::MatrixXd z = ((s * t.W_t.transpose()).rowwise() + t.b_t.transpose()).array().tanh();
    e.input.push_back(std::move(x));
    e.relu.push_back(std::move(a));
    e.sig.push_back(std::move(s));
    e.z.push_back(std::move(z));
  }
  return e;
}

/// Per-component distances D_1..D_P between local rows i and j.
inline Eigen::VectorXd component_distances(const SiameseEnsembleParams &p, const Embedded &e,
                                           Eigen::Index i, Eigen::Index j) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(p.num_components()));
  for (std::size_t m = 0; m < p.channels.size(); ++m) {
    const auto &z = e.z[m];
    d[static_cast<Eigen::Index>(m)] =
        (p.channels[m].lambda_diag.transpose().array() * (z.row(i) - z.row(j)).array().square()).sum();
  }
  if (p.use_id) {
    const auto &tab = p.id_embed.table;
    d[d.size() - 1] = (tab.row(static_cast<Eigen::Index>(e.items[static_cast<std::size_t>(i)])) -
                       tab.row(static_cast<Eigen::Index>(e.items[static_cast<std::size_t>(j)])))
                          .squaredNorm();
  }
  return d;
}

/// sum_m h_m D_m + b in ensemble mode, the single distance otherwise.
inline double aggregate_logit(const SiameseEnsembleParams &p, const Eigen::VectorXd &components) {
  if (!p.ensemble)
    return components[0];
  return components.dot(p.agg_h) + p.agg_b;
}

inline double aggregate(const SiameseEnsembleParams &p, const Eigen::VectorXd &components) {
  if (!p.ensemble)
    return components[0];
  return sigmoid(components.dot(p.agg_h) + p.agg_b);
}

inline double distance(const SiameseEnsembleParams &p, const Embedded &e, Eigen::Index i,
                       Eigen::Index j) {
  return aggregate(p, component_distances(p, e, i, j));
}

/// Per-component distance matrices between rows of `a` (rows) and rows of
/// `b` (columns). When `same` is set, `b` is ignored, the result is exactly
/// symmetric and its diagonal is exactly zero.
inline std::vector<Eigen::MatrixXd> component_matrices(const SiameseEnsembleParams &p,
                                                       const Embedded &a, const Embedded &b,
                                                       bool same) {
  const Embedded &bb = same ? a : b;
  std::vector<Eigen::MatrixXd> out;
  const auto na = a.size(), nb = bb.size();
  for (std::size_t m = 0; m < p.channels.size(); ++m) {
    const Eigen::VectorXd sl = p.channels[m].lambda_diag.array().sqrt();
    const Eigen::MatrixXd za = (a.z[m] * sl.asDiagonal()).transpose();
    const Eigen::MatrixXd zb = same ? za : Eigen::MatrixXd((bb.z[m] * sl.asDiagonal()).transpose());
    Eigen::MatrixXd D(na, nb);
    for (Eigen::Index j = 0; j < nb; ++j)
      for (Eigen::Index i = 0; i < (same ? j + 1 : na); ++i) {
        const double v = (za.col(i) - zb.col(j)).squaredNorm();
        D(i, j) = v;
        if (same)
          D(j, i) = v;
      }
    out.push_back(std::move(D));
  }
  if (p.use_id) {
    const auto &tab = p.id_embed.table;
    Eigen::MatrixXd ea(tab.cols(), na), eb(tab.cols(), nb);
    for (Eigen::Index i = 0; i < na; ++i)
      ea.col(i) = tab.row(static_cast<Eigen::Index>(a.items[static_cast<std::size_t>(i)])).transpose();
    for (Eigen::Index j = 0; j < nb; ++j)
      eb.col(j) = tab.row(static_cast<Eigen::Index>(bb.items[static_cast<std::size_t>(j)])).transpose();
    Eigen::MatrixXd D(na, nb);
    for (Eigen::Index j = 0; j < nb; ++j)
      for (Eigen::Index i = 0; i < (same ? j + 1 : na); ++i) {
        const double v = (ea.col(i) - eb.col(j)).squaredNorm();
        D(i, j) = v;
        if (same)
          D(j, i) = v;
      }
    out.push_back(std::move(D));
  }
  return out;
}

inline Eigen::MatrixXd aggregate_matrices(const SiameseEnsembleParams &p,
                                          const std::vector<Eigen::MatrixXd> &comps) {
  if (!p.ensemble)
    return comps[0];
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(comps[0].rows(), comps[0].cols(), p.agg_b);
  for (std::size_t m = 0; m < comps.size(); ++m)
    s += p.agg_h[static_cast<Eigen::Index>(m)] * comps[m];
  return s.unaryExpr([](double v) { return sigmoid(v); });
}

/// Full distance matrix over the embedded items; exactly symmetric.
inline Eigen::MatrixXd distance_matrix(const SiameseEnsembleParams &p, const Embedded &e) {
  return aggregate_matrices(p, component_matrices(p, e, e, true));
}

/// Distances between rows of `a` (rows) and rows of `b` (columns).
inline Eigen::MatrixXd cross_distance_matrix(const SiameseEnsembleParams &p, const Embedded &a,
                                             const Embedded &b) {
  return aggregate_matrices(p, component_matrices(p, a, b, false));
}

/// Ensemble (or single-channel) distance between catalog items a and b.
inline double ensemble_distance(const SiameseEnsembleParams &p, const ItemCatalog &catalog,
                                std::size_t a, std::size_t b) {
  if (a == b && !p.ensemble)
    return 0.0;
  const std::size_t items[2] = {a, b};
  auto e = embed(p, catalog, items);
  return distance(p, e, 0, 1);
}

/// Accumulates dL/dD over pairs of embedded rows and turns it into a
/// parameter gradient. The tower pass happens once per item in finish().
class DistanceBackprop {
public:
  DistanceBackprop(const SiameseEnsembleParams &p, const Embedded &e)
      : p_(p), e_(e), grad_(zeros_like(p)), comps_(static_cast<Eigen::Index>(p.num_components())) {
    for (std::size_t m = 0; m < p.channels.size(); ++m) {
      zt_.push_back(e.z[m].transpose());
      gzt_.push_back(Eigen::MatrixXd::Zero(e.z[m].cols(), e.size()));
    }
  }

  /// Adds coefficient * dD(i, j)/dtheta.
  void add(Eigen::Index i, Eigen::Index j, double coefficient) {
    if (coefficient == 0.0)
      return;
    const auto P = static_cast<Eigen::Index>(p_.num_components());
    for (std::size_t m = 0; m < p_.channels.size(); ++m)
      comps_[static_cast<Eigen::Index>(m)] =
          (p_.channels[m].lambda_diag.array() * (zt_[m].col(i) - zt_[m].col(j)).array().square()).sum();
    if (p_.use_id) {
      const auto &tab = p_.id_embed.table;
      comps_[P - 1] = (tab.row(row_of(i)) - tab.row(row_of(j))).squaredNorm();
    }
    double c_comp_scale = coefficient;
    if (p_.ensemble) {
      const double d = sigmoid(comps_.dot(p_.agg_h) + p_.agg_b);
      const double cs = coefficient * d * (1.0 - d);
      grad_.agg_b += cs;
      grad_.agg_h += cs * comps_;
      c_comp_scale = cs;
    }
    if (i == j)
      return;
    for (std::size_t m = 0; m < p_.channels.size(); ++m) {
      const double c = p_.ensemble ? c_comp_scale * p_.agg_h[static_cast<Eigen::Index>(m)] : c_comp_scale;
      if (c == 0.0)
        continue;
      const auto dz = zt_[m].col(i) - zt_[m].col(j);
      grad_.channels[m].lambda_diag += c * dz.array().square().matrix();
      gzt_[m].col(i) += 2.0 * c * (p_.channels[m].lambda_diag.array() * dz.array()).matrix();
      gzt_[m].col(j) -= 2.0 * c * (p_.channels[m].lambda_diag.array() * dz.array()).matrix();
    }
    if (p_.use_id) {
      const double c = p_.ensemble ? c_comp_scale * p_.agg_h[P - 1] : c_comp_scale;
      const auto ri = row_of(i), rj = row_of(j);
      Eigen::RowVectorXd g = 2.0 * c * (p_.id_embed.table.row(ri) - p_.id_embed.table.row(rj));
      grad_.id_embed.table.row(ri) += g;
      grad_.id_embed.table.row(rj) -= g;
    }
  }

  SiameseEnsembleParams finish() {
    for (std::size_t m = 0; m < p_.channels.size(); ++m) {
      const auto &t = p_.channels[m].tower;
      auto &gt = grad_.channels[m].tower;
      const Eigen::MatrixXd &Z = e_.z[m];
      const Eigen::MatrixXd &S = e_.sig[m];
      const Eigen::MatrixXd &A = e_.relu[m];
      Eigen::MatrixXd g_t = gzt_[m].transpose().array() * (1.0 - Z.array().square());
      gt.W_t += g_t.transpose() * S;
      gt.b_t += g_t.colwise().sum().transpose();
      Eigen::MatrixXd g_s = (g_t * t.W_t).array() * S.array() * (1.0 - S.array());
      gt.W_s += g_s.transpose() * A;
      gt.b_s += g_s.colwise().sum().transpose();
      Eigen::MatrixXd g_o = (g_s * t.W_s).array() * (A.array() > 0.0).cast<double>();
      gt.W_o += g_o.transpose() * e_.input[m];
      gt.b_o += g_o.colwise().sum().transpose();
    }
    return std::move(grad_);
  }

private:
  Eigen::Index row_of(Eigen::Index local) const {
    return static_cast<Eigen::Index>(e_.items[static_cast<std::size_t>(local)]);
  }

  const SiameseEnsembleParams &p_;
  const Embedded &e_;
  SiameseEnsembleParams grad_;
  Eigen::VectorXd comps_;
  std::vector<Eigen::MatrixXd> zt_;
  std::vector<Eigen::MatrixXd> gzt_;
};

/// Gradient of ensemble_distance(a, b) with respect to every parameter.
inline SiameseEnsembleParams backward(const SiameseEnsembleParams &p, const ItemCatalog &catalog,
                                      std::size_t a, std::size_t b) {
  const std::size_t items[2] = {a, b};
  auto e = embed(p, catalog, items);
  DistanceBackprop bp(p, e);
  bp.add(0, 1, 1.0);
  return bp.finish();
}

// ---------------------------------------------------------------------------
// Flat coordinates. Order: per channel [W_o, b_o, W_s, b_s, W_t, b_t, lambda],
// then the ID table, then agg_h, then agg_b. Matrices are column-major.

struct ParamGroup {
  std::string name;
  Eigen::Index offset;
  Eigen::Index size;
};

inline std::vector<ParamGroup> param_groups(const SiameseEnsembleParams &p) {
  std::vector<ParamGroup> groups;
  Eigen::Index off = 0;
  for (std::size_t m = 0; m < p.channels.size(); ++m) {
    const auto &c = p.channels[m];
    const auto &t = c.tower;
    const Eigen::Index tower = t.W_o.size() + t.b_o.size() + t.W_s.size() + t.b_s.size() +
                               t.W_t.size() + t.b_t.size();
    groups.push_back({"channel" + std::to_string(m) + ".tower", off, tower});
    off += tower;
    groups.push_back({"channel" + std::to_string(m) + ".lambda", off, c.lambda_diag.size()});
    off += c.lambda_diag.size();
  }
  groups.push_back({"id_embed", off, p.id_embed.table.size()});
  off += p.id_embed.table.size();
  groups.push_back({"agg_h", off, p.agg_h.size()});
  off += p.agg_h.size();
  groups.push_back({"agg_b", off, 1});
  return groups;
}

namespace detail {
template <typename F> void visit_blocks(SiameseEnsembleParams &p, F &&f) {
  for (auto &c : p.channels) {
    f(c.tower.W_o.data(), c.tower.W_o.size(), false);
    f(c.tower.b_o.data(), c.tower.b_o.size(), false);
    f(c.tower.W_s.data(), c.tower.W_s.size(), false);
    f(c.tower.b_s.data(), c.tower.b_s.size(), false);
    f(c.tower.W_t.data(), c.tower.W_t.size(), false);
    f(c.tower.b_t.data(), c.tower.b_t.size(), false);
    f(c.lambda_diag.data(), c.lambda_diag.size(), true);
  }
  f(p.id_embed.table.data(), p.id_embed.table.size(), false);
  f(p.agg_h.data(), p.agg_h.size(), false);
  f(&p.agg_b, Eigen::Index{1}, false);
}
} // namespace detail

/// Raw parameter values, one entry per learnable scalar.
inline Eigen::VectorXd flatten(const SiameseEnsembleParams &p) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(count_parameters(p)));
  Eigen::Index off = 0;
  detail::visit_blocks(const_cast<SiameseEnsembleParams &>(p),
                       [&](double *data, Eigen::Index n, bool) {
                         out.segment(off, n) = Eigen::Map<const Eigen::VectorXd>(data, n);
                         off += n;
                       });
  return out;
}

inline void unflatten(SiameseEnsembleParams &p, const Eigen::VectorXd &x) {
  if (x.size() != static_cast<Eigen::Index>(count_parameters(p)))
    throw DimensionError("flat parameter vector has wrong length");
  Eigen::Index off = 0;
  detail::visit_blocks(p, [&](double *data, Eigen::Index n, bool) {
    Eigen::Map<Eigen::VectorXd>(data, n) = x.segment(off, n);
    off += n;
  });
}

/// Optimiser coordinates: like flatten(), except learned scales are stored
/// as softplus^{-1}(lambda) so that lambda stays nonnegative.
inline Eigen::VectorXd to_coordinates(const SiameseEnsembleParams &p) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(count_parameters(p)));
  Eigen::Index off = 0;
  const bool learned = p.lambda_mode == LambdaMode::learned;
  detail::visit_blocks(const_cast<SiameseEnsembleParams &>(p),
                       [&](double *data, Eigen::Index n, bool is_lambda) {
                         for (Eigen::Index k = 0; k < n; ++k)
                           out[off + k] = (is_lambda && learned)
                                              ? softplus_inverse(std::max(data[k], 1e-300))
                                              : data[k];
                         off += n;
                       });
  return out;
}

inline void from_coordinates(SiameseEnsembleParams &p, const Eigen::VectorXd &x) {
  Eigen::Index off = 0;
  const bool learned = p.lambda_mode == LambdaMode::learned;
  detail::visit_blocks(p, [&](double *data, Eigen::Index n, bool is_lambda) {
    for (Eigen::Index k = 0; k < n; ++k)
      data[k] = (is_lambda && learned) ? softplus(x[off + k]) : x[off + k];
    off += n;
  });
}

/// Chains a parameter-space gradient into coordinate space.
inline Eigen::VectorXd coordinate_gradient(const SiameseEnsembleParams &p,
                                           const SiameseEnsembleParams &grad) {
  Eigen::VectorXd g = flatten(grad);
  if (p.lambda_mode != LambdaMode::learned)
    return g;
  for (const auto &group : param_groups(p)) {
    if (group.name.find(".lambda") == std::string::npos)
      continue;
    const auto m = static_cast<std::size_t>(std::stoul(group.name.substr(7)));
    const auto &lam = p.channels[m].lambda_diag;
    for (Eigen::Index k = 0; k < group.size; ++k) {
      // dlambda/draw = sigmoid(raw) = 1 - exp(-lambda)
      g[group.offset + k] *= -std::expm1(-lam[k]);
    }
  }
  return g;
}

/// 1 for coordinates the current configuration allows to move.
inline std::vector<char> trainable_mask(const SiameseEnsembleParams &p) {
  std::vector<char> mask(count_parameters(p), 1);
  for (const auto &g : param_groups(p)) {
    bool frozen = false;
    if (g.name.find(".lambda") != std::string::npos)
      frozen = p.lambda_mode == LambdaMode::fixed_identity;
    else if (g.name == "agg_h" || g.name == "agg_b")
      frozen = !p.ensemble;
    if (frozen)
      std::fill(mask.begin() + g.offset, mask.begin() + g.offset + g.size, 0);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Contrastive loss

namespace diagnostics {
/// Incremented whenever contrastive_loss is called with no pairs.
inline std::atomic<std::size_t> empty_pair_warnings{0};
} // namespace diagnostics

struct LossAndGradient {
  double loss = 0.0;
  SiameseEnsembleParams grad;
};

namespace detail {
inline Embedded embed_pairs(const SiameseEnsembleParams &p, const ItemCatalog &catalog,
                            std::span<const PairExample> pairs,
                            std::vector<std::pair<Eigen::Index, Eigen::Index>> &local) {
  std::vector<Eigen::Index> slot(catalog.size(), -1);
  std::vector<std::size_t> items;
  for (const auto &pr : pairs) {
    for (auto it : {pr.a, pr.b}) {
      if (it >= catalog.size())
        throw DataError("pair references an item outside the catalog");
      if (slot[it] < 0) {
        slot[it] = static_cast<Eigen::Index>(items.size());
        items.push_back(it);
      }
    }
    local.emplace_back(slot[pr.a], slot[pr.b]);
  }
  return embed(p, catalog, items);
}
} // namespace detail

/// sum (1 - y) D + y max(0, tau - D), and its gradient.
inline LossAndGradient contrastive_loss_and_grad(const SiameseEnsembleParams &p,
                                                 const ItemCatalog &catalog,
                                                 std::span<const PairExample> pairs,
                                                 double margin) {
  if (!(margin > 0.0))
    throw ConfigError("contrastive margin must be positive");
  if (pairs.empty()) {
    ++diagnostics::empty_pair_warnings;
    return {0.0, zeros_like(p)};
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> local;
  auto e = detail::embed_pairs(p, catalog, pairs, local);
  DistanceBackprop bp(p, e);
  double loss = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = local[k];
    const double d = distance(p, e, i, j);
    if (pairs[k].label == 0) {
      loss += d;
      bp.add(i, j, 1.0);
    } else if (d < margin) {
      loss += margin - d;
      bp.add(i, j, -1.0);
    }
  }
  return {loss, bp.finish()};
}

inline double contrastive_loss(const SiameseEnsembleParams &p, const ItemCatalog &catalog,
                               std::span<const PairExample> pairs, double margin) {
  if (!(margin > 0.0))
    throw ConfigError("contrastive margin must be positive");
  if (pairs.empty()) {
    ++diagnostics::empty_pair_warnings;
    return 0.0;
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> local;
  auto e = detail::embed_pairs(p, catalog, pairs, local);
  double loss = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const double d = distance(p, e, local[k].first, local[k].second);
    loss += pairs[k].label == 0 ? d : std::max(0.0, margin - d);
  }
  return loss;
}

/// Returns a warning when the margin can never be reached by the bounded
/// ensemble distance; empty otherwise.
inline std::string margin_warning(const SiameseEnsembleParams &p, double margin) {
  if (p.ensemble && margin >= 1.0)
    return "contrastive margin >= 1 on the (0,1) ensemble distance: the hinge never switches off";
  return {};
}

struct BaselineConfig {
  int steps = 500;
  double learning_rate = 1e-2;
  double margin = 1.0;
  OptimizerKind optimizer = OptimizerKind::adaptive_moment;
};

struct BaselineResult {
  SiameseEnsembleParams params;
  std::vector<double> loss_trace; ///< loss before step 0, then after every step
};

/// Gradient descent on the mean contrastive loss over `pairs`.
inline BaselineResult train_siamese_baseline(const ItemCatalog &catalog,
                                             std::span<const PairExample> pairs,
                                             const SiameseEnsembleParams &init,
                                             const BaselineConfig &config) {
  if (pairs.empty())
    throw DataError("baseline training needs at least one pair");
  if (config.steps < 0 || config.learning_rate < 0.0)
    throw ConfigError("baseline steps and learning rate must be nonnegative");
  BaselineResult result{init, {}};
  if (config.steps == 0) {
    result.loss_trace.push_back(contrastive_loss(init, catalog, pairs, config.margin));
    return result;
  }
  auto &p = result.params;
  Eigen::VectorXd x = to_coordinates(p);
  const auto mask = trainable_mask(p);
  Optimizer opt(config.optimizer, config.learning_rate);
  const double scale = 1.0 / static_cast<double>(pairs.size());
  for (int step = 0; step <= config.steps; ++step) {
    auto lg = contrastive_loss_and_grad(p, catalog, pairs, config.margin);
    Eigen::VectorXd g = coordinate_gradient(p, lg.grad) * scale;
    if (!std::isfinite(lg.loss) || !g.allFinite())
      throw DivergenceError("baseline training diverged at step " + std::to_string(step), step);
    result.loss_trace.push_back(lg.loss);
    if (step == config.steps || config.learning_rate == 0.0)
      continue;
    opt.step(x, g, &mask);
    from_coordinates(p, x);
  }
  if (config.learning_rate == 0.0)
    result.params = init;
  return result;
}

} // namespace i2i
