#pragma once

// Per-user adaptation of the aggregation weights w = (h, b) with the channel
// towers frozen: local GP losses, the descent map kappa_u, the post-update
// objective, update Jacobians (exact and Taylor) and the meta-gradient loop.

#include <cmath>
#include <concepts>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"
#include "i2i/gp.hpp"
#include "i2i/siamese.hpp"

namespace i2i {

/// Anything with a scalar value and gradient over the aggregation vector.
template <typename L>
concept LocalLoss = requires(const L &l, const Eigen::VectorXd &w) {
  { l.value(w) } -> std::convertible_to<double>;
  { l.gradient(w) } -> std::convertible_to<Eigen::VectorXd>;
};

struct UserContext {
  std::string user;
  std::vector<std::size_t> items;
  Eigen::VectorXd r_u;
  double weight = 1.0;
  std::vector<Eigen::MatrixXd> components; ///< per-component distances over `items`
};

/// Caches the frozen per-component distances for the user's items and
/// centres the ratings.
inline UserContext make_user_context(std::string user, std::vector<std::size_t> items,
                                     const Eigen::VectorXd &ratings,
                                     const SiameseEnsembleParams &psi, const ItemCatalog &catalog,
                                     double weight = 1.0) {
  if (items.size() < 2)
    throw DataError("user " + user + " has fewer than 2 rated items");
  if (ratings.size() != static_cast<Eigen::Index>(items.size()))
    throw DimensionError("user " + user + ": ratings do not match items");
  if (!psi.ensemble)
    throw ConfigError("personalization needs the ensemble aggregator");
  UserContext u;
  u.user = std::move(user);
  u.r_u = ratings.array() - ratings.mean();
  auto e = embed(psi, catalog, items);
  u.components = component_matrices(psi, e, e, true);
  u.items = std::move(items);
  u.weight = weight;
  return u;
}

/// The user's GP negative log likelihood as a function of w, with the kernel
/// exp(-sigmoid(sum_m h_m C_m + b) / 2) on the cached components.
class UserLoss {
public:
  UserLoss(const UserContext &u, double noise) : u_(&u), noise_(noise) {
    if (!(noise > 0.0))
      throw DomainError("noise variance must be positive");
  }

  const UserContext &user() const { return *u_; }
  double noise() const { return noise_; }

  Eigen::MatrixXd distances(const Eigen::VectorXd &w) const {
    check(w);
    const auto P = static_cast<Eigen::Index>(u_->components.size());
    Eigen::MatrixXd s = Eigen::MatrixXd::Constant(n(), n(), w[P]);
    for (Eigen::Index m = 0; m < P; ++m)
      s += w[m] * u_->components[static_cast<std::size_t>(m)];
    return s.unaryExpr([](double v) { return sigmoid(v); });
  }

  double value(const Eigen::VectorXd &w) const {
    const Eigen::MatrixXd K = kernel_from_distance(distances(w));
    Eigen::MatrixXd A = K;
    A.diagonal().array() += noise_;
    auto jc = cholesky_with_jitter(A);
    const double logdet = 2.0 * jc.llt.matrixLLT().diagonal().array().log().sum();
    return 0.5 * logdet + 0.5 * u_->r_u.dot(jc.llt.solve(u_->r_u));
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd &w) const {
    const Eigen::MatrixXd D = distances(w);
    const Eigen::MatrixXd K = kernel_from_distance(D);
    Eigen::MatrixXd A = K;
    A.diagonal().array() += noise_;
    auto jc = cholesky_with_jitter(A);
    const Eigen::VectorXd alpha = jc.llt.solve(u_->r_u);
    const Eigen::MatrixXd Ainv = jc.llt.solve(Eigen::MatrixXd::Identity(n(), n()));
    // d nll / d s_ij over the full (ordered) matrix.
    const Eigen::MatrixXd G = (0.5 * (Ainv - alpha * alpha.transpose())).array() * (-0.5 * K.array()) *
                              D.array() * (1.0 - D.array());
    const auto P = static_cast<Eigen::Index>(u_->components.size());
    Eigen::VectorXd g(P + 1);
    for (Eigen::Index m = 0; m < P; ++m)
      g[m] = (G.array() * u_->components[static_cast<std::size_t>(m)].array()).sum();
    g[P] = G.sum();
    return g;
  }

private:
  Eigen::Index n() const { return static_cast<Eigen::Index>(u_->items.size()); }
  void check(const Eigen::VectorXd &w) const {
    if (w.size() != static_cast<Eigen::Index>(u_->components.size()) + 1)
      throw DimensionError("aggregation vector has wrong length for user " + u_->user);
  }

  const UserContext *u_;
  double noise_;
};

enum class JacobianMode { exact_one_step, taylor };

inline JacobianMode parse_jacobian_mode(std::string_view s) {
  if (s == "exact-one-step" || s == "exact")
    return JacobianMode::exact_one_step;
  if (s == "taylor")
    return JacobianMode::taylor;
  throw ConfigError("unknown jacobian mode '" + std::string(s) + "'");
}

inline std::string to_string(JacobianMode m) {
  return m == JacobianMode::exact_one_step ? "exact-one-step" : "taylor";
}

struct MetaConfig {
  double inner_rate = 0.1;
  int inner_steps = 1;
  double outer_rate = 0.05;
  int outer_steps = 50;
  JacobianMode jacobian_mode = JacobianMode::exact_one_step;
  std::uint64_t seed = 0;
};

inline void validate(const MetaConfig &c) {
  if (!(c.inner_rate >= 0.0))
    throw ConfigError("inner rate must be nonnegative");
  if (c.inner_steps < 1)
    throw ConfigError("inner steps must be >= 1");
  if (!(c.outer_rate > 0.0))
    throw ConfigError("outer rate must be positive");
  if (c.outer_steps < 0)
    throw ConfigError("outer steps must be nonnegative");
  if (c.jacobian_mode == JacobianMode::exact_one_step && c.inner_steps != 1)
    throw ConfigError("exact-one-step Jacobian requires inner_steps = 1");
}

inline constexpr double kHessianStep = 1e-5;

template <LocalLoss L>
double local_loss(const L &loss, const Eigen::VectorXd &w) {
  return loss.value(w);
}

struct LocalPath {
  Eigen::VectorXd w;
  std::vector<double> rates; ///< step size actually taken at each step
};

/// `steps` descent steps of size `rate` on the local loss. A step that
/// raises the loss, or lands where the user's Gram cannot be factorised, is
/// halved until it does not; after kMaxRetreats halvings it is dropped.
template <LocalLoss L>
LocalPath local_path(const L &loss, const Eigen::VectorXd &w, double rate, int steps,
                     const std::string &label = "") {
  LocalPath out{w, {}};
  if (rate == 0.0) {
    out.rates.assign(static_cast<std::size_t>(steps), 0.0);
    return out;
  }
  double current = loss.value(out.w);
  for (int k = 0; k < steps; ++k) {
    const Eigen::VectorXd g = loss.gradient(out.w);
    if (!g.allFinite())
      throw DivergenceError("non-finite local gradient" + (label.empty() ? "" : " for user " + label), k);
    double t = rate;
    for (int retreat = 0;; ++retreat) {
      if (retreat > kMaxRetreats) {
        t = 0.0;
        break;
      }
      try {
        const double v = loss.value(out.w - t * g);
        if (v <= current) {
          current = v;
          break;
        }
      } catch (const NumericalError &) {
      }
      t *= 0.5;
    }
    out.w -= t * g;
    out.rates.push_back(t);
  }
  return out;
}

/// kappa(w), the end point of local_path().
template <LocalLoss L>
Eigen::VectorXd local_update(const L &loss, const Eigen::VectorXd &w, double rate, int steps,
                             const std::string &label = "") {
  return local_path(loss, w, rate, steps, label).w;
}

/// Symmetrised central-difference Hessian of the local loss.
template <LocalLoss L>
Eigen::MatrixXd local_hessian(const L &loss, const Eigen::VectorXd &w, double step = kHessianStep) {
  const auto d = w.size();
  Eigen::MatrixXd H(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd wp = w, wm = w;
    wp[j] += step;
    wm[j] -= step;
    H.col(j) = (loss.gradient(wp) - loss.gradient(wm)) / (2.0 * step);
  }
  if (!H.allFinite())
    throw NumericalError("Hessian of the local loss is not finite");
  return 0.5 * (H + H.transpose());
}

namespace detail {
template <LocalLoss L>
Eigen::MatrixXd update_map_jacobian(const L &loss, const Eigen::VectorXd &w, double rate, int steps,
                                    double h) {
  const auto d = w.size();
  Eigen::MatrixXd J(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd wp = w, wm = w;
    wp[j] += h;
    wm[j] -= h;
    J.col(j) = (local_update(loss, wp, rate, steps) - local_update(loss, wm, rate, steps)) / (2.0 * h);
  }
  return J;
}
} // namespace detail

/// D_w kappa(w). Exact mode is I - t * H(w) with t the step size local_path()
/// takes from w, which equals `rate` unless the step was halved; Taylor mode
/// builds row i as grad kappa_i(0) + Hess kappa_i(0) w from finite
/// differences of kappa at the origin.
template <LocalLoss L>
Eigen::MatrixXd update_jacobian(const L &loss, const Eigen::VectorXd &w, double rate, int steps,
                                JacobianMode mode) {
  const auto d = w.size();
  if (mode == JacobianMode::exact_one_step) {
    if (steps != 1)
      throw ConfigError("exact-one-step Jacobian requires inner_steps = 1");
    const double t = rate == 0.0 ? 0.0 : local_path(loss, w, rate, 1).rates.front();
    if (t == 0.0)
      return Eigen::MatrixXd::Identity(d, d);
    return Eigen::MatrixXd::Identity(d, d) - t * local_hessian(loss, w);
  }
  if (rate == 0.0)
    return Eigen::MatrixXd::Identity(d, d);
  const double h1 = kHessianStep, h2 = 1e-4;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(d);
  const Eigen::MatrixXd J0 = detail::update_map_jacobian(loss, zero, rate, steps, h1);
  Eigen::MatrixXd out = J0;
  // Third index k: derivative of J0 along e_k.
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::VectorXd ep = zero, em = zero;
    ep[k] = h2;
    em[k] = -h2;
    const Eigen::MatrixXd dJ =
        (detail::update_map_jacobian(loss, ep, rate, steps, h1) -
         detail::update_map_jacobian(loss, em, rate, steps, h1)) /
        (2.0 * h2);
    out += dJ * w[k];
  }
  if (!out.allFinite())
    throw NumericalError("Taylor Jacobian is not finite");
  return out;
}

/// Weighted mean of each user's loss after their local update.
template <LocalLoss L>
double post_update_loss(const std::vector<L> &losses, const std::vector<double> &weights,
                        const Eigen::VectorXd &w, double rate, int steps) {
  if (losses.empty())
    throw DataError("post-update loss needs at least one user");
  double total = 0.0, wsum = 0.0;
  for (std::size_t u = 0; u < losses.size(); ++u) {
    total += weights[u] * losses[u].value(local_update(losses[u], w, rate, steps));
    wsum += weights[u];
  }
  return total / wsum;
}

/// Weighted mean over users of J_u(w)^T grad l_u(kappa_u(w)).
template <LocalLoss L>
Eigen::VectorXd meta_gradient(const std::vector<L> &losses, const std::vector<double> &weights,
                              const Eigen::VectorXd &w, const MetaConfig &config) {
  if (losses.empty())
    throw DataError("meta-gradient needs at least one user");
  Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
  double wsum = 0.0;
  for (std::size_t u = 0; u < losses.size(); ++u) {
    const Eigen::VectorXd wu = local_update(losses[u], w, config.inner_rate, config.inner_steps);
    const Eigen::MatrixXd J =
        update_jacobian(losses[u], w, config.inner_rate, config.inner_steps, config.jacobian_mode);
    g += weights[u] * (J.transpose() * losses[u].gradient(wu));
    wsum += weights[u];
  }
  return g / wsum;
}

struct MetaResult {
  Eigen::VectorXd w;
  std::vector<double> loss_trace; ///< post-update loss before each outer step and at the end
};

/// Outer descent on the post-update loss. A step that raises it, or reaches
/// a point where some user's Gram cannot be factorised, is halved; when
/// kMaxRetreats halvings do not help the loop stops early.
template <LocalLoss L>
MetaResult fit_meta(const std::vector<L> &losses, const std::vector<double> &weights,
                    const Eigen::VectorXd &w_init, const MetaConfig &config) {
  validate(config);
  MetaResult out{w_init, {}};
  double v = post_update_loss(losses, weights, out.w, config.inner_rate, config.inner_steps);
  for (int step = 0;; ++step) {
    if (!std::isfinite(v))
      throw DivergenceError("meta-training diverged at outer step " + std::to_string(step), step);
    out.loss_trace.push_back(v);
    if (step == config.outer_steps)
      break;
    const Eigen::VectorXd g = meta_gradient(losses, weights, out.w, config);
    if (!g.allFinite())
      throw DivergenceError("non-finite meta-gradient at outer step " + std::to_string(step), step);
    double t = config.outer_rate;
    bool moved = false;
    for (int retreat = 0; retreat <= kMaxRetreats && !moved; ++retreat, t *= 0.5) {
      const Eigen::VectorXd cand = out.w - t * g;
      try {
        const double next = post_update_loss(losses, weights, cand, config.inner_rate, config.inner_steps);
        if (next <= v) {
          out.w = cand;
          v = next;
          moved = true;
        }
      } catch (const NumericalError &) {
      }
    }
    if (!moved)
      break;
  }
  return out;
}

/// Deployment-time adaptation: kappa_u(w) with the configured rate and steps.
template <LocalLoss L>
Eigen::VectorXd personalize_user(const L &loss, const Eigen::VectorXd &w, const MetaConfig &config,
                                 const std::string &label = "") {
  return local_update(loss, w, config.inner_rate, config.inner_steps, label);
}

// ---------------------------------------------------------------------------
// Building user contexts from a log.

struct UserSelection {
  std::size_t min_items = 2;
  std::size_t max_items = 200; ///< most recent items kept when a user has more
};

/// One context per user with >= min_items distinct train items. Repeated
/// ratings of an item are averaged. Users come back in id order.
inline std::vector<UserContext> build_user_contexts(const InteractionLog &log,
                                                    const ItemCatalog &catalog,
                                                    const std::vector<std::size_t> &train_items,
                                                    const SiameseEnsembleParams &psi,
                                                    const UserSelection &sel = {}) {
  std::vector<char> is_train(catalog.size(), 0);
  for (auto i : train_items)
    is_train[i] = 1;
  std::vector<UserContext> out;
  for (const auto &[user, history] : user_histories(log, catalog)) {
    std::map<std::size_t, std::pair<double, int>> sums;
    std::map<std::size_t, std::int64_t> last_seen;
    for (const auto &ev : history) {
      if (!is_train[ev.item])
        continue;
      auto &s = sums[ev.item];
      s.first += ev.rating;
      s.second += 1;
      last_seen[ev.item] = ev.timestamp;
    }
    if (sums.size() < sel.min_items)
      continue;
    std::vector<std::size_t> items;
    for (const auto &[item, _] : sums)
      items.push_back(item);
    if (items.size() > sel.max_items) {
      std::stable_sort(items.begin(), items.end(), [&](std::size_t a, std::size_t b) {
        return last_seen[a] > last_seen[b];
      });
      items.resize(sel.max_items);
      std::sort(items.begin(), items.end());
    }
    Eigen::VectorXd r(static_cast<Eigen::Index>(items.size()));
    for (std::size_t k = 0; k < items.size(); ++k)
      r[static_cast<Eigen::Index>(k)] = sums[items[k]].first / sums[items[k]].second;
    out.push_back(make_user_context(user, std::move(items), r, psi, catalog));
  }
  return out;
}

inline std::vector<UserLoss> make_user_losses(const std::vector<UserContext> &users, double noise) {
  std::vector<UserLoss> losses;
  for (const auto &u : users)
    losses.emplace_back(u, noise);
  return losses;
}

inline std::vector<double> user_weights(const std::vector<UserContext> &users) {
  std::vector<double> w;
  for (const auto &u : users)
    w.push_back(u.weight);
  return w;
}

inline void write_user_weights_csv(const std::string &path,
                                   const std::vector<std::pair<std::string, Eigen::VectorXd>> &rows) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write user weights to " + path);
  out.precision(17);
  const auto p = rows.empty() ? 0 : rows.front().second.size() - 1;
  out << "user_id";
  for (Eigen::Index m = 1; m <= p; ++m)
    out << ",h_" << m;
  out << ",b\n";
  for (const auto &[user, w] : rows) {
    out << user;
    for (Eigen::Index k = 0; k < w.size(); ++k)
      out << ',' << w[k];
    out << '\n';
  }
}

inline std::vector<std::pair<std::string, Eigen::VectorXd>> read_user_weights_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open user weights " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::string, Eigen::VectorXd>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty())
      continue;
    auto fields = detail::split_csv(line);
    if (fields.size() < 2)
      throw ParseError(path + ":" + std::to_string(lineno) + ": too few fields", lineno);
    Eigen::VectorXd w(static_cast<Eigen::Index>(fields.size() - 1));
    for (std::size_t k = 1; k < fields.size(); ++k)
      if (!detail::parse_number(fields[k], w[static_cast<Eigen::Index>(k - 1)]))
        throw ParseError(path + ":" + std::to_string(lineno) + ": bad number", lineno);
    rows.emplace_back(std::string(detail::trim(fields[0])), w);
  }
  return rows;
}

} // namespace i2i
