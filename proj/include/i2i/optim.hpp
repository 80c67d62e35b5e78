#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "i2i/errors.hpp"

namespace i2i {

enum class OptimizerKind { plain_gradient, momentum, adaptive_moment };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "plain-gradient" || s == "sgd")
    return OptimizerKind::plain_gradient;
  if (s == "momentum")
    return OptimizerKind::momentum;
  if (s == "adaptive-moment" || s == "adam")
    return OptimizerKind::adaptive_moment;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

inline std::string to_string(OptimizerKind k) {
  switch (k) {
  case OptimizerKind::plain_gradient:
    return "plain-gradient";
  case OptimizerKind::momentum:
    return "momentum";
  case OptimizerKind::adaptive_moment:
    return "adaptive-moment";
  }
  return "unknown";
}

/// First-order optimiser over a flat coordinate vector. Entries with a zero in
/// `mask` are neither moved nor have their optimiser state touched.
class Optimizer {
public:
  Optimizer(OptimizerKind kind, double learning_rate, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Eigen::VectorXd &x, const Eigen::VectorXd &grad,
            const std::vector<char> *mask = nullptr) {
    if (m_.size() != x.size()) {
      m_ = Eigen::VectorXd::Zero(x.size());
      v_ = Eigen::VectorXd::Zero(x.size());
      count_ = Eigen::VectorXi::Zero(x.size());
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (mask && !(*mask)[static_cast<std::size_t>(i)])
        continue;
      const double g = grad[i];
      switch (kind_) {
      case OptimizerKind::plain_gradient:
        x[i] -= lr_ * g;
        break;
      case OptimizerKind::momentum:
        m_[i] = beta1_ * m_[i] + g;
        x[i] -= lr_ * m_[i];
        break;
      case OptimizerKind::adaptive_moment: {
        const int t = ++count_[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i] / (1.0 - std::pow(beta1_, t));
        const double vhat = v_[i] / (1.0 - std::pow(beta2_, t));
        x[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        break;
      }
      }
    }
  }

  double learning_rate() const { return lr_; }

private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  Eigen::VectorXd m_, v_;
  Eigen::VectorXi count_;
};

} // namespace i2i
