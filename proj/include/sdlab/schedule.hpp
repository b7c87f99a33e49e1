#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

// Discrete forward-diffusion coefficients. Index convention: t in {0, ..., T},
// t = 0 is clean data (alpha_0 = 1, sigma_0 = 0), t = T is the noise end.

namespace sdlab {

enum class ScheduleKind { vp_linear, cosine };

struct ScheduleParams {
  double b_min = 1e-4;  // vp_linear per-step variance bounds
  double b_max = 0.02;
  double s = 0.008;  // cosine offset
};

class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleKind kind, int steps, std::vector<double> alpha, std::vector<double> sigma)
      : kind_(kind), steps_(steps), alpha_(std::move(alpha)), sigma_(std::move(sigma)) {
    check_invariants();
  }

  ScheduleKind kind() const { return kind_; }
  int steps() const { return steps_; }

  double alpha(int t) const {
    check_index(t);
    return alpha_[static_cast<std::size_t>(t)];
  }
  double sigma(int t) const {
    check_index(t);
    return sigma_[static_cast<std::size_t>(t)];
  }

  // Both supported kinds hold alpha^2 + sigma^2 = 1; the ancestral solver
  // relies on this and rejects anything else.
  bool variance_preserving() const { return true; }

 private:
  void check_index(int t) const {
    if (t < 0 || t > steps_) throw std::out_of_range("schedule: step index " + std::to_string(t) + " outside [0, T]");
  }

  void check_invariants() const {
    if (alpha_.size() != static_cast<std::size_t>(steps_ + 1) || sigma_.size() != alpha_.size())
      throw std::invalid_argument("schedule: coefficient arrays must have T+1 entries");
    if (alpha_[0] != 1.0 || sigma_[0] != 0.0)
      throw std::invalid_argument("schedule: data endpoint requires alpha_0 = 1, sigma_0 = 0");
    for (int t = 1; t <= steps_; ++t) {
      if (!(alpha_[t] < alpha_[t - 1])) throw std::invalid_argument("schedule: alpha_t must be strictly decreasing");
      if (!(sigma_[t] > sigma_[t - 1])) throw std::invalid_argument("schedule: sigma_t must be strictly increasing");
      if (std::abs(alpha_[t] * alpha_[t] + sigma_[t] * sigma_[t] - 1.0) > 1e-12)
        throw std::invalid_argument("schedule: alpha^2 + sigma^2 deviates from 1");
    }
  }

  ScheduleKind kind_;
  int steps_;
  std::vector<double> alpha_, sigma_;
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int steps, const ScheduleParams& params = {}) {
  if (steps < 2) throw std::invalid_argument("make_schedule: T must be at least 2");
  std::vector<double> alpha(static_cast<std::size_t>(steps) + 1), sigma(alpha.size());
  alpha[0] = 1.0;
  sigma[0] = 0.0;
  switch (kind) {
    case ScheduleKind::vp_linear: {
      if (!(params.b_min > 0.0 && params.b_min < params.b_max && params.b_max < 1.0))
        throw std::invalid_argument("make_schedule: vp_linear requires 0 < b_min < b_max < 1");
      double alpha_bar = 1.0;
      for (int t = 1; t <= steps; ++t) {
        const double b =
            params.b_min + (params.b_max - params.b_min) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
        alpha_bar *= 1.0 - b;
        alpha[t] = std::sqrt(alpha_bar);
        sigma[t] = std::sqrt(1.0 - alpha_bar);
      }
      break;
    }
    case ScheduleKind::cosine: {
      if (!(params.s > 0.0)) throw std::invalid_argument("make_schedule: cosine offset s must be positive");
      auto f = [&](double t) {
        const double angle = (t / steps + params.s) / (1.0 + params.s) * std::numbers::pi / 2.0;
        const double c = std::cos(angle);
        return c * c;
      };
      const double f0 = f(0.0);
      for (int t = 1; t <= steps; ++t) {
        const double alpha_bar = f(static_cast<double>(t)) / f0;
        alpha[t] = std::sqrt(alpha_bar);
        sigma[t] = std::sqrt(1.0 - alpha_bar);
      }
      break;
    }
  }
  return NoiseSchedule(kind, steps, std::move(alpha), std::move(sigma));
}

// log q_t(x_t | x) = log N(x_t; alpha_t x, sigma_t^2 I). Log domain throughout:
// the density underflows catastrophically at small sigma_t or large distances.
inline double log_kernel(const NoiseSchedule& s, int t, const Eigen::VectorXd& x_t, const Eigen::VectorXd& x) {
  if (t < 1 || t > s.steps()) throw std::domain_error("log_kernel: degenerate kernel, need 1 <= t <= T");
  if (x_t.size() != x.size()) throw std::invalid_argument("log_kernel: dimension mismatch");
  const double a = s.alpha(t);
  const double var = s.sigma(t) * s.sigma(t);
  const double d = static_cast<double>(x_t.size());
  const double sq = (x_t - a * x).squaredNorm();
  return -0.5 * d * std::log(2.0 * std::numbers::pi * var) - sq / (2.0 * var);
}

}  // namespace sdlab
