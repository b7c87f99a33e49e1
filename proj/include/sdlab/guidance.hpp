#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sdlab/empirical.hpp"
#include "sdlab/field.hpp"
#include "sdlab/mixture.hpp"

// Denoiser-composition algebra. Every operation here is pointwise affine in
// its input fields; configuration is immutable once built.

namespace sdlab {

// Toy-scale stand-in for a text condition: a subset of mixture components.
// The conditional denoiser under a ConditionSpec is the exact denoiser of the
// renormalized sub-mixture over the subset.
struct ConditionSpec {
  std::vector<int> component_subset;
  std::string label;

  ConditionSpec(std::vector<int> subset, std::string name) : component_subset(std::move(subset)), label(std::move(name)) {
    if (component_subset.empty()) throw std::invalid_argument("ConditionSpec: subset must be nonempty");
    std::sort(component_subset.begin(), component_subset.end());
    component_subset.erase(std::unique(component_subset.begin(), component_subset.end()), component_subset.end());
  }
};

// Concept filtering: drop unsafe components from a positive condition.
inline ConditionSpec filtered_condition(const ConditionSpec& cond, const SafetyPartition& part) {
  std::vector<int> kept;
  for (int k : cond.component_subset)
    if (!part.is_unsafe(k)) kept.push_back(k);
  if (kept.empty())
    throw std::invalid_argument("filtered_condition: filtering removed every component of '" + cond.label + "'");
  return ConditionSpec(std::move(kept), cond.label + "~filtered");
}

// Per-step gate threshold: a constant (possibly +infinity) or one value per step.
class ThresholdSchedule {
 public:
  ThresholdSchedule() = default;
  explicit ThresholdSchedule(double constant) : constant_(constant) {
    if (!(constant >= 0.0)) throw std::invalid_argument("ThresholdSchedule: threshold must be nonnegative");
  }
  explicit ThresholdSchedule(std::vector<double> per_step) : per_step_(std::move(per_step)) {
    for (double v : per_step_)
      if (!(v >= 0.0)) throw std::invalid_argument("ThresholdSchedule: thresholds must be nonnegative");
  }

  static ThresholdSchedule infinity() { return ThresholdSchedule(std::numeric_limits<double>::infinity()); }

  double at(int t) const {
    if (per_step_.empty()) return constant_;
    if (t < 0 || t >= static_cast<int>(per_step_.size()))
      throw std::out_of_range("ThresholdSchedule: step index outside table");
    return per_step_[static_cast<std::size_t>(t)];
  }

  bool is_infinite_everywhere() const {
    if (per_step_.empty()) return std::isinf(constant_);
    return std::all_of(per_step_.begin(), per_step_.end(), [](double v) { return std::isinf(v); });
  }

 private:
  double constant_ = 0.0;
  std::vector<double> per_step_;
};

// The subset of sampling steps where the safe term applies.
class CriticalSteps {
 public:
  CriticalSteps() = default;

  static CriticalSteps none() { return CriticalSteps(); }

  static CriticalSteps all(int steps) { return range(1, steps, steps); }

  static CriticalSteps range(int lo, int hi, int steps) {
    if (lo < 1 || hi > steps || lo > hi) throw std::invalid_argument("CriticalSteps: range outside {1, ..., T}");
    CriticalSteps c;
    c.lo_ = lo;
    c.hi_ = hi;
    return c;
  }

  // Default heuristic: the high-noise tail nearest t = T (22% of the steps,
  // e.g. {781, ..., 1000} at T = 1000).
  static CriticalSteps top_fraction(int steps, double fraction = 0.22) {
    const int count = std::clamp(static_cast<int>(std::lround(fraction * steps)), 1, steps);
    return range(steps - count + 1, steps, steps);
  }

  bool contains(int t) const { return lo_ <= t && t <= hi_; }
  bool empty() const { return lo_ > hi_; }
  int lo() const { return lo_; }
  int hi() const { return hi_; }

 private:
  int lo_ = 1;
  int hi_ = 0;  // empty by default
};

// Eta presets reported for the two combined modes.
inline constexpr double kEtaSafreeCombo = 0.33;
inline constexpr double kEtaSldCombo = 0.03;

struct GuidanceConfig {
  double lambda = 1.0;    // guidance scale
  double mu_gamma = 0.0;  // adaptivity coefficient of the negative weight
  double mu_max = 0.0;    // cap of the negative weight
  double eta = 1.0;       // safe-term scale
  ThresholdSchedule beta_threshold{0.0};
  CriticalSteps critical_steps;
  double sr_radius = 1.0;

  void validate() const {
    if (!(eta >= 0.0)) throw std::invalid_argument("GuidanceConfig: eta must be nonnegative");
    if (!(mu_gamma >= 0.0) || !(mu_max >= 0.0))
      throw std::invalid_argument("GuidanceConfig: negative-weight parameters must be nonnegative");
    if (!(sr_radius > 0.0)) throw std::invalid_argument("GuidanceConfig: sr_radius must be positive");
  }
};

namespace detail {
inline void require_same_dim(const DenoiserField& a, const DenoiserField& b, const char* op) {
  if (a.dim() != b.dim()) throw std::invalid_argument(std::string(op) + ": field dimensions disagree");
}
}  // namespace detail

// uncond + lambda (cond - uncond)
inline DenoiserField cfg(const DenoiserField& uncond, const DenoiserField& cond, double lambda) {
  detail::require_same_dim(uncond, cond, "cfg");
  auto fn = [uncond, cond, lambda](const Vec& x_t, int t) -> Vec {
    const Vec u = uncond(x_t, t);
    return u + lambda * (cond(x_t, t) - u);
  };
  return DenoiserField("cfg(" + cond.label() + ")", uncond.dim(), std::move(fn));
}

// uncond + lambda (pos - neg)
inline DenoiserField negative_guidance(const DenoiserField& uncond, const DenoiserField& pos,
                                       const DenoiserField& neg, double lambda) {
  detail::require_same_dim(uncond, pos, "negative_guidance");
  detail::require_same_dim(uncond, neg, "negative_guidance");
  auto fn = [uncond, pos, neg, lambda](const Vec& x_t, int t) -> Vec {
    return uncond(x_t, t) + lambda * (pos(x_t, t) - neg(x_t, t));
  };
  return DenoiserField("negative-guidance", uncond.dim(), std::move(fn));
}

// Adaptive negative weight: mu(x_t, t) = min(mu_max, gamma ||pos - neg_safe||).
inline double sld_mu(const Vec& pos_value, const Vec& neg_value, const GuidanceConfig& gc) {
  return std::min(gc.mu_max, gc.mu_gamma * (pos_value - neg_value).norm());
}

// uncond + lambda (pos - uncond) - mu(x_t, t) (neg_safe - uncond)
inline DenoiserField sld(const DenoiserField& uncond, const DenoiserField& pos, const DenoiserField& neg_safe,
                         double cfg_lambda, const GuidanceConfig& gc) {
  detail::require_same_dim(uncond, pos, "sld");
  detail::require_same_dim(uncond, neg_safe, "sld");
  auto fn = [uncond, pos, neg_safe, cfg_lambda, gc](const Vec& x_t, int t) -> Vec {
    const Vec u = uncond(x_t, t);
    const Vec p = pos(x_t, t);
    const Vec n = neg_safe(x_t, t);
    const double mu = sld_mu(p, n, gc);
    return u + cfg_lambda * (p - u) - mu * (n - u);
  };
  return DenoiserField("sld", uncond.dim(), std::move(fn));
}

// uncond + lambda (cond_modified - uncond), cond_modified being the
// conditional denoiser under a filtered condition.
inline DenoiserField safree_term(const DenoiserField& uncond, const DenoiserField& cond_modified, double lambda) {
  detail::require_same_dim(uncond, cond_modified, "safree_term");
  auto fn = [uncond, cond_modified, lambda](const Vec& x_t, int t) -> Vec {
    const Vec u = uncond(x_t, t);
    return u + lambda * (cond_modified(x_t, t) - u);
  };
  return DenoiserField("safree(" + cond_modified.label() + ")", uncond.dim(), std::move(fn));
}

// The gated safe denoiser:
//   b = beta(x_t, t) if t in C else 0;  b = b if b > threshold(t) else 0;
//   E_data + eta b (E_data - E_unsafe_hat).
// A closed gate returns E_data bitwise (the unsafe field is not evaluated).
inline DenoiserField safe_compose(const DenoiserField& e_data, const DenoiserField& e_unsafe_hat, WeightFn beta_eval,
                                  const GuidanceConfig& gc, std::string label = "safe") {
  detail::require_same_dim(e_data, e_unsafe_hat, "safe_compose");
  gc.validate();
  auto fn = [e_data, e_unsafe_hat, beta = std::move(beta_eval), gc](const Vec& x_t, int t) -> Vec {
    double b = gc.critical_steps.contains(t) ? beta(x_t, t) : 0.0;
    if (!(b > gc.beta_threshold.at(t))) b = 0.0;
    const double coef = gc.eta * b;
    if (coef == 0.0) return e_data(x_t, t);
    const Vec e = e_data(x_t, t);
    return e + coef * (e - e_unsafe_hat(x_t, t));
  };
  return DenoiserField(std::move(label), e_data.dim(), std::move(fn));
}

// E_safe + lambda (cond_modified - uncond)
inline DenoiserField combine_safree_ours(const DenoiserField& e_safe, const DenoiserField& uncond,
                                         const DenoiserField& cond_modified, double lambda) {
  detail::require_same_dim(e_safe, uncond, "combine_safree_ours");
  detail::require_same_dim(e_safe, cond_modified, "combine_safree_ours");
  auto fn = [e_safe, uncond, cond_modified, lambda](const Vec& x_t, int t) -> Vec {
    const Vec base = e_safe(x_t, t);
    if (lambda == 0.0) return base;
    return base + lambda * (cond_modified(x_t, t) - uncond(x_t, t));
  };
  return DenoiserField("safe+safree", e_safe.dim(), std::move(fn));
}

// E_safe + lambda (pos - uncond) - mu(x_t, t) (neg_safe - uncond)
inline DenoiserField combine_sld_ours(const DenoiserField& e_safe, const DenoiserField& uncond,
                                      const DenoiserField& pos, const DenoiserField& neg_safe, double lambda,
                                      const GuidanceConfig& gc) {
  detail::require_same_dim(e_safe, uncond, "combine_sld_ours");
  detail::require_same_dim(e_safe, pos, "combine_sld_ours");
  detail::require_same_dim(e_safe, neg_safe, "combine_sld_ours");
  auto fn = [e_safe, uncond, pos, neg_safe, lambda, gc](const Vec& x_t, int t) -> Vec {
    const Vec base = e_safe(x_t, t);
    const Vec u = uncond(x_t, t);
    const Vec p = pos(x_t, t);
    const Vec n = neg_safe(x_t, t);
    const double mu = sld_mu(p, n, gc);
    return base + lambda * (p - u) - mu * (n - u);
  };
  return DenoiserField("safe+sld", e_safe.dim(), std::move(fn));
}

// Repellency baseline:
//   E_data + sum_n ReLU(r / ||E_data - x^(n)|| - 1) (E_data - x^(n)).
// Points at distance >= r contribute nothing, so the field is the identity
// outside every radius-r ball. A prediction exactly coincident with a dataset
// point is pushed along +e1 by r (documented tie-break).
inline DenoiserField sparse_repellency(const DenoiserField& e_data, const UnsafeDataset& ds, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("sparse_repellency: radius must be positive");
  if (ds.dim() != e_data.dim()) throw std::invalid_argument("sparse_repellency: dataset dimension mismatch");
  auto points = std::make_shared<const Mat>(ds.points());
  auto fn = [e_data, points, r](const Vec& x_t, int t) -> Vec {
    const Vec e = e_data(x_t, t);
    Vec out = e;
    for (Eigen::Index n = 0; n < points->rows(); ++n) {
      const Vec diff = e - points->row(n).transpose();
      const double dist = diff.norm();
      if (dist == 0.0) {
        out[0] += r;
        continue;
      }
      const double gain = r / dist - 1.0;
      if (gain > 0.0) out += gain * diff;
    }
    return out;
  };
  return DenoiserField("sparse-repellency", e_data.dim(), std::move(fn));
}

}  // namespace sdlab
