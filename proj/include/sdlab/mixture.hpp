#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sdlab/field.hpp"
#include "sdlab/rng.hpp"
#include "sdlab/schedule.hpp"

// Analytic ground truth: the data distribution as a Gaussian mixture, its
// safe/unsafe sub-mixture decomposition, diffused marginals, closed-form
// denoisers, and the exact likelihood-ratio weight
//
//   beta*(x_t) = Z_unsafe p_unsafe,t(x_t) / (Z_safe p_safe,t(x_t)).

namespace sdlab {

inline double log_sum_exp(const std::vector<double>& args) {
  const double m = *std::max_element(args.begin(), args.end());
  if (!std::isfinite(m)) return m;
  double sum = 0.0;
  for (double a : args) sum += std::exp(a - m);
  return m + std::log(sum);
}

class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<Vec> means, std::vector<Mat> covariances)
      : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
    validate();
    chol_.reserve(covs_.size());
    log_w_.reserve(weights_.size());
    for (const Mat& c : covs_) {
      Eigen::LLT<Mat> llt(c);
      if (llt.info() != Eigen::Success)
        throw std::invalid_argument("GaussianMixture: covariance is not positive-definite");
      chol_.push_back(std::move(llt));
    }
    for (double w : weights_) log_w_.push_back(std::log(w));
  }

  int dim() const { return static_cast<int>(means_[0].size()); }
  int size() const { return static_cast<int>(weights_.size()); }
  double weight(int k) const { return weights_[static_cast<std::size_t>(k)]; }
  double log_weight(int k) const { return log_w_[static_cast<std::size_t>(k)]; }
  const Vec& mean(int k) const { return means_[static_cast<std::size_t>(k)]; }
  const Mat& cov(int k) const { return covs_[static_cast<std::size_t>(k)]; }
  const std::vector<double>& weights() const { return weights_; }

  double component_log_density(int k, const Vec& x) const {
    const auto& llt = chol_[static_cast<std::size_t>(k)];
    const Vec z = llt.matrixL().solve(x - mean(k));
    double log_det_half = 0.0;
    const auto& l = llt.matrixLLT();
    for (int i = 0; i < l.rows(); ++i) log_det_half += std::log(l(i, i));
    return -0.5 * dim() * std::log(2.0 * std::numbers::pi) - log_det_half - 0.5 * z.squaredNorm();
  }

  double log_density(const Vec& x) const {
    std::vector<double> terms(static_cast<std::size_t>(size()));
    for (int k = 0; k < size(); ++k) terms[static_cast<std::size_t>(k)] = log_w_[k] + component_log_density(k, x);
    return log_sum_exp(terms);
  }

  Vec sample(RngStream& rng) const {
    const double u = rng.next_double();
    double acc = 0.0;
    int k = size() - 1;
    for (int i = 0; i < size(); ++i) {
      acc += weights_[static_cast<std::size_t>(i)];
      if (u < acc) {
        k = i;
        break;
      }
    }
    const Mat l = chol_[static_cast<std::size_t>(k)].matrixL();
    return mean(k) + l * rng.next_normal_vec(dim());
  }

 private:
  void validate() const {
    if (weights_.empty() || weights_.size() != means_.size() || weights_.size() != covs_.size())
      throw std::invalid_argument("GaussianMixture: weights/means/covariances size mismatch");
    double sum = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0)) throw std::invalid_argument("GaussianMixture: weights must be positive");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("GaussianMixture: weights must sum to 1");
    const Eigen::Index d = means_[0].size();
    for (const Vec& m : means_)
      if (m.size() != d) throw std::invalid_argument("GaussianMixture: mean dimension mismatch");
    for (const Mat& c : covs_) {
      if (c.rows() != d || c.cols() != d) throw std::invalid_argument("GaussianMixture: covariance shape mismatch");
      if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw std::invalid_argument("GaussianMixture: covariance must be symmetric");
    }
  }

  std::vector<double> weights_;
  std::vector<Vec> means_;
  std::vector<Mat> covs_;
  std::vector<Eigen::LLT<Mat>> chol_;
  std::vector<double> log_w_;
};

struct SafetyPartition {
  std::vector<int> unsafe_components;  // sorted, unique
  double z_safe = 1.0;
  double z_unsafe = 0.0;

  static SafetyPartition from_unsafe_set(const GaussianMixture& gm, std::vector<int> unsafe) {
    std::sort(unsafe.begin(), unsafe.end());
    unsafe.erase(std::unique(unsafe.begin(), unsafe.end()), unsafe.end());
    for (int k : unsafe)
      if (k < 0 || k >= gm.size()) throw std::invalid_argument("SafetyPartition: component index out of range");
    SafetyPartition p;
    p.unsafe_components = std::move(unsafe);
    p.z_unsafe = 0.0;
    for (int k : p.unsafe_components) p.z_unsafe += gm.weight(k);
    p.z_safe = 1.0 - p.z_unsafe;
    return p;
  }

  bool is_unsafe(int k) const {
    return std::binary_search(unsafe_components.begin(), unsafe_components.end(), k);
  }
};

// Renormalized restriction to a component subset.
inline GaussianMixture sub_mixture(const GaussianMixture& gm, const std::vector<int>& components) {
  if (components.empty()) throw std::invalid_argument("sub_mixture: empty component subset");
  double z = 0.0;
  for (int k : components) {
    if (k < 0 || k >= gm.size()) throw std::invalid_argument("sub_mixture: component index out of range");
    z += gm.weight(k);
  }
  std::vector<double> w;
  std::vector<Vec> mu;
  std::vector<Mat> cov;
  for (int k : components) {
    w.push_back(gm.weight(k) / z);
    mu.push_back(gm.mean(k));
    cov.push_back(gm.cov(k));
  }
  // Renormalize exactly so the constructor's sum-to-one check cannot trip on
  // accumulated rounding.
  double sum = 0.0;
  for (double v : w) sum += v;
  for (double& v : w) v /= sum;
  return GaussianMixture(std::move(w), std::move(mu), std::move(cov));
}

inline std::vector<int> safe_components(const GaussianMixture& gm, const SafetyPartition& part) {
  std::vector<int> out;
  for (int k = 0; k < gm.size(); ++k)
    if (!part.is_unsafe(k)) out.push_back(k);
  return out;
}

inline GaussianMixture safe_sub_mixture(const GaussianMixture& gm, const SafetyPartition& part) {
  return sub_mixture(gm, safe_components(gm, part));
}

inline GaussianMixture unsafe_sub_mixture(const GaussianMixture& gm, const SafetyPartition& part) {
  return sub_mixture(gm, part.unsafe_components);
}

// Marginal of the diffusion process at step t: components become
// N(alpha_t mu_k, alpha_t^2 Sigma_k + sigma_t^2 I), weights unchanged.
// t = 0 is the identity.
inline GaussianMixture diffuse(const GaussianMixture& gm, const NoiseSchedule& s, int t) {
  if (t < 0 || t > s.steps()) throw std::out_of_range("diffuse: step index outside [0, T]");
  const double a = s.alpha(t);
  const double var = s.sigma(t) * s.sigma(t);
  std::vector<double> w(gm.weights());
  std::vector<Vec> mu;
  std::vector<Mat> cov;
  const Mat eye = Mat::Identity(gm.dim(), gm.dim());
  for (int k = 0; k < gm.size(); ++k) {
    mu.push_back(a * gm.mean(k));
    cov.push_back(a * a * gm.cov(k) + var * eye);
  }
  return GaussianMixture(std::move(w), std::move(mu), std::move(cov));
}

namespace detail {

// Per-(component, step) factorizations of the diffused covariances,
// precomputed once so field evaluators are pure table lookups.
struct ComponentStep {
  Vec scaled_mean;    // alpha_t mu_k
  Mat chol_lower;     // L, L L^T = alpha_t^2 Sigma_k + sigma_t^2 I
  double log_norm;    // -d/2 log(2 pi) - sum_i log L_ii
  Mat posterior_map;  // alpha_t Sigma_k (alpha_t^2 Sigma_k + sigma_t^2 I)^{-1}
};

struct DiffusionTable {
  std::vector<double> log_w;
  std::vector<Vec> means;
  std::vector<std::vector<ComponentStep>> by_step;  // [t][k], t in 0..T
  int dim = 0;
  int steps = 0;

  DiffusionTable(const GaussianMixture& gm, const NoiseSchedule& s, bool with_posterior_map) {
    dim = gm.dim();
    steps = s.steps();
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    for (int k = 0; k < gm.size(); ++k) {
      log_w.push_back(gm.log_weight(k));
      means.push_back(gm.mean(k));
    }
    const Mat eye = Mat::Identity(dim, dim);
    by_step.resize(static_cast<std::size_t>(steps) + 1);
    for (int t = 0; t <= steps; ++t) {
      const double a = s.alpha(t);
      const double var = s.sigma(t) * s.sigma(t);
      auto& row = by_step[static_cast<std::size_t>(t)];
      row.reserve(static_cast<std::size_t>(gm.size()));
      for (int k = 0; k < gm.size(); ++k) {
        ComponentStep cs;
        cs.scaled_mean = a * gm.mean(k);
        const Mat c = a * a * gm.cov(k) + var * eye;
        Eigen::LLT<Mat> llt(c);
        if (llt.info() != Eigen::Success)
          throw std::runtime_error("DiffusionTable: diffused covariance lost positive-definiteness");
        cs.chol_lower = llt.matrixL();
        double log_det_half = 0.0;
        for (int i = 0; i < dim; ++i) log_det_half += std::log(cs.chol_lower(i, i));
        cs.log_norm = -0.5 * dim * log_2pi - log_det_half;
        if (with_posterior_map) cs.posterior_map = llt.solve(a * gm.cov(k)).transpose();
        row.push_back(std::move(cs));
      }
    }
  }

  double log_marginal(const Vec& x_t, int t) const {
    const auto& row = by_step[static_cast<std::size_t>(t)];
    std::vector<double> terms(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) {
      const Vec z = row[k].chol_lower.template triangularView<Eigen::Lower>().solve(x_t - row[k].scaled_mean);
      terms[k] = log_w[k] + row[k].log_norm - 0.5 * z.squaredNorm();
    }
    return log_sum_exp(terms);
  }
};

}  // namespace detail

// log p_t(x_t) of the diffused mixture, via log-sum-exp over components.
inline double log_marginal(const GaussianMixture& gm, const NoiseSchedule& s, int t, const Vec& x_t) {
  if (t < 0 || t > s.steps()) throw std::out_of_range("log_marginal: step index outside [0, T]");
  if (x_t.size() != gm.dim()) throw std::invalid_argument("log_marginal: dimension mismatch");
  const GaussianMixture diffused = diffuse(gm, s, t);
  return diffused.log_density(x_t);
}

// Precomputed marginal evaluator (same values as log_marginal, table-backed).
class MarginalEvaluator {
 public:
  MarginalEvaluator(const GaussianMixture& gm, const NoiseSchedule& s)
      : table_(std::make_shared<detail::DiffusionTable>(gm, s, /*with_posterior_map=*/false)) {}

  double operator()(const Vec& x_t, int t) const {
    if (t < 0 || t > table_->steps) throw std::out_of_range("MarginalEvaluator: step index outside [0, T]");
    if (x_t.size() != table_->dim) throw std::invalid_argument("MarginalEvaluator: dimension mismatch");
    return table_->log_marginal(x_t, t);
  }

 private:
  std::shared_ptr<const detail::DiffusionTable> table_;
};

// Closed-form posterior mean E[x | x_t] of the mixture:
//   E[x | x_t] = sum_k r_k(x_t) m_k(x_t),
//   m_k(x_t)   = mu_k + alpha_t Sigma_k (alpha_t^2 Sigma_k + sigma_t^2 I)^{-1} (x_t - alpha_t mu_k),
// with r_k the posterior responsibilities of the diffused components.
// At t = 0 the posterior is a point mass, so the field returns x_t unchanged.
inline DenoiserField exact_denoiser(const GaussianMixture& gm, const NoiseSchedule& s, std::string label = "exact") {
  auto table = std::make_shared<const detail::DiffusionTable>(gm, s, /*with_posterior_map=*/true);
  const int dim = gm.dim();
  auto fn = [table](const Vec& x_t, int t) -> Vec {
    if (t < 0 || t > table->steps) throw std::out_of_range("exact_denoiser: step index outside [0, T]");
    if (t == 0) return x_t;
    const auto& row = table->by_step[static_cast<std::size_t>(t)];
    const std::size_t n = row.size();
    std::vector<double> logp(n);
    std::vector<Vec> post_mean(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Vec r = x_t - row[k].scaled_mean;
      const Vec z = row[k].chol_lower.template triangularView<Eigen::Lower>().solve(r);
      logp[k] = table->log_w[k] + row[k].log_norm - 0.5 * z.squaredNorm();
      post_mean[k] = table->means[k] + row[k].posterior_map * r;
    }
    const double lse = log_sum_exp(logp);
    Vec out = Vec::Zero(x_t.size());
    for (std::size_t k = 0; k < n; ++k) out += std::exp(logp[k] - lse) * post_mean[k];
    return out;
  };
  return DenoiserField(std::move(label), dim, std::move(fn));
}

// Exact weight of the safe-denoiser identity, evaluated as exp of a log-ratio
// over the normalized sub-mixture marginals. Empty unsafe set gives 0.
inline WeightFn exact_beta_star_evaluator(const GaussianMixture& gm, const SafetyPartition& part,
                                          const NoiseSchedule& s) {
  if (!(part.z_safe > 0.0)) throw std::invalid_argument("exact_beta_star: undefined partition, Z_safe = 0");
  if (part.unsafe_components.empty()) {
    return [](const Vec&, int) { return 0.0; };
  }
  const double log_ratio_z = std::log(part.z_unsafe) - std::log(part.z_safe);
  MarginalEvaluator safe_marginal(safe_sub_mixture(gm, part), s);
  MarginalEvaluator unsafe_marginal(unsafe_sub_mixture(gm, part), s);
  return [log_ratio_z, safe_marginal, unsafe_marginal](const Vec& x_t, int t) {
    return std::exp(log_ratio_z + unsafe_marginal(x_t, t) - safe_marginal(x_t, t));
  };
}

inline double exact_beta_star(const GaussianMixture& gm, const SafetyPartition& part, const NoiseSchedule& s, int t,
                              const Vec& x_t) {
  return exact_beta_star_evaluator(gm, part, s)(x_t, t);
}

// The safe-denoiser identity: E_data + beta*(x_t) (E_data - E_unsafe).
// With the exact weight this reproduces the safe sub-mixture denoiser.
inline DenoiserField compose_safe_exact(const DenoiserField& e_data, const DenoiserField& e_unsafe, WeightFn beta_star,
                                        std::string label = "safe-exact") {
  if (e_data.dim() != e_unsafe.dim())
    throw std::invalid_argument("compose_safe_exact: field dimensions disagree");
  auto fn = [e_data, e_unsafe, beta = std::move(beta_star)](const Vec& x_t, int t) -> Vec {
    const double b = beta(x_t, t);
    if (b == 0.0) return e_data(x_t, t);
    const Vec e = e_data(x_t, t);
    return e + b * (e - e_unsafe(x_t, t));
  };
  return DenoiserField(std::move(label), e_data.dim(), std::move(fn));
}

}  // namespace sdlab
