#pragma once

#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sdlab/field.hpp"
#include "sdlab/mixture.hpp"
#include "sdlab/schedule.hpp"

// Dataset-driven estimators: the empirical unsafe denoiser
//
//   E_hat[x | x_t] = sum_n x^(n) q_t(x_t | x^(n)) / sum_m q_t(x_t | x^(m)),
//
// its RBF-kernel substitution, and the unbiased weight estimate
// beta(x_t) = (1/N) sum_n q_t(x_t | x^(n)).

namespace sdlab {

class UnsafeDataset {
 public:
  explicit UnsafeDataset(Mat points) : points_(std::move(points)) {
    if (points_.rows() < 1) throw std::invalid_argument("UnsafeDataset: need at least one point");
    if (points_.cols() < 1) throw std::invalid_argument("UnsafeDataset: need at least one coordinate");
  }

  // One point per row, d columns, no header.
  static UnsafeDataset from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("UnsafeDataset: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
      if (!rows.empty() && row.size() != rows.front().size())
        throw std::runtime_error("UnsafeDataset: ragged row in " + path);
      rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("UnsafeDataset: no rows in " + path);
    Mat points(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index i = 0; i < points.rows(); ++i)
      for (Eigen::Index j = 0; j < points.cols(); ++j)
        points(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return UnsafeDataset(std::move(points));
  }

  static UnsafeDataset draw_from(const GaussianMixture& gm, int count, RngStream& rng) {
    if (count < 1) throw std::invalid_argument("UnsafeDataset: need at least one draw");
    Mat points(count, gm.dim());
    for (int i = 0; i < count; ++i) points.row(i) = gm.sample(rng).transpose();
    return UnsafeDataset(std::move(points));
  }

  int size() const { return static_cast<int>(points_.rows()); }
  int dim() const { return static_cast<int>(points_.cols()); }
  Vec point(int n) const { return points_.row(n).transpose(); }
  const Mat& points() const { return points_; }

 private:
  Mat points_;  // N x d
};

enum class KernelKind { diffusion_kernel, rbf };

// Bandwidths reported alongside the RBF substitution: 1.0 when paired with
// SLD-style guidance, 3.15 when paired with SAFREE-style guidance.
inline constexpr double kSldBandwidth = 1.0;
inline constexpr double kSafreeBandwidth = 3.15;

struct KernelConfig {
  KernelKind kind = KernelKind::diffusion_kernel;
  double bandwidth = kSldBandwidth;  // RBF sigma; ignored for diffusion_kernel
};

// K(x, x') = exp(-||x - x'||^2 / (2 sigma^2)), in (0, 1].
inline double rbf_kernel(const Vec& x, const Vec& x2, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("rbf_kernel: bandwidth must be positive");
  if (x.size() != x2.size()) throw std::invalid_argument("rbf_kernel: dimension mismatch");
  return std::exp(-(x - x2).squaredNorm() / (2.0 * bandwidth * bandwidth));
}

namespace detail {

// Unnormalized log weights of the dataset points at (x_t, t). The diffusion
// kind scores against alpha_t x^(n); the rbf kind scores the predicted-clean
// point x_t / alpha_t against the raw data so the bandwidth keeps one meaning
// across t.
inline std::vector<double> dataset_log_weights(const Mat& points, const NoiseSchedule& s, const KernelConfig& kc,
                                               const Vec& x_t, int t) {
  const std::size_t n = static_cast<std::size_t>(points.rows());
  std::vector<double> logits(n);
  if (kc.kind == KernelKind::diffusion_kernel) {
    if (t < 1 || t > s.steps())
      throw std::domain_error("empirical weights: degenerate kernel, need 1 <= t <= T");
    const double a = s.alpha(t);
    const double inv_two_var = 1.0 / (2.0 * s.sigma(t) * s.sigma(t));
    for (std::size_t i = 0; i < n; ++i)
      logits[i] = -(x_t - a * points.row(static_cast<Eigen::Index>(i)).transpose()).squaredNorm() * inv_two_var;
  } else {
    if (t < 0 || t > s.steps()) throw std::out_of_range("empirical weights: step index outside [0, T]");
    const double a = s.alpha(t);
    if (a == 0.0) throw std::domain_error("empirical weights: alpha_t = 0, predicted-clean point undefined");
    if (!(kc.bandwidth > 0.0)) throw std::invalid_argument("empirical weights: bandwidth must be positive");
    const Vec x0 = x_t / a;
    const double inv_two_bw2 = 1.0 / (2.0 * kc.bandwidth * kc.bandwidth);
    for (std::size_t i = 0; i < n; ++i)
      logits[i] = -(x0 - points.row(static_cast<Eigen::Index>(i)).transpose()).squaredNorm() * inv_two_bw2;
  }
  return logits;
}

}  // namespace detail

// Softmax weights over the dataset at (x_t, t); a probability vector for
// every input thanks to log-sum-exp normalization.
inline std::vector<double> empirical_weights(const UnsafeDataset& ds, const NoiseSchedule& s, const KernelConfig& kc,
                                             const Vec& x_t, int t) {
  std::vector<double> logits = detail::dataset_log_weights(ds.points(), s, kc, x_t, t);
  const double lse = log_sum_exp(logits);
  for (double& v : logits) v = std::exp(v - lse);
  return logits;
}

// Eq. of the weighted-sum unsafe denoiser: output is a convex combination of
// the dataset points.
inline DenoiserField empirical_unsafe_denoiser(const UnsafeDataset& ds, const NoiseSchedule& s,
                                               const KernelConfig& kc, std::string label = "empirical-unsafe") {
  auto points = std::make_shared<const Mat>(ds.points());
  auto schedule = std::make_shared<const NoiseSchedule>(s);
  auto fn = [points, schedule, kc](const Vec& x_t, int t) -> Vec {
    std::vector<double> logits = detail::dataset_log_weights(*points, *schedule, kc, x_t, t);
    const double lse = log_sum_exp(logits);
    Vec out = Vec::Zero(x_t.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      out += std::exp(logits[i] - lse) * points->row(static_cast<Eigen::Index>(i)).transpose();
    return out;
  };
  return DenoiserField(std::move(label), ds.dim(), std::move(fn));
}

// Unbiased estimate of the unnormalized weight: (1/N) sum_n q_t(x_t | x^(n)).
// Computed in log domain and exponentiated at the end; far-field underflow
// comes out as an exact 0.
inline double empirical_beta(const UnsafeDataset& ds, const NoiseSchedule& s, int t, const Vec& x_t) {
  if (t < 1 || t > s.steps()) throw std::domain_error("empirical_beta: degenerate kernel, need 1 <= t <= T");
  std::vector<double> terms(static_cast<std::size_t>(ds.size()));
  for (int n = 0; n < ds.size(); ++n) terms[static_cast<std::size_t>(n)] = log_kernel(s, t, x_t, ds.point(n));
  return std::exp(log_sum_exp(terms) - std::log(static_cast<double>(ds.size())));
}

// Kernel-kind dispatch for the weight estimate. The rbf kind averages kernel
// values in predicted-clean space; the missing normalizer is absorbed by the
// eta hyperparameter downstream.
inline WeightFn empirical_beta_evaluator(const UnsafeDataset& ds, const NoiseSchedule& s, const KernelConfig& kc) {
  auto points = std::make_shared<const Mat>(ds.points());
  auto schedule = std::make_shared<const NoiseSchedule>(s);
  if (kc.kind == KernelKind::diffusion_kernel) {
    return [points, schedule](const Vec& x_t, int t) {
      if (t < 1 || t > schedule->steps())
        throw std::domain_error("empirical_beta: degenerate kernel, need 1 <= t <= T");
      const std::size_t n = static_cast<std::size_t>(points->rows());
      const double a = schedule->alpha(t);
      const double var = schedule->sigma(t) * schedule->sigma(t);
      const double log_norm = -0.5 * static_cast<double>(x_t.size()) * std::log(2.0 * std::numbers::pi * var);
      std::vector<double> terms(n);
      for (std::size_t i = 0; i < n; ++i)
        terms[i] = log_norm - (x_t - a * points->row(static_cast<Eigen::Index>(i)).transpose()).squaredNorm() /
                                  (2.0 * var);
      return std::exp(log_sum_exp(terms) - std::log(static_cast<double>(n)));
    };
  }
  const double bandwidth = kc.bandwidth;
  return [points, schedule, bandwidth](const Vec& x_t, int t) {
    KernelConfig kc_local{KernelKind::rbf, bandwidth};
    std::vector<double> logits = detail::dataset_log_weights(*points, *schedule, kc_local, x_t, t);
    return std::exp(log_sum_exp(logits) - std::log(static_cast<double>(points->rows())));
  };
}

}  // namespace sdlab
