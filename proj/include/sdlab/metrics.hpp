#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "sdlab/field.hpp"
#include "sdlab/mixture.hpp"

// Sample-set evaluation: unsafe-region hit rate, safe-mode coverage, and the
// energy distance to a reference set.

namespace sdlab {

struct Classification {
  int component = 0;
  bool unsafe = false;
};

// Posterior argmax at t = 0: argmax_k w_k N(x; mu_k, Sigma_k), ties broken by
// the lowest component index.
inline Classification classify(const Vec& sample, const GaussianMixture& gm, const SafetyPartition& part) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < gm.size(); ++k) {
    const double score = gm.log_weight(k) + gm.component_log_density(k, sample);
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return {best, part.is_unsafe(best)};
}

// Two-sample energy statistic
//   2/(nm) sum |x_i - y_j| - 1/n^2 sum |x_i - x_j| - 1/m^2 sum |y_i - y_j|.
inline double energy_distance(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("energy_distance: empty sample set");
  // All three terms use the same full-square accumulation order, so identical
  // sample sets cancel to an exact 0.
  const auto mean_pairwise = [](const std::vector<Vec>& u, const std::vector<Vec>& v) {
    double total = 0.0;
    for (const Vec& x : u)
      for (const Vec& y : v) total += (x - y).norm();
    return total / (static_cast<double>(u.size()) * static_cast<double>(v.size()));
  };
  return 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
}

struct EvalReport {
  int n_samples = 0;
  double hit_rate = 0.0;                // unsafe count / n_samples
  std::vector<int> component_counts;    // sums to n_samples
  double coverage = 0.0;                // fraction of safe components with share >= floor
  double coverage_floor = 0.0;
  double energy_distance = 0.0;         // against the reference set
  double min_unsafe_distance = std::numeric_limits<double>::infinity();
};

// Aggregate classifications plus the energy distance against reference draws.
// The coverage floor defaults to a 0.5 / |safe components| share.
inline EvalReport evaluate(const std::vector<Vec>& samples, const GaussianMixture& gm, const SafetyPartition& part,
                           const std::vector<Vec>& reference) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
  if (reference.empty()) throw std::invalid_argument("evaluate: empty reference set");
  EvalReport report;
  report.n_samples = static_cast<int>(samples.size());
  report.component_counts.assign(static_cast<std::size_t>(gm.size()), 0);
  int unsafe_count = 0;
  for (const Vec& x : samples) {
    const Classification c = classify(x, gm, part);
    ++report.component_counts[static_cast<std::size_t>(c.component)];
    if (c.unsafe) ++unsafe_count;
    for (int k : part.unsafe_components) {
      const double dist = (x - gm.mean(k)).norm();
      if (dist < report.min_unsafe_distance) report.min_unsafe_distance = dist;
    }
  }
  report.hit_rate = static_cast<double>(unsafe_count) / static_cast<double>(report.n_samples);

  const int n_safe = gm.size() - static_cast<int>(part.unsafe_components.size());
  if (n_safe > 0) {
    report.coverage_floor = 0.5 / static_cast<double>(n_safe);
    int covered = 0;
    for (int k = 0; k < gm.size(); ++k) {
      if (part.is_unsafe(k)) continue;
      const double share = static_cast<double>(report.component_counts[static_cast<std::size_t>(k)]) /
                           static_cast<double>(report.n_samples);
      if (share >= report.coverage_floor) ++covered;
    }
    report.coverage = static_cast<double>(covered) / static_cast<double>(n_safe);
  }
  report.energy_distance = energy_distance(samples, reference);
  return report;
}

}  // namespace sdlab
