#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "sdlab/empirical.hpp"
#include "sdlab/field.hpp"
#include "sdlab/guidance.hpp"
#include "sdlab/rng.hpp"
#include "sdlab/schedule.hpp"

// Reverse-time solvers consuming x_0|t predictions, and the sampling driver
// with per-step diagnostics. Samples are embarrassingly parallel: every
// sample draws from its own RNG stream keyed by (seed, sample index), so the
// result is bitwise-independent of batch partitioning and thread count.

namespace sdlab {

// Deterministic update: eps_hat = (x_t - alpha_t x0) / sigma_t, then
// x_{t-1} = alpha_{t-1} x0 + sigma_{t-1} eps_hat. At t = 1 this lands on
// x0 exactly (sigma_0 = 0).
inline Vec ddim_step(const NoiseSchedule& s, int t, const Vec& x_t, const Vec& x0_pred) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("ddim_step: need 1 <= t <= T");
  const double sig = s.sigma(t);
  if (!(sig > 0.0)) throw std::domain_error("ddim_step: degenerate sigma_t");
  const Vec eps_hat = (x_t - s.alpha(t) * x0_pred) / sig;
  return s.alpha(t - 1) * x0_pred + s.sigma(t - 1) * eps_hat;
}

// Ancestral update from the forward posterior q(x_{t-1} | x_t, x_0) of a
// variance-preserving schedule:
//   mean = c1 x0 + c2 x_t,  c1 = (a_{t-1}^2 - a_t^2) / (a_{t-1} s_t^2),
//                           c2 = (a_t / a_{t-1}) s_{t-1}^2 / s_t^2,
//   var  = (1 - a_t^2 / a_{t-1}^2) s_{t-1}^2 / s_t^2.
// At t = 1 the variance is 0 and the update returns x0 exactly.
inline Vec ddpm_step(const NoiseSchedule& s, int t, const Vec& x_t, const Vec& x0_pred, const Vec& noise) {
  if (!s.variance_preserving()) throw std::invalid_argument("ddpm_step: requires a variance-preserving schedule");
  if (t < 1 || t > s.steps()) throw std::out_of_range("ddpm_step: need 1 <= t <= T");
  if (t == 1) return x0_pred;
  const double a_t = s.alpha(t), a_p = s.alpha(t - 1);
  const double s2_t = s.sigma(t) * s.sigma(t), s2_p = s.sigma(t - 1) * s.sigma(t - 1);
  const double beta = (a_p * a_p - a_t * a_t) / (a_p * a_p);
  const double c1 = a_p * beta / s2_t;
  const double c2 = (a_t / a_p) * s2_p / s2_t;
  const double sd = std::sqrt(beta * s2_p / s2_t);
  return c1 * x0_pred + c2 * x_t + sd * noise;
}

enum class SolverKind { ddpm, ddim };

// Which conditional combination drives x_0|t. `none` is the unconditional
// branch: the gated safe denoiser alone (or plain E_data when no weight
// evaluator is wired).
enum class ComposeMode { none, safree, sld };

struct WiredFields {
  DenoiserField data;                           // E_data
  std::optional<DenoiserField> unsafe_hat;      // required when beta is wired
  WeightFn beta;                                // raw weight estimate; may be null
  ComposeMode mode = ComposeMode::none;
  std::optional<DenoiserField> cond_modified;   // safree: filtered-condition denoiser
  std::optional<DenoiserField> cond_pos;        // sld: positive-condition denoiser
  std::optional<DenoiserField> neg_safe;        // sld: negative-condition denoiser
};

struct InitSpec {
  enum class Kind { standard_normal, fixed_points };
  Kind kind = Kind::standard_normal;
  std::vector<Vec> points;  // fixed_points only

  static InitSpec standard_normal() { return InitSpec{}; }
  static InitSpec fixed(std::vector<Vec> pts) {
    InitSpec s;
    s.kind = Kind::fixed_points;
    s.points = std::move(pts);
    return s;
  }
};

struct RunConfig {
  std::shared_ptr<const NoiseSchedule> schedule;
  SolverKind solver = SolverKind::ddpm;
  GuidanceConfig gc;
  double weight_scale = 1.0;  // multiplies the gated weight; ablation knob
  int n_samples = 1;
  std::uint64_t seed = 0;
  InitSpec init;
  bool record_trajectories = false;
  bool record_diagnostics = true;
  int threads = 0;  // 0 = hardware concurrency
};

struct StepDiagnostic {
  int step = 0;
  int sample = 0;
  double beta = 0.0;           // weight estimate after the critical-step gate
  bool gate_open = false;      // t in C and beta above the threshold
  double applied_weight = 0.0;  // weight_scale * eta * beta when the gate is open
};

struct RunResult {
  std::vector<Vec> samples;
  std::vector<std::vector<Vec>> trajectories;  // empty unless recorded; [i] = x_T ... x_0
  std::vector<StepDiagnostic> diagnostics;     // empty unless recorded; sample-major, t descending
};

namespace detail {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

struct StepOutcome {
  double beta = 0.0;
  bool gate_open = false;
  double weight = 0.0;
};

// One gated x_0|t prediction. Mirrors the gated safe denoiser, with the
// weight additionally scaled by weight_scale, then applies the configured
// conditional combination on top.
inline Vec predict_x0(const WiredFields& f, const RunConfig& rc, const Vec& x, int t, StepOutcome& out) {
  const GuidanceConfig& gc = rc.gc;
  out = StepOutcome{};
  if (f.beta) {
    const double b = gc.critical_steps.contains(t) ? f.beta(x, t) : 0.0;
    out.beta = b;
    out.gate_open = b > gc.beta_threshold.at(t);
    if (out.gate_open) out.weight = rc.weight_scale * gc.eta * b;
  }
  Vec e_data = f.data(x, t);
  Vec x0;
  if (out.weight != 0.0)
    x0 = e_data + out.weight * (e_data - (*f.unsafe_hat)(x, t));
  else
    x0 = e_data;
  switch (f.mode) {
    case ComposeMode::none:
      break;
    case ComposeMode::safree:
      if (gc.lambda != 0.0) x0 += gc.lambda * ((*f.cond_modified)(x, t) - e_data);
      break;
    case ComposeMode::sld: {
      const Vec p = (*f.cond_pos)(x, t);
      const Vec n = (*f.neg_safe)(x, t);
      const double mu = sld_mu(p, n, gc);
      x0 += gc.lambda * (p - e_data) - mu * (n - e_data);
      break;
    }
  }
  return x0;
}

}  // namespace detail

inline RunResult run_algorithm1(const RunConfig& rc, const WiredFields& fields, const UnsafeDataset* ds = nullptr) {
  if (!rc.schedule) throw std::invalid_argument("run_algorithm1: missing schedule");
  if (rc.n_samples < 1) throw std::invalid_argument("run_algorithm1: n_samples must be >= 1");
  if (!(rc.weight_scale >= 0.0)) throw std::invalid_argument("run_algorithm1: weight_scale must be nonnegative");
  rc.gc.validate();
  const int dim = fields.data.dim();
  if (fields.beta && !fields.unsafe_hat)
    throw std::invalid_argument("run_algorithm1: weight evaluator wired without an unsafe field");
  if (fields.unsafe_hat && fields.unsafe_hat->dim() != dim)
    throw std::invalid_argument("run_algorithm1: unsafe field dimension mismatch");
  if (fields.mode == ComposeMode::safree && !fields.cond_modified)
    throw std::invalid_argument("run_algorithm1: safree mode needs a modified-condition field");
  if (fields.mode == ComposeMode::sld && (!fields.cond_pos || !fields.neg_safe))
    throw std::invalid_argument("run_algorithm1: sld mode needs positive and negative condition fields");
  for (const auto* opt : {&fields.cond_modified, &fields.cond_pos, &fields.neg_safe})
    if (opt->has_value() && (*opt)->dim() != dim)
      throw std::invalid_argument("run_algorithm1: conditional field dimension mismatch");
  if (ds != nullptr && ds->dim() != dim) throw std::invalid_argument("run_algorithm1: dataset dimension mismatch");
  if (rc.init.kind == InitSpec::Kind::fixed_points) {
    if (static_cast<int>(rc.init.points.size()) != rc.n_samples)
      throw std::invalid_argument("run_algorithm1: fixed_points init must supply one point per sample");
    for (const Vec& p : rc.init.points)
      if (p.size() != dim) throw std::invalid_argument("run_algorithm1: init point dimension mismatch");
  }

  const NoiseSchedule& s = *rc.schedule;
  const int steps = s.steps();

  RunResult result;
  result.samples.assign(static_cast<std::size_t>(rc.n_samples), Vec());
  if (rc.record_trajectories) result.trajectories.assign(static_cast<std::size_t>(rc.n_samples), {});
  std::vector<std::vector<StepDiagnostic>> diag_by_sample;
  if (rc.record_diagnostics) diag_by_sample.assign(static_cast<std::size_t>(rc.n_samples), {});

  auto run_one = [&](int i) {
    RngStream rng(rc.seed, Stream::trajectory, static_cast<std::uint64_t>(i));
    Vec x = rc.init.kind == InitSpec::Kind::standard_normal ? rng.next_normal_vec(dim)
                                                            : rc.init.points[static_cast<std::size_t>(i)];
    auto* traj = rc.record_trajectories ? &result.trajectories[static_cast<std::size_t>(i)] : nullptr;
    auto* diag = rc.record_diagnostics ? &diag_by_sample[static_cast<std::size_t>(i)] : nullptr;
    if (traj) {
      traj->reserve(static_cast<std::size_t>(steps) + 1);
      traj->push_back(x);
    }
    if (diag) diag->reserve(static_cast<std::size_t>(steps));
    for (int t = steps; t >= 1; --t) {
      detail::StepOutcome outcome;
      const Vec x0 = detail::predict_x0(fields, rc, x, t, outcome);
      if (diag) diag->push_back({t, i, outcome.beta, outcome.gate_open, outcome.weight});
      if (rc.solver == SolverKind::ddim) {
        x = ddim_step(s, t, x, x0);
      } else {
        x = t == 1 ? ddpm_step(s, t, x, x0, Vec()) : ddpm_step(s, t, x, x0, rng.next_normal_vec(dim));
      }
      if (traj) traj->push_back(x);
    }
    result.samples[static_cast<std::size_t>(i)] = x;
  };

  const int workers = std::min(detail::resolve_threads(rc.threads), rc.n_samples);
  if (workers <= 1) {
    for (int i = 0; i < rc.n_samples; ++i) run_one(i);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= rc.n_samples) return;
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }

  if (rc.record_diagnostics) {
    std::size_t total = 0;
    for (const auto& d : diag_by_sample) total += d.size();
    result.diagnostics.reserve(total);
    for (const auto& d : diag_by_sample) result.diagnostics.insert(result.diagnostics.end(), d.begin(), d.end());
  }
  return result;
}

}  // namespace sdlab
