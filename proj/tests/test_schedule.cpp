#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "sdlab/rng.hpp"
#include "sdlab/schedule.hpp"
#include "test_helpers.hpp"

using namespace sdlab;
using testing_support::vec;

namespace {

// Hand-built VP schedule with alpha_1 = 0.8, sigma_1 = 0.6.
NoiseSchedule toy_schedule() {
  return NoiseSchedule(ScheduleKind::vp_linear, 2, {1.0, 0.8, 0.5}, {0.0, 0.6, std::sqrt(0.75)});
}

}  // namespace

TEST_CASE("vp_linear cumulative product matches an independent recomputation", "[schedule]") {
  const int T = 1000;
  const double b_min = 1e-4, b_max = 0.02;
  const auto s = make_schedule(ScheduleKind::vp_linear, T, {.b_min = b_min, .b_max = b_max});

  double alpha_bar = 1.0;
  for (int t = 1; t <= T; ++t) {
    alpha_bar *= 1.0 - (b_min + (b_max - b_min) * (t - 1) / double(T - 1));
    REQUIRE(s.alpha(t) == Catch::Approx(std::sqrt(alpha_bar)).epsilon(1e-14));
  }
  // Terminal signal is essentially gone.
  REQUIRE(alpha_bar < 5e-5);
  REQUIRE(s.alpha(T) * s.alpha(T) < 5e-5);
}

TEST_CASE("schedule endpoints and monotonicity", "[schedule]") {
  for (const auto kind : {ScheduleKind::vp_linear, ScheduleKind::cosine}) {
    for (const int T : {2, 10, 250}) {
      const auto s = make_schedule(kind, T);
      REQUIRE(s.alpha(0) == 1.0);
      REQUIRE(s.sigma(0) == 0.0);
      for (int t = 1; t <= T; ++t) {
        REQUIRE(s.alpha(t) < s.alpha(t - 1));
        REQUIRE(s.sigma(t) > s.sigma(t - 1));
        REQUIRE(std::abs(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1.0) <= 1e-12);
      }
      // Signal-to-noise ratio strictly decreasing.
      for (int t = 2; t <= T; ++t) {
        const auto snr = [&](int u) { return s.alpha(u) * s.alpha(u) / (s.sigma(u) * s.sigma(u)); };
        REQUIRE(snr(t) < snr(t - 1));
      }
    }
  }
}

TEST_CASE("make_schedule rejects invalid parameters", "[schedule]") {
  REQUIRE_THROWS_AS(make_schedule(ScheduleKind::vp_linear, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(ScheduleKind::vp_linear, 10, {.b_min = 0.02, .b_max = 0.02}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(ScheduleKind::vp_linear, 10, {.b_min = -0.1, .b_max = 0.02}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(ScheduleKind::vp_linear, 10, {.b_min = 0.5, .b_max = 1.5}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(ScheduleKind::cosine, 10, {.s = 0.0}), std::invalid_argument);
}

TEST_CASE("log_kernel closed-form values", "[schedule]") {
  const auto s = toy_schedule();

  // Zero residual in d = 1: only the normalizer remains.
  REQUIRE(log_kernel(s, 1, vec({0.8}), vec({1.0})) ==
          Catch::Approx(-0.5 * std::log(2.0 * std::numbers::pi * 0.36)).epsilon(1e-15));

  // One-sigma displacement in d = 2 contributes exactly -1/2.
  const Vec x = vec({0.3, -0.7});
  Vec x_t = 0.8 * x;
  x_t[0] += 0.6;
  const double normalizer = -std::log(2.0 * std::numbers::pi * 0.36);
  REQUIRE(log_kernel(s, 1, x_t, x) == Catch::Approx(normalizer - 0.5).epsilon(1e-14));

  REQUIRE_THROWS_AS(log_kernel(s, 0, vec({0.0}), vec({0.0})), std::domain_error);
  REQUIRE_THROWS_AS(log_kernel(s, 1, vec({0.0, 0.0}), vec({0.0})), std::invalid_argument);
}

TEST_CASE("log_kernel matches a direct density evaluation on random inputs", "[schedule]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 50);
  RngStream rng(71, Stream::instance, 0);
  for (int rep = 0; rep < 200; ++rep) {
    const int d = 1 + static_cast<int>(rng.next_u64() % 3);
    const int t = 1 + static_cast<int>(rng.next_u64() % 50);
    const Vec x = 3.0 * rng.next_normal_vec(d);
    const Vec x_t = 3.0 * rng.next_normal_vec(d);
    const double a = s.alpha(t), var = s.sigma(t) * s.sigma(t);
    double direct = 0.0;
    for (int i = 0; i < d; ++i) {
      const double r = x_t[i] - a * x[i];
      direct += -0.5 * std::log(2.0 * std::numbers::pi * var) - r * r / (2.0 * var);
    }
    REQUIRE(log_kernel(s, t, x_t, x) == Catch::Approx(direct).margin(1e-12));
  }
}

TEST_CASE("kernel density integrates to one under Gauss-Hermite quadrature", "[schedule]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 100);
  const Vec x = vec({0.9});
  for (const int t : {3, 40, 100}) {
    // Reference measure deliberately offset and wider than the kernel.
    const double a = s.alpha(t), sig = s.sigma(t);
    const Eigen::VectorXd center = vec({a * x[0] + 0.4 * sig});
    Eigen::MatrixXd ref_var(1, 1);
    ref_var(0, 0) = 2.25 * sig * sig;
    const double ref_log_norm = -0.5 * std::log(2.0 * std::numbers::pi * ref_var(0, 0));
    const double mass = oracle::gaussian_expectation(
        center, ref_var,
        [&](const Eigen::VectorXd& x_t) {
          const double log_ref = ref_log_norm - (x_t[0] - center[0]) * (x_t[0] - center[0]) / (2.0 * ref_var(0, 0));
          return std::exp(log_kernel(s, t, x_t, x) - log_ref);
        },
        64);
    REQUIRE(mass == Catch::Approx(1.0).margin(1e-8));
  }
}

TEST_CASE("log_kernel is maximized at the scaled source point", "[schedule]") {
  const auto s = make_schedule(ScheduleKind::cosine, 40);
  RngStream rng(92, Stream::instance, 0);
  for (int rep = 0; rep < 50; ++rep) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 40);
    const Vec x = 2.0 * rng.next_normal_vec(2);
    const Vec peak = s.alpha(t) * x;
    const double at_peak = log_kernel(s, t, peak, x);
    const Vec delta = 1e-3 * rng.next_normal_vec(2);
    REQUIRE(log_kernel(s, t, peak + delta, x) < at_peak);
  }
}
