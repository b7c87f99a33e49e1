#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sdlab/guidance.hpp"
#include "sdlab/mixture.hpp"
#include "sdlab/schedule.hpp"
#include "test_helpers.hpp"

using namespace sdlab;
using testing_support::vec;

namespace {

DenoiserField constant_field(const Vec& value, std::string label = "const") {
  return DenoiserField(std::move(label), static_cast<int>(value.size()), [value](const Vec&, int) { return value; });
}

GaussianMixture guidance_mixture() {
  return GaussianMixture({0.4, 0.35, 0.25}, {vec({-2.0, 0.0}), vec({2.0, 1.0}), vec({0.5, -2.0})},
                         {0.5 * Mat::Identity(2, 2), 0.4 * Mat::Identity(2, 2), 0.6 * Mat::Identity(2, 2)});
}

}  // namespace

TEST_CASE("cfg endpoints and extrapolation", "[guidance]") {
  const auto u = constant_field(vec({0.0, 0.0}));
  const auto c = constant_field(vec({1.0, 0.0}));
  const Vec x = vec({0.3, 0.3});

  REQUIRE(cfg(u, c, 0.0)(x, 5) == vec({0.0, 0.0}));
  REQUIRE((cfg(u, c, 1.0)(x, 5) - vec({1.0, 0.0})).norm() <= 1e-15);
  REQUIRE(cfg(u, c, 2.0)(x, 5) == vec({2.0, 0.0}));
}

TEST_CASE("negative guidance cancellation and arithmetic", "[guidance]") {
  const auto u = constant_field(vec({0.5, -0.25}));
  const auto p = constant_field(vec({1.0, 2.0}));
  for (const double lambda : {0.0, 0.7, 3.0}) {
    REQUIRE(negative_guidance(u, p, p, lambda)(vec({0.0, 0.0}), 3) == vec({0.5, -0.25}));
  }
  // u + lambda (p - n) with small representable numbers is exact.
  const auto n = constant_field(vec({-1.0, 0.5}));
  const Vec out = negative_guidance(u, p, n, 2.0)(vec({0.0, 0.0}), 3);
  REQUIRE(out == vec({0.5 + 2.0 * 2.0, -0.25 + 2.0 * 1.5}));
}

TEST_CASE("sld adaptive weight", "[guidance]") {
  const auto u = constant_field(vec({0.0, 0.0}));
  const auto p = constant_field(vec({1.0, 0.0}));
  const auto n = constant_field(vec({0.0, 1.0}));
  const Vec x = vec({0.1, 0.1});

  SECTION("gamma = 0 collapses to plain cfg") {
    GuidanceConfig gc;
    gc.mu_gamma = 0.0;
    gc.mu_max = 10.0;
    const Vec got = sld(u, p, n, 1.5, gc)(x, 2);
    const Vec want = cfg(u, p, 1.5)(x, 2);
    REQUIRE((got - want).norm() == 0.0);
  }

  SECTION("mu forced to lambda reduces to negative guidance") {
    const double lambda = 1.3;
    GuidanceConfig gc;
    gc.mu_gamma = 1e12;
    gc.mu_max = lambda;
    const Vec got = sld(u, p, n, lambda, gc)(x, 2);
    const Vec want = negative_guidance(u, p, n, lambda)(x, 2);
    REQUIRE((got - want).norm() <= 1e-12);
  }

  SECTION("capped linear weight, hand evaluated") {
    // ||p - n|| = sqrt(2) here; rescale p so the norm is exactly 1.
    const auto p1 = constant_field(vec({1.0, 1.0}));
    const auto n1 = constant_field(vec({1.0, 0.0}));
    GuidanceConfig gc;
    gc.mu_gamma = 0.5;
    gc.mu_max = 10.0;
    // mu = min(10, 0.5 * 1) = 0.5; out = u + 2 (p1 - u) - 0.5 (n1 - u).
    const Vec got = sld(u, p1, n1, 2.0, gc)(x, 2);
    REQUIRE(got == vec({2.0 * 1.0 - 0.5 * 1.0, 2.0 * 1.0 - 0.5 * 0.0}));
  }
}

TEST_CASE("safree filtering maps to the filtered conditional denoiser", "[guidance]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 60);
  const auto gm = guidance_mixture();
  const auto part = SafetyPartition::from_unsafe_set(gm, {1});
  const auto uncond = exact_denoiser(gm, s);

  const ConditionSpec positive({0, 1}, "pos");
  const auto filtered = filtered_condition(positive, part);
  REQUIRE(filtered.component_subset == std::vector<int>{0});

  const auto cond_modified = exact_denoiser(sub_mixture(gm, filtered.component_subset), s);
  const auto direct = exact_denoiser(sub_mixture(gm, {0}), s);
  const double lambda = 1.4;
  const auto via_safree = safree_term(uncond, cond_modified, lambda);
  const auto via_cfg = cfg(uncond, direct, lambda);
  for (const int t : {2, 30, 60}) {
    const Vec x = vec({0.4, -0.9});
    REQUIRE((via_safree(x, t) - via_cfg(x, t)).norm() <= 1e-10);
  }

  // lambda = 0 returns the unconditional field.
  const Vec x = vec({1.0, 1.0});
  REQUIRE((safree_term(uncond, cond_modified, 0.0)(x, 10) - uncond(x, 10)).norm() == 0.0);

  // Filtering away everything is an error.
  const ConditionSpec unsafe_only({1}, "bad");
  REQUIRE_THROWS_AS(filtered_condition(unsafe_only, part), std::invalid_argument);
}

TEST_CASE("safe_compose gating", "[guidance]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 100);
  const auto gm = guidance_mixture();
  const auto part = SafetyPartition::from_unsafe_set(gm, {2});
  const auto e_data = exact_denoiser(gm, s);
  const auto e_unsafe = exact_denoiser(unsafe_sub_mixture(gm, part), s);
  const auto beta = exact_beta_star_evaluator(gm, part, s);
  const Vec x = vec({0.5, -1.6});

  SECTION("closed critical-step gate returns the data field bitwise") {
    GuidanceConfig gc;
    gc.critical_steps = CriticalSteps::range(80, 100, 100);
    const auto field = safe_compose(e_data, e_unsafe, beta, gc);
    for (const int t : {1, 50, 79}) REQUIRE(field(x, t) == e_data(x, t));
    REQUIRE((field(x, 90) - e_data(x, 90)).norm() > 0.0);
  }

  SECTION("infinite threshold closes the gate everywhere") {
    GuidanceConfig gc;
    gc.critical_steps = CriticalSteps::all(100);
    gc.beta_threshold = ThresholdSchedule::infinity();
    const auto field = safe_compose(e_data, e_unsafe, beta, gc);
    for (const int t : {1, 33, 100}) REQUIRE(field(x, t) == e_data(x, t));
  }

  SECTION("eta presets for the combined modes") {
    REQUIRE(kEtaSafreeCombo == 0.33);
    REQUIRE(kEtaSldCombo == 0.03);
  }
}

TEST_CASE("safe_compose with exact inputs wires identically to the exact composition", "[guidance]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 100);
  const auto gm = guidance_mixture();
  const auto part = SafetyPartition::from_unsafe_set(gm, {1});
  const auto e_data = exact_denoiser(gm, s);
  const auto e_unsafe = exact_denoiser(unsafe_sub_mixture(gm, part), s);
  const auto beta = exact_beta_star_evaluator(gm, part, s);

  GuidanceConfig gc;
  gc.eta = 1.0;
  gc.critical_steps = CriticalSteps::all(100);
  gc.beta_threshold = ThresholdSchedule(0.0);
  const auto gated = safe_compose(e_data, e_unsafe, beta, gc);
  const auto exact = compose_safe_exact(e_data, e_unsafe, beta);

  RngStream rng(8, Stream::instance, 6);
  for (int rep = 0; rep < 40; ++rep) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 100);
    const Vec x = 3.0 * rng.next_normal_vec(2);
    const Vec a = gated(x, t);
    const Vec b = exact(x, t);
    REQUIRE(a == b);  // bitwise: identical evaluator wiring
  }
}

TEST_CASE("gate monotonicity in the threshold", "[guidance]") {
  const auto s = make_schedule(ScheduleKind::vp_linear, 50);
  const auto gm = guidance_mixture();
  const auto part = SafetyPartition::from_unsafe_set(gm, {2});
  const auto e_data = exact_denoiser(gm, s);
  const auto e_unsafe = exact_denoiser(unsafe_sub_mixture(gm, part), s);
  const auto beta = exact_beta_star_evaluator(gm, part, s);

  const auto active_set = [&](double threshold) {
    GuidanceConfig gc;
    gc.critical_steps = CriticalSteps::all(50);
    gc.beta_threshold = ThresholdSchedule(threshold);
    const auto field = safe_compose(e_data, e_unsafe, beta, gc);
    std::vector<bool> active;
    RngStream rng(3, Stream::instance, 12);
    for (int rep = 0; rep < 80; ++rep) {
      const int t = 1 + static_cast<int>(rng.next_u64() % 50);
      const Vec x = 2.5 * rng.next_normal_vec(2);
      active.push_back((field(x, t) - e_data(x, t)).norm() > 0.0);
    }
    return active;
  };

  const auto low = active_set(0.0);
  const auto mid = active_set(0.05);
  const auto high = active_set(1.0);
  for (std::size_t i = 0; i < low.size(); ++i) {
    if (mid[i]) REQUIRE(low[i]);
    if (high[i]) REQUIRE(mid[i]);
  }
}

TEST_CASE("combined modes collapse as expected", "[guidance]") {
  const auto u = constant_field(vec({1.0, -1.0}));
  const auto cond = constant_field(vec({2.0, 0.5}));
  const auto e_safe = constant_field(vec({0.5, 0.25}));

  SECTION("safree combo, lambda = 0") {
    REQUIRE(combine_safree_ours(e_safe, u, cond, 0.0)(vec({0.0, 0.0}), 1) == vec({0.5, 0.25}));
  }

  SECTION("safree combo, constant-field arithmetic") {
    const Vec out = combine_safree_ours(e_safe, u, cond, 2.0)(vec({0.0, 0.0}), 1);
    REQUIRE(out == vec({0.5 + 2.0 * 1.0, 0.25 + 2.0 * 1.5}));
  }

  SECTION("sld combo with closed gate equals plain sld guidance") {
    const auto s = make_schedule(ScheduleKind::vp_linear, 40);
    const auto gm = guidance_mixture();
    const auto part = SafetyPartition::from_unsafe_set(gm, {2});
    const auto e_data = exact_denoiser(gm, s);
    const auto e_unsafe = exact_denoiser(unsafe_sub_mixture(gm, part), s);
    const auto pos = exact_denoiser(sub_mixture(gm, {0, 1}), s);
    const auto neg = exact_denoiser(unsafe_sub_mixture(gm, part), s);
    GuidanceConfig gc;
    gc.mu_gamma = 0.4;
    gc.mu_max = 2.0;
    gc.lambda = 1.2;
    gc.critical_steps = CriticalSteps::none();
    const auto gated = safe_compose(e_data, e_unsafe, exact_beta_star_evaluator(gm, part, s), gc);
    const auto combined = combine_sld_ours(gated, e_data, pos, neg, gc.lambda, gc);
    const auto plain = sld(e_data, pos, neg, gc.lambda, gc);
    const Vec x = vec({0.2, 0.9});
    for (const int t : {1, 20, 40}) REQUIRE(combined(x, t) == plain(x, t));
  }

  SECTION("sld combo, lambda = 0 and gamma = 0") {
    const auto pos = constant_field(vec({3.0, 3.0}));
    const auto neg = constant_field(vec({-3.0, 3.0}));
    GuidanceConfig gc;
    gc.mu_gamma = 0.0;
    gc.mu_max = 0.0;
    const Vec out = combine_sld_ours(e_safe, u, pos, neg, 0.0, gc)(vec({0.0, 0.0}), 1);
    REQUIRE(out == vec({0.5, 0.25}));
  }

  SECTION("sld combo, constant-field arithmetic") {
    const auto pos = constant_field(vec({2.0, 0.0}));
    const auto neg = constant_field(vec({2.0, -1.0}));  // ||pos - neg|| = 1
    GuidanceConfig gc;
    gc.mu_gamma = 0.25;
    gc.mu_max = 8.0;
    const Vec out = combine_sld_ours(e_safe, u, pos, neg, 2.0, gc)(vec({0.0, 0.0}), 1);
    // base + 2 (pos - u) - 0.25 (neg - u)
    REQUIRE(out == vec({0.5 + 2.0 * 1.0 - 0.25 * 1.0, 0.25 + 2.0 * 1.0 - 0.25 * 0.0}));
  }
}

TEST_CASE("compositions commute with affine output maps on representable fields", "[guidance]") {
  RngStream rng(21, Stream::instance, 30);
  const auto random_int_vec = [&](int dim) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v[i] = static_cast<double>(static_cast<int>(rng.next_u64() % 17) - 8);
    return v;
  };
  const Vec x = vec({0.0, 0.0});
  for (int rep = 0; rep < 50; ++rep) {
    const Vec u_val = random_int_vec(2), c_val = random_int_vec(2);
    const double lambda = 0.5 * static_cast<double>(static_cast<int>(rng.next_u64() % 9) - 4);
    const double scale = static_cast<double>(1 + static_cast<int>(rng.next_u64() % 4));
    const Vec shift = random_int_vec(2);

    // Map applied to the field outputs, then composed.
    const auto mapped = cfg(constant_field(scale * u_val + shift), constant_field(scale * c_val + shift), lambda);
    // Composed, then mapped.
    const Vec composed = cfg(constant_field(u_val), constant_field(c_val), lambda)(x, 1);
    REQUIRE(mapped(x, 1) == scale * composed + shift);
  }
}

TEST_CASE("sparse repellency contract", "[guidance]") {
  Mat pts(1, 2);
  pts << 1.0, 0.0;
  const UnsafeDataset ds{pts};
  const double r = 0.8;

  const auto field_at = [&](const Vec& prediction) {
    return sparse_repellency(constant_field(prediction), ds, r)(vec({0.0, 0.0}), 1);
  };

  SECTION("identity at and beyond the radius") {
    const Vec far = vec({1.0 + r + 0.5, 0.0});
    REQUIRE(field_at(far) == far);
    const Vec boundary = vec({1.0 + r, 0.0});
    REQUIRE(field_at(boundary) == boundary);
  }

  SECTION("half-radius prediction is pushed to the shell") {
    const Vec inside = vec({1.0 + r / 2.0, 0.0});
    const Vec out = field_at(inside);
    REQUIRE(std::abs(out[0] - (1.0 + r)) <= 1e-12);
    REQUIRE(std::abs(out[1]) <= 1e-12);
  }

  SECTION("coincident prediction is pushed along +e1") {
    const Vec out = field_at(vec({1.0, 0.0}));
    REQUIRE(out == vec({1.0 + r, 0.0}));
  }

  SECTION("repellency never attracts for separated datasets") {
    RngStream rng(14, Stream::instance, 44);
    Mat sep(3, 2);
    sep << -4.0, 0.0, 4.0, 0.0, 0.0, 5.0;  // pairwise separation > 2r
    const UnsafeDataset spread{sep};
    for (int rep = 0; rep < 100; ++rep) {
      const Vec pred = 4.0 * rng.next_normal_vec(2);
      const Vec out = sparse_repellency(constant_field(pred), spread, r)(vec({0.0, 0.0}), 1);
      for (int n = 0; n < spread.size(); ++n) {
        const double before = (pred - spread.point(n)).norm();
        const double after = (out - spread.point(n)).norm();
        REQUIRE(after >= std::min(before, r) - 1e-12);
      }
    }
  }

  REQUIRE_THROWS_AS(sparse_repellency(constant_field(vec({0.0, 0.0})), ds, 0.0), std::invalid_argument);
}
