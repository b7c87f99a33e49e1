#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "sdlab/experiment.hpp"
#include "sdlab/rng.hpp"

using namespace sdlab;
namespace fs = std::filesystem;

namespace {

const char* kMinimalConfig = R"({
  "experiment": "simulate",
  "seed": 7,
  "mixture": {
    "weights": [0.5, 0.5],
    "means": [[-1.0, 0.0], [1.0, 0.0]],
    "covariances": [0.25, 0.25]
  }
})";

std::string small_run_config(const std::string& out_dir) {
  return std::string(R"({
  "experiment": "simulate",
  "seed": 11,
  "output": ")") + out_dir + R"(",
  "mixture": {
    "weights": [0.5, 0.25, 0.25],
    "means": [[-2.0, 0.0], [2.0, 2.0], [2.0, -2.0]],
    "covariances": [0.4, 0.4, 0.4]
  },
  "partition": { "unsafe": [2] },
  "schedule": { "kind": "vp_linear", "steps": 60 },
  "run": { "solver": "ddpm", "n_samples": 50 },
  "guidance": { "mode": "safe", "estimator": "exact", "critical_steps": "all" },
  "eval": { "reference_samples": 100 }
})";
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("minimal config normalizes and round-trips", "[experiment]") {
  const auto cfg = parse_config_text(kMinimalConfig, ".");

  // Defaults applied.
  REQUIRE(cfg.schedule_kind == ScheduleKind::vp_linear);
  REQUIRE(cfg.schedule_steps == 1000);
  REQUIRE(cfg.schedule_params.b_min == 1e-4);
  REQUIRE(cfg.schedule_params.b_max == 0.02);
  REQUIRE(cfg.mode == GuidanceMode::baseline);
  REQUIRE(cfg.eta == 1.0);
  REQUIRE(cfg.critical.kind == CriticalSpec::Kind::top22);
  REQUIRE(cfg.n_samples == 1000);

  // Canonical re-serialization is idempotent.
  const auto reparsed = parse_config_text(cfg.canonical.dump(), ".");
  REQUIRE(reparsed.canonical == cfg.canonical);
  REQUIRE(reparsed.config_hash == cfg.config_hash);
}

TEST_CASE("eta defaults follow the combined-mode presets", "[experiment]") {
  const char* base = R"({
  "experiment": "simulate",
  "seed": 1,
  "mixture": {
    "weights": [0.5, 0.25, 0.25],
    "means": [[-2.0, 0.0], [2.0, 2.0], [2.0, -2.0]],
    "covariances": [0.4, 0.4, 0.4]
  },
  "partition": { "unsafe": [2] },
  "guidance": { "mode": "MODE", "estimator": "exact", "condition": [0, 1] }
})";
  const auto with_mode = [&](const std::string& mode) {
    std::string text(base);
    text.replace(text.find("MODE"), 4, mode);
    return parse_config_text(text, ".");
  };
  REQUIRE(with_mode("safree").eta == kEtaSafreeCombo);
  REQUIRE(with_mode("sld").eta == kEtaSldCombo);
  REQUIRE(with_mode("safe").eta == 1.0);
}

TEST_CASE("config rejections carry field paths", "[experiment]") {
  SECTION("weights must sum to one") {
    const char* bad = R"({
      "experiment": "simulate",
      "seed": 7,
      "mixture": { "weights": [0.5, 0.499], "means": [[0.0], [1.0]], "covariances": [1.0, 1.0] }
    })";
    try {
      parse_config_text(bad, ".");
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      REQUIRE(std::string(err.what()).find("mixture.weights") != std::string::npos);
    }
  }

  SECTION("unknown keys are rejected") {
    const char* bad = R"({
      "experiment": "simulate",
      "seed": 7,
      "mixture": { "weights": [1.0], "means": [[0.0]], "covariances": [1.0] },
      "run": { "n_samples": 10, "typo_key": 1 }
    })";
    try {
      parse_config_text(bad, ".");
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      REQUIRE(std::string(err.what()).find("run.typo_key") != std::string::npos);
    }
  }

  SECTION("seed is required") {
    const char* bad = R"({
      "experiment": "simulate",
      "mixture": { "weights": [1.0], "means": [[0.0]], "covariances": [1.0] }
    })";
    REQUIRE_THROWS_AS(parse_config_text(bad, "."), ConfigError);
  }

  SECTION("missing dataset for empirical estimators") {
    const char* bad = R"({
      "experiment": "simulate",
      "seed": 3,
      "mixture": { "weights": [0.5, 0.5], "means": [[0.0], [4.0]], "covariances": [1.0, 1.0] },
      "partition": { "unsafe": [1] },
      "guidance": { "mode": "safe", "estimator": "empirical" }
    })";
    try {
      parse_config_text(bad, ".");
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      REQUIRE(err.field() == "dataset");
    }
  }
}

TEST_CASE("threshold and critical-step forms parse", "[experiment]") {
  const char* text = R"({
    "experiment": "simulate",
    "seed": 5,
    "mixture": { "weights": [0.5, 0.5], "means": [[0.0], [4.0]], "covariances": [1.0, 1.0] },
    "partition": { "unsafe": [1] },
    "schedule": { "steps": 100 },
    "guidance": { "mode": "safe", "estimator": "exact", "beta_threshold": "inf", "critical_steps": [10, 60] }
  })";
  const auto cfg = parse_config_text(text, ".");
  REQUIRE(std::isinf(cfg.beta_threshold));
  REQUIRE(cfg.critical.kind == CriticalSpec::Kind::range);
  REQUIRE(cfg.critical.lo == 10);
  REQUIRE(cfg.critical.hi == 60);
  const auto steps = cfg.critical.materialize(100);
  REQUIRE(steps.contains(10));
  REQUIRE(steps.contains(60));
  REQUIRE_FALSE(steps.contains(61));
}

TEST_CASE("shipped presets parse cleanly", "[experiment]") {
  const fs::path presets(SDLAB_PRESET_DIR);
  for (const char* name :
       {"fig3_weight_sweep.json", "fig2_trajectory.json", "threshold_endpoints.json", "baseline_simulate.json",
        "gate_closed_simulate.json", "verify_theorem.json", "estimator_convergence.json", "fig3_sr.json"}) {
    CAPTURE(name);
    const auto cfg = parse_config((presets / name).string());
    REQUIRE_FALSE(cfg.config_hash.empty());
  }
  // The weight-sweep preset carries the documented sweep and unsafe mass.
  const auto fig3 = parse_config((presets / "fig3_weight_sweep.json").string());
  REQUIRE(fig3.sweep_weight_scales == std::vector<double>{0.5, 1.0, 2.0});
  REQUIRE(fig3.partition.z_unsafe == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("csv numbers round-trip through their text form", "[experiment]") {
  RngStream rng(17, Stream::instance, 21);
  for (int rep = 0; rep < 2000; ++rep) {
    double v = std::exp(40.0 * (rng.next_double() - 0.5)) * (rng.next_double() < 0.5 ? -1.0 : 1.0);
    if (rep % 13 == 0) v = 0.0;
    const std::string text = format_number(v);
    REQUIRE(std::strtod(text.c_str(), nullptr) == v);
  }
}

TEST_CASE("config hash tracks content changes", "[experiment]") {
  const auto a = parse_config_text(kMinimalConfig, ".");
  std::string other(kMinimalConfig);
  other.replace(other.find("\"seed\": 7"), 9, "\"seed\": 8");
  const auto b = parse_config_text(other, ".");
  REQUIRE(a.config_hash != b.config_hash);
}

TEST_CASE("simulate writes deterministic artifacts across thread counts", "[experiment]") {
  TempDir dir_a("sdlab_ut_threads_a");
  TempDir dir_b("sdlab_ut_threads_b");

  const auto cfg_a = parse_config_text(small_run_config(dir_a.path.string()), ".");
  const auto cfg_b = parse_config_text(small_run_config(dir_b.path.string()), ".");
  REQUIRE(run_experiment(cfg_a, /*threads_cap=*/1).exit_status == 0);
  REQUIRE(run_experiment(cfg_b, /*threads_cap=*/4).exit_status == 0);

  REQUIRE(read_text_file(dir_a.path / "samples.csv") == read_text_file(dir_b.path / "samples.csv"));
  REQUIRE(read_text_file(dir_a.path / "diagnostics.csv") == read_text_file(dir_b.path / "diagnostics.csv"));
  REQUIRE(fs::exists(dir_a.path / "scatter.svg"));
  REQUIRE(fs::exists(dir_a.path / "report.json"));

  const auto report = ordered_json::parse(read_text_file(dir_a.path / "report.json"));
  REQUIRE(report["config_hash"] == cfg_a.config_hash);
  REQUIRE(report["eval"]["n_samples"] == 50);
}

TEST_CASE("gate-closed simulate is byte-identical to the baseline preset", "[experiment]") {
  TempDir dir_base("sdlab_ut_gate_base");
  TempDir dir_closed("sdlab_ut_gate_closed");
  const fs::path presets(SDLAB_PRESET_DIR);

  CliOverrides base_over;
  base_over.output = dir_base.path.string();
  auto base_cfg = parse_config((presets / "baseline_simulate.json").string(), base_over);

  CliOverrides closed_over;
  closed_over.output = dir_closed.path.string();
  auto closed_cfg = parse_config((presets / "gate_closed_simulate.json").string(), closed_over);

  REQUIRE(run_experiment(base_cfg).exit_status == 0);
  REQUIRE(run_experiment(closed_cfg).exit_status == 0);
  REQUIRE(read_text_file(dir_base.path / "samples.csv") == read_text_file(dir_closed.path / "samples.csv"));
}

TEST_CASE("verify_theorem experiment passes its own gate", "[experiment]") {
  TempDir dir("sdlab_ut_theorem");
  const std::string text = R"({
    "experiment": "verify_theorem",
    "seed": 313,
    "output": ")" + dir.path.string() + R"(",
    "schedule": { "steps": 120 },
    "theorem": { "instances": 4, "points": 15 }
  })";
  const auto cfg = parse_config_text(text, ".");
  const auto result = run_experiment(cfg);
  REQUIRE(result.exit_status == 0);
  REQUIRE(fs::exists(dir.path / "residuals.csv"));
  REQUIRE(result.report["theorem"]["max_identity_residual"].get<double>() <= 1e-8);
}
