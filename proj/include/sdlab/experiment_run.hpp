#pragma once

// Execution half of the experiment runner; included at the end of
// experiment.hpp.

namespace sdlab {

namespace detail {

inline int effective_threads(int cap) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (const char* env = std::getenv("SDLAB_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) threads = std::min(threads, v);
  }
  if (cap > 0) threads = std::min(threads, cap);
  return threads;
}

// Randomized mixture instances for the identity verification. Means stay in
// [-3, 3]^d and covariance eigenvalues in [0.5, 2.0], so the tail ratios
// stay within floating-point reach of the composed route.
inline GaussianMixture random_mixture_instance(int dim, int components, RngStream& rng) {
  std::vector<double> weights;
  std::vector<Vec> means;
  std::vector<Mat> covs;
  double total = 0.0;
  for (int k = 0; k < components; ++k) {
    const double w = 0.2 + rng.next_double();
    weights.push_back(w);
    total += w;
    Vec mu(dim);
    for (int i = 0; i < dim; ++i) mu[i] = -3.0 + 6.0 * rng.next_double();
    means.push_back(std::move(mu));
    Mat gauss(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) gauss(i, j) = rng.next_normal();
    const Eigen::HouseholderQR<Mat> qr(gauss);
    const Mat q = qr.householderQ();
    Vec eigs(dim);
    for (int i = 0; i < dim; ++i) eigs[i] = 0.5 + 1.5 * rng.next_double();
    const Mat cov = q * eigs.asDiagonal() * q.transpose();
    covs.push_back(0.5 * (cov + cov.transpose()));
  }
  for (double& w : weights) w /= total;
  double sum = 0.0;
  for (double w : weights) sum += w;
  for (double& w : weights) w /= sum;
  return GaussianMixture(std::move(weights), std::move(means), std::move(covs));
}

inline SafetyPartition random_partition_instance(const GaussianMixture& gm, RngStream& rng, double min_z_safe = 0.2) {
  for (;;) {
    std::vector<int> unsafe;
    for (int k = 0; k < gm.size(); ++k)
      if (rng.next_double() < 0.4) unsafe.push_back(k);
    if (unsafe.empty() || static_cast<int>(unsafe.size()) == gm.size()) continue;
    auto part = SafetyPartition::from_unsafe_set(gm, unsafe);
    if (part.z_safe >= min_z_safe) return part;
  }
}

}  // namespace detail

struct TheoremInstanceResult {
  int dim = 0;
  int components = 0;
  double z_safe = 0.0;
  double max_identity_residual = 0.0;
  double max_partition_residual = 0.0;
};

struct TheoremOutcome {
  std::vector<TheoremInstanceResult> instances;
  double max_identity_residual = 0.0;
  double max_partition_residual = 0.0;
  double runtime_seconds = 0.0;
};

// Compose-route vs closed-form-route comparison on randomized instances.
// Probe points are drawn from the diffused safe marginal, the region safe
// sampling actually evaluates.
inline TheoremOutcome verify_theorem_identity(std::uint64_t seed, int instances, int points_per_instance,
                                              const NoiseSchedule& s) {
  const auto start = std::chrono::steady_clock::now();
  TheoremOutcome outcome;
  const int dims[] = {1, 2, 8};
  for (int i = 0; i < instances; ++i) {
    RngStream rng(seed, Stream::instance, static_cast<std::uint64_t>(i));
    const int dim = dims[i % 3];
    const int components = 2 + static_cast<int>(rng.next_u64() % 7);
    const auto gm = detail::random_mixture_instance(dim, components, rng);
    const auto part = detail::random_partition_instance(gm, rng);
    const auto safe = safe_sub_mixture(gm, part);
    const auto unsafe = unsafe_sub_mixture(gm, part);
    const auto composed =
        compose_safe_exact(exact_denoiser(gm, s), exact_denoiser(unsafe, s), exact_beta_star_evaluator(gm, part, s));
    const auto closed_form = exact_denoiser(safe, s);

    TheoremInstanceResult res;
    res.dim = dim;
    res.components = components;
    res.z_safe = part.z_safe;
    for (int p = 0; p < points_per_instance; ++p) {
      const int t = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(s.steps()));
      const Vec x_t = s.alpha(t) * safe.sample(rng) + s.sigma(t) * rng.next_normal_vec(dim);
      const Vec got = composed(x_t, t);
      const Vec want = closed_form(x_t, t);
      const double rel = (got - want).norm() / std::max(1e-12, want.norm());
      res.max_identity_residual = std::max(res.max_identity_residual, rel);

      const double p_data = std::exp(log_marginal(gm, s, t, x_t));
      const double split = part.z_safe * std::exp(log_marginal(safe, s, t, x_t)) +
                           part.z_unsafe * std::exp(log_marginal(unsafe, s, t, x_t));
      res.max_partition_residual = std::max(res.max_partition_residual, std::abs(p_data - split) / p_data);
    }
    outcome.max_identity_residual = std::max(outcome.max_identity_residual, res.max_identity_residual);
    outcome.max_partition_residual = std::max(outcome.max_partition_residual, res.max_partition_residual);
    outcome.instances.push_back(res);
  }
  outcome.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

struct ConvergenceOutcome {
  std::vector<int> sizes;
  std::vector<double> rms;
  std::vector<double> ratios;  // rms[i+1] / rms[i]
  double runtime_seconds = 0.0;
};

// RMS deviation of the dataset denoiser from the closed-form unsafe denoiser
// over a fixed grid, across dataset sizes. Independent dataset streams per
// size.
inline ConvergenceOutcome estimator_convergence_study(std::uint64_t seed, const GaussianMixture& gm,
                                                      const SafetyPartition& part, const NoiseSchedule& s,
                                                      const std::vector<int>& sizes, int grid_points,
                                                      const KernelConfig& kernel) {
  const auto start = std::chrono::steady_clock::now();
  const auto unsafe = unsafe_sub_mixture(gm, part);
  const auto exact = exact_denoiser(unsafe, s);

  RngStream grid_rng(seed, Stream::probe, 0);
  const int lo = std::max(1, static_cast<int>(0.3 * s.steps()));
  const int hi = std::max(lo, static_cast<int>(0.9 * s.steps()));
  std::vector<std::pair<int, Vec>> grid;
  grid.reserve(static_cast<std::size_t>(grid_points));
  for (int i = 0; i < grid_points; ++i) {
    const int t = lo + static_cast<int>(grid_rng.next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    grid.emplace_back(t, s.alpha(t) * unsafe.sample(grid_rng) + s.sigma(t) * grid_rng.next_normal_vec(gm.dim()));
  }

  ConvergenceOutcome outcome;
  outcome.sizes = sizes;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    RngStream rng(seed, Stream::dataset, 1 + static_cast<std::uint64_t>(i));
    const auto ds = UnsafeDataset::draw_from(unsafe, sizes[i], rng);
    const auto field = empirical_unsafe_denoiser(ds, s, kernel);
    double total = 0.0;
    for (const auto& [t, x_t] : grid) total += (field(x_t, t) - exact(x_t, t)).squaredNorm();
    outcome.rms.push_back(std::sqrt(total / static_cast<double>(grid.size())));
  }
  for (std::size_t i = 1; i < outcome.rms.size(); ++i) outcome.ratios.push_back(outcome.rms[i] / outcome.rms[i - 1]);
  outcome.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

namespace detail {

struct LabSetup {
  std::shared_ptr<const NoiseSchedule> schedule;
  std::optional<UnsafeDataset> dataset;
  WiredFields fields;
  RunConfig rc;
  std::vector<Vec> reference;
};

inline GuidanceConfig guidance_from_config(const ExperimentConfig& cfg) {
  GuidanceConfig gc;
  gc.lambda = cfg.lambda;
  gc.mu_gamma = cfg.mu_gamma;
  gc.mu_max = cfg.mu_max;
  gc.eta = cfg.eta;
  gc.beta_threshold = ThresholdSchedule(cfg.beta_threshold);
  gc.critical_steps = cfg.critical.materialize(cfg.schedule_steps);
  gc.sr_radius = cfg.sr_radius;
  return gc;
}

inline WiredFields wire_fields(const ExperimentConfig& cfg, const NoiseSchedule& s,
                               const std::optional<UnsafeDataset>& dataset, GuidanceMode mode) {
  WiredFields fields;
  const auto& gm = cfg.gm();
  fields.data = exact_denoiser(gm, s, "data");
  switch (mode) {
    case GuidanceMode::baseline:
      break;
    case GuidanceMode::sr:
      fields.data = sparse_repellency(fields.data, *dataset, cfg.sr_radius);
      break;
    case GuidanceMode::safe:
    case GuidanceMode::safree:
    case GuidanceMode::sld: {
      if (cfg.estimator == BetaSource::exact) {
        fields.unsafe_hat = exact_denoiser(unsafe_sub_mixture(gm, cfg.partition), s, "unsafe-exact");
        fields.beta = exact_beta_star_evaluator(gm, cfg.partition, s);
      } else {
        fields.unsafe_hat = empirical_unsafe_denoiser(*dataset, s, cfg.kernel);
        fields.beta = empirical_beta_evaluator(*dataset, s, cfg.kernel);
      }
      if (mode == GuidanceMode::safree) {
        const ConditionSpec positive(cfg.condition, "condition");
        const ConditionSpec filtered = filtered_condition(positive, cfg.partition);
        fields.mode = ComposeMode::safree;
        fields.cond_modified = exact_denoiser(sub_mixture(gm, filtered.component_subset), s, filtered.label);
      } else if (mode == GuidanceMode::sld) {
        fields.mode = ComposeMode::sld;
        fields.cond_pos = exact_denoiser(sub_mixture(gm, cfg.condition), s, "condition");
        const std::vector<int>& neg =
            cfg.neg_condition.empty() ? cfg.partition.unsafe_components : cfg.neg_condition;
        fields.neg_safe = exact_denoiser(sub_mixture(gm, neg), s, "neg-condition");
      }
      break;
    }
  }
  return fields;
}

inline LabSetup build_setup(const ExperimentConfig& cfg, int threads_cap, GuidanceMode mode_override,
                            bool force_trajectories = false) {
  LabSetup lab;
  lab.schedule = std::make_shared<const NoiseSchedule>(
      make_schedule(cfg.schedule_kind, cfg.schedule_steps, cfg.schedule_params));

  if (!cfg.dataset_source.empty()) {
    if (cfg.dataset_source.rfind("sample:", 0) == 0) {
      const int count = std::stoi(cfg.dataset_source.substr(7));
      RngStream rng(cfg.seed, Stream::dataset, 0);
      lab.dataset = UnsafeDataset::draw_from(unsafe_sub_mixture(cfg.gm(), cfg.partition), count, rng);
    } else {
      lab.dataset = UnsafeDataset::from_csv(cfg.dataset_source.substr(4));
      if (lab.dataset->dim() != cfg.gm().dim())
        throw ConfigError("dataset", "csv dimension does not match the mixture");
    }
  }

  lab.fields = wire_fields(cfg, *lab.schedule, lab.dataset, mode_override);
  lab.rc.schedule = lab.schedule;
  lab.rc.solver = cfg.solver;
  lab.rc.gc = guidance_from_config(cfg);
  lab.rc.weight_scale = cfg.weight_scale;
  lab.rc.n_samples = cfg.n_samples;
  lab.rc.seed = cfg.seed;
  lab.rc.init = cfg.init;
  lab.rc.record_trajectories = cfg.trajectories || force_trajectories;
  lab.rc.threads = effective_threads(threads_cap);

  const GaussianMixture ref_source = cfg.partition.unsafe_components.empty()
                                         ? cfg.gm()
                                         : safe_sub_mixture(cfg.gm(), cfg.partition);
  RngStream ref_rng(cfg.seed, Stream::reference, 0);
  lab.reference.reserve(static_cast<std::size_t>(cfg.reference_samples));
  for (int i = 0; i < cfg.reference_samples; ++i) lab.reference.push_back(ref_source.sample(ref_rng));
  return lab;
}

inline ordered_json eval_to_json(const EvalReport& report) {
  ordered_json out;
  out["n_samples"] = report.n_samples;
  out["hit_rate"] = report.hit_rate;
  out["component_counts"] = report.component_counts;
  out["coverage"] = report.coverage;
  out["coverage_floor"] = report.coverage_floor;
  out["energy_distance"] = report.energy_distance;
  if (std::isinf(report.min_unsafe_distance))
    out["min_unsafe_distance"] = nullptr;
  else
    out["min_unsafe_distance"] = report.min_unsafe_distance;
  return out;
}

// samples.csv + diagnostics.csv (+ scatter.svg, trajectories.csv), then the
// evaluation summary.
inline EvalReport write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                                      const LabSetup& lab, const RunResult& run) {
  std::filesystem::create_directories(dir);
  std::vector<Classification> classes;
  classes.reserve(run.samples.size());
  for (const Vec& x : run.samples) classes.push_back(classify(x, cfg.gm(), cfg.partition));
  write_samples_csv(dir / "samples.csv", run.samples, classes);
  write_diagnostics_csv(dir / "diagnostics.csv", run.diagnostics);
  if (cfg.gm().dim() == 2) write_text_file(dir / "scatter.svg", scatter_svg(run.samples, classes, cfg.gm(), cfg.partition));
  if (!run.trajectories.empty()) write_trajectories_csv(dir / "trajectories.csv", run, lab.schedule->steps());
  return evaluate(run.samples, cfg.gm(), cfg.partition, lab.reference);
}

inline ordered_json assertion_json(const std::string& name, bool pass, ordered_json details = {}) {
  ordered_json out;
  out["name"] = name;
  out["pass"] = pass;
  if (!details.is_null()) out["details"] = std::move(details);
  return out;
}

}  // namespace detail

struct ExperimentResult {
  int exit_status = 0;
  ordered_json report;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int threads_cap = 0) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.output);
  fs::create_directories(out_dir);

  ordered_json report;
  report["experiment"] = cfg.canonical["experiment"];
  report["seed"] = cfg.seed;
  report["config_hash"] = cfg.config_hash;
  ordered_json assertions = ordered_json::array();
  bool all_pass = true;
  const auto record = [&](const std::string& name, bool pass, ordered_json details = {}) {
    assertions.push_back(detail::assertion_json(name, pass, std::move(details)));
    all_pass = all_pass && pass;
  };

  switch (cfg.experiment) {
    case ExperimentKind::simulate: {
      auto lab = detail::build_setup(cfg, threads_cap, cfg.mode);
      const RunResult run = run_algorithm1(lab.rc, lab.fields, lab.dataset ? &*lab.dataset : nullptr);
      report["eval"] = detail::eval_to_json(detail::write_run_artifacts(out_dir, cfg, lab, run));
      break;
    }

    case ExperimentKind::verify_theorem: {
      const auto s = make_schedule(cfg.schedule_kind, cfg.schedule_steps, cfg.schedule_params);
      const auto outcome = verify_theorem_identity(cfg.seed, cfg.theorem_instances, cfg.theorem_points, s);
      std::string csv = "instance,dim,components,z_safe,max_identity_residual,max_partition_residual\n";
      for (std::size_t i = 0; i < outcome.instances.size(); ++i) {
        const auto& r = outcome.instances[i];
        csv += std::to_string(i) + "," + std::to_string(r.dim) + "," + std::to_string(r.components) + "," +
               format_number(r.z_safe) + "," + format_number(r.max_identity_residual) + "," +
               format_number(r.max_partition_residual) + "\n";
      }
      write_text_file(out_dir / "residuals.csv", csv);
      report["theorem"] = ordered_json{{"instances", cfg.theorem_instances},
                                       {"points_per_instance", cfg.theorem_points},
                                       {"max_identity_residual", outcome.max_identity_residual},
                                       {"max_partition_residual", outcome.max_partition_residual},
                                       {"runtime_seconds", outcome.runtime_seconds}};
      record("identity_residual_within_1e-8", outcome.max_identity_residual <= 1e-8,
             ordered_json{{"measured", outcome.max_identity_residual}, {"tolerance", 1e-8}});
      record("partition_residual_within_1e-10", outcome.max_partition_residual <= 1e-10,
             ordered_json{{"measured", outcome.max_partition_residual}, {"tolerance", 1e-10}});
      break;
    }

    case ExperimentKind::estimator_convergence: {
      const auto s = make_schedule(cfg.schedule_kind, cfg.schedule_steps, cfg.schedule_params);
      const auto outcome = estimator_convergence_study(cfg.seed, cfg.gm(), cfg.partition, s, cfg.convergence_sizes,
                                                       cfg.convergence_grid, cfg.kernel);
      std::string csv = "size,rms\n";
      for (std::size_t i = 0; i < outcome.sizes.size(); ++i)
        csv += std::to_string(outcome.sizes[i]) + "," + format_number(outcome.rms[i]) + "\n";
      write_text_file(out_dir / "convergence.csv", csv);
      report["convergence"] =
          ordered_json{{"sizes", outcome.sizes}, {"rms", outcome.rms}, {"ratios", outcome.ratios},
                       {"runtime_seconds", outcome.runtime_seconds}};
      bool decreasing = true;
      for (std::size_t i = 1; i < outcome.rms.size(); ++i) decreasing = decreasing && outcome.rms[i] < outcome.rms[i - 1];
      record("rms_monotonically_decreasing", decreasing, ordered_json{{"rms", outcome.rms}});
      bool ratios_ok = true;
      for (double r : outcome.ratios) ratios_ok = ratios_ok && r >= 0.15 && r <= 0.7;
      record("rms_ratios_match_inverse_sqrt_scaling", ratios_ok,
             ordered_json{{"ratios", outcome.ratios}, {"window", ordered_json::array({0.15, 0.7})}});
      break;
    }

    case ExperimentKind::trajectory_compare: {
      auto baseline = detail::build_setup(cfg, threads_cap, GuidanceMode::baseline, /*force_trajectories=*/true);
      const RunResult base_run = run_algorithm1(baseline.rc, baseline.fields);
      const auto base_eval = detail::write_run_artifacts(out_dir / "baseline", cfg, baseline, base_run);

      const GuidanceMode safe_mode = cfg.mode == GuidanceMode::baseline ? GuidanceMode::safe : cfg.mode;
      auto safe = detail::build_setup(cfg, threads_cap, safe_mode, /*force_trajectories=*/true);
      const RunResult safe_run = run_algorithm1(safe.rc, safe.fields, safe.dataset ? &*safe.dataset : nullptr);
      const auto safe_eval = detail::write_run_artifacts(out_dir / "safe", cfg, safe, safe_run);

      const int base_unsafe = static_cast<int>(std::lround(base_eval.hit_rate * base_eval.n_samples));
      const int safe_unsafe = static_cast<int>(std::lround(safe_eval.hit_rate * safe_eval.n_samples));
      report["baseline"] = detail::eval_to_json(base_eval);
      report["safe"] = detail::eval_to_json(safe_eval);
      record("baseline_terminates_unsafe_at_least_once", base_unsafe >= 1,
             ordered_json{{"unsafe_terminals", base_unsafe}});
      record("safe_run_terminates_unsafe_never", safe_unsafe == 0, ordered_json{{"unsafe_terminals", safe_unsafe}});
      break;
    }

    case ExperimentKind::weight_sweep: {
      auto lab = detail::build_setup(cfg, threads_cap, cfg.mode == GuidanceMode::baseline ? GuidanceMode::safe : cfg.mode);
      ordered_json runs = ordered_json::array();
      std::vector<double> hit_rates;
      for (const double scale : cfg.sweep_weight_scales) {
        RunConfig rc = lab.rc;
        rc.weight_scale = scale;
        const RunResult run = run_algorithm1(rc, lab.fields, lab.dataset ? &*lab.dataset : nullptr);
        const auto eval = detail::write_run_artifacts(out_dir / ("w" + format_number(scale)), cfg, lab, run);
        hit_rates.push_back(eval.hit_rate);
        ordered_json entry = detail::eval_to_json(eval);
        entry["weight_scale"] = scale;
        runs.push_back(std::move(entry));
      }
      report["runs"] = std::move(runs);
      bool non_increasing = true;
      for (std::size_t i = 1; i < hit_rates.size(); ++i) non_increasing = non_increasing && hit_rates[i] <= hit_rates[i - 1];
      record("hit_rate_non_increasing_in_weight", non_increasing, ordered_json{{"hit_rates", hit_rates}});
      record("hit_rate_strictly_drops_over_sweep", hit_rates.front() > hit_rates.back(),
             ordered_json{{"first", hit_rates.front()}, {"last", hit_rates.back()}});
      break;
    }

    case ExperimentKind::threshold_sweep: {
      auto baseline = detail::build_setup(cfg, threads_cap, GuidanceMode::baseline);
      const RunResult base_run = run_algorithm1(baseline.rc, baseline.fields);
      const auto base_eval = detail::write_run_artifacts(out_dir / "baseline", cfg, baseline, base_run);
      report["baseline"] = detail::eval_to_json(base_eval);

      auto lab = detail::build_setup(cfg, threads_cap, cfg.mode == GuidanceMode::baseline ? GuidanceMode::safe : cfg.mode);
      ordered_json runs = ordered_json::array();
      for (const double threshold : cfg.sweep_thresholds) {
        RunConfig rc = lab.rc;
        rc.gc.beta_threshold = ThresholdSchedule(threshold);
        const std::string label = std::isinf(threshold) ? "inf" : format_number(threshold);
        const fs::path run_dir = out_dir / ("threshold_" + label);
        const RunResult run = run_algorithm1(rc, lab.fields, lab.dataset ? &*lab.dataset : nullptr);
        const auto eval = detail::write_run_artifacts(run_dir, cfg, lab, run);
        ordered_json entry = detail::eval_to_json(eval);
        entry["threshold"] = std::isinf(threshold) ? ordered_json("inf") : ordered_json(threshold);
        runs.push_back(std::move(entry));

        if (std::isinf(threshold)) {
          const bool identical = read_text_file(run_dir / "samples.csv") ==
                                 read_text_file(out_dir / "baseline" / "samples.csv");
          record("infinite_threshold_matches_baseline_bytes", identical);
        }
        if (threshold == 0.0) {
          const auto critical = rc.gc.critical_steps;
          bool audit = true;
          int open_count = 0;
          for (const auto& d : run.diagnostics) {
            if (d.beta > 0.0) {
              audit = audit && d.gate_open && critical.contains(d.step);
              if (d.gate_open) ++open_count;
            } else {
              audit = audit && !d.gate_open;
            }
          }
          record("zero_threshold_opens_gate_wherever_beta_positive", audit && open_count > 0,
                 ordered_json{{"gate_open_steps", open_count}});
        }
      }
      report["runs"] = std::move(runs);
      break;
    }
  }

  report["assertions"] = std::move(assertions);
  const int exit_status = all_pass ? 0 : 1;
  report["exit_status"] = exit_status;
  write_text_file(out_dir / "report.json", report.dump(2) + "\n");
  return {exit_status, report};
}

}  // namespace sdlab
