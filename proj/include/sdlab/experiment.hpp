#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlab/empirical.hpp"
#include "sdlab/guidance.hpp"
#include "sdlab/io.hpp"
#include "sdlab/metrics.hpp"
#include "sdlab/mixture.hpp"
#include "sdlab/sampler.hpp"
#include "sdlab/schedule.hpp"

// Reproducible experiment runner: strict JSON configs, deterministic
// artifacts (samples.csv, diagnostics.csv, report.json, scatter.svg), and
// the named experiments behind the sdlab CLI.

namespace sdlab {

using ordered_json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class ExperimentKind { simulate, verify_theorem, estimator_convergence, trajectory_compare, weight_sweep, threshold_sweep };
enum class GuidanceMode { baseline, safe, safree, sld, sr };
enum class BetaSource { exact, empirical };

struct CriticalSpec {
  enum class Kind { all, top22, none, range };
  Kind kind = Kind::top22;
  int lo = 0, hi = 0;

  CriticalSteps materialize(int steps) const {
    switch (kind) {
      case Kind::all:
        return CriticalSteps::all(steps);
      case Kind::top22:
        return CriticalSteps::top_fraction(steps, 0.22);
      case Kind::none:
        return CriticalSteps::none();
      case Kind::range:
        return CriticalSteps::range(lo, hi, steps);
    }
    return CriticalSteps::none();
  }
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::simulate;
  std::uint64_t seed = 0;
  std::string output = "out";

  std::optional<GaussianMixture> mixture;
  SafetyPartition partition;
  std::string dataset_source;  // "", "sample:M", or "csv:<resolved path>"

  ScheduleKind schedule_kind = ScheduleKind::vp_linear;
  int schedule_steps = 1000;
  ScheduleParams schedule_params;

  SolverKind solver = SolverKind::ddpm;
  int n_samples = 1000;
  double weight_scale = 1.0;
  InitSpec init;
  bool trajectories = false;

  GuidanceMode mode = GuidanceMode::baseline;
  BetaSource estimator = BetaSource::exact;
  KernelConfig kernel;
  double lambda = 1.0;
  double mu_gamma = 0.0;
  double mu_max = 0.0;
  double eta = 1.0;
  double beta_threshold = 0.0;  // +inf allowed
  CriticalSpec critical;
  double sr_radius = 1.0;
  std::vector<int> condition;      // empty = unset
  std::vector<int> neg_condition;  // empty = default to the unsafe set

  int reference_samples = 2000;
  std::vector<double> sweep_weight_scales{0.5, 1.0, 2.0};
  std::vector<double> sweep_thresholds{0.0, std::numeric_limits<double>::infinity()};
  int theorem_instances = 20;
  int theorem_points = 60;
  std::vector<int> convergence_sizes{100, 1000, 10000};
  int convergence_grid = 200;

  ordered_json canonical;
  std::string config_hash;

  const GaussianMixture& gm() const { return *mixture; }
};

struct CliOverrides {
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  bool force_trajectories = false;
};

namespace cfgdetail {

inline void check_keys(const ordered_json& obj, const std::string& path, std::set<std::string> allowed) {
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key()))
      throw ConfigError(path.empty() ? item.key() : path + "." + item.key(), "unknown key (strict mode)");
  }
}

inline const ordered_json* find(const ordered_json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return nullptr;
  return &*it;
}

inline double as_number(const ordered_json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  return v.get<double>();
}

inline int as_int(const ordered_json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
  return v.get<int>();
}

inline std::string as_string(const ordered_json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  return v.get<std::string>();
}

inline double as_threshold(const ordered_json& v, const std::string& path) {
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw ConfigError(path, "expected a nonnegative number or \"inf\"");
  }
  const double x = as_number(v, path);
  if (!(x >= 0.0)) throw ConfigError(path, "threshold must be nonnegative");
  return x;
}

inline std::vector<int> as_int_list(const ordered_json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_int(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline GaussianMixture parse_mixture(const ordered_json& spec, const std::string& path) {
  if (!spec.is_object()) throw ConfigError(path, "expected an object");
  check_keys(spec, path, {"weights", "means", "covariances"});
  const auto* weights = find(spec, "weights");
  const auto* means = find(spec, "means");
  const auto* covs = find(spec, "covariances");
  if (!weights || !means || !covs) throw ConfigError(path, "needs weights, means, and covariances");
  if (!weights->is_array() || !means->is_array() || !covs->is_array() || weights->size() != means->size() ||
      weights->size() != covs->size() || weights->empty())
    throw ConfigError(path, "weights, means, and covariances must be arrays of one entry per component");

  std::vector<double> w;
  double sum = 0.0;
  for (std::size_t k = 0; k < weights->size(); ++k) {
    const double v = as_number((*weights)[k], path + ".weights[" + std::to_string(k) + "]");
    if (!(v > 0.0)) throw ConfigError(path + ".weights", "weights must be positive");
    w.push_back(v);
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw ConfigError(path + ".weights", "must sum to 1 within 1e-12 (got " + format_number(sum) + ")");
  for (double& v : w) v /= sum;

  std::vector<Vec> mu;
  for (std::size_t k = 0; k < means->size(); ++k) {
    const auto& m = (*means)[k];
    const std::string mpath = path + ".means[" + std::to_string(k) + "]";
    if (!m.is_array() || m.empty()) throw ConfigError(mpath, "expected a coordinate array");
    Vec v(static_cast<Eigen::Index>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i) v[static_cast<Eigen::Index>(i)] = as_number(m[i], mpath);
    mu.push_back(std::move(v));
  }
  const auto dim = mu.front().size();
  for (const Vec& v : mu)
    if (v.size() != dim) throw ConfigError(path + ".means", "inconsistent dimensions");

  std::vector<Mat> sigma;
  for (std::size_t k = 0; k < covs->size(); ++k) {
    const auto& c = (*covs)[k];
    const std::string cpath = path + ".covariances[" + std::to_string(k) + "]";
    if (c.is_number()) {
      const double v = as_number(c, cpath);
      if (!(v > 0.0)) throw ConfigError(cpath, "isotropic variance must be positive");
      sigma.push_back(v * Mat::Identity(dim, dim));
      continue;
    }
    if (!c.is_array() || c.size() != static_cast<std::size_t>(dim))
      throw ConfigError(cpath, "expected a positive scalar or a d x d matrix");
    Mat m(dim, dim);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!c[i].is_array() || c[i].size() != static_cast<std::size_t>(dim))
        throw ConfigError(cpath, "expected a d x d matrix");
      for (std::size_t j = 0; j < c[i].size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = as_number(c[i][j], cpath);
    }
    sigma.push_back(std::move(m));
  }
  try {
    return GaussianMixture(std::move(w), std::move(mu), std::move(sigma));
  } catch (const std::invalid_argument& err) {
    throw ConfigError(path, err.what());
  }
}

}  // namespace cfgdetail

inline ordered_json to_canonical_json(const ExperimentConfig& cfg) {
  ordered_json root;
  switch (cfg.experiment) {
    case ExperimentKind::simulate: root["experiment"] = "simulate"; break;
    case ExperimentKind::verify_theorem: root["experiment"] = "verify_theorem"; break;
    case ExperimentKind::estimator_convergence: root["experiment"] = "estimator_convergence"; break;
    case ExperimentKind::trajectory_compare: root["experiment"] = "trajectory_compare"; break;
    case ExperimentKind::weight_sweep: root["experiment"] = "weight_sweep"; break;
    case ExperimentKind::threshold_sweep: root["experiment"] = "threshold_sweep"; break;
  }
  root["seed"] = cfg.seed;
  root["output"] = cfg.output;

  if (cfg.mixture) {
    ordered_json mixture;
    const auto& gm = cfg.gm();
    mixture["weights"] = gm.weights();
    ordered_json means = ordered_json::array();
    ordered_json covs = ordered_json::array();
    for (int k = 0; k < gm.size(); ++k) {
      ordered_json m = ordered_json::array();
      for (int i = 0; i < gm.dim(); ++i) m.push_back(gm.mean(k)[i]);
      means.push_back(std::move(m));
      ordered_json c = ordered_json::array();
      for (int i = 0; i < gm.dim(); ++i) {
        ordered_json row = ordered_json::array();
        for (int j = 0; j < gm.dim(); ++j) row.push_back(gm.cov(k)(i, j));
        c.push_back(std::move(row));
      }
      covs.push_back(std::move(c));
    }
    mixture["means"] = std::move(means);
    mixture["covariances"] = std::move(covs);
    root["mixture"] = std::move(mixture);
  } else {
    root["mixture"] = nullptr;
  }

  root["partition"] = ordered_json{{"unsafe", cfg.partition.unsafe_components}};
  if (cfg.dataset_source.empty())
    root["dataset"] = nullptr;
  else
    root["dataset"] = cfg.dataset_source;

  ordered_json schedule;
  schedule["kind"] = cfg.schedule_kind == ScheduleKind::vp_linear ? "vp_linear" : "cosine";
  schedule["steps"] = cfg.schedule_steps;
  schedule["b_min"] = cfg.schedule_params.b_min;
  schedule["b_max"] = cfg.schedule_params.b_max;
  schedule["s"] = cfg.schedule_params.s;
  root["schedule"] = std::move(schedule);

  ordered_json run;
  run["solver"] = cfg.solver == SolverKind::ddpm ? "ddpm" : "ddim";
  run["n_samples"] = cfg.n_samples;
  run["weight_scale"] = cfg.weight_scale;
  if (cfg.init.kind == InitSpec::Kind::standard_normal) {
    run["init"] = "standard_normal";
  } else {
    ordered_json pts = ordered_json::array();
    for (const Vec& p : cfg.init.points) {
      ordered_json row = ordered_json::array();
      for (Eigen::Index i = 0; i < p.size(); ++i) row.push_back(p[i]);
      pts.push_back(std::move(row));
    }
    run["init"] = ordered_json{{"fixed_points", std::move(pts)}};
  }
  run["trajectories"] = cfg.trajectories;
  root["run"] = std::move(run);

  ordered_json guidance;
  switch (cfg.mode) {
    case GuidanceMode::baseline: guidance["mode"] = "baseline"; break;
    case GuidanceMode::safe: guidance["mode"] = "safe"; break;
    case GuidanceMode::safree: guidance["mode"] = "safree"; break;
    case GuidanceMode::sld: guidance["mode"] = "sld"; break;
    case GuidanceMode::sr: guidance["mode"] = "sr"; break;
  }
  guidance["estimator"] = cfg.estimator == BetaSource::exact ? "exact" : "empirical";
  guidance["kernel"] = ordered_json{{"kind", cfg.kernel.kind == KernelKind::diffusion_kernel ? "diffusion" : "rbf"},
                                    {"bandwidth", cfg.kernel.bandwidth}};
  guidance["lambda"] = cfg.lambda;
  guidance["gamma"] = cfg.mu_gamma;
  guidance["mu_max"] = cfg.mu_max;
  guidance["eta"] = cfg.eta;
  if (std::isinf(cfg.beta_threshold))
    guidance["beta_threshold"] = "inf";
  else
    guidance["beta_threshold"] = cfg.beta_threshold;
  switch (cfg.critical.kind) {
    case CriticalSpec::Kind::all: guidance["critical_steps"] = "all"; break;
    case CriticalSpec::Kind::top22: guidance["critical_steps"] = "top22"; break;
    case CriticalSpec::Kind::none: guidance["critical_steps"] = "none"; break;
    case CriticalSpec::Kind::range: guidance["critical_steps"] = ordered_json::array({cfg.critical.lo, cfg.critical.hi}); break;
  }
  guidance["sr_radius"] = cfg.sr_radius;
  if (cfg.condition.empty())
    guidance["condition"] = nullptr;
  else
    guidance["condition"] = cfg.condition;
  if (cfg.neg_condition.empty())
    guidance["neg_condition"] = nullptr;
  else
    guidance["neg_condition"] = cfg.neg_condition;
  root["guidance"] = std::move(guidance);

  root["eval"] = ordered_json{{"reference_samples", cfg.reference_samples}};

  ordered_json sweep;
  sweep["weight_scales"] = cfg.sweep_weight_scales;
  ordered_json thresholds = ordered_json::array();
  for (double v : cfg.sweep_thresholds) {
    if (std::isinf(v))
      thresholds.push_back("inf");
    else
      thresholds.push_back(v);
  }
  sweep["thresholds"] = std::move(thresholds);
  root["sweep"] = std::move(sweep);

  root["theorem"] = ordered_json{{"instances", cfg.theorem_instances}, {"points", cfg.theorem_points}};
  root["convergence"] = ordered_json{{"sizes", cfg.convergence_sizes}, {"grid_points", cfg.convergence_grid}};
  return root;
}

inline ExperimentConfig parse_config_json(const ordered_json& root, const std::filesystem::path& base_dir,
                                          const CliOverrides& overrides = {}) {
  using namespace cfgdetail;
  if (!root.is_object()) throw ConfigError("", "config must be a JSON object");
  check_keys(root, "",
             {"experiment", "seed", "output", "mixture", "partition", "dataset", "schedule", "run", "guidance",
              "eval", "sweep", "theorem", "convergence"});

  ExperimentConfig cfg;

  const auto* experiment = find(root, "experiment");
  if (!experiment) throw ConfigError("experiment", "required");
  const std::string kind = as_string(*experiment, "experiment");
  if (kind == "simulate") cfg.experiment = ExperimentKind::simulate;
  else if (kind == "verify_theorem") cfg.experiment = ExperimentKind::verify_theorem;
  else if (kind == "estimator_convergence") cfg.experiment = ExperimentKind::estimator_convergence;
  else if (kind == "trajectory_compare") cfg.experiment = ExperimentKind::trajectory_compare;
  else if (kind == "weight_sweep") cfg.experiment = ExperimentKind::weight_sweep;
  else if (kind == "threshold_sweep") cfg.experiment = ExperimentKind::threshold_sweep;
  else throw ConfigError("experiment", "unknown experiment '" + kind + "'");

  if (overrides.seed) {
    cfg.seed = *overrides.seed;
  } else {
    const auto* seed = find(root, "seed");
    if (!seed) throw ConfigError("seed", "required (runs are seeded, never implicitly random)");
    if (!seed->is_number_integer() && !seed->is_number_unsigned()) throw ConfigError("seed", "expected an integer");
    cfg.seed = seed->get<std::uint64_t>();
  }

  if (overrides.output) cfg.output = *overrides.output;
  else if (const auto* output = find(root, "output")) cfg.output = as_string(*output, "output");

  const auto* mixture = find(root, "mixture");
  if (!mixture) {
    if (cfg.experiment != ExperimentKind::verify_theorem)
      throw ConfigError("mixture", "required");
  } else if (mixture->is_string()) {
    const std::string ref = mixture->get<std::string>();
    if (ref.rfind("file:", 0) != 0) throw ConfigError("mixture", "expected an object or \"file:<path>\"");
    const std::filesystem::path path = base_dir / ref.substr(5);
    if (!std::filesystem::exists(path)) throw ConfigError("mixture", "file not found: " + path.string());
    ordered_json loaded;
    try {
      loaded = ordered_json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& err) {
      throw ConfigError("mixture", std::string("invalid JSON in referenced file: ") + err.what());
    }
    cfg.mixture = parse_mixture(loaded, "mixture");
  } else {
    cfg.mixture = parse_mixture(*mixture, "mixture");
  }

  if (const auto* partition = find(root, "partition")) {
    if (!cfg.mixture) throw ConfigError("partition", "needs a mixture to partition");
    check_keys(*partition, "partition", {"unsafe"});
    if (const auto* unsafe = find(*partition, "unsafe")) {
      const auto indices = as_int_list(*unsafe, "partition.unsafe");
      for (int k : indices)
        if (k < 0 || k >= cfg.gm().size()) throw ConfigError("partition.unsafe", "component index out of range");
      if (static_cast<int>(std::set<int>(indices.begin(), indices.end()).size()) == cfg.gm().size())
        throw ConfigError("partition.unsafe", "must be a proper subset (some component must stay safe)");
      cfg.partition = SafetyPartition::from_unsafe_set(cfg.gm(), indices);
    }
  }
  if (cfg.mixture && cfg.partition.unsafe_components.empty())
    cfg.partition = SafetyPartition::from_unsafe_set(cfg.gm(), {});

  if (const auto* dataset = find(root, "dataset")) {
    const std::string source = as_string(*dataset, "dataset");
    if (source.rfind("sample:", 0) == 0) {
      int count = 0;
      try {
        count = std::stoi(source.substr(7));
      } catch (...) {
        throw ConfigError("dataset", "expected \"sample:<count>\"");
      }
      if (count < 1) throw ConfigError("dataset", "sample count must be positive");
      cfg.dataset_source = "sample:" + std::to_string(count);
    } else if (source.rfind("csv:", 0) == 0) {
      std::filesystem::path path(source.substr(4));
      if (path.is_relative()) path = base_dir / path;
      if (!std::filesystem::exists(path)) throw ConfigError("dataset", "file not found: " + path.string());
      cfg.dataset_source = "csv:" + path.string();
    } else {
      throw ConfigError("dataset", "expected \"sample:<count>\" or \"csv:<path>\"");
    }
  }

  if (const auto* schedule = find(root, "schedule")) {
    check_keys(*schedule, "schedule", {"kind", "steps", "b_min", "b_max", "s"});
    if (const auto* k = find(*schedule, "kind")) {
      const std::string name = as_string(*k, "schedule.kind");
      if (name == "vp_linear") cfg.schedule_kind = ScheduleKind::vp_linear;
      else if (name == "cosine") cfg.schedule_kind = ScheduleKind::cosine;
      else throw ConfigError("schedule.kind", "unknown kind '" + name + "'");
    }
    if (const auto* steps = find(*schedule, "steps")) cfg.schedule_steps = as_int(*steps, "schedule.steps");
    if (const auto* v = find(*schedule, "b_min")) cfg.schedule_params.b_min = as_number(*v, "schedule.b_min");
    if (const auto* v = find(*schedule, "b_max")) cfg.schedule_params.b_max = as_number(*v, "schedule.b_max");
    if (const auto* v = find(*schedule, "s")) cfg.schedule_params.s = as_number(*v, "schedule.s");
  }
  if (cfg.schedule_steps < 2) throw ConfigError("schedule.steps", "must be at least 2");

  if (const auto* run = find(root, "run")) {
    check_keys(*run, "run", {"solver", "n_samples", "weight_scale", "init", "trajectories"});
    if (const auto* solver = find(*run, "solver")) {
      const std::string name = as_string(*solver, "run.solver");
      if (name == "ddpm") cfg.solver = SolverKind::ddpm;
      else if (name == "ddim") cfg.solver = SolverKind::ddim;
      else throw ConfigError("run.solver", "unknown solver '" + name + "'");
    }
    if (const auto* n = find(*run, "n_samples")) cfg.n_samples = as_int(*n, "run.n_samples");
    if (const auto* w = find(*run, "weight_scale")) cfg.weight_scale = as_number(*w, "run.weight_scale");
    if (const auto* init = find(*run, "init")) {
      if (init->is_string()) {
        if (init->get<std::string>() != "standard_normal")
          throw ConfigError("run.init", "expected \"standard_normal\" or {\"fixed_points\": [...]}");
        cfg.init = InitSpec::standard_normal();
      } else if (init->is_object()) {
        if (!cfg.mixture) throw ConfigError("run.init", "fixed_points need a mixture for dimension checks");
        check_keys(*init, "run.init", {"fixed_points"});
        const auto* pts = find(*init, "fixed_points");
        if (!pts || !pts->is_array() || pts->empty()) throw ConfigError("run.init.fixed_points", "expected a nonempty array of points");
        std::vector<Vec> points;
        for (std::size_t i = 0; i < pts->size(); ++i) {
          const auto& p = (*pts)[i];
          const std::string ppath = "run.init.fixed_points[" + std::to_string(i) + "]";
          if (!p.is_array() || p.size() != static_cast<std::size_t>(cfg.gm().dim()))
            throw ConfigError(ppath, "point dimension must match the mixture");
          Vec v(cfg.gm().dim());
          for (std::size_t j = 0; j < p.size(); ++j) v[static_cast<Eigen::Index>(j)] = as_number(p[j], ppath);
          points.push_back(std::move(v));
        }
        cfg.init = InitSpec::fixed(std::move(points));
      } else {
        throw ConfigError("run.init", "expected \"standard_normal\" or {\"fixed_points\": [...]}");
      }
    }
    if (const auto* t = find(*run, "trajectories")) {
      if (!t->is_boolean()) throw ConfigError("run.trajectories", "expected a boolean");
      cfg.trajectories = t->get<bool>();
    }
  }
  if (overrides.force_trajectories) cfg.trajectories = true;
  if (cfg.n_samples < 1) throw ConfigError("run.n_samples", "must be at least 1");
  if (!(cfg.weight_scale >= 0.0)) throw ConfigError("run.weight_scale", "must be nonnegative");
  if (cfg.init.kind == InitSpec::Kind::fixed_points &&
      static_cast<int>(cfg.init.points.size()) != cfg.n_samples)
    cfg.n_samples = static_cast<int>(cfg.init.points.size());

  bool eta_given = false;
  if (const auto* guidance = find(root, "guidance")) {
    check_keys(*guidance, "guidance",
               {"mode", "estimator", "kernel", "lambda", "gamma", "mu_max", "eta", "beta_threshold",
                "critical_steps", "sr_radius", "condition", "neg_condition"});
    if (const auto* mode = find(*guidance, "mode")) {
      const std::string name = as_string(*mode, "guidance.mode");
      if (name == "baseline") cfg.mode = GuidanceMode::baseline;
      else if (name == "safe") cfg.mode = GuidanceMode::safe;
      else if (name == "safree") cfg.mode = GuidanceMode::safree;
      else if (name == "sld") cfg.mode = GuidanceMode::sld;
      else if (name == "sr") cfg.mode = GuidanceMode::sr;
      else throw ConfigError("guidance.mode", "unknown mode '" + name + "'");
    }
    if (const auto* est = find(*guidance, "estimator")) {
      const std::string name = as_string(*est, "guidance.estimator");
      if (name == "exact") cfg.estimator = BetaSource::exact;
      else if (name == "empirical") cfg.estimator = BetaSource::empirical;
      else throw ConfigError("guidance.estimator", "expected \"exact\" or \"empirical\"");
    }
    if (const auto* kernel = find(*guidance, "kernel")) {
      check_keys(*kernel, "guidance.kernel", {"kind", "bandwidth"});
      if (const auto* k = find(*kernel, "kind")) {
        const std::string name = as_string(*k, "guidance.kernel.kind");
        if (name == "diffusion") cfg.kernel.kind = KernelKind::diffusion_kernel;
        else if (name == "rbf") cfg.kernel.kind = KernelKind::rbf;
        else throw ConfigError("guidance.kernel.kind", "expected \"diffusion\" or \"rbf\"");
      }
      if (const auto* bw = find(*kernel, "bandwidth")) {
        cfg.kernel.bandwidth = as_number(*bw, "guidance.kernel.bandwidth");
        if (!(cfg.kernel.bandwidth > 0.0)) throw ConfigError("guidance.kernel.bandwidth", "must be positive");
      }
    }
    if (const auto* v = find(*guidance, "lambda")) cfg.lambda = as_number(*v, "guidance.lambda");
    if (const auto* v = find(*guidance, "gamma")) cfg.mu_gamma = as_number(*v, "guidance.gamma");
    if (const auto* v = find(*guidance, "mu_max")) cfg.mu_max = as_number(*v, "guidance.mu_max");
    if (const auto* v = find(*guidance, "eta")) {
      cfg.eta = as_number(*v, "guidance.eta");
      eta_given = true;
    }
    if (const auto* v = find(*guidance, "beta_threshold")) cfg.beta_threshold = as_threshold(*v, "guidance.beta_threshold");
    if (const auto* cs = find(*guidance, "critical_steps")) {
      if (cs->is_string()) {
        const std::string name = cs->get<std::string>();
        if (name == "all") cfg.critical.kind = CriticalSpec::Kind::all;
        else if (name == "top22") cfg.critical.kind = CriticalSpec::Kind::top22;
        else if (name == "none") cfg.critical.kind = CriticalSpec::Kind::none;
        else throw ConfigError("guidance.critical_steps", "expected \"all\", \"top22\", \"none\", or [lo, hi]");
      } else if (cs->is_array() && cs->size() == 2) {
        cfg.critical.kind = CriticalSpec::Kind::range;
        cfg.critical.lo = as_int((*cs)[0], "guidance.critical_steps[0]");
        cfg.critical.hi = as_int((*cs)[1], "guidance.critical_steps[1]");
        if (cfg.critical.lo < 1 || cfg.critical.hi > cfg.schedule_steps || cfg.critical.lo > cfg.critical.hi)
          throw ConfigError("guidance.critical_steps", "range must satisfy 1 <= lo <= hi <= steps");
      } else {
        throw ConfigError("guidance.critical_steps", "expected \"all\", \"top22\", \"none\", or [lo, hi]");
      }
    }
    if (const auto* v = find(*guidance, "sr_radius")) {
      cfg.sr_radius = as_number(*v, "guidance.sr_radius");
      if (!(cfg.sr_radius > 0.0)) throw ConfigError("guidance.sr_radius", "must be positive");
    }
    if (const auto* v = find(*guidance, "condition")) cfg.condition = as_int_list(*v, "guidance.condition");
    if (const auto* v = find(*guidance, "neg_condition")) cfg.neg_condition = as_int_list(*v, "guidance.neg_condition");
  }

  // Reported eta presets: 0.33 alongside the filtered-condition combo, 0.03
  // alongside the negative-guidance combo, 1.0 otherwise.
  if (!eta_given) {
    if (cfg.mode == GuidanceMode::safree) cfg.eta = kEtaSafreeCombo;
    else if (cfg.mode == GuidanceMode::sld) cfg.eta = kEtaSldCombo;
    else cfg.eta = 1.0;
  }
  if (!(cfg.eta >= 0.0)) throw ConfigError("guidance.eta", "must be nonnegative");

  if (const auto* eval = find(root, "eval")) {
    check_keys(*eval, "eval", {"reference_samples"});
    if (const auto* n = find(*eval, "reference_samples")) {
      cfg.reference_samples = as_int(*n, "eval.reference_samples");
      if (cfg.reference_samples < 1) throw ConfigError("eval.reference_samples", "must be positive");
    }
  }

  if (const auto* sweep = find(root, "sweep")) {
    check_keys(*sweep, "sweep", {"weight_scales", "thresholds"});
    if (const auto* ws = find(*sweep, "weight_scales")) {
      if (!ws->is_array() || ws->size() < 2) throw ConfigError("sweep.weight_scales", "expected at least two values");
      cfg.sweep_weight_scales.clear();
      for (std::size_t i = 0; i < ws->size(); ++i) {
        const double v = as_number((*ws)[i], "sweep.weight_scales[" + std::to_string(i) + "]");
        if (!(v >= 0.0)) throw ConfigError("sweep.weight_scales", "scales must be nonnegative");
        cfg.sweep_weight_scales.push_back(v);
      }
    }
    if (const auto* th = find(*sweep, "thresholds")) {
      if (!th->is_array() || th->empty()) throw ConfigError("sweep.thresholds", "expected a nonempty array");
      cfg.sweep_thresholds.clear();
      for (std::size_t i = 0; i < th->size(); ++i)
        cfg.sweep_thresholds.push_back(as_threshold((*th)[i], "sweep.thresholds[" + std::to_string(i) + "]"));
    }
  }

  if (const auto* theorem = find(root, "theorem")) {
    check_keys(*theorem, "theorem", {"instances", "points"});
    if (const auto* v = find(*theorem, "instances")) cfg.theorem_instances = as_int(*v, "theorem.instances");
    if (const auto* v = find(*theorem, "points")) cfg.theorem_points = as_int(*v, "theorem.points");
    if (cfg.theorem_instances < 1 || cfg.theorem_points < 1)
      throw ConfigError("theorem", "instances and points must be positive");
  }

  if (const auto* conv = find(root, "convergence")) {
    check_keys(*conv, "convergence", {"sizes", "grid_points"});
    if (const auto* sizes = find(*conv, "sizes")) {
      cfg.convergence_sizes = as_int_list(*sizes, "convergence.sizes");
      if (cfg.convergence_sizes.size() < 2) throw ConfigError("convergence.sizes", "expected at least two sizes");
      for (std::size_t i = 1; i < cfg.convergence_sizes.size(); ++i)
        if (cfg.convergence_sizes[i] <= cfg.convergence_sizes[i - 1])
          throw ConfigError("convergence.sizes", "sizes must be strictly increasing");
      if (cfg.convergence_sizes.front() < 1) throw ConfigError("convergence.sizes", "sizes must be positive");
    }
    if (const auto* g = find(*conv, "grid_points")) {
      cfg.convergence_grid = as_int(*g, "convergence.grid_points");
      if (cfg.convergence_grid < 1) throw ConfigError("convergence.grid_points", "must be positive");
    }
  }

  // Cross-field requirements.
  const bool needs_partition = cfg.mode == GuidanceMode::safe || cfg.mode == GuidanceMode::safree ||
                               cfg.mode == GuidanceMode::sld ||
                               cfg.experiment == ExperimentKind::estimator_convergence ||
                               cfg.experiment == ExperimentKind::weight_sweep ||
                               cfg.experiment == ExperimentKind::threshold_sweep ||
                               cfg.experiment == ExperimentKind::trajectory_compare;
  if (needs_partition && cfg.partition.unsafe_components.empty())
    throw ConfigError("partition.unsafe", "this experiment/mode needs a nonempty unsafe set");
  if ((cfg.estimator == BetaSource::empirical &&
       (cfg.mode == GuidanceMode::safe || cfg.mode == GuidanceMode::safree || cfg.mode == GuidanceMode::sld)) ||
      cfg.mode == GuidanceMode::sr) {
    if (cfg.dataset_source.empty())
      throw ConfigError("dataset", "empirical estimators and the repellency baseline need a dataset");
  }
  if (cfg.dataset_source.rfind("sample:", 0) == 0 && cfg.partition.unsafe_components.empty())
    throw ConfigError("dataset", "\"sample:<count>\" draws from the unsafe set, which is empty");
  if (cfg.mode == GuidanceMode::safree && cfg.condition.empty())
    throw ConfigError("guidance.condition", "safree mode needs a positive condition subset");
  if (cfg.mode == GuidanceMode::sld && cfg.condition.empty())
    throw ConfigError("guidance.condition", "sld mode needs a positive condition subset");
  if (cfg.mixture) {
    for (int k : cfg.condition)
      if (k < 0 || k >= cfg.gm().size()) throw ConfigError("guidance.condition", "component index out of range");
    for (int k : cfg.neg_condition)
      if (k < 0 || k >= cfg.gm().size()) throw ConfigError("guidance.neg_condition", "component index out of range");
  }
  if (cfg.experiment == ExperimentKind::trajectory_compare && cfg.init.kind != InitSpec::Kind::fixed_points)
    throw ConfigError("run.init", "trajectory_compare needs fixed_points inits");

  cfg.canonical = to_canonical_json(cfg);
  cfg.config_hash = hex64(fnv1a64(cfg.canonical.dump()));
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir,
                                          const CliOverrides& overrides = {}) {
  ordered_json root;
  try {
    root = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& err) {
    throw ConfigError("", std::string("invalid JSON: ") + err.what());
  }
  return parse_config_json(root, base_dir, overrides);
}

inline ExperimentConfig parse_config(const std::string& path, const CliOverrides& overrides = {}) {
  return parse_config_text(read_text_file(path), std::filesystem::path(path).parent_path(), overrides);
}

}  // namespace sdlab

#include "sdlab/experiment_run.hpp"
