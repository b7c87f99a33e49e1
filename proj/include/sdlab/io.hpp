#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/metrics.hpp"
#include "sdlab/mixture.hpp"
#include "sdlab/sampler.hpp"

// Artifact writers. All numeric CSV output goes through one %.17g formatter
// so files round-trip bit-exactly and byte-compare across reruns.

namespace sdlab {

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

inline void write_samples_csv(const std::filesystem::path& path, const std::vector<Vec>& samples,
                              const std::vector<Classification>& classes) {
  if (samples.size() != classes.size()) throw std::invalid_argument("write_samples_csv: size mismatch");
  std::string out;
  out.reserve(64 * samples.size() + 64);
  const int dim = samples.empty() ? 0 : static_cast<int>(samples.front().size());
  out += "sample_index";
  for (int i = 0; i < dim; ++i) out += ",x" + std::to_string(i);
  out += ",component,safe\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out += std::to_string(i);
    for (int j = 0; j < dim; ++j) {
      out += ',';
      out += format_number(samples[i][j]);
    }
    out += ',';
    out += std::to_string(classes[i].component);
    out += classes[i].unsafe ? ",0\n" : ",1\n";
  }
  write_text_file(path, out);
}

inline void write_diagnostics_csv(const std::filesystem::path& path, const std::vector<StepDiagnostic>& diags) {
  std::string out;
  out.reserve(48 * diags.size() + 64);
  out += "step,sample_index,beta,gate_open,applied_weight\n";
  for (const auto& d : diags) {
    out += std::to_string(d.step);
    out += ',';
    out += std::to_string(d.sample);
    out += ',';
    out += format_number(d.beta);
    out += d.gate_open ? ",1," : ",0,";
    out += format_number(d.applied_weight);
    out += '\n';
  }
  write_text_file(path, out);
}

inline void write_trajectories_csv(const std::filesystem::path& path, const RunResult& result, int steps) {
  std::string out;
  out += "sample_index,step";
  const int dim =
      result.trajectories.empty() || result.trajectories.front().empty()
          ? 0
          : static_cast<int>(result.trajectories.front().front().size());
  for (int i = 0; i < dim; ++i) out += ",x" + std::to_string(i);
  out += '\n';
  for (std::size_t i = 0; i < result.trajectories.size(); ++i) {
    const auto& traj = result.trajectories[i];
    for (std::size_t j = 0; j < traj.size(); ++j) {
      out += std::to_string(i);
      out += ',';
      out += std::to_string(steps - static_cast<int>(j));  // t runs T..0
      for (int k = 0; k < dim; ++k) {
        out += ',';
        out += format_number(traj[j][k]);
      }
      out += '\n';
    }
  }
  write_text_file(path, out);
}

// Axis-equal scatter for 2-D runs; unsafe component means are marked with
// crosses and a 2-sigma outline.
inline std::string scatter_svg(const std::vector<Vec>& samples, const std::vector<Classification>& classes,
                               const GaussianMixture& gm, const SafetyPartition& part) {
  if (samples.empty() || samples.front().size() != 2)
    throw std::invalid_argument("scatter_svg: requires 2-D samples");
  double lo_x = samples.front()[0], hi_x = lo_x, lo_y = samples.front()[1], hi_y = lo_y;
  const auto absorb = [&](const Vec& p) {
    lo_x = std::min(lo_x, p[0]);
    hi_x = std::max(hi_x, p[0]);
    lo_y = std::min(lo_y, p[1]);
    hi_y = std::max(hi_y, p[1]);
  };
  for (const Vec& p : samples) absorb(p);
  for (int k = 0; k < gm.size(); ++k) absorb(gm.mean(k));
  const double pad = 0.08 * std::max(hi_x - lo_x, hi_y - lo_y) + 1e-9;
  lo_x -= pad;
  hi_x += pad;
  lo_y -= pad;
  hi_y += pad;

  const double size = 640.0;
  const double scale = size / std::max(hi_x - lo_x, hi_y - lo_y);  // axis-equal
  const auto px = [&](double x) { return (x - lo_x) * scale; };
  const auto py = [&](double y) { return size - (y - lo_y) * scale; };
  const auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + num(size) + " " + num(size) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    svg += "<circle cx=\"" + num(px(samples[i][0])) + "\" cy=\"" + num(py(samples[i][1])) +
           "\" r=\"1.6\" fill=\"" + (classes[i].unsafe ? std::string("#c0392b") : std::string("#2e6da4")) +
           "\" fill-opacity=\"0.6\"/>\n";
  }
  for (int k : part.unsafe_components) {
    const double cx = px(gm.mean(k)[0]);
    const double cy = py(gm.mean(k)[1]);
    Eigen::SelfAdjointEigenSolver<Mat> eig(gm.cov(k));
    const double radius = 2.0 * std::sqrt(eig.eigenvalues().maxCoeff()) * scale;
    svg += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" + num(radius) +
           "\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>\n";
    const double arm = 7.0;
    svg += "<path d=\"M " + num(cx - arm) + " " + num(cy - arm) + " L " + num(cx + arm) + " " + num(cy + arm) +
           " M " + num(cx - arm) + " " + num(cy + arm) + " L " + num(cx + arm) + " " + num(cy - arm) +
           "\" stroke=\"black\" stroke-width=\"2.5\"/>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace sdlab
