#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

// Independent numerical oracles used only by the test suites. Nothing here
// may call into the library paths under test.

namespace oracle {

// Adaptive Simpson quadrature on [a, b].
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-12,
                        int max_depth = 60) {
  struct Recurse {
    const std::function<double(double)>& f;
    int max_depth;
    double run(double a, double b, double fa, double fm, double fb, double whole, double tol, int depth) const {
      const double m = 0.5 * (a + b);
      const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
      const double flm = f(lm), frm = f(rm);
      const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
      const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
      const double delta = left + right - whole;
      if (depth >= max_depth || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
      return run(a, m, fa, flm, fm, left, tol / 2.0, depth + 1) +
             run(m, b, fm, frm, fb, right, tol / 2.0, depth + 1);
    }
  };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return Recurse{f, max_depth}.run(a, b, fa, fm, fb, whole, tol, 0);
}

// Panelized variant for localized integrands that a single adaptive pass can
// miss entirely. Panels should be no wider than the narrowest feature.
inline double integrate_panels(const std::function<double(double)>& f, double a, double b, int panels,
                               double tol = 1e-13) {
  double total = 0.0;
  const double width = (b - a) / panels;
  for (int i = 0; i < panels; ++i) total += integrate(f, a + i * width, a + (i + 1) * width, tol);
  return total;
}

// Gauss-Hermite nodes/weights (weight function exp(-u^2)) via Golub-Welsch.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussHermite gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: need n >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(i / 2.0);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  if (solver.info() != Eigen::Success) throw std::runtime_error("gauss_hermite: eigensolver failed");
  GaussHermite gh;
  const double mu0 = std::sqrt(std::acos(-1.0));  // integral of exp(-u^2)
  for (int i = 0; i < n; ++i) {
    gh.nodes.push_back(solver.eigenvalues()(i));
    const double v0 = solver.eigenvectors()(0, i);
    gh.weights.push_back(mu0 * v0 * v0);
  }
  return gh;
}

// E_{x ~ N(mean, cov)}[ f(x) ] by tensor-product Gauss-Hermite (d <= 3).
inline double gaussian_expectation(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                   const std::function<double(const Eigen::VectorXd&)>& f, int nodes_per_axis = 64) {
  const int d = static_cast<int>(mean.size());
  if (d > 3) throw std::invalid_argument("gaussian_expectation: tensor quadrature limited to d <= 3");
  const GaussHermite gh = gauss_hermite(nodes_per_axis);
  const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
  const double pi = std::acos(-1.0);
  const double norm = std::pow(pi, -0.5 * d);
  double total = 0.0;
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  for (;;) {
    Eigen::VectorXd u(d);
    double w = 1.0;
    for (int i = 0; i < d; ++i) {
      u[i] = gh.nodes[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      w *= gh.weights[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    }
    const Eigen::VectorXd x = mean + std::sqrt(2.0) * (l * u);
    total += w * f(x);
    int axis = 0;
    while (axis < d) {
      if (++idx[static_cast<std::size_t>(axis)] < nodes_per_axis) break;
      idx[static_cast<std::size_t>(axis)] = 0;
      ++axis;
    }
    if (axis == d) break;
  }
  return norm * total;
}

// Central finite difference.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace oracle
