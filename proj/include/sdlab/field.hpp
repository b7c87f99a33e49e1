#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace sdlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// x_0|t predictor: maps a noisy point and a step index to the expected clean
// sample. Evaluators must be pure functions (equal inputs, bitwise-equal
// outputs) so fields can be shared across concurrent samplers.
class DenoiserField {
 public:
  using Fn = std::function<Vec(const Vec&, int)>;

  DenoiserField() = default;
  DenoiserField(std::string label, int dim, Fn fn) : label_(std::move(label)), dim_(dim), fn_(std::move(fn)) {}

  Vec operator()(const Vec& x_t, int t) const {
    if (x_t.size() != dim_) throw std::invalid_argument("DenoiserField '" + label_ + "': dimension mismatch");
    return fn_(x_t, t);
  }

  const std::string& label() const { return label_; }
  int dim() const { return dim_; }
  bool valid() const { return static_cast<bool>(fn_); }

 private:
  std::string label_;
  int dim_ = 0;
  Fn fn_;
};

// Scalar weight evaluator, e.g. the exact likelihood-ratio weight or its
// dataset estimate.
using WeightFn = std::function<double(const Vec&, int)>;

}  // namespace sdlab
