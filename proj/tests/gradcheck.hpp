#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "osr/params.hpp"

namespace gradcheck {

struct Failure {
  std::string name;
  double error;
};

// `loss` evaluates the scalar objective from the current parameter values; `accumulate` runs
// forward + backward once and leaves analytic gradients in ps. Returns the largest relative
// error over all parameter tensors; the worst tensor's name goes into `worst`. Denominators are
// floored at 1e-4 of the full gradient norm, so tensors whose gradient vanishes identically
// (key biases, which cancel inside their softmax) are held to an absolute tolerance instead of
// scoring pure rounding noise.
inline double max_param_error(osr::ParameterSet<double>& ps, const std::function<double()>& loss,
                              const std::function<void()>& accumulate, std::string* worst = nullptr) {
  ps.zero_grad();
  accumulate();
  std::vector<osr::MatD> analytic;
  double total_sq = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    analytic.push_back(ps.grad_at(i));
    total_sq += analytic.back().squaredNorm();
  }
  const double floor = std::max(1e-4 * std::sqrt(total_sq), 1e-12);
  double max_err = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double err = oracle::gradient_relative_error(loss, ps.value_at(i), analytic[i], 1e-6, floor);
    if (err > max_err) {
      max_err = err;
      if (worst) *worst = ps.name(i);
    }
  }
  return max_err;
}

}  // namespace gradcheck
