#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "spotkit/tensor.hpp"

namespace spotkit::tensor {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares tape gradients of `loss_fn` against central differences for
/// every coordinate of every tensor in `params`. `loss_fn` must be
/// deterministic and must not depend on state it mutates.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                                         double h = 1e-5) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
  }
  GradCheckReport report;
  NoGradScope no_grad;
  for (auto& p : params) {
    const std::vector<double> analytic = p.tensor.grad();
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_fn().item();
      values[i] = saved - h;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = err;
        report.worst_param = p.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace spotkit::tensor
