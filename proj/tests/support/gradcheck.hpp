#pragma once

// Central finite-difference check of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "mmseq/autodiff.hpp"
#include "mmseq/optim.hpp"

namespace mmseq::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // parameter name and index of the worst entry
  std::size_t checked = 0;
};

/// Relative error with a floor on the denominator so entries whose true
/// gradient is ~0 are judged by absolute error instead.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss` builds a scalar on the given tape from the store's parameters.
/// Every entry of every parameter is perturbed by +-h.
inline GradCheckResult grad_check(nn::ParameterStore& store, const std::function<nn::Var(nn::Tape&)>& loss,
                                  double h = 1e-5, double floor = 1e-6) {
  store.zero_grad();
  {
    nn::Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&]() {
    nn::Tape tape;
    tape.set_recording(false);
    return loss(tape).value().item();
  };
  GradCheckResult out;
  for (nn::Parameter& p : store.all()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = eval();
      p.value[i] = keep - h;
      const double down = eval();
      p.value[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double err = rel_error(p.grad[i], numeric, floor);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = p.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(p.grad[i]) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace mmseq::testing
