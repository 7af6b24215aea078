#pragma once

// Parameter storage, initialization and the Adam update.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "mmseq/autodiff.hpp"
#include "mmseq/rng.hpp"

namespace mmseq::nn {

/// Owns a model's parameters in registration order. Addresses are stable.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value);
  /// Linear weight [in, out] ~ uniform(-1/sqrt(in), 1/sqrt(in)).
  Parameter& add_uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng);
  Parameter& add_normal(std::string name, Shape shape, double stddev, Rng& rng);
  Parameter& add_constant(std::string name, Shape shape, double value);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::deque<Parameter>& all() noexcept { return params_; }
  const std::deque<Parameter>& all() const noexcept { return params_; }
  std::size_t scalar_count() const noexcept;

  void zero_grad();
  /// False when any gradient entry is NaN or infinite.
  bool grads_finite() const;

  /// Optimizer step counter shared by all parameters.
  std::int64_t step = 0;

 private:
  std::deque<Parameter> params_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter from its grad; bumps
/// store.step. Throws NumericError on a non-finite gradient.
void adam_step(ParameterStore& store, const AdamConfig& config);

/// Rounds every value and optimizer moment to float precision, matching what
/// a checkpoint stores, so a resumed run continues from identical state.
void snap_to_float(ParameterStore& store);

}  // namespace mmseq::nn
