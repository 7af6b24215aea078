#include "mmseq/optim.hpp"

#include <cmath>

#include "mmseq/error.hpp"

namespace mmseq::nn {

Parameter& ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw ValidationError("duplicate parameter name " + name);
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter& ParameterStore::add_uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return add(std::move(name), std::move(t));
}

Parameter& ParameterStore::add_normal(std::string name, Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return add(std::move(name), std::move(t));
}

Parameter& ParameterStore::add_constant(std::string name, Shape shape, double value) {
  return add(std::move(name), Tensor(std::move(shape), value));
}

Parameter& ParameterStore::get(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw ValidationError("unknown parameter " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

bool ParameterStore::grads_finite() const {
  for (const Parameter& p : params_) {
    if (!p.grad.all_finite()) return false;
  }
  return true;
}

void adam_step(ParameterStore& store, const AdamConfig& config) {
  if (!store.grads_finite()) throw NumericError("non-finite gradient at optimizer step " + std::to_string(store.step + 1));
  ++store.step;
  const double t = static_cast<double>(store.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (Parameter& p : store.all()) {
    double* w = p.value.ptr();
    double* m = p.adam_m.ptr();
    double* v = p.adam_v.ptr();
    const double* g = p.grad.ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

void snap_to_float(ParameterStore& store) {
  auto snap = [](Tensor& t) {
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  };
  for (Parameter& p : store.all()) {
    snap(p.value);
    snap(p.adam_m);
    snap(p.adam_v);
  }
}

}  // namespace mmseq::nn
