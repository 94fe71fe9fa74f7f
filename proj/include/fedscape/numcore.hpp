#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "fedscape/layers.hpp"
#include "fedscape/rng.hpp"
#include "fedscape/tensor.hpp"

namespace fedscape {

// Element-mean squared error and its gradient wrt pred:
//   loss = mean over all elements of (pred - target)^2
//   grad = 2 (pred - target) / numel
struct MseOut {
  double loss;
  Tensor grad;
};
MseOut mse_loss(const Tensor& pred, const Tensor& target);
double mse_value(const Tensor& pred, const Tensor& target);

// Adam with bias correction. Moments are keyed by parameter name and
// zero-initialized on first touch; t increments by exactly 1 per step.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, Tensor> m, v;

  explicit AdamState(double lr = 1e-3) : lr(lr) {}
};

void adam_step(std::span<const ParamRef> params, AdamState& state);

// Plain gradient descent, used by the FedOpt server sanity mode.
void sgd_step(std::span<const ParamRef> params, double lr);

// Central-difference gradient verification.
//
// `f` evaluates the scalar objective at the current parameter values and must
// be pure. The analytic gradients are read from the refs' grad tensors, which
// the caller fills with one backward pass beforehand. Returns the max over
// sampled coordinates of |analytic - fd| / max(1, |analytic|).
double grad_check(const std::function<double()>& f, std::span<const ParamRef> params,
                  double h, int n_samples, Rng& rng);

}  // namespace fedscape
