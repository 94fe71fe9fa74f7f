#include "fedscape/numcore.hpp"

#include <cmath>

namespace fedscape {

MseOut mse_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw TensorError("mse_loss: shape mismatch");
  std::int64_t n = pred.size();
  double acc = 0.0;
  Tensor grad(pred.shape());
  double inv = 1.0 / static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
    grad[i] = static_cast<float>(2.0 * d * inv);
  }
  return {acc * inv, std::move(grad)};
}

double mse_value(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw TensorError("mse_value: shape mismatch");
  double acc = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

void adam_step(std::span<const ParamRef> params, AdamState& state) {
  state.t += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (const ParamRef& p : params) {
    Tensor& theta = *p.value;
    const Tensor& g = *p.grad;
    if (checked_mode()) g.check_finite(("gradient of " + p.name).c_str());
    Tensor& m = state.m.try_emplace(p.name, Tensor(theta.shape())).first->second;
    Tensor& v = state.v.try_emplace(p.name, Tensor(theta.shape())).first->second;
    if (!m.same_shape(theta) || !v.same_shape(theta)) {
      throw TensorError("adam state shape mismatch for " + p.name);
    }
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      double mi2 = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      double vi2 = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<float>(mi2);
      v[i] = static_cast<float>(vi2);
      double m_hat = mi2 / bc1;
      double v_hat = vi2 / bc2;
      theta[i] = static_cast<float>(static_cast<double>(theta[i]) -
                                    state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

void sgd_step(std::span<const ParamRef> params, double lr) {
  for (const ParamRef& p : params) {
    Tensor& theta = *p.value;
    const Tensor& g = *p.grad;
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      theta[i] = static_cast<float>(static_cast<double>(theta[i]) -
                                    lr * static_cast<double>(g[i]));
    }
  }
}

double grad_check(const std::function<double()>& f, std::span<const ParamRef> params,
                  double h, int n_samples, Rng& rng) {
  std::int64_t total = 0;
  for (const ParamRef& p : params) total += p.value->size();
  if (total == 0) return 0.0;

  double max_err = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    std::int64_t flat = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(total)));
    const ParamRef* chosen = nullptr;
    for (const ParamRef& p : params) {
      if (flat < p.value->size()) {
        chosen = &p;
        break;
      }
      flat -= p.value->size();
    }
    Tensor& theta = *chosen->value;
    float saved = theta[flat];
    theta[flat] = static_cast<float>(static_cast<double>(saved) + h);
    double f_plus = f();
    theta[flat] = static_cast<float>(static_cast<double>(saved) - h);
    double f_minus = f();
    theta[flat] = saved;

    double fd = (f_plus - f_minus) / (2.0 * h);
    double analytic = static_cast<double>((*chosen->grad)[flat]);
    double err = std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
    if (err > max_err) max_err = err;
  }
  return max_err;
}

}  // namespace fedscape
