#include "fedscape/metrics.hpp"

#include <cmath>

#include "fedscape/numcore.hpp"

namespace fedscape {

double rmse(const Tensor& pred, const Tensor& target) {
  return std::sqrt(mse_value(pred, target));
}

std::optional<double> pcc(const Tensor& pred_col, const Tensor& target_col) {
  if (!pred_col.same_shape(target_col)) throw TensorError("pcc: shape mismatch");
  std::int64_t n = pred_col.size();
  if (n < 2) throw TensorError("pcc: needs at least 2 samples");
  double mean_x = 0.0, mean_y = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    mean_x += static_cast<double>(pred_col[i]);
    mean_y += static_cast<double>(target_col[i]);
  }
  mean_x /= static_cast<double>(n);
  mean_y /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double dx = static_cast<double>(pred_col[i]) - mean_x;
    double dy = static_cast<double>(target_col[i]) - mean_y;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  double inv_n = 1.0 / static_cast<double>(n);
  if (sxx * inv_n < 1e-12 || syy * inv_n < 1e-12) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

double forgetting_delta(double rmse_after_t1, double rmse_after_t2_on_t1) {
  return rmse_after_t2_on_t1 - rmse_after_t1;
}

EvalMetrics compute_metrics(const Tensor& raw_pred, const Tensor& clamped_pred,
                            const Tensor& target) {
  EvalMetrics m;
  m.loss = mse_value(raw_pred, target);
  m.rmse = fedscape::rmse(clamped_pred, target);
  std::int64_t b = target.dim(0);
  std::int64_t actions = target.dim(1);
  double acc = 0.0;
  int defined = 0;
  for (std::int64_t a = 0; a < actions; ++a) {
    Tensor pc({b}), tc({b});
    for (std::int64_t i = 0; i < b; ++i) {
      pc[i] = clamped_pred.at(i, a);
      tc[i] = target.at(i, a);
    }
    auto r = pcc(pc, tc);
    m.pcc_per_action[static_cast<std::size_t>(a)] = r;
    if (r.has_value()) {
      acc += *r;
      ++defined;
    } else {
      ++m.pcc_undefined;
    }
  }
  if (defined > 0) m.pcc_mean = acc / static_cast<double>(defined);
  return m;
}

}  // namespace fedscape
