#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "fedscape/tensor.hpp"

namespace fedscape {

// sqrt of the element-mean squared error (same mean convention as the loss).
double rmse(const Tensor& pred, const Tensor& target);

// Pearson correlation with 64-bit accumulation. Returns nullopt (UNDEFINED)
// when either column has variance below 1e-12; never NaN.
std::optional<double> pcc(const Tensor& pred_col, const Tensor& target_col);

// Positive values mean the model got worse on Task 1 after learning Task 2.
double forgetting_delta(double rmse_after_t1, double rmse_after_t2_on_t1);

// Per-client metrics at one evaluation point. Loss is computed on raw
// predictions, rmse and pcc on clamped ones.
struct EvalMetrics {
  double loss = 0.0;
  double rmse = 0.0;
  std::array<std::optional<double>, 8> pcc_per_action;
  std::optional<double> pcc_mean;
  int pcc_undefined = 0;
};

EvalMetrics compute_metrics(const Tensor& raw_pred, const Tensor& clamped_pred,
                            const Tensor& target);

}  // namespace fedscape
