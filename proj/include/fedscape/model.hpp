#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fedscape/numcore.hpp"
#include "fedscape/paramset.hpp"

namespace fedscape {

struct ModelConfig {
  std::int64_t image_size = 32;
  std::int64_t in_channels = 3;
  std::vector<std::int64_t> conv_channels = {8, 16, 32};  // stride-2 blocks
  std::int64_t top_hidden = 32;
  std::int64_t out_dim = 8;
  bool top_hidden_relu = false;   // nonlinearity between the two FC layers
  double output_bias_init = 3.0;  // scale midpoint; predictions start centered
};

// Conv feature extractor (root) producing a latent embedding, plus an FC
// regression head (top) predicting the 8 appropriateness scores. Every
// parameter tensor is tagged with exactly one segment; BatchNorm affine
// parameters additionally carry the batchnorm tag.
class RootTopModel {
 public:
  RootTopModel(const ModelConfig& cfg, Rng init_rng);

  Tensor extract_root(const Tensor& x, Mode mode);
  Tensor predict_top(const Tensor& r, Mode mode);
  Tensor forward(const Tensor& x, Mode mode);

  // Backward through the top; returns d(loss)/d(features).
  Tensor backward_top(const Tensor& grad_pred);
  void backward_root(const Tensor& grad_features);

  std::vector<ParamRef> params();
  std::vector<ParamRef> params(Segment seg);
  std::vector<ParamRef> state_tensors();  // BatchNorm running stats
  void zero_grads();

  ParamSet snapshot();
  std::uint64_t param_hash();

  std::int64_t feature_dim() const { return feature_dim_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  Sequential root_;
  Sequential top_;
  std::int64_t feature_dim_ = 0;
};

// Parameter-space gradient hook: adds its gradient contribution to the
// model's grad tensors and returns its penalty value.
using GradHook = std::function<double(RootTopModel&)>;

// One forward/backward/Adam update over ROOT and TOP. Hooks run after the
// task-loss backward and before the optimizer step.
double train_step(RootTopModel& model, const Tensor& x, const Tensor& y, AdamState& opt,
                  std::span<const GradHook> hooks = {});

// Single backward pass, then ROOT stepped with opt_root.lr and TOP with
// opt_top.lr from separate Adam states. Requires opt_root.lr <= opt_top.lr.
struct SplitAdam {
  AdamState root;
  AdamState top;
  SplitAdam(double eta_root, double eta_top) : root(eta_root), top(eta_top) {}
};
double split_rates_step(RootTopModel& model, const Tensor& x, const Tensor& y, SplitAdam& opt,
                        std::span<const GradHook> hooks = {});

// Evaluation-time clamp to the 5-point scale; never applied in the loss path.
Tensor clamp_scores(const Tensor& pred);

// One training batch: x is [B,3,H,W], y is [B,8].
struct Batch {
  Tensor x;
  Tensor y;
};

}  // namespace fedscape
