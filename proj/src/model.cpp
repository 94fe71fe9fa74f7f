#include "fedscape/model.hpp"

#include <cmath>
#include <stdexcept>

namespace fedscape {

RootTopModel::RootTopModel(const ModelConfig& cfg, Rng init_rng) : cfg_(cfg) {
  if (cfg.out_dim != 8) throw TensorError("model output dimension must be 8");
  std::int64_t size = cfg.image_size;
  if (size < 8 || (size & (size - 1)) != 0) {
    throw TensorError("image size must be a power of two >= 8");
  }

  std::int64_t in_ch = cfg.in_channels;
  int block = 1;
  for (std::int64_t out_ch : cfg.conv_channels) {
    std::string n = std::to_string(block);
    // Conv blocks are bias-less; the BatchNorm beta that follows plays that role.
    root_.add(make_layer(LayerSpec::conv2d(in_ch, out_ch, /*stride=*/2), "conv" + n, init_rng));
    root_.add(make_layer(LayerSpec::batchnorm2d(out_ch), "bn" + n, init_rng));
    root_.add(make_layer(LayerSpec::relu(), "relu" + n, init_rng));
    in_ch = out_ch;
    ++block;
  }
  root_.add(make_layer(LayerSpec::global_avg_pool(), "gap", init_rng));
  root_.add(make_layer(LayerSpec::flatten(), "flat", init_rng));
  feature_dim_ = in_ch;

  top_.add(make_layer(LayerSpec::dense(feature_dim_, cfg.top_hidden), "fc1", init_rng));
  top_.add(make_layer(LayerSpec::batchnorm1d(cfg.top_hidden), "bn1", init_rng));
  if (cfg.top_hidden_relu) {
    top_.add(make_layer(LayerSpec::relu(), "relu1", init_rng));
  }
  top_.add(make_layer(LayerSpec::dense(cfg.top_hidden, cfg.out_dim), "fc2", init_rng));
  top_.add(make_layer(LayerSpec::batchnorm1d(cfg.out_dim), "bn2", init_rng));
  if (cfg.output_bias_init != 0.0) {
    auto& bn = static_cast<BatchNormLayer&>(top_.layer(top_.size() - 1));
    bn.beta.fill(static_cast<float>(cfg.output_bias_init));
  }
}

Tensor RootTopModel::extract_root(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
    throw TensorError("extract_root: expected [B," + std::to_string(cfg_.in_channels) + ",H,W]");
  }
  return root_.forward(x, mode);
}

Tensor RootTopModel::predict_top(const Tensor& r, Mode mode) {
  if (r.rank() != 2 || r.dim(1) != feature_dim_) {
    throw TensorError("predict_top: feature width mismatch");
  }
  return top_.forward(r, mode);
}

Tensor RootTopModel::forward(const Tensor& x, Mode mode) {
  return predict_top(extract_root(x, mode), mode);
}

Tensor RootTopModel::backward_top(const Tensor& grad_pred) { return top_.backward(grad_pred); }

void RootTopModel::backward_root(const Tensor& grad_features) { root_.backward(grad_features); }

std::vector<ParamRef> RootTopModel::params() {
  std::vector<ParamRef> out;
  root_.collect_params("root.", Segment::kRoot, out);
  top_.collect_params("top.", Segment::kTop, out);
  return out;
}

std::vector<ParamRef> RootTopModel::params(Segment seg) {
  std::vector<ParamRef> out;
  if (seg == Segment::kRoot) root_.collect_params("root.", Segment::kRoot, out);
  if (seg == Segment::kTop) top_.collect_params("top.", Segment::kTop, out);
  return out;
}

std::vector<ParamRef> RootTopModel::state_tensors() {
  std::vector<ParamRef> out;
  root_.collect_state("root.", Segment::kRoot, out);
  top_.collect_state("top.", Segment::kTop, out);
  return out;
}

void RootTopModel::zero_grads() {
  root_.zero_grads();
  top_.zero_grads();
}

ParamSet RootTopModel::snapshot() {
  auto refs = params();
  return ParamSet::snapshot(refs);
}

std::uint64_t RootTopModel::param_hash() {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const ParamRef& r : params()) h = tensor_hash(*r.value, h);
  for (const ParamRef& r : state_tensors()) h = tensor_hash(*r.value, h);
  return h;
}

double train_step(RootTopModel& model, const Tensor& x, const Tensor& y, AdamState& opt,
                  std::span<const GradHook> hooks) {
  if (x.dim(0) < 2) throw TensorError("train_step: batch size must be >= 2");
  model.zero_grads();
  Tensor pred = model.forward(x, Mode::kTrain);
  MseOut mse = mse_loss(pred, y);
  double loss = mse.loss;
  Tensor grad_features = model.backward_top(mse.grad);
  model.backward_root(grad_features);
  for (const GradHook& hook : hooks) loss += hook(model);
  if (checked_mode() && !std::isfinite(loss)) throw TensorError("non-finite training loss");
  auto refs = model.params();
  adam_step(refs, opt);
  return loss;
}

double split_rates_step(RootTopModel& model, const Tensor& x, const Tensor& y, SplitAdam& opt,
                        std::span<const GradHook> hooks) {
  if (opt.root.lr < 0.0 || opt.top.lr < 0.0) throw TensorError("learning rates must be >= 0");
  if (opt.root.lr > opt.top.lr) throw TensorError("split rates require eta_root <= eta_top");
  if (x.dim(0) < 2) throw TensorError("split_rates_step: batch size must be >= 2");
  model.zero_grads();
  Tensor pred = model.forward(x, Mode::kTrain);
  MseOut mse = mse_loss(pred, y);
  double loss = mse.loss;
  Tensor grad_features = model.backward_top(mse.grad);
  model.backward_root(grad_features);
  for (const GradHook& hook : hooks) loss += hook(model);
  if (checked_mode() && !std::isfinite(loss)) throw TensorError("non-finite training loss");
  auto root_refs = model.params(Segment::kRoot);
  auto top_refs = model.params(Segment::kTop);
  adam_step(root_refs, opt.root);
  adam_step(top_refs, opt.top);
  return loss;
}

Tensor clamp_scores(const Tensor& pred) {
  Tensor out(pred.shape());
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    float v = pred[i];
    out[i] = v < 1.0f ? 1.0f : (v > 5.0f ? 5.0f : v);
  }
  return out;
}

}  // namespace fedscape
