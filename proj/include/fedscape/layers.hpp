#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedscape/rng.hpp"
#include "fedscape/tensor.hpp"

namespace fedscape {

// kTrain normalizes with batch statistics and advances BatchNorm running
// stats; kTrainFrozenStats uses batch statistics without advancing them
// (pure, needed by finite-difference checks and feature-extraction passes);
// kEval uses running stats and is always pure.
enum class Mode { kTrain, kTrainFrozenStats, kEval };

inline bool is_train(Mode m) { return m != Mode::kEval; }

enum class Segment { kRoot, kTop, kGenerator };

const char* segment_name(Segment s);
Segment segment_from_name(const std::string& name);

// Per-tensor tags.
constexpr std::uint32_t kTagBatchNorm = 1u << 0;

// Mutable view of one named parameter tensor and its gradient.
struct ParamRef {
  std::string name;
  Segment segment = Segment::kRoot;
  std::uint32_t tags = 0;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

enum class LayerKind {
  kDense,
  kConv2d,
  kBatchNorm1d,
  kBatchNorm2d,
  kRelu,
  kGlobalAvgPool,
  kFlatten,
};

// Size parameters for one layer. Field use by kind:
//   kDense:        in, out, bias
//   kConv2d:       in (channels), out (channels), stride, bias; kernel fixed 3x3 pad 1
//   kBatchNorm1d:  out (features)
//   kBatchNorm2d:  out (channels)
struct LayerSpec {
  LayerKind kind;
  std::int64_t in = 0;
  std::int64_t out = 0;
  int stride = 1;
  bool bias = true;

  static LayerSpec dense(std::int64_t in, std::int64_t out, bool bias = true) {
    return {LayerKind::kDense, in, out, 1, bias};
  }
  static LayerSpec conv2d(std::int64_t in_ch, std::int64_t out_ch, int stride, bool bias = false) {
    return {LayerKind::kConv2d, in_ch, out_ch, stride, bias};
  }
  static LayerSpec batchnorm1d(std::int64_t features) {
    return {LayerKind::kBatchNorm1d, features, features, 1, false};
  }
  static LayerSpec batchnorm2d(std::int64_t channels) {
    return {LayerKind::kBatchNorm2d, channels, channels, 1, false};
  }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 1, false}; }
  static LayerSpec global_avg_pool() { return {LayerKind::kGlobalAvgPool, 0, 0, 1, false}; }
  static LayerSpec flatten() { return {LayerKind::kFlatten, 0, 0, 1, false}; }
};

// One differentiable layer with fixed-sequence backprop: forward caches what
// backward needs, backward returns d(loss)/d(input) and accumulates parameter
// gradients. A layer instance is confined to one worker; caches are private.
class Layer {
 public:
  explicit Layer(std::string id) : id_(std::move(id)) {}
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual LayerKind kind() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual void collect_params(const std::string& prefix, Segment seg,
                              std::vector<ParamRef>& out) {}
  // Non-trainable state (BatchNorm running stats).
  virtual void collect_state(const std::string& prefix, Segment seg,
                             std::vector<ParamRef>& out) {}
  virtual void zero_grads() {}

  const std::string& id() const { return id_; }

 protected:
  std::string id_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const std::string& id, Rng& init_rng);

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string id, std::int64_t in, std::int64_t out, bool bias, Rng& init_rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::kDense; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DenseLayer>(*this); }
  void collect_params(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) override;
  void zero_grads() override;

  Tensor weight;  // [out, in]
  Tensor bias;    // [out], empty when bias-less
  Tensor grad_weight;
  Tensor grad_bias;

 private:
  Tensor input_;  // cached for backward
};

class Conv2dLayer : public Layer {
 public:
  Conv2dLayer(std::string id, std::int64_t in_ch, std::int64_t out_ch, int stride, bool bias,
              Rng& init_rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::kConv2d; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2dLayer>(*this); }
  void collect_params(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) override;
  void zero_grads() override;

  Tensor kernel;  // [out_ch, in_ch, 3, 3]
  Tensor bias;    // [out_ch], empty when bias-less
  Tensor grad_kernel;
  Tensor grad_bias;
  int stride;

 private:
  Tensor input_;
};

// Batch normalization over [B, F] (per feature) or [B, C, H, W] (per channel).
class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(std::string id, std::int64_t features, bool spatial);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override {
    return spatial_ ? LayerKind::kBatchNorm2d : LayerKind::kBatchNorm1d;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNormLayer>(*this); }
  void collect_params(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) override;
  void zero_grads() override;

  Tensor gamma, beta;
  Tensor grad_gamma, grad_beta;
  Tensor running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

 private:
  bool spatial_;
  // backward caches
  Tensor x_hat_;
  std::vector<double> inv_std_;
  Mode fwd_mode_ = Mode::kEval;
  std::int64_t norm_count_ = 0;
};

class ReluLayer : public Layer {
 public:
  explicit ReluLayer(std::string id) : Layer(std::move(id)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::kRelu; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }

 private:
  Tensor input_;
};

class GlobalAvgPoolLayer : public Layer {
 public:
  explicit GlobalAvgPoolLayer(std::string id) : Layer(std::move(id)) {}
  Tensor forward(const Tensor& x, Mode mode) override;  // [B,C,H,W] -> [B,C]
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::kGlobalAvgPool; }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<GlobalAvgPoolLayer>(*this);
  }

 private:
  std::vector<std::int64_t> input_shape_;
};

class FlattenLayer : public Layer {
 public:
  explicit FlattenLayer(std::string id) : Layer(std::move(id)) {}
  Tensor forward(const Tensor& x, Mode mode) override;  // [B,...] -> [B,prod]
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::kFlatten; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<FlattenLayer>(*this); }

 private:
  std::vector<std::int64_t> input_shape_;
};

// Ordered layer stack with value semantics (copy deep-clones the layers).
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& o);
  Sequential& operator=(const Sequential& o);
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out);

  void collect_params(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) const;
  void collect_state(const std::string& prefix, Segment seg, std::vector<ParamRef>& out) const;
  void zero_grads();

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace fedscape
