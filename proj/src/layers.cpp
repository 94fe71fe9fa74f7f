#include "fedscape/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace fedscape {

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::kRoot: return "root";
    case Segment::kTop: return "top";
    case Segment::kGenerator: return "generator";
  }
  return "?";
}

Segment segment_from_name(const std::string& name) {
  if (name == "root") return Segment::kRoot;
  if (name == "top") return Segment::kTop;
  if (name == "generator") return Segment::kGenerator;
  throw TensorError("unknown segment: " + name);
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const std::string& id, Rng& init_rng) {
  switch (spec.kind) {
    case LayerKind::kDense:
      if (spec.in < 1 || spec.out < 1) throw TensorError("dense dims must be >= 1");
      return std::make_unique<DenseLayer>(id, spec.in, spec.out, spec.bias, init_rng);
    case LayerKind::kConv2d:
      if (spec.in < 1 || spec.out < 1) throw TensorError("conv channels must be >= 1");
      if (spec.stride != 1 && spec.stride != 2) throw TensorError("conv stride must be 1 or 2");
      return std::make_unique<Conv2dLayer>(id, spec.in, spec.out, spec.stride, spec.bias,
                                           init_rng);
    case LayerKind::kBatchNorm1d:
      return std::make_unique<BatchNormLayer>(id, spec.out, /*spatial=*/false);
    case LayerKind::kBatchNorm2d:
      return std::make_unique<BatchNormLayer>(id, spec.out, /*spatial=*/true);
    case LayerKind::kRelu:
      return std::make_unique<ReluLayer>(id);
    case LayerKind::kGlobalAvgPool:
      return std::make_unique<GlobalAvgPoolLayer>(id);
    case LayerKind::kFlatten:
      return std::make_unique<FlattenLayer>(id);
  }
  throw TensorError("unknown layer kind");
}

// --- Dense -------------------------------------------------------------------

DenseLayer::DenseLayer(std::string id, std::int64_t in, std::int64_t out, bool with_bias,
                       Rng& init_rng)
    : Layer(std::move(id)),
      weight({out, in}),
      grad_weight({out, in}) {
  // Xavier-uniform; the FC module is affine, so fan-sum scaling keeps
  // activations of the same order as inputs.
  double s = std::sqrt(6.0 / static_cast<double>(in + out));
  for (std::int64_t i = 0; i < weight.size(); ++i) {
    weight[i] = static_cast<float>(init_rng.uniform(-s, s));
  }
  if (with_bias) {
    bias = Tensor({out});
    grad_bias = Tensor({out});
  }
}

Tensor DenseLayer::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw TensorError("dense " + id_ + ": input width mismatch");
  }
  std::int64_t b = x.dim(0), in = weight.dim(1), out = weight.dim(0);
  Tensor y({b, out});
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < out; ++j) {
      double acc = bias.empty() ? 0.0 : static_cast<double>(bias[j]);
      for (std::int64_t k = 0; k < in; ++k) {
        acc += static_cast<double>(weight.at(j, k)) * static_cast<double>(x.at(i, k));
      }
      y.at(i, j) = static_cast<float>(acc);
    }
  }
  input_ = x;
  return y;
}

Tensor DenseLayer::backward(const Tensor& grad_out) {
  const Tensor& x = input_;
  std::int64_t b = x.dim(0), in = weight.dim(1), out = weight.dim(0);
  Tensor dx({b, in});
  for (std::int64_t j = 0; j < out; ++j) {
    for (std::int64_t k = 0; k < in; ++k) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < b; ++i) {
        acc += static_cast<double>(grad_out.at(i, j)) * static_cast<double>(x.at(i, k));
      }
      grad_weight.at(j, k) += static_cast<float>(acc);
    }
    if (!bias.empty()) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < b; ++i) acc += static_cast<double>(grad_out.at(i, j));
      grad_bias[j] += static_cast<float>(acc);
    }
  }
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t k = 0; k < in; ++k) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < out; ++j) {
        acc += static_cast<double>(grad_out.at(i, j)) * static_cast<double>(weight.at(j, k));
      }
      dx.at(i, k) = static_cast<float>(acc);
    }
  }
  return dx;
}

void DenseLayer::collect_params(const std::string& prefix, Segment seg,
                                std::vector<ParamRef>& out) {
  out.push_back({prefix + id_ + ".weight", seg, 0, &weight, &grad_weight});
  if (!bias.empty()) out.push_back({prefix + id_ + ".bias", seg, 0, &bias, &grad_bias});
}

void DenseLayer::zero_grads() {
  grad_weight.fill(0.0f);
  if (!grad_bias.empty()) grad_bias.fill(0.0f);
}

// --- Conv2d ------------------------------------------------------------------

Conv2dLayer::Conv2dLayer(std::string id, std::int64_t in_ch, std::int64_t out_ch, int stride,
                         bool with_bias, Rng& init_rng)
    : Layer(std::move(id)),
      kernel({out_ch, in_ch, 3, 3}),
      grad_kernel({out_ch, in_ch, 3, 3}),
      stride(stride) {
  // Kaiming-normal for the ReLU conv stack.
  double s = std::sqrt(2.0 / static_cast<double>(in_ch * 9));
  for (std::int64_t i = 0; i < kernel.size(); ++i) {
    kernel[i] = static_cast<float>(init_rng.normal() * s);
  }
  if (with_bias) {
    bias = Tensor({out_ch});
    grad_bias = Tensor({out_ch});
  }
}

Tensor Conv2dLayer::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != kernel.dim(1)) {
    throw TensorError("conv " + id_ + ": channel mismatch");
  }
  std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::int64_t o = kernel.dim(0);
  std::int64_t oh = (h - 1) / stride + 1;  // == ceil(h/stride) with pad 1, kernel 3
  std::int64_t ow = (w - 1) / stride + 1;
  Tensor y({b, o, oh, ow});
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t oc = 0; oc < o; ++oc) {
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[oc]);
          for (std::int64_t ic = 0; ic < c; ++ic) {
            for (std::int64_t u = 0; u < 3; ++u) {
              std::int64_t yy = i * stride - 1 + u;
              if (yy < 0 || yy >= h) continue;
              for (std::int64_t v = 0; v < 3; ++v) {
                std::int64_t xx = j * stride - 1 + v;
                if (xx < 0 || xx >= w) continue;
                acc += static_cast<double>(kernel.at(oc, ic, u, v)) *
                       static_cast<double>(x.at(n, ic, yy, xx));
              }
            }
          }
          y.at(n, oc, i, j) = static_cast<float>(acc);
        }
      }
    }
  }
  input_ = x;
  return y;
}

Tensor Conv2dLayer::backward(const Tensor& grad_out) {
  const Tensor& x = input_;
  std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::int64_t o = kernel.dim(0), oh = grad_out.dim(2), ow = grad_out.dim(3);

  std::vector<double> dk(static_cast<std::size_t>(grad_kernel.size()), 0.0);
  std::vector<double> db(bias.empty() ? 0 : static_cast<std::size_t>(o), 0.0);
  std::vector<double> dx(static_cast<std::size_t>(x.size()), 0.0);

  auto kidx = [&](std::int64_t oc, std::int64_t ic, std::int64_t u, std::int64_t v) {
    return ((oc * c + ic) * 3 + u) * 3 + v;
  };
  auto xidx = [&](std::int64_t n, std::int64_t ic, std::int64_t yy, std::int64_t xx) {
    return ((n * c + ic) * h + yy) * w + xx;
  };

  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t oc = 0; oc < o; ++oc) {
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          double g = static_cast<double>(grad_out.at(n, oc, i, j));
          if (!bias.empty()) db[static_cast<std::size_t>(oc)] += g;
          for (std::int64_t ic = 0; ic < c; ++ic) {
            for (std::int64_t u = 0; u < 3; ++u) {
              std::int64_t yy = i * stride - 1 + u;
              if (yy < 0 || yy >= h) continue;
              for (std::int64_t v = 0; v < 3; ++v) {
                std::int64_t xx = j * stride - 1 + v;
                if (xx < 0 || xx >= w) continue;
                double xv = static_cast<double>(x.at(n, ic, yy, xx));
                dk[static_cast<std::size_t>(kidx(oc, ic, u, v))] += g * xv;
                dx[static_cast<std::size_t>(xidx(n, ic, yy, xx))] +=
                    g * static_cast<double>(kernel.at(oc, ic, u, v));
              }
            }
          }
        }
      }
    }
  }

  for (std::int64_t i = 0; i < grad_kernel.size(); ++i) {
    grad_kernel[i] += static_cast<float>(dk[static_cast<std::size_t>(i)]);
  }
  if (!bias.empty()) {
    for (std::int64_t oc = 0; oc < o; ++oc) {
      grad_bias[oc] += static_cast<float>(db[static_cast<std::size_t>(oc)]);
    }
  }
  Tensor out({b, c, h, w});
  for (std::int64_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(dx[static_cast<std::size_t>(i)]);
  }
  return out;
}

void Conv2dLayer::collect_params(const std::string& prefix, Segment seg,
                                 std::vector<ParamRef>& out) {
  out.push_back({prefix + id_ + ".kernel", seg, 0, &kernel, &grad_kernel});
  if (!bias.empty()) out.push_back({prefix + id_ + ".bias", seg, 0, &bias, &grad_bias});
}

void Conv2dLayer::zero_grads() {
  grad_kernel.fill(0.0f);
  if (!grad_bias.empty()) grad_bias.fill(0.0f);
}

// --- BatchNorm ---------------------------------------------------------------

BatchNormLayer::BatchNormLayer(std::string id, std::int64_t features, bool spatial)
    : Layer(std::move(id)),
      gamma(Tensor::full({features}, 1.0f)),
      beta({features}),
      grad_gamma({features}),
      grad_beta({features}),
      running_mean({features}),
      running_var(Tensor::full({features}, 1.0f)),
      spatial_(spatial) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  std::int64_t f = gamma.dim(0);
  if (spatial_) {
    if (x.rank() != 4 || x.dim(1) != f) throw TensorError("batchnorm " + id_ + ": shape mismatch");
  } else {
    if (x.rank() != 2 || x.dim(1) != f) throw TensorError("batchnorm " + id_ + ": shape mismatch");
  }
  std::int64_t b = x.dim(0);
  std::int64_t hw = spatial_ ? x.dim(2) * x.dim(3) : 1;
  std::int64_t n = b * hw;  // elements per feature

  Tensor y(x.shape());
  fwd_mode_ = mode;
  norm_count_ = n;

  auto value = [&](std::int64_t row, std::int64_t feat, std::int64_t s) -> float {
    return spatial_ ? x[(row * f + feat) * hw + s] : x.at(row, feat);
  };

  if (is_train(mode)) {
    if (b < 2) throw TensorError("batchnorm " + id_ + ": TRAIN requires batch size >= 2");
    x_hat_ = Tensor(x.shape());
    inv_std_.assign(static_cast<std::size_t>(f), 0.0);
    for (std::int64_t j = 0; j < f; ++j) {
      double sum = 0.0;
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) sum += static_cast<double>(value(i, j, s));
      }
      double mean = sum / static_cast<double>(n);
      double var_acc = 0.0;
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) {
          double d = static_cast<double>(value(i, j, s)) - mean;
          var_acc += d * d;
        }
      }
      double var = var_acc / static_cast<double>(n);  // biased, also used for running stats
      double inv_std = 1.0 / std::sqrt(var + eps);
      inv_std_[static_cast<std::size_t>(j)] = inv_std;
      double g = static_cast<double>(gamma[j]);
      double be = static_cast<double>(beta[j]);
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) {
          std::int64_t idx = spatial_ ? (i * f + j) * hw + s : i * f + j;
          double xh = (static_cast<double>(x[idx]) - mean) * inv_std;
          x_hat_[idx] = static_cast<float>(xh);
          y[idx] = static_cast<float>(g * xh + be);
        }
      }
      if (mode == Mode::kTrain) {
        running_mean[j] = static_cast<float>((1.0 - momentum) * running_mean[j] + momentum * mean);
        running_var[j] = static_cast<float>((1.0 - momentum) * running_var[j] + momentum * var);
      }
    }
  } else {
    x_hat_ = Tensor(x.shape());
    inv_std_.assign(static_cast<std::size_t>(f), 0.0);
    for (std::int64_t j = 0; j < f; ++j) {
      double mean = static_cast<double>(running_mean[j]);
      double inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[j]) + eps);
      inv_std_[static_cast<std::size_t>(j)] = inv_std;
      double g = static_cast<double>(gamma[j]);
      double be = static_cast<double>(beta[j]);
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) {
          std::int64_t idx = spatial_ ? (i * f + j) * hw + s : i * f + j;
          double xh = (static_cast<double>(x[idx]) - mean) * inv_std;
          x_hat_[idx] = static_cast<float>(xh);
          y[idx] = static_cast<float>(g * xh + be);
        }
      }
    }
  }
  return y;
}

Tensor BatchNormLayer::backward(const Tensor& grad_out) {
  std::int64_t f = gamma.dim(0);
  std::int64_t b = grad_out.dim(0);
  std::int64_t hw = spatial_ ? grad_out.dim(2) * grad_out.dim(3) : 1;
  std::int64_t n = norm_count_;
  Tensor dx(grad_out.shape());

  for (std::int64_t j = 0; j < f; ++j) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t s = 0; s < hw; ++s) {
        std::int64_t idx = spatial_ ? (i * f + j) * hw + s : i * f + j;
        double dy = static_cast<double>(grad_out[idx]);
        sum_dy += dy;
        sum_dy_xhat += dy * static_cast<double>(x_hat_[idx]);
      }
    }
    grad_beta[j] += static_cast<float>(sum_dy);
    grad_gamma[j] += static_cast<float>(sum_dy_xhat);

    double g = static_cast<double>(gamma[j]);
    double inv_std = inv_std_[static_cast<std::size_t>(j)];
    if (is_train(fwd_mode_)) {
      double inv_n = 1.0 / static_cast<double>(n);
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) {
          std::int64_t idx = spatial_ ? (i * f + j) * hw + s : i * f + j;
          double dy = static_cast<double>(grad_out[idx]);
          double xh = static_cast<double>(x_hat_[idx]);
          dx[idx] = static_cast<float>(g * inv_std *
                                       (dy - inv_n * sum_dy - xh * inv_n * sum_dy_xhat));
        }
      }
    } else {
      // EVAL: running stats are constants, so the layer is a per-feature affine map.
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t s = 0; s < hw; ++s) {
          std::int64_t idx = spatial_ ? (i * f + j) * hw + s : i * f + j;
          dx[idx] = static_cast<float>(static_cast<double>(grad_out[idx]) * g * inv_std);
        }
      }
    }
  }
  return dx;
}

void BatchNormLayer::collect_params(const std::string& prefix, Segment seg,
                                    std::vector<ParamRef>& out) {
  out.push_back({prefix + id_ + ".gamma", seg, kTagBatchNorm, &gamma, &grad_gamma});
  out.push_back({prefix + id_ + ".beta", seg, kTagBatchNorm, &beta, &grad_beta});
}

void BatchNormLayer::collect_state(const std::string& prefix, Segment seg,
                                   std::vector<ParamRef>& out) {
  out.push_back({prefix + id_ + ".running_mean", seg, kTagBatchNorm, &running_mean, nullptr});
  out.push_back({prefix + id_ + ".running_var", seg, kTagBatchNorm, &running_var, nullptr});
}

void BatchNormLayer::zero_grads() {
  grad_gamma.fill(0.0f);
  grad_beta.fill(0.0f);
}

// --- ReLU / pooling / reshape --------------------------------------------------

Tensor ReluLayer::forward(const Tensor& x, Mode mode) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  input_ = x;
  return y;
}

Tensor ReluLayer::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.shape());
  for (std::int64_t i = 0; i < grad_out.size(); ++i) {
    dx[i] = input_[i] > 0.0f ? grad_out[i] : 0.0f;
  }
  return dx;
}

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4) throw TensorError("global_avg_pool expects [B,C,H,W]");
  std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({b, c});
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::int64_t s = 0; s < hw; ++s) acc += static_cast<double>(x[(i * c + j) * hw + s]);
      y.at(i, j) = static_cast<float>(acc / static_cast<double>(hw));
    }
  }
  input_shape_ = x.shape();
  return y;
}

Tensor GlobalAvgPoolLayer::backward(const Tensor& grad_out) {
  std::int64_t b = input_shape_[0], c = input_shape_[1];
  std::int64_t hw = input_shape_[2] * input_shape_[3];
  Tensor dx(input_shape_);
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      float g = static_cast<float>(static_cast<double>(grad_out.at(i, j)) /
                                   static_cast<double>(hw));
      for (std::int64_t s = 0; s < hw; ++s) dx[(i * c + j) * hw + s] = g;
    }
  }
  return dx;
}

Tensor FlattenLayer::forward(const Tensor& x, Mode mode) {
  input_shape_ = x.shape();
  std::int64_t b = x.dim(0);
  return x.reshaped({b, x.size() / b});
}

Tensor FlattenLayer::backward(const Tensor& grad_out) { return grad_out.reshaped(input_shape_); }

// --- Sequential ----------------------------------------------------------------

Sequential::Sequential(const Sequential& o) {
  layers_.reserve(o.layers_.size());
  for (const auto& l : o.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& o) {
  if (this != &o) {
    layers_.clear();
    layers_.reserve(o.layers_.size());
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_params(const std::string& prefix, Segment seg,
                                std::vector<ParamRef>& out) const {
  for (const auto& l : layers_) l->collect_params(prefix, seg, out);
}

void Sequential::collect_state(const std::string& prefix, Segment seg,
                               std::vector<ParamRef>& out) const {
  for (const auto& l : layers_) l->collect_state(prefix, seg, out);
}

void Sequential::zero_grads() {
  for (auto& l : layers_) l->zero_grads();
}

}  // namespace fedscape
