#include "fedscape/clobj.hpp"

#include <cmath>

namespace fedscape {

const char* cl_method_name(ClMethod m) {
  switch (m) {
    case ClMethod::kNone: return "none";
    case ClMethod::kEwc: return "ewc";
    case ClMethod::kEwcOnline: return "ewconline";
    case ClMethod::kSi: return "si";
    case ClMethod::kMas: return "mas";
    case ClMethod::kNr: return "nr";
    case ClMethod::kLgr: return "lgr";
  }
  return "?";
}

ClMethod cl_method_from_name(const std::string& name) {
  if (name == "none") return ClMethod::kNone;
  if (name == "ewc") return ClMethod::kEwc;
  if (name == "ewconline") return ClMethod::kEwcOnline;
  if (name == "si") return ClMethod::kSi;
  if (name == "mas") return ClMethod::kMas;
  if (name == "nr") return ClMethod::kNr;
  if (name == "lgr") return ClMethod::kLgr;
  throw TensorError("unknown cl method: " + name);
}

NetHandle model_handle(RootTopModel& model, bool protect_root, bool protect_top) {
  NetHandle h;
  h.forward = [&model](const Tensor& x, Mode mode) { return model.forward(x, mode); };
  h.backward = [&model](const Tensor& grad_pred) {
    Tensor grad_features = model.backward_top(grad_pred);
    model.backward_root(grad_features);
  };
  h.zero_grads = [&model]() { model.zero_grads(); };
  for (const ParamRef& r : model.params()) {
    if ((r.segment == Segment::kRoot && protect_root) ||
        (r.segment == Segment::kTop && protect_top)) {
      h.params.push_back(r);
    }
  }
  return h;
}

void RegState::reset_si_reference(std::span<const ParamRef> params) {
  si_prev_params = ParamSet::snapshot(params);
  si_omega.clear();
  for (const ParamRef& r : params) si_omega.emplace(r.name, Tensor(r.value->shape()));
}

namespace {

// Accumulated in double, emitted as tensors matching the protected params.
struct Accumulator {
  std::vector<std::pair<std::string, std::vector<double>>> slots;

  explicit Accumulator(std::span<const ParamRef> params) {
    for (const ParamRef& r : params) {
      slots.emplace_back(r.name, std::vector<double>(static_cast<std::size_t>(r.value->size()), 0.0));
    }
  }

  void add_from(std::span<const ParamRef> params,
                const std::function<double(float)>& transform) {
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const Tensor& g = *params[s].grad;
      auto& acc = slots[s].second;
      for (std::int64_t i = 0; i < g.size(); ++i) {
        acc[static_cast<std::size_t>(i)] += transform(g[i]);
      }
    }
  }

  ParamSet emit(std::span<const ParamRef> params, double scale) const {
    ParamSet out;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      Tensor t(params[s].value->shape());
      for (std::int64_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<float>(slots[s].second[static_cast<std::size_t>(i)] * scale);
      }
      out.add({params[s].name, params[s].segment, params[s].tags, std::move(t)});
    }
    return out;
  }
};

Tensor slice_row(const Tensor& t, std::int64_t row) {
  std::vector<std::int64_t> shape = t.shape();
  std::int64_t stride = t.size() / t.dim(0);
  shape[0] = 1;
  Tensor out(std::move(shape));
  for (std::int64_t i = 0; i < stride; ++i) out[i] = t[row * stride + i];
  return out;
}

}  // namespace

void ewc_consolidate(const NetHandle& net, std::span<const Batch> task_batches, RegState& reg) {
  if (task_batches.empty()) throw TensorError("ewc_consolidate: empty task data");
  std::span<const ParamRef> params(net.params.data(), net.params.size());
  Accumulator fisher(params);
  for (const Batch& batch : task_batches) {
    net.zero_grads();
    Tensor pred = net.forward(batch.x, Mode::kEval);
    MseOut mse = mse_loss(pred, batch.y);
    net.backward(mse.grad);
    fisher.add_from(params, [](float g) {
      double d = static_cast<double>(g);
      return d * d;
    });
  }
  ParamSet f = fisher.emit(params, 1.0 / static_cast<double>(task_batches.size()));
  ParamSet theta = ParamSet::snapshot(params);

  if (reg.method == ClMethod::kEwcOnline) {
    if (reg.anchors.empty()) {
      reg.anchors.push_back({std::move(theta), std::move(f)});
    } else {
      Anchor& a = reg.anchors.front();
      for (std::size_t t = 0; t < f.size(); ++t) {
        Tensor& old_f = a.omega.entries()[t].value;
        const Tensor& new_f = f.entries()[t].value;
        for (std::int64_t i = 0; i < old_f.size(); ++i) {
          old_f[i] = static_cast<float>(reg.gamma * static_cast<double>(old_f[i]) +
                                        static_cast<double>(new_f[i]));
        }
      }
      a.theta_star = std::move(theta);
    }
  } else {
    reg.anchors.push_back({std::move(theta), std::move(f)});
  }
}

void mas_importance(const NetHandle& net, std::span<const Batch> task_batches, RegState& reg) {
  if (task_batches.empty()) throw TensorError("mas_importance: empty task data");
  std::span<const ParamRef> params(net.params.data(), net.params.size());
  Accumulator importance(params);
  std::int64_t count = 0;
  for (const Batch& batch : task_batches) {
    for (std::int64_t i = 0; i < batch.x.dim(0); ++i) {
      Tensor xi = slice_row(batch.x, i);
      net.zero_grads();
      Tensor pred = net.forward(xi, Mode::kEval);
      // Objective: squared L2 norm of the prediction; d/dpred = 2*pred.
      Tensor dpred(pred.shape());
      for (std::int64_t j = 0; j < pred.size(); ++j) dpred[j] = 2.0f * pred[j];
      net.backward(dpred);
      importance.add_from(params, [](float g) { return std::abs(static_cast<double>(g)); });
      ++count;
    }
  }
  ParamSet omega = importance.emit(params, 1.0 / static_cast<double>(count));
  ParamSet theta = ParamSet::snapshot(params);
  if (reg.anchors.empty()) {
    reg.anchors.push_back({std::move(theta), std::move(omega)});
  } else {
    Anchor& a = reg.anchors.front();
    for (std::size_t t = 0; t < omega.size(); ++t) {
      Tensor& old_o = a.omega.entries()[t].value;
      const Tensor& new_o = omega.entries()[t].value;
      for (std::int64_t i = 0; i < old_o.size(); ++i) {
        old_o[i] = static_cast<float>(static_cast<double>(old_o[i]) +
                                      static_cast<double>(new_o[i]));
      }
    }
    a.theta_star = std::move(theta);
  }
}

void si_record_step(RegState& reg, std::span<const ParamRef> params, const ParamSet& step_grads,
                    const ParamSet& params_before) {
  for (const ParamRef& r : params) {
    auto it = reg.si_omega.find(r.name);
    if (it == reg.si_omega.end()) continue;
    const ParamEntry* g = step_grads.find(r.name);
    const ParamEntry* before = params_before.find(r.name);
    if (g == nullptr || before == nullptr) throw TensorError("si_record_step: missing " + r.name);
    Tensor& omega = it->second;
    for (std::int64_t i = 0; i < omega.size(); ++i) {
      double delta = static_cast<double>((*r.value)[i]) - static_cast<double>(before->value[i]);
      omega[i] = static_cast<float>(static_cast<double>(omega[i]) -
                                    static_cast<double>(g->value[i]) * delta);
    }
  }
}

void si_consolidate(RegState& reg, std::span<const ParamRef> params) {
  if (reg.si_prev_params.empty()) {
    throw TensorError("si_consolidate: reference point not initialized");
  }
  ParamSet omega_add;
  for (const ParamRef& r : params) {
    auto it = reg.si_omega.find(r.name);
    if (it == reg.si_omega.end()) continue;
    const ParamEntry* prev = reg.si_prev_params.find(r.name);
    Tensor o(r.value->shape());
    for (std::int64_t i = 0; i < o.size(); ++i) {
      // Negative path contributions are clamped so importances stay >= 0.
      double w = std::max(0.0, static_cast<double>(it->second[i]));
      double disp = static_cast<double>((*r.value)[i]) - static_cast<double>(prev->value[i]);
      o[i] = static_cast<float>(w / (disp * disp + reg.xi));
    }
    omega_add.add({r.name, r.segment, r.tags, std::move(o)});
  }

  ParamSet theta = ParamSet::snapshot(params);
  if (reg.anchors.empty()) {
    reg.anchors.push_back({std::move(theta), std::move(omega_add)});
  } else {
    Anchor& a = reg.anchors.front();
    for (std::size_t t = 0; t < omega_add.size(); ++t) {
      Tensor& old_o = a.omega.entries()[t].value;
      const Tensor& add = omega_add.entries()[t].value;
      for (std::int64_t i = 0; i < old_o.size(); ++i) {
        old_o[i] = static_cast<float>(static_cast<double>(old_o[i]) + static_cast<double>(add[i]));
      }
    }
    a.theta_star = std::move(theta);
  }
  reg.reset_si_reference(params);
}

double reg_penalty(std::span<const ParamRef> params, const RegState& reg, bool add_grads) {
  if (reg.lambda == 0.0 || reg.anchors.empty()) return 0.0;
  double penalty = 0.0;
  for (const Anchor& anchor : reg.anchors) {
    for (std::size_t t = 0; t < anchor.theta_star.size(); ++t) {
      const ParamEntry& star = anchor.theta_star.entries()[t];
      const ParamEntry& omega = anchor.omega.entries()[t];
      if (!star.value.same_shape(omega.value)) {
        throw TensorError("reg_penalty: omega shape mismatch for " + star.name);
      }
      for (const ParamRef& r : params) {
        if (r.name != star.name) continue;
        for (std::int64_t i = 0; i < r.value->size(); ++i) {
          double d = static_cast<double>((*r.value)[i]) - static_cast<double>(star.value[i]);
          double om = static_cast<double>(omega.value[i]);
          penalty += 0.5 * reg.lambda * om * d * d;
          if (add_grads) {
            (*r.grad)[i] = static_cast<float>(static_cast<double>((*r.grad)[i]) +
                                              reg.lambda * om * d);
          }
        }
        break;
      }
    }
  }
  return penalty;
}

GradHook reg_grad_hook(const RegState& reg, bool protect_root, bool protect_top) {
  const RegState* state = &reg;
  return [state, protect_root, protect_top](RootTopModel& model) -> double {
    if (state->lambda == 0.0 || state->anchors.empty()) return 0.0;
    std::vector<ParamRef> refs;
    for (const ParamRef& r : model.params()) {
      if ((r.segment == Segment::kRoot && protect_root) ||
          (r.segment == Segment::kTop && protect_top)) {
        refs.push_back(r);
      }
    }
    return reg_penalty({refs.data(), refs.size()}, *state, /*add_grads=*/true);
  };
}

// --- naive rehearsal --------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::int64_t capacity) : capacity_(capacity) {
  if (capacity < 0) throw TensorError("replay capacity must be >= 0");
}

void ReplayBuffer::offer(ReplayItem item, Rng& rng) {
  if (capacity_ == 0) return;
  ++seen_;
  if (static_cast<std::int64_t>(items_.size()) < capacity_) {
    items_.push_back(std::move(item));
    return;
  }
  std::uint64_t j = rng.uniform_int(static_cast<std::uint64_t>(seen_));
  if (j < static_cast<std::uint64_t>(capacity_)) {
    items_[static_cast<std::size_t>(j)] = std::move(item);
  }
}

std::vector<const ReplayItem*> ReplayBuffer::sample(std::int64_t k, Rng& rng) const {
  std::vector<const ReplayItem*> out;
  if (items_.empty()) return out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    out.push_back(&items_[static_cast<std::size_t>(rng.uniform_int(items_.size()))]);
  }
  return out;
}

double nr_step(RootTopModel& model, const Tensor& x, const Tensor& y, int task_id,
               ReplayBuffer& buffer, AdamState& opt, Rng& rng) {
  Tensor train_x = x;
  Tensor train_y = y;
  if (!buffer.empty()) {
    std::int64_t draw = x.dim(0);
    auto replay = buffer.sample(draw, rng);
    Tensor rx, ry;
    for (const ReplayItem* item : replay) {
      std::vector<std::int64_t> xs = item->x.shape();
      xs.insert(xs.begin(), 1);
      std::vector<std::int64_t> ys = item->y.shape();
      ys.insert(ys.begin(), 1);
      rx = concat_rows(rx, item->x.reshaped(xs));
      ry = concat_rows(ry, item->y.reshaped(ys));
    }
    train_x = concat_rows(train_x, rx);
    train_y = concat_rows(train_y, ry);
  }
  double loss = train_step(model, train_x, train_y, opt);
  for (std::int64_t i = 0; i < x.dim(0); ++i) {
    ReplayItem item;
    Tensor xi = slice_row(x, i);
    Tensor yi = slice_row(y, i);
    std::vector<std::int64_t> xs(xi.shape().begin() + 1, xi.shape().end());
    std::vector<std::int64_t> ys(yi.shape().begin() + 1, yi.shape().end());
    item.x = xi.reshaped(xs);
    item.y = yi.reshaped(ys);
    item.task_id = task_id;
    buffer.offer(std::move(item), rng);
  }
  return loss;
}

// --- latent VAE --------------------------------------------------------------------

LatentVAE::LatentVAE(std::int64_t feature_dim, std::int64_t hidden, std::int64_t latent_dim,
                     Rng init_rng)
    : feature_dim_(feature_dim),
      latent_dim_(latent_dim),
      enc_("enc1", feature_dim, hidden, true, init_rng),
      enc_relu_("enc_relu"),
      mu_head_("mu", hidden, latent_dim, true, init_rng),
      logvar_head_("logvar", hidden, latent_dim, true, init_rng),
      dec1_("dec1", latent_dim, hidden, true, init_rng),
      dec_relu_("dec_relu"),
      dec2_("dec2", hidden, feature_dim, true, init_rng) {}

LatentVAE::LossOut LatentVAE::elbo_loss(const Tensor& features, const Tensor& eps,
                                        bool with_grads) {
  if (features.rank() != 2 || features.dim(1) != feature_dim_) {
    throw TensorError("vae: feature width mismatch");
  }
  std::int64_t m = features.dim(0);
  if (eps.rank() != 2 || eps.dim(0) != m || eps.dim(1) != latent_dim_) {
    throw TensorError("vae: eps shape mismatch");
  }

  Tensor h = enc_relu_.forward(enc_.forward(features, Mode::kTrain), Mode::kTrain);
  Tensor mu = mu_head_.forward(h, Mode::kTrain);
  Tensor logvar = logvar_head_.forward(h, Mode::kTrain);
  if (checked_mode()) logvar.check_finite("vae log-variance");

  Tensor sigma(logvar.shape());
  for (std::int64_t i = 0; i < sigma.size(); ++i) {
    sigma[i] = static_cast<float>(std::exp(0.5 * static_cast<double>(logvar[i])));
  }
  Tensor z(mu.shape());
  for (std::int64_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<float>(static_cast<double>(mu[i]) +
                              static_cast<double>(sigma[i]) * static_cast<double>(eps[i]));
  }

  Tensor recon = dec2_.forward(dec_relu_.forward(dec1_.forward(z, Mode::kTrain), Mode::kTrain),
                               Mode::kTrain);
  MseOut rec = mse_loss(recon, features);

  double kl_acc = 0.0;
  for (std::int64_t i = 0; i < mu.size(); ++i) {
    double mu_d = static_cast<double>(mu[i]);
    double s2 = static_cast<double>(sigma[i]) * static_cast<double>(sigma[i]);
    kl_acc += 0.5 * (mu_d * mu_d + s2 - static_cast<double>(logvar[i]) - 1.0);
  }
  double kl = kl_acc / static_cast<double>(m);

  LossOut out;
  out.recon = rec.loss;
  out.kl = kl;
  out.total = rec.loss + beta_kl * kl;

  if (with_grads) {
    Tensor dz = dec1_.backward(dec_relu_.backward(dec2_.backward(rec.grad)));
    Tensor dmu(mu.shape());
    Tensor dlogvar(logvar.shape());
    double inv_m = 1.0 / static_cast<double>(m);
    for (std::int64_t i = 0; i < mu.size(); ++i) {
      double dz_d = static_cast<double>(dz[i]);
      dmu[i] = static_cast<float>(dz_d + beta_kl * static_cast<double>(mu[i]) * inv_m);
      double s = static_cast<double>(sigma[i]);
      dlogvar[i] = static_cast<float>(dz_d * static_cast<double>(eps[i]) * s * 0.5 +
                                      beta_kl * 0.5 * (s * s - 1.0) * inv_m);
    }
    Tensor dh = mu_head_.backward(dmu);
    Tensor dh2 = logvar_head_.backward(dlogvar);
    for (std::int64_t i = 0; i < dh.size(); ++i) {
      dh[i] = static_cast<float>(static_cast<double>(dh[i]) + static_cast<double>(dh2[i]));
    }
    enc_.backward(enc_relu_.backward(dh));
  }
  return out;
}

LatentVAE::LossOut LatentVAE::train_step(const Tensor& features, AdamState& opt, Rng& rng) {
  Tensor eps({features.dim(0), latent_dim_});
  for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<float>(rng.normal());
  zero_grads();
  LossOut out = elbo_loss(features, eps, /*with_grads=*/true);
  auto refs = params();
  adam_step({refs.data(), refs.size()}, opt);
  trained_ = true;
  return out;
}

Tensor LatentVAE::decode(const Tensor& z) {
  return dec2_.forward(dec_relu_.forward(dec1_.forward(z, Mode::kEval), Mode::kEval), Mode::kEval);
}

Tensor LatentVAE::generate(std::int64_t m, Rng& rng) {
  if (!trained_) throw TensorError("vae: generate before any training step");
  Tensor z({m, latent_dim_});
  for (std::int64_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(rng.normal());
  return decode(z);
}

std::vector<ParamRef> LatentVAE::params() {
  std::vector<ParamRef> out;
  enc_.collect_params("gen.", Segment::kGenerator, out);
  mu_head_.collect_params("gen.", Segment::kGenerator, out);
  logvar_head_.collect_params("gen.", Segment::kGenerator, out);
  dec1_.collect_params("gen.", Segment::kGenerator, out);
  dec2_.collect_params("gen.", Segment::kGenerator, out);
  return out;
}

void LatentVAE::zero_grads() {
  enc_.zero_grads();
  mu_head_.zero_grads();
  logvar_head_.zero_grads();
  dec1_.zero_grads();
  dec2_.zero_grads();
}

// --- FedLGR client round --------------------------------------------------------------

LgrRoundStats lgr_client_round(RootTopModel& model, LgrState& st, std::span<const Batch> batches,
                               Rng& gen_rng, const EventSink* events) {
  double eta_root = st.model_opt.root.lr;
  double eta_top = st.model_opt.top.lr;
  if (eta_root < 0.0 || eta_top < 0.0) throw TensorError("lgr: learning rates must be >= 0");
  if (st.allow_equal_rates ? (eta_root > eta_top) : (eta_root >= eta_top)) {
    throw TensorError("lgr: requires eta_root << eta_top");
  }

  auto emit = [&](const char* name) {
    if (events != nullptr) (*events)(name);
  };

  LgrRoundStats stats;
  for (const Batch& batch : batches) {
    std::int64_t b = batch.x.dim(0);
    // (1) Extract root features once; caches feed the root update below.
    Tensor features = model.extract_root(batch.x, Mode::kTrain);
    emit("extract");

    // (2) Pseudo-samples for old tasks; none during the first task.
    std::int64_t m = st.pseudo_per_batch < 0 ? b : st.pseudo_per_batch;
    Tensor pseudo_features;
    Tensor pseudo_labels;
    bool replay = st.tasks_seen >= 1 && m > 0;
    if (replay) {
      pseudo_features = st.generator.generate(m, gen_rng);
      pseudo_labels = model.predict_top(pseudo_features, Mode::kEval);
      emit("generate");
    }

    // (3) Generator update on real plus generated features.
    Tensor gen_input = replay ? concat_rows(features, pseudo_features) : features;
    LatentVAE::LossOut gen_out = st.generator.train_step(gen_input, st.gen_opt, gen_rng);
    stats.gen_loss += gen_out.total;
    emit("generator-update");

    // (4)+(5) Top gradients on <R,y> u <R',T'>, root gradients on current
    // data only. Both are linearized at the pre-update parameters (so forcing
    // M=0 reduces the round to split_rates_step plus generator training, bit
    // for bit); the updates are then applied top first, root second.
    Tensor top_in = replay ? concat_rows(features, pseudo_features) : features;
    Tensor top_target = replay ? concat_rows(batch.y, pseudo_labels) : batch.y;
    model.zero_grads();
    Tensor top_pred = model.predict_top(top_in, Mode::kTrain);
    MseOut top_mse = mse_loss(top_pred, top_target);
    model.backward_top(top_mse.grad);
    auto top_refs = model.params(Segment::kTop);
    std::vector<Tensor> top_grads;
    top_grads.reserve(top_refs.size());
    for (const ParamRef& r : top_refs) top_grads.push_back(*r.grad);

    model.zero_grads();
    Tensor pred = model.predict_top(features, Mode::kTrainFrozenStats);
    MseOut root_mse = mse_loss(pred, batch.y);
    Tensor grad_features = model.backward_top(root_mse.grad);
    model.backward_root(grad_features);

    for (std::size_t t = 0; t < top_refs.size(); ++t) *top_refs[t].grad = top_grads[t];
    adam_step({top_refs.data(), top_refs.size()}, st.model_opt.top);
    stats.top_loss += top_mse.loss;
    emit("top-update");

    auto root_refs = model.params(Segment::kRoot);
    adam_step({root_refs.data(), root_refs.size()}, st.model_opt.root);
    stats.root_loss += root_mse.loss;
    emit("root-update");

    stats.batches += 1;
  }
  if (stats.batches > 0) {
    stats.gen_loss /= stats.batches;
    stats.top_loss /= stats.batches;
    stats.root_loss /= stats.batches;
  }
  return stats;
}

}  // namespace fedscape
