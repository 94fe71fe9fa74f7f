#include "fedscape/flstrat.hpp"

#include <algorithm>
#include <cmath>

namespace fedscape {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kAvg: return "avg";
    case Strategy::kBn: return "bn";
    case Strategy::kProx: return "prox";
    case Strategy::kOpt: return "opt";
    case Strategy::kDistill: return "distill";
  }
  return "?";
}

const char* scope_name(Scope s) { return s == Scope::kFull ? "full" : "root"; }

Strategy strategy_from_name(const std::string& name) {
  if (name == "avg") return Strategy::kAvg;
  if (name == "bn") return Strategy::kBn;
  if (name == "prox") return Strategy::kProx;
  if (name == "opt") return Strategy::kOpt;
  if (name == "distill") return Strategy::kDistill;
  throw TensorError("unknown strategy: " + name);
}

Scope scope_from_name(const std::string& name) {
  if (name == "full") return Scope::kFull;
  if (name == "root") return Scope::kRoot;
  throw TensorError("unknown scope: " + name);
}

namespace {

bool selected(Segment segment, std::uint32_t tags, Strategy strategy, Scope scope) {
  if (segment == Segment::kGenerator) return false;
  if (scope == Scope::kRoot && segment != Segment::kRoot) return false;
  if (strategy == Strategy::kBn && (tags & kTagBatchNorm) != 0) return false;
  return true;
}

}  // namespace

ParamSet select_aggregatable(const ParamSet& params, Strategy strategy, Scope scope) {
  ParamSet out;
  for (const ParamEntry& e : params.entries()) {
    if (selected(e.segment, e.tags, strategy, scope)) out.add(e);
  }
  return out;
}

std::vector<ParamRef> select_aggregatable(std::span<const ParamRef> params, Strategy strategy,
                                          Scope scope) {
  std::vector<ParamRef> out;
  for (const ParamRef& r : params) {
    if (selected(r.segment, r.tags, strategy, scope)) out.push_back(r);
  }
  return out;
}

ParamSet weighted_average(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw TensorError("weighted_average: no updates");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });

  std::int64_t total = 0;
  for (const auto* u : ordered) {
    if (u->n_samples < 1) throw TensorError("weighted_average: n_samples must be >= 1");
    total += u->n_samples;
    if (!u->params.shape_compatible(ordered.front()->params)) {
      throw TensorError("weighted_average: incompatible update from client " +
                        std::to_string(u->client_id));
    }
  }

  ParamSet out;
  const auto& proto = ordered.front()->params.entries();
  for (std::size_t t = 0; t < proto.size(); ++t) {
    Tensor acc_t(proto[t].value.shape());
    std::vector<double> acc(static_cast<std::size_t>(acc_t.size()), 0.0);
    for (const auto* u : ordered) {
      double w = static_cast<double>(u->n_samples) / static_cast<double>(total);
      const Tensor& src = u->params.entries()[t].value;
      for (std::int64_t i = 0; i < src.size(); ++i) {
        acc[static_cast<std::size_t>(i)] += w * static_cast<double>(src[i]);
      }
    }
    for (std::int64_t i = 0; i < acc_t.size(); ++i) {
      acc_t[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
    out.add({proto[t].name, proto[t].segment, proto[t].tags, std::move(acc_t)});
  }
  return out;
}

GradHook prox_grad_hook(ParamSet global_selected, double mu) {
  if (mu < 0.0) throw TensorError("prox mu must be >= 0");
  return [anchor = std::move(global_selected), mu](RootTopModel& model) -> double {
    if (mu == 0.0) return 0.0;  // exact no-op so the mu=0 path is bitwise plain
    auto refs = model.params();
    double penalty = 0.0;
    for (const ParamEntry& e : anchor.entries()) {
      for (const ParamRef& r : refs) {
        if (r.name != e.name) continue;
        for (std::int64_t i = 0; i < r.value->size(); ++i) {
          double d = static_cast<double>((*r.value)[i]) - static_cast<double>(e.value[i]);
          (*r.grad)[i] = static_cast<float>(static_cast<double>((*r.grad)[i]) + mu * d);
          penalty += 0.5 * mu * d * d;
        }
        break;
      }
    }
    return penalty;
  };
}

double prox_penalty(std::span<const ParamRef> params, const ParamSet& global_selected, double mu) {
  double penalty = 0.0;
  for (const ParamEntry& e : global_selected.entries()) {
    for (const ParamRef& r : params) {
      if (r.name != e.name) continue;
      for (std::int64_t i = 0; i < r.value->size(); ++i) {
        double d = static_cast<double>((*r.value)[i]) - static_cast<double>(e.value[i]);
        penalty += 0.5 * mu * d * d;
      }
      break;
    }
  }
  return penalty;
}

void aggregate_average(ServerState& state, const std::vector<ClientUpdate>& updates) {
  ParamSet mean = weighted_average(updates);
  if (!state.global.empty() && !state.global.shape_compatible(mean)) {
    throw TensorError("aggregate: update incompatible with stored global");
  }
  state.global = std::move(mean);
  state.round += 1;
}

void fedopt_server_step(ServerState& state, const std::vector<ClientUpdate>& delta_updates) {
  if (state.global.empty()) throw TensorError("fedopt: server has no global model");
  ParamSet mean_delta = weighted_average(delta_updates);
  if (!state.global.shape_compatible(mean_delta)) {
    throw TensorError("fedopt: deltas incompatible with global");
  }
  // Pseudo-gradient is the negated mean delta; the server optimizer descends it.
  ParamSet grads = mean_delta;
  for (auto& e : grads.entries()) {
    for (std::int64_t i = 0; i < e.value.size(); ++i) e.value[i] = -e.value[i];
  }
  std::vector<ParamRef> refs;
  refs.reserve(state.global.size());
  for (std::size_t t = 0; t < state.global.size(); ++t) {
    ParamEntry& ge = state.global.entries()[t];
    ParamEntry& de = grads.entries()[t];
    refs.push_back({ge.name, ge.segment, ge.tags, &ge.value, &de.value});
  }
  if (state.server_opt == ServerOpt::kAdam) {
    std::span<const ParamRef> view(refs.data(), refs.size());
    adam_step(view, state.opt);
  } else {
    std::span<const ParamRef> view(refs.data(), refs.size());
    sgd_step(view, state.opt.lr);
  }
  state.round += 1;
}

MseOut distill_loss(const Tensor& student_pred, const Tensor& teacher_pred, const Tensor& target,
                    double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw TensorError("distill alpha must be in [0,1]");
  if (alpha == 0.0) return mse_loss(student_pred, target);  // exact plain path
  if (!student_pred.same_shape(teacher_pred) || !student_pred.same_shape(target)) {
    throw TensorError("distill_loss: shape mismatch");
  }
  MseOut task = mse_loss(student_pred, target);
  MseOut match = mse_loss(student_pred, teacher_pred);
  MseOut out{(1.0 - alpha) * task.loss + alpha * match.loss, Tensor(student_pred.shape())};
  for (std::int64_t i = 0; i < out.grad.size(); ++i) {
    out.grad[i] = static_cast<float>((1.0 - alpha) * static_cast<double>(task.grad[i]) +
                                     alpha * static_cast<double>(match.grad[i]));
  }
  return out;
}

void apply_global(std::span<const ParamRef> client_params, const ParamSet& global) {
  assign_params(client_params, global);
}

std::string serialize_update(const ClientUpdate& update) {
  UpdateMeta meta;
  meta.client_id = update.client_id;
  meta.n_samples = update.n_samples;
  meta.round = update.round;
  return serialize_paramset(update.params, meta);
}

ClientUpdate deserialize_update(const std::string& bytes) {
  UpdateMeta meta;
  ClientUpdate u;
  u.params = deserialize_paramset(bytes, &meta);
  u.client_id = static_cast<int>(meta.client_id.value_or(0));
  u.n_samples = meta.n_samples.value_or(1);
  u.round = static_cast<int>(meta.round.value_or(0));
  return u;
}

std::int64_t payload_bytes(const ClientUpdate& update) {
  return static_cast<std::int64_t>(serialize_update(update).size());
}

}  // namespace fedscape
