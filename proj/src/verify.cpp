#include "fedscape/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedscape/clobj.hpp"
#include "fedscape/dataset.hpp"
#include "fedscape/harness.hpp"
#include "fedscape/metrics.hpp"
#include "fedscape/report.hpp"

namespace fedscape {

namespace oracle {

ParamSet weighted_mean_reference(const std::vector<ClientUpdate>& updates) {
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  long double total = 0.0L;
  for (const auto* u : ordered) total += static_cast<long double>(u->n_samples);
  ParamSet out;
  const auto& proto = ordered.front()->params.entries();
  for (std::size_t t = 0; t < proto.size(); ++t) {
    Tensor acc_t(proto[t].value.shape());
    for (std::int64_t i = 0; i < acc_t.size(); ++i) {
      long double acc = 0.0L;
      for (const auto* u : ordered) {
        acc += static_cast<long double>(u->n_samples) *
               static_cast<long double>(u->params.entries()[t].value[i]);
      }
      acc_t[i] = static_cast<float>(acc / total);
    }
    out.add({proto[t].name, proto[t].segment, proto[t].tags, std::move(acc_t)});
  }
  return out;
}

std::optional<long double> pcc_reference(std::span<const double> x, std::span<const double> y) {
  std::size_t n = x.size();
  long double mx = 0.0L, my = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    mx += static_cast<long double>(x[i]);
    my += static_cast<long double>(y[i]);
  }
  mx /= static_cast<long double>(n);
  my /= static_cast<long double>(n);
  long double sxx = 0.0L, syy = 0.0L, sxy = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    long double dx = static_cast<long double>(x[i]) - mx;
    long double dy = static_cast<long double>(y[i]) - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx / static_cast<long double>(n) < 1e-12L || syy / static_cast<long double>(n) < 1e-12L) {
    return std::nullopt;
  }
  return sxy / std::sqrt(sxx * syy);
}

long double rmse_reference(std::span<const double> pred, std::span<const double> target) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    long double d = static_cast<long double>(pred[i]) - static_cast<long double>(target[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<long double>(pred.size()));
}

}  // namespace oracle

namespace {

using Checks = std::vector<VerifyCheck>;

std::string fmt(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(rng.uniform(-scale, scale));
  }
  return t;
}

std::vector<ClientUpdate> random_updates(Rng& rng, int n_clients,
                                         const std::vector<std::int64_t>& shape) {
  std::vector<ClientUpdate> updates;
  for (int c = 0; c < n_clients; ++c) {
    ClientUpdate u;
    u.client_id = c;
    u.n_samples = 1 + static_cast<std::int64_t>(rng.uniform_int(500));
    u.params.add({"w", Segment::kRoot, 0, random_tensor(shape, rng, 2.0)});
    u.params.add({"b", Segment::kTop, 0, random_tensor({4}, rng, 2.0)});
    updates.push_back(std::move(u));
  }
  return updates;
}

// Deliberately wrong aggregator used by the fault-injection hook.
ParamSet unweighted_mean(const std::vector<ClientUpdate>& updates) {
  std::vector<ClientUpdate> equal = updates;
  for (auto& u : equal) u.n_samples = 1;
  return weighted_average(equal);
}

void check_weighted_mean(Checks& out, bool inject_fault) {
  Rng rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    int n = 2 + static_cast<int>(rng.uniform_int(9));
    auto updates = random_updates(rng, n, {3, 5});
    ParamSet got = inject_fault ? unweighted_mean(updates) : weighted_average(updates);
    ParamSet want = oracle::weighted_mean_reference(updates);
    for (std::size_t t = 0; t < got.size(); ++t) {
      for (std::int64_t i = 0; i < got.entries()[t].value.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(got.entries()[t].value[i]) -
                                         static_cast<double>(want.entries()[t].value[i])));
      }
    }
  }
  out.push_back({"flstrat", "weighted-mean-oracle", worst <= 1e-6,
                 "max elementwise deviation " + fmt(worst) + " (expected <= 1e-6)"});
}

void check_permutation_invariance(Checks& out) {
  Rng rng(202);
  bool ok = true;
  for (int inst = 0; inst < 10; ++inst) {
    auto updates = random_updates(rng, 5, {4, 4});
    ParamSet a = weighted_average(updates);
    std::reverse(updates.begin(), updates.end());
    std::swap(updates[0], updates[2]);
    ParamSet b = weighted_average(updates);
    ok = ok && a.content_hash() == b.content_hash();
  }
  out.push_back({"flstrat", "permutation-invariance", ok,
                 ok ? "shuffled update lists aggregate bitwise identically"
                    : "aggregate depends on update order"});
}

void check_scale_consistency(Checks& out) {
  Rng rng(303);
  bool ok = true;
  for (int inst = 0; inst < 10; ++inst) {
    auto updates = random_updates(rng, 4, {6});
    ParamSet a = weighted_average(updates);
    auto scaled = updates;
    for (auto& u : scaled) u.n_samples *= 7;
    ParamSet b = weighted_average(scaled);
    ok = ok && a.content_hash() == b.content_hash();
  }
  out.push_back({"flstrat", "weight-scale-consistency", ok,
                 ok ? "scaling all n_i leaves the mean unchanged" : "mean changed under scaling"});
}

double layer_fd(Layer& layer, const Tensor& x, Rng& rng, double h) {
  Tensor target(layer.forward(x, Mode::kTrainFrozenStats).shape());
  for (std::int64_t i = 0; i < target.size(); ++i) target[i] = static_cast<float>(rng.uniform(-1, 1));
  auto loss = [&]() {
    Tensor y = layer.forward(x, Mode::kTrainFrozenStats);
    return mse_value(y, target);
  };
  layer.zero_grads();
  Tensor y = layer.forward(x, Mode::kTrainFrozenStats);
  MseOut mse = mse_loss(y, target);
  layer.backward(mse.grad);
  std::vector<ParamRef> refs;
  layer.collect_params("", Segment::kRoot, refs);
  return grad_check(loss, {refs.data(), refs.size()}, h, 20, rng);
}

void check_layer_gradients(Checks& out) {
  Rng rng(404);
  {
    Rng init = rng.fork("dense");
    DenseLayer dense("fc", 5, 3, true, init);
    Tensor x = random_tensor({4, 5}, rng);
    double err = layer_fd(dense, x, rng, 1e-3);
    out.push_back({"numcore", "dense-gradient-fd", err < 1e-4,
                   "max rel err " + fmt(err) + " (expected < 1e-4)"});
  }
  {
    Rng init = rng.fork("conv");
    Conv2dLayer conv("c", 3, 4, 2, true, init);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    double err = layer_fd(conv, x, rng, 1e-3);
    out.push_back({"numcore", "conv-gradient-fd", err < 1e-4,
                   "max rel err " + fmt(err) + " (expected < 1e-4)"});
  }
  {
    BatchNormLayer bn("bn", 6, false);
    Rng vals(55);
    Tensor x = random_tensor({8, 6}, vals);
    double err = layer_fd(bn, x, vals, 1e-3);
    out.push_back({"numcore", "batchnorm-gradient-fd", err < 1e-4,
                   "max rel err " + fmt(err) + " (expected < 1e-4)"});
  }
}

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.image_size = 8;
  mc.conv_channels = {4, 8};
  mc.top_hidden = 8;
  return mc;
}

// Central differences with per-coordinate step selection. Deep composites mix
// regions where truncation dominates (batch-norm third derivatives) with ones
// where f32 forward roundoff does, so each coordinate gets the best of a
// small step ladder; a wrong analytic gradient fails at every step size.
double fd_check_stepped(const std::function<double()>& f, std::span<const ParamRef> params,
                        int n_samples, Rng& rng) {
  static constexpr double kSteps[] = {5e-3, 1e-3, 5e-4};
  std::int64_t total = 0;
  for (const ParamRef& p : params) total += p.value->size();
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
    double analytic = static_cast<double>((*chosen->grad)[flat]);
    double best = 1e300;
    for (double h : kSteps) {
      Tensor& theta = *chosen->value;
      float saved = theta[flat];
      theta[flat] = static_cast<float>(static_cast<double>(saved) + h);
      double f_plus = f();
      theta[flat] = static_cast<float>(static_cast<double>(saved) - h);
      double f_minus = f();
      theta[flat] = saved;
      double fd = (f_plus - f_minus) / (2.0 * h);
      best = std::min(best, std::abs(analytic - fd) / std::max(1.0, std::abs(analytic)));
    }
    max_err = std::max(max_err, best);
  }
  return max_err;
}

double model_fd(RootTopModel& model, const Tensor& x, const Tensor& y, Rng& rng) {
  model.zero_grads();
  Tensor pred = model.forward(x, Mode::kTrainFrozenStats);
  MseOut mse = mse_loss(pred, y);
  Tensor grad_features = model.backward_top(mse.grad);
  model.backward_root(grad_features);
  auto loss = [&]() {
    Tensor p = model.forward(x, Mode::kTrainFrozenStats);
    return mse_value(p, y);
  };
  auto refs = model.params();
  return fd_check_stepped(loss, {refs.data(), refs.size()}, 20, rng);
}

void check_model_gradient(Checks& out) {
  Rng rng(505);
  RootTopModel model(tiny_model_config(), rng.fork("init"));
  Tensor x = random_tensor({4, 3, 8, 8}, rng);
  Tensor y = random_tensor({4, 8}, rng);
  double err = model_fd(model, x, y, rng);
  out.push_back({"model", "end-to-end-gradient-fd", err < 1e-4,
                 "max rel err " + fmt(err) + " (expected < 1e-4)"});
}

void check_prox(Checks& out) {
  Rng rng(606);
  RootTopModel model(tiny_model_config(), rng.fork("init"));
  ParamSet anchor = select_aggregatable(model.snapshot(), Strategy::kProx, Scope::kFull);
  auto refs = model.params();
  // At the anchor the penalty and its gradient vanish.
  double at_anchor = prox_penalty({refs.data(), refs.size()}, anchor, 0.5);
  bool ok = at_anchor == 0.0;

  // Displace and compare the hook gradient against finite differences.
  for (const ParamRef& r : refs) {
    for (std::int64_t i = 0; i < r.value->size(); ++i) {
      (*r.value)[i] += static_cast<float>(rng.uniform(-0.5, 0.5));
    }
  }
  model.zero_grads();
  GradHook hook = prox_grad_hook(anchor, 0.37);
  hook(model);
  auto loss = [&]() { return prox_penalty({refs.data(), refs.size()}, anchor, 0.37); };
  double err = grad_check(loss, {refs.data(), refs.size()}, 1e-3, 20, rng);
  ok = ok && err < 1e-4;
  out.push_back({"flstrat", "prox-penalty-fd", ok,
                 "anchor penalty " + fmt(at_anchor) + ", max rel err " + fmt(err)});
}

void check_distill(Checks& out) {
  Rng rng(707);
  Tensor student = random_tensor({4, 8}, rng);
  Tensor teacher = random_tensor({4, 8}, rng);
  Tensor target = random_tensor({4, 8}, rng);

  MseOut plain = mse_loss(student, target);
  MseOut mix0 = distill_loss(student, teacher, target, 0.0);
  bool ok = mix0.loss == plain.loss && mix0.grad == plain.grad;

  MseOut mix1 = distill_loss(student, target, target, 1.0);
  ok = ok && std::abs(mix1.loss - plain.loss) < 1e-12;

  // Finite differences on the prediction itself.
  MseOut mixed = distill_loss(student, teacher, target, 0.5);
  double worst = 0.0;
  Rng pick(808);
  for (int s = 0; s < 20; ++s) {
    std::int64_t i = static_cast<std::int64_t>(pick.uniform_int(static_cast<std::uint64_t>(student.size())));
    float saved = student[i];
    double h = 1e-3;
    student[i] = static_cast<float>(saved + h);
    double up = distill_loss(student, teacher, target, 0.5).loss;
    student[i] = static_cast<float>(saved - h);
    double down = distill_loss(student, teacher, target, 0.5).loss;
    student[i] = saved;
    double fd = (up - down) / (2 * h);
    double analytic = static_cast<double>(mixed.grad[i]);
    worst = std::max(worst, std::abs(analytic - fd) / std::max(1.0, std::abs(analytic)));
  }
  ok = ok && worst < 1e-4;
  out.push_back({"flstrat", "distill-loss-fd", ok,
                 "alpha identities hold, max rel err " + fmt(worst)});
}

void check_reg_penalty(Checks& out) {
  Rng rng(909);
  bool ok = true;
  double worst = 0.0;
  for (int inst = 0; inst < 4; ++inst) {
    Tensor theta = random_tensor({12}, rng);
    Tensor grad({12});
    ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
    RegState reg;
    reg.method = ClMethod::kEwc;
    reg.lambda = 0.8;
    Anchor anchor;
    anchor.theta_star.add({"p", Segment::kTop, 0, theta});  // anchored at current
    Tensor omega({12});
    for (std::int64_t i = 0; i < omega.size(); ++i) {
      omega[i] = static_cast<float>(rng.uniform(0.0, 3.0));
    }
    anchor.omega.add({"p", Segment::kTop, 0, omega});
    reg.anchors.push_back(anchor);

    double at_anchor = reg_penalty({&ref, 1}, reg, false);
    ok = ok && at_anchor == 0.0;

    for (std::int64_t i = 0; i < theta.size(); ++i) {
      theta[i] += static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    grad.fill(0.0f);
    reg_penalty({&ref, 1}, reg, true);
    auto loss = [&]() { return reg_penalty({&ref, 1}, reg, false); };
    double err = grad_check(loss, {&ref, 1}, 1e-3, 20, rng);
    worst = std::max(worst, err);
  }
  ok = ok && worst < 1e-4;
  out.push_back({"clobj", "reg-penalty-fd", ok,
                 "anchor penalty zero, max rel err " + fmt(worst)});
}

void check_vae(Checks& out) {
  Rng rng(1010);
  LatentVAE vae(6, 8, 3, rng.fork("init"));
  Tensor features = random_tensor({5, 6}, rng);
  Tensor eps = random_tensor({5, 3}, rng);

  // KL closed form vs numeric quadrature of the 1-D Gaussian KL integral.
  double mu = 0.7, logvar = -0.4;
  double sigma2 = std::exp(logvar);
  double closed = 0.5 * (mu * mu + sigma2 - logvar - 1.0);
  double quad = 0.0;
  int steps = 20000;
  double lo = -12.0, hi = 12.0, dx = (hi - lo) / steps;
  for (int i = 0; i <= steps; ++i) {
    double x = lo + i * dx;
    double s = std::sqrt(sigma2);
    double p = std::exp(-(x - mu) * (x - mu) / (2 * sigma2)) / (s * std::sqrt(2 * M_PI));
    double q = std::exp(-x * x / 2) / std::sqrt(2 * M_PI);
    double w = (i == 0 || i == steps) ? 0.5 : 1.0;
    if (p > 0.0) quad += w * p * std::log(p / q) * dx;
  }
  bool kl_ok = std::abs(closed - quad) < 1e-4;

  vae.zero_grads();
  vae.elbo_loss(features, eps, /*with_grads=*/true);
  auto loss = [&]() { return vae.elbo_loss(features, eps, false).total; };
  auto refs = vae.params();
  double err = grad_check(loss, {refs.data(), refs.size()}, 1e-3, 20, rng);
  bool ok = kl_ok && err < 1e-4;
  out.push_back({"clobj", "vae-elbo-fd", ok,
                 "KL quadrature gap " + fmt(std::abs(closed - quad)) + ", max rel err " + fmt(err)});
}

void check_adam_identities(Checks& out) {
  Rng rng(1111);
  Tensor theta = random_tensor({16}, rng);
  Tensor grads = random_tensor({16}, rng);
  Tensor before = theta;
  ParamRef ref{"p", Segment::kTop, 0, &theta, &grads};
  AdamState zero_lr(0.0);
  adam_step({&ref, 1}, zero_lr);
  bool ok = theta == before && zero_lr.t == 1;

  grads.fill(0.0f);
  AdamState lr(1e-3);
  adam_step({&ref, 1}, lr);
  ok = ok && theta == before;
  out.push_back({"numcore", "adam-identities", ok,
                 ok ? "lr=0 and g=0 both leave parameters bitwise unchanged"
                    : "adam identity violated"});
}

void check_fedroot_locality(Checks& out) {
  bool all_ok = true;
  std::string failed;
  for (Strategy strategy : {Strategy::kAvg, Strategy::kBn, Strategy::kProx, Strategy::kOpt,
                            Strategy::kDistill}) {
    Rng rng(1212);
    Rng init = rng.fork("init");
    RootTopModel base(tiny_model_config(), init);
    std::vector<RootTopModel> clients(3, base);
    // Drift every client a little so tensors differ.
    for (std::size_t c = 0; c < clients.size(); ++c) {
      for (const ParamRef& r : clients[c].params()) {
        for (std::int64_t i = 0; i < r.value->size(); ++i) {
          (*r.value)[i] += static_cast<float>(rng.uniform(-0.1, 0.1));
        }
      }
    }
    std::vector<std::uint64_t> top_hash_before;
    for (auto& m : clients) {
      std::uint64_t h = 0xcbf29ce484222325ull;
      for (const ParamRef& r : m.params(Segment::kTop)) h = tensor_hash(*r.value, h);
      top_hash_before.push_back(h);
    }

    ServerState server;
    server.strategy = strategy;
    server.scope = Scope::kRoot;
    server.global = select_aggregatable(base.snapshot(), strategy, Scope::kRoot);
    std::vector<ClientUpdate> updates;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      ClientUpdate u;
      u.client_id = static_cast<int>(c);
      u.n_samples = static_cast<std::int64_t>(10 * (c + 1));
      ParamSet sel = select_aggregatable(clients[c].snapshot(), strategy, Scope::kRoot);
      if (strategy == Strategy::kOpt) {
        for (std::size_t t = 0; t < sel.size(); ++t) {
          Tensor& d = sel.entries()[t].value;
          const Tensor& g = server.global.entries()[t].value;
          for (std::int64_t i = 0; i < d.size(); ++i) {
            d[i] = static_cast<float>(static_cast<double>(d[i]) - static_cast<double>(g[i]));
          }
        }
      }
      u.params = std::move(sel);
      updates.push_back(std::move(u));
    }
    if (strategy == Strategy::kOpt) {
      fedopt_server_step(server, updates);
    } else {
      aggregate_average(server, updates);
    }
    for (auto& m : clients) {
      auto refs = m.params();
      apply_global({refs.data(), refs.size()}, server.global);
    }

    // TOP tensors bitwise untouched; ROOT selections bitwise equal across clients.
    for (std::size_t c = 0; c < clients.size(); ++c) {
      std::uint64_t h = 0xcbf29ce484222325ull;
      for (const ParamRef& r : clients[c].params(Segment::kTop)) h = tensor_hash(*r.value, h);
      if (h != top_hash_before[c]) {
        all_ok = false;
        failed = std::string(strategy_name(strategy)) + ": top changed";
      }
    }
    std::uint64_t first = 0;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      ParamSet sel = select_aggregatable(clients[c].snapshot(), strategy, Scope::kRoot);
      std::uint64_t h = sel.content_hash();
      if (c == 0) {
        first = h;
      } else if (h != first) {
        all_ok = false;
        failed = std::string(strategy_name(strategy)) + ": roots differ";
      }
    }
  }
  out.push_back({"flstrat", "fedroot-locality", all_ok,
                 all_ok ? "all five strategies keep TOP local under scope=root" : failed});
}

void check_fedbn_locality(Checks& out) {
  Rng rng(1313);
  RootTopModel base(tiny_model_config(), rng.fork("init"));
  std::vector<RootTopModel> clients(2, base);
  for (auto& m : clients) {
    for (const ParamRef& r : m.params()) {
      for (std::int64_t i = 0; i < r.value->size(); ++i) {
        (*r.value)[i] += static_cast<float>(rng.uniform(-0.1, 0.1));
      }
    }
  }
  auto bn_hash = [](RootTopModel& m) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const ParamRef& r : m.params()) {
      if (r.tags & kTagBatchNorm) h = tensor_hash(*r.value, h);
    }
    return h;
  };
  std::vector<std::uint64_t> before{bn_hash(clients[0]), bn_hash(clients[1])};

  ServerState server;
  server.strategy = Strategy::kBn;
  server.scope = Scope::kFull;
  server.global = select_aggregatable(base.snapshot(), Strategy::kBn, Scope::kFull);
  std::vector<ClientUpdate> updates;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    ClientUpdate u;
    u.client_id = static_cast<int>(c);
    u.n_samples = 5;
    u.params = select_aggregatable(clients[c].snapshot(), Strategy::kBn, Scope::kFull);
    updates.push_back(std::move(u));
  }
  aggregate_average(server, updates);
  for (auto& m : clients) {
    auto refs = m.params();
    apply_global({refs.data(), refs.size()}, server.global);
  }
  bool ok = bn_hash(clients[0]) == before[0] && bn_hash(clients[1]) == before[1];
  bool none_bn = true;
  for (const auto& e : server.global.entries()) {
    if (e.tags & kTagBatchNorm) none_bn = false;
  }
  ok = ok && none_bn;
  out.push_back({"flstrat", "fedbn-locality", ok,
                 ok ? "batchnorm tensors never aggregated nor overwritten"
                    : "batchnorm tensor left the client"});
}

void check_reservoir(Checks& out) {
  Rng rng(1414);
  ReplayBuffer buffer(100);
  const int total = 10000;
  for (int i = 0; i < total; ++i) {
    ReplayItem item;
    item.x = Tensor({1});
    item.x[0] = static_cast<float>(i);
    item.y = Tensor({1});
    buffer.offer(std::move(item), rng);
  }
  // Retention frequency over id buckets approximates capacity/total.
  std::vector<int> buckets(10, 0);
  for (const auto& item : buffer.items()) {
    buckets[static_cast<std::size_t>(item.x[0] / (total / 10))] += 1;
  }
  bool ok = buffer.size() == 100;
  // Every decile should keep roughly 10 of its 1000 offers.
  for (int b : buckets) ok = ok && b >= 2 && b <= 25;
  out.push_back({"clobj", "reservoir-retention", ok,
                 ok ? "capacity-100 buffer retains uniformly across 10k offers"
                    : "retention skewed across the stream"});
}

void check_augment_stats(Checks& out) {
  auto data = generate_dataset(8, 16, 42);
  Rng rng(1515);
  int flips = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    Rng probe = rng.fork(static_cast<std::uint64_t>(i));
    if (probe.bernoulli(0.5)) ++flips;
  }
  double freq = static_cast<double>(flips) / trials;
  bool ok = std::abs(freq - 0.5) <= 0.02;

  // Flip twice via the augmentation path = identity.
  const SceneSample& s = data[0];
  auto flip_once = [](const SceneSample& in) {
    SceneSample out = in;
    std::int64_t c = in.image.dim(0), h = in.image.dim(1), w = in.image.dim(2);
    Tensor f({c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) f.at(ch, y, x) = in.image.at(ch, y, w - 1 - x);
      }
    }
    out.image = std::move(f);
    return out;
  };
  SceneSample twice = flip_once(flip_once(s));
  ok = ok && twice.image == s.image;
  out.push_back({"dataset", "augment-statistics", ok,
                 "flip frequency " + fmt(freq) + ", double flip is identity"});
}

void check_partition(Checks& out) {
  bool ok = true;
  std::string why;
  for (int n_clients : {2, 3, 7, 10}) {
    auto data = generate_dataset(400, 16, 7);
    FederatedSplit split = partition(data, n_clients, 99, false);
    std::vector<int> seen(data.size(), 0);
    for (const auto& client : split.client_train) {
      for (const auto& task : client) {
        for (std::size_t idx : task) seen[idx] += 1;
      }
    }
    for (const auto& task : split.shared_test) {
      for (std::size_t idx : task) seen[idx] += 1;
    }
    for (int s : seen) {
      if (s != 1) {
        ok = false;
        why = "an index appears " + std::to_string(s) + " times";
      }
    }
    double ratio = static_cast<double>(split.train_size()) / static_cast<double>(split.test_size());
    if (std::abs(ratio - 3.0) > 0.1) {
      ok = false;
      why = "train:test ratio " + fmt(ratio);
    }
    for (const auto& client : split.client_train) {
      std::size_t t1 = client[0].size(), t2 = client[1].size();
      if (t1 + 1 < t2 || t2 + 1 < t1) {
        ok = false;
        why = "task imbalance within a shard";
      }
    }
  }
  out.push_back({"dataset", "partition-invariants", ok,
                 ok ? "disjoint shards, 3:1 ratio, per-task balance for n in {2,3,7,10}" : why});
}

ExperimentConfig small_run_config() {
  ExperimentConfig cfg;
  cfg.mode = "fl";
  cfg.strategy = Strategy::kAvg;
  cfg.scope = Scope::kFull;
  cfg.n_clients = 2;
  cfg.rounds = 2;
  cfg.local_epochs = 1;
  cfg.batch_size = 4;
  cfg.dataset.n_scenes = 32;
  cfg.dataset.image_size = 16;
  cfg.model.image_size = 16;
  cfg.model.conv_channels = {4, 8};
  cfg.model.top_hidden = 8;
  cfg.deterministic_resources = true;
  cfg.checked = true;
  return cfg;
}

// Scheduling knobs necessarily differ between the compared configs, so mask
// only those two echo fields before the byte comparison.
std::string mask_scheduling(const std::string& result_json) {
  auto j = nlohmann::ordered_json::parse(result_json);
  j["config"]["sequential"] = false;
  j["config"]["threads"] = 0;
  return j.dump(2);
}

void check_determinism(Checks& out) {
  ExperimentConfig cfg = small_run_config();
  cfg.sequential = true;
  std::string a = result_json_string(run_experiment(cfg));
  std::string b = result_json_string(run_experiment(cfg));
  cfg.sequential = false;
  cfg.threads = 2;
  std::string c = result_json_string(run_experiment(cfg));
  bool ok = a == b && mask_scheduling(a) == mask_scheduling(c);
  out.push_back({"harness", "determinism", ok,
                 ok ? "repeat and concurrent-schedule runs are byte-identical"
                    : "outputs differ across repeats or schedules"});
}

void check_payload(Checks& out) {
  Rng rng(1616);
  RootTopModel model(ModelConfig{}, rng.fork("init"));
  ClientUpdate full;
  full.client_id = 0;
  full.n_samples = 10;
  full.params = select_aggregatable(model.snapshot(), Strategy::kAvg, Scope::kFull);
  ClientUpdate root = full;
  root.params = select_aggregatable(model.snapshot(), Strategy::kAvg, Scope::kRoot);
  std::int64_t full_bytes = payload_bytes(full);
  std::int64_t root_bytes = payload_bytes(root);

  std::int64_t root_count = root.params.param_count();
  std::int64_t full_count = full.params.param_count();
  double byte_ratio = static_cast<double>(root_bytes) / static_cast<double>(full_bytes);
  double param_ratio = static_cast<double>(root_count) / static_cast<double>(full_count);
  bool ok = root_bytes < full_bytes && std::abs(byte_ratio - param_ratio) < 0.01;
  out.push_back({"flstrat", "payload-accounting", ok,
                 "byte ratio " + fmt(byte_ratio) + " vs parameter ratio " + fmt(param_ratio)});
}

void check_lgr_trace(Checks& out) {
  Rng rng(1717);
  ModelConfig mc = tiny_model_config();
  RootTopModel model(mc, rng.fork("model"));
  LatentVAE gen(model.feature_dim(), 8, 4, rng.fork("gen"));
  LgrState st(std::move(gen), 1e-4, 1e-3, 1e-3);
  Rng gen_rng = rng.fork("gen_rng");

  std::vector<Batch> batches;
  for (int b = 0; b < 2; ++b) {
    Batch batch{random_tensor({4, 3, 8, 8}, rng), random_tensor({4, 8}, rng)};
    batches.push_back(std::move(batch));
  }
  std::vector<std::string> events;
  EventSink sink = [&](const std::string& e) { events.push_back(e); };

  lgr_client_round(model, st, {batches.data(), batches.size()}, gen_rng, &sink);
  std::vector<std::string> want_t1 = {"extract", "generator-update", "top-update", "root-update",
                                      "extract", "generator-update", "top-update", "root-update"};
  bool ok = events == want_t1;

  st.tasks_seen = 1;
  events.clear();
  lgr_client_round(model, st, {batches.data(), batches.size()}, gen_rng, &sink);
  std::vector<std::string> want_t2 = {"extract", "generate", "generator-update", "top-update",
                                      "root-update", "extract", "generate", "generator-update",
                                      "top-update", "root-update"};
  ok = ok && events == want_t2;
  out.push_back({"clobj", "lgr-step-order", ok,
                 ok ? "event trace matches the golden order; no generate in task 1"
                    : "event sequence deviates from the golden trace"});
}

void check_metric_oracles(Checks& out) {
  Rng rng(1818);
  double worst_pcc = 0.0, worst_rmse = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    std::int64_t n = 8 + static_cast<std::int64_t>(rng.uniform_int(60));
    Tensor a({n}), b({n});
    std::vector<double> ad, bd;
    for (std::int64_t i = 0; i < n; ++i) {
      a[i] = static_cast<float>(rng.uniform(-3, 3));
      b[i] = static_cast<float>(rng.uniform(-3, 3));
      ad.push_back(static_cast<double>(a[i]));
      bd.push_back(static_cast<double>(b[i]));
    }
    auto got = pcc(a, b);
    auto want = oracle::pcc_reference(ad, bd);
    if (got.has_value() != want.has_value()) {
      worst_pcc = 1.0;
    } else if (got.has_value()) {
      worst_pcc = std::max(worst_pcc, std::abs(*got - static_cast<double>(*want)));
    }
    double got_rmse = rmse(a, b);
    double want_rmse = static_cast<double>(oracle::rmse_reference(ad, bd));
    worst_rmse = std::max(worst_rmse, std::abs(got_rmse - want_rmse));
  }

  // Affine invariance, self correlation, sign flip, undefined flag. Columns
  // are dyadic rationals so the affine map a*x+b is exact in binary32 and the
  // 1e-9 tolerance is meaningful.
  Tensor x({16}), y({16});
  for (std::int64_t i = 0; i < 16; ++i) {
    x[i] = static_cast<float>(static_cast<double>(rng.uniform_int(512)) / 256.0 - 1.0);
    y[i] = static_cast<float>(static_cast<double>(rng.uniform_int(512)) / 256.0 - 1.0);
  }
  Tensor ax({16}), neg({16});
  for (std::int64_t i = 0; i < 16; ++i) {
    ax[i] = 2.5f * x[i] + 1.0f;
    neg[i] = -y[i];
  }
  bool props = std::abs(*pcc(x, y) - *pcc(ax, y)) < 1e-9;
  props = props && std::abs(*pcc(x, x) - 1.0) < 1e-12;
  props = props && std::abs(*pcc(x, neg) + *pcc(x, y)) < 1e-12;
  Tensor constant = Tensor::full({16}, 2.0f);
  props = props && !pcc(x, constant).has_value();

  bool ok = worst_pcc < 1e-9 && worst_rmse < 1e-6 && props;
  out.push_back({"metrics", "pcc-rmse-oracle", ok,
                 "pcc err " + fmt(worst_pcc) + ", rmse err " + fmt(worst_rmse)});
}

std::string metrics_only(const RunResult& r) {
  std::string all = result_json_string(r);
  auto j = nlohmann::ordered_json::parse(all);
  nlohmann::ordered_json keep;
  keep["aggregates"] = j["aggregates"];
  keep["records"] = j["records"];
  return keep.dump();
}

void check_reduction_identities(Checks& out) {
  bool ok = true;
  std::string why;

  {
    ExperimentConfig avg = small_run_config();
    ExperimentConfig prox = avg;
    prox.strategy = Strategy::kProx;
    prox.hyper.prox_mu = 0.0;
    if (metrics_only(run_experiment(avg)) != metrics_only(run_experiment(prox))) {
      ok = false;
      why = "mu=0 FedProx differs from FedAvg";
    }
    ExperimentConfig distill = avg;
    distill.strategy = Strategy::kDistill;
    distill.hyper.distill_alpha = 0.0;
    if (metrics_only(run_experiment(avg)) != metrics_only(run_experiment(distill))) {
      ok = false;
      why = "alpha=0 FedDistill differs from FedAvg";
    }
  }
  {
    ExperimentConfig fine = small_run_config();
    fine.mode = "fcl";
    fine.rounds_per_task = 2;
    ExperimentConfig ewc = fine;
    ewc.cl_method = ClMethod::kEwc;
    ewc.hyper.lambda = 0.0;
    if (metrics_only(run_experiment(fine)) != metrics_only(run_experiment(ewc))) {
      ok = false;
      why = "lambda=0 EWC differs from finetune";
    }
    ExperimentConfig nr = fine;
    nr.cl_method = ClMethod::kNr;
    nr.hyper.buffer_capacity = 0;
    if (metrics_only(run_experiment(fine)) != metrics_only(run_experiment(nr))) {
      ok = false;
      why = "capacity-0 NR differs from finetune";
    }
  }
  {
    // M=0 reduces the LGR round to split-rate training plus generator updates.
    Rng rng(1919);
    ModelConfig mc = tiny_model_config();
    RootTopModel a(mc, rng.fork("model"));
    RootTopModel b = a;
    LatentVAE gen_a(a.feature_dim(), 8, 4, rng.fork("gen"));
    LatentVAE gen_b = gen_a;
    std::vector<Batch> batches;
    for (int i = 0; i < 3; ++i) {
      batches.push_back({random_tensor({4, 3, 8, 8}, rng), random_tensor({4, 8}, rng)});
    }
    LgrState st(std::move(gen_a), 1e-4, 1e-3, 1e-3);
    st.pseudo_per_batch = 0;
    st.tasks_seen = 1;  // replay would fire if M allowed it
    Rng lgr_rng(777);
    lgr_client_round(a, st, {batches.data(), batches.size()}, lgr_rng);

    SplitAdam opt(1e-4, 1e-3);
    AdamState gen_opt(1e-3);
    Rng ctl_rng(777);
    for (const Batch& batch : batches) {
      // Frozen-stat extraction: split_rates_step applies the one running-stat
      // update per batch itself.
      Tensor features = b.extract_root(batch.x, Mode::kTrainFrozenStats);
      gen_b.train_step(features, gen_opt, ctl_rng);
      split_rates_step(b, batch.x, batch.y, opt);
    }
    if (a.param_hash() != b.param_hash()) {
      ok = false;
      why = "M=0 LGR differs from split-rate control";
    }
  }
  out.push_back({"harness", "reduction-identities", ok,
                 ok ? "mu=0, alpha=0, lambda=0, M=0 and empty buffer reduce bitwise" : why});
}

}  // namespace

int verify_check_count() { return 22; }

std::vector<VerifyCheck> run_verify_checks(const VerifyOptions& opts) {
  bool saved_checked = checked_mode();
  set_checked_mode(true);
  Checks out;
  check_weighted_mean(out, opts.inject_fault == "agg-unweighted");
  check_permutation_invariance(out);
  check_scale_consistency(out);
  check_layer_gradients(out);  // three checks
  check_model_gradient(out);
  check_prox(out);
  check_distill(out);
  check_reg_penalty(out);
  check_vae(out);
  check_adam_identities(out);
  check_fedroot_locality(out);
  check_fedbn_locality(out);
  check_reservoir(out);
  check_augment_stats(out);
  check_partition(out);
  check_determinism(out);
  check_payload(out);
  check_lgr_trace(out);
  check_metric_oracles(out);
  check_reduction_identities(out);
  set_checked_mode(saved_checked);
  return out;
}

}  // namespace fedscape
