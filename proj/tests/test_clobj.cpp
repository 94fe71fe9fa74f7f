#include <doctest.h>

#include <cmath>

#include "fedscape/clobj.hpp"
#include "oracles.hpp"

using namespace fedscape;

namespace {

Tensor rand_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

// Handle over a bare dense layer: pred = W x + b.
NetHandle dense_handle(DenseLayer& layer) {
  NetHandle h;
  h.forward = [&layer](const Tensor& x, Mode mode) { return layer.forward(x, mode); };
  h.backward = [&layer](const Tensor& grad) { layer.backward(grad); };
  h.zero_grads = [&layer]() { layer.zero_grads(); };
  layer.collect_params("", Segment::kTop, h.params);
  return h;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.image_size = 8;
  mc.conv_channels = {4, 8};
  mc.top_hidden = 8;
  return mc;
}

}  // namespace

TEST_CASE("ewc: zero-gradient coordinates get zero importance") {
  Rng rng(70);
  DenseLayer layer("fc", 2, 1, false, rng);
  NetHandle h = dense_handle(layer);
  // Input column 1 is always zero, so d loss / d W[0][1] == 0.
  std::vector<Batch> batches;
  for (int i = 0; i < 3; ++i) {
    Tensor x({2, 2});
    x.at(0, 0) = static_cast<float>(rng.uniform(-1, 1));
    x.at(1, 0) = static_cast<float>(rng.uniform(-1, 1));
    batches.push_back({x, rand_tensor({2, 1}, rng)});
  }
  RegState reg;
  reg.method = ClMethod::kEwc;
  ewc_consolidate(h, {batches.data(), batches.size()}, reg);
  REQUIRE(reg.anchors.size() == 1);
  const Tensor& fisher = reg.anchors[0].omega.entries()[0].value;
  CHECK(fisher[0] > 0.0f);
  CHECK(fisher[1] == 0.0f);
  CHECK_THROWS_AS(ewc_consolidate(h, {}, reg), TensorError);
}

TEST_CASE("ewc: quadratic closed form on a scalar") {
  // pred = theta * x with x=1, target c: one sample, one batch.
  Rng rng(71);
  DenseLayer layer("fc", 1, 1, false, rng);
  layer.weight[0] = 1.7f;
  NetHandle h = dense_handle(layer);
  float c = 0.4f;
  std::vector<Batch> batches{{Tensor({1, 1}, {1.0f}), Tensor({1, 1}, {c})}};
  RegState reg;
  reg.method = ClMethod::kEwc;
  ewc_consolidate(h, {batches.data(), batches.size()}, reg);
  double grad = 2.0 * (1.7 - c);  // d/dtheta (theta - c)^2
  CHECK(reg.anchors[0].omega.entries()[0].value[0] == doctest::Approx(grad * grad).epsilon(1e-5));
  CHECK(reg.anchors[0].theta_star.entries()[0].value[0] == 1.7f);
}

TEST_CASE("ewc: batch-size-1 fisher matches a per-sample squared-gradient oracle") {
  Rng rng(72);
  DenseLayer layer("fc", 3, 2, true, rng);
  NetHandle h = dense_handle(layer);
  std::vector<Batch> batches;
  for (int i = 0; i < 8; ++i) {
    batches.push_back({rand_tensor({1, 3}, rng), rand_tensor({1, 2}, rng)});
  }
  RegState reg;
  reg.method = ClMethod::kEwc;
  ewc_consolidate(h, {batches.data(), batches.size()}, reg);

  // Oracle: analytic per-sample gradient of the 2-output mse for a linear map,
  // dW[j][k] = 2/(1*2) * (pred_j - y_j) * x_k, squared and averaged explicitly.
  std::vector<double> fisher_w(6, 0.0), fisher_b(2, 0.0);
  for (const Batch& batch : batches) {
    for (std::int64_t j = 0; j < 2; ++j) {
      double pred = layer.bias[j];
      for (std::int64_t k = 0; k < 3; ++k) pred += layer.weight.at(j, k) * batch.x.at(0, k);
      double dpred = 2.0 / 2.0 * (pred - batch.y.at(0, j));
      for (std::int64_t k = 0; k < 3; ++k) {
        double g = dpred * batch.x.at(0, k);
        fisher_w[static_cast<std::size_t>(j * 3 + k)] += g * g;
      }
      fisher_b[static_cast<std::size_t>(j)] += dpred * dpred;
    }
  }
  for (auto& f : fisher_w) f /= batches.size();
  for (auto& f : fisher_b) f /= batches.size();
  const Tensor& fw = reg.anchors[0].omega.entries()[0].value;
  const Tensor& fb = reg.anchors[0].omega.entries()[1].value;
  for (int i = 0; i < 6; ++i) CHECK(fw[i] == doctest::Approx(fisher_w[static_cast<std::size_t>(i)]).epsilon(1e-4));
  for (int i = 0; i < 2; ++i) CHECK(fb[i] == doctest::Approx(fisher_b[static_cast<std::size_t>(i)]).epsilon(1e-4));
}

TEST_CASE("ewc-online folds importances with decay and keeps one anchor") {
  Rng rng(73);
  DenseLayer layer("fc", 1, 1, false, rng);
  layer.weight[0] = 1.0f;
  NetHandle h = dense_handle(layer);
  RegState reg;
  reg.method = ClMethod::kEwcOnline;
  reg.gamma = 0.5;

  std::vector<Batch> first{{Tensor({1, 1}, {1.0f}), Tensor({1, 1}, {0.0f})}};
  ewc_consolidate(h, {first.data(), first.size()}, reg);
  double f1 = std::pow(2.0 * 1.0, 2);  // grad 2*(1-0)
  CHECK(reg.anchors.size() == 1);
  CHECK(reg.anchors[0].omega.entries()[0].value[0] == doctest::Approx(f1).epsilon(1e-5));

  layer.weight[0] = 2.0f;
  std::vector<Batch> second{{Tensor({1, 1}, {1.0f}), Tensor({1, 1}, {1.0f})}};
  ewc_consolidate(h, {second.data(), second.size()}, reg);
  double f2 = std::pow(2.0 * (2.0 - 1.0), 2);
  CHECK(reg.anchors.size() == 1);  // still a single anchor
  CHECK(reg.anchors[0].omega.entries()[0].value[0] ==
        doctest::Approx(0.5 * f1 + f2).epsilon(1e-5));
  CHECK(reg.anchors[0].theta_star.entries()[0].value[0] == 2.0f);
}

TEST_CASE("reg_penalty: anchor point, hand arithmetic, finite differences") {
  Tensor theta({2}, {1.0f, 1.0f});
  Tensor grad({2});
  ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
  RegState reg;
  reg.method = ClMethod::kEwc;
  reg.lambda = 1.0;
  Anchor anchor;
  anchor.theta_star.add({"p", Segment::kTop, 0, Tensor({2})});
  anchor.omega.add({"p", Segment::kTop, 0, Tensor({2}, {1.0f, 2.0f})});
  reg.anchors.push_back(anchor);

  SUBCASE("penalty 1.5 and gradient [1,2] away from the anchor") {
    double penalty = reg_penalty({&ref, 1}, reg, true);
    CHECK(penalty == doctest::Approx(1.5).epsilon(1e-7));
    CHECK(grad[0] == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(grad[1] == doctest::Approx(2.0).epsilon(1e-7));
  }
  SUBCASE("zero at the anchor") {
    theta.fill(0.0f);
    CHECK(reg_penalty({&ref, 1}, reg, false) == 0.0);
  }
  SUBCASE("lambda zero short-circuits") {
    reg.lambda = 0.0;
    grad.fill(0.0f);
    CHECK(reg_penalty({&ref, 1}, reg, true) == 0.0);
    CHECK(grad[0] == 0.0f);
  }
  SUBCASE("penalties sum over anchors") {
    reg.anchors.push_back(reg.anchors[0]);
    CHECK(reg_penalty({&ref, 1}, reg, false) == doctest::Approx(3.0).epsilon(1e-7));
  }
}

TEST_CASE("si: frozen parameter, single-step hand arithmetic, trajectory replay") {
  SUBCASE("no movement means no importance") {
    Tensor theta({1}, {0.5f});
    Tensor grad({1});
    ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
    RegState reg;
    reg.method = ClMethod::kSi;
    reg.xi = 0.1;
    reg.reset_si_reference({&ref, 1});
    ParamSet grads;
    grads.add({"p", Segment::kTop, 0, Tensor({1}, {3.0f})});
    ParamSet before = ParamSet::snapshot({&ref, 1});
    si_record_step(reg, {&ref, 1}, grads, before);  // delta = 0
    CHECK(reg.si_omega.at("p")[0] == 0.0f);
    si_consolidate(reg, {&ref, 1});
    CHECK(reg.anchors[0].omega.entries()[0].value[0] == 0.0f);
  }
  SUBCASE("single step: grad -1, delta +0.1, xi=0.1 gives omega 10/11") {
    Tensor theta({1}, {0.0f});
    Tensor grad({1});
    ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
    RegState reg;
    reg.method = ClMethod::kSi;
    reg.xi = 0.1;
    reg.reset_si_reference({&ref, 1});
    ParamSet before = ParamSet::snapshot({&ref, 1});
    theta[0] = 0.1f;
    ParamSet grads;
    grads.add({"p", Segment::kTop, 0, Tensor({1}, {-1.0f})});
    si_record_step(reg, {&ref, 1}, grads, before);
    CHECK(reg.si_omega.at("p")[0] == doctest::Approx(0.1).epsilon(1e-6));
    si_consolidate(reg, {&ref, 1});
    CHECK(reg.anchors[0].omega.entries()[0].value[0] ==
          doctest::Approx(0.1 / (0.01 + 0.1)).epsilon(1e-5));
  }
  SUBCASE("negative path contributions are clamped to zero") {
    Tensor theta({1}, {0.0f});
    Tensor grad({1});
    ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
    RegState reg;
    reg.method = ClMethod::kSi;
    reg.reset_si_reference({&ref, 1});
    ParamSet before = ParamSet::snapshot({&ref, 1});
    theta[0] = 0.1f;
    ParamSet grads;
    grads.add({"p", Segment::kTop, 0, Tensor({1}, {+1.0f})});  // uphill step
    si_record_step(reg, {&ref, 1}, grads, before);
    si_consolidate(reg, {&ref, 1});
    CHECK(reg.anchors[0].omega.entries()[0].value[0] == 0.0f);
  }
  SUBCASE("100-step scalar trajectory matches an explicit replay") {
    Rng rng(74);
    Tensor theta({1}, {0.0f});
    Tensor grad({1});
    ParamRef ref{"p", Segment::kTop, 0, &theta, &grad};
    RegState reg;
    reg.method = ClMethod::kSi;
    reg.xi = 0.1;
    reg.reset_si_reference({&ref, 1});
    double omega_ref = 0.0;
    double start = theta[0];
    for (int step = 0; step < 100; ++step) {
      float g = static_cast<float>(rng.uniform(-1, 1));
      float delta = static_cast<float>(rng.uniform(-0.05, 0.05));
      ParamSet before = ParamSet::snapshot({&ref, 1});
      theta[0] += delta;
      ParamSet grads;
      grads.add({"p", Segment::kTop, 0, Tensor({1}, {g})});
      si_record_step(reg, {&ref, 1}, grads, before);
      // replay in double, including the f32 state the implementation carries
      double exact_delta = static_cast<double>(theta[0]) - static_cast<double>(before.entries()[0].value[0]);
      omega_ref -= static_cast<double>(g) * exact_delta;
    }
    CHECK(reg.si_omega.at("p")[0] == doctest::Approx(omega_ref).epsilon(1e-4));
    si_consolidate(reg, {&ref, 1});
    double disp = static_cast<double>(theta[0]) - start;
    double want = std::max(0.0, omega_ref) / (disp * disp + 0.1);
    CHECK(reg.anchors[0].omega.entries()[0].value[0] == doctest::Approx(want).epsilon(1e-3));
  }
}

TEST_CASE("mas: zero-gradient coordinate, linear closed form, accumulation") {
  SUBCASE("closed form: y = theta * x, x = 2, theta = 3 gives omega 24") {
    Rng rng(75);
    DenseLayer layer("fc", 1, 1, false, rng);
    layer.weight[0] = 3.0f;
    NetHandle h = dense_handle(layer);
    std::vector<Batch> batches{{Tensor({1, 1}, {2.0f}), Tensor({1, 1}, {0.0f})}};
    RegState reg;
    reg.method = ClMethod::kMas;
    mas_importance(h, {batches.data(), batches.size()}, reg);
    // d/dtheta (theta*2)^2 = 8*theta = 24
    CHECK(reg.anchors[0].omega.entries()[0].value[0] == doctest::Approx(24.0).epsilon(1e-5));
  }
  SUBCASE("output independent of a parameter gives zero importance") {
    Rng rng(76);
    DenseLayer layer("fc", 2, 1, false, rng);
    NetHandle h = dense_handle(layer);
    std::vector<Batch> batches;
    Tensor x({1, 2});
    x.at(0, 0) = 1.5f;  // second input stays zero
    batches.push_back({x, Tensor({1, 1})});
    RegState reg;
    reg.method = ClMethod::kMas;
    mas_importance(h, {batches.data(), batches.size()}, reg);
    CHECK(reg.anchors[0].omega.entries()[0].value[1] == 0.0f);
  }
  SUBCASE("random model matches a finite-difference oracle of the norm objective") {
    Rng rng(77);
    DenseLayer layer("fc", 3, 2, true, rng);
    NetHandle h = dense_handle(layer);
    std::vector<Batch> batches;
    for (int i = 0; i < 4; ++i) batches.push_back({rand_tensor({1, 3}, rng), Tensor({1, 2})});
    RegState reg;
    reg.method = ClMethod::kMas;
    mas_importance(h, {batches.data(), batches.size()}, reg);

    // FD oracle: mean |d ||pred||^2 / d theta| over samples.
    auto norm2 = [&](const Tensor& x) {
      Tensor pred = layer.forward(x, Mode::kEval);
      double acc = 0.0;
      for (std::int64_t i = 0; i < pred.size(); ++i) {
        acc += static_cast<double>(pred[i]) * pred[i];
      }
      return acc;
    };
    std::vector<ParamRef> refs;
    layer.collect_params("", Segment::kTop, refs);
    for (const ParamRef& r : refs) {
      const Tensor& omega = reg.anchors[0].omega.find(r.name)->value;
      for (std::int64_t i = 0; i < r.value->size(); ++i) {
        double acc = 0.0;
        for (const Batch& batch : batches) {
          double h_step = 1e-3;
          float saved = (*r.value)[i];
          (*r.value)[i] = static_cast<float>(saved + h_step);
          double up = norm2(batch.x);
          (*r.value)[i] = static_cast<float>(saved - h_step);
          double down = norm2(batch.x);
          (*r.value)[i] = saved;
          acc += std::abs((up - down) / (2 * h_step));
        }
        acc /= batches.size();
        CHECK(std::abs(omega[i] - acc) / std::max(1.0, acc) < 1e-3);
      }
    }
  }
}

TEST_CASE("replay buffer: under-capacity fill, reservoir retention") {
  Rng rng(78);
  SUBCASE("capacity 2 holds exactly the two offered samples") {
    ReplayBuffer buffer(2);
    for (int i = 0; i < 2; ++i) {
      ReplayItem item;
      item.x = Tensor({1}, {static_cast<float>(i)});
      item.y = Tensor({1});
      buffer.offer(std::move(item), rng);
    }
    REQUIRE(buffer.size() == 2);
    CHECK(buffer.items()[0].x[0] == 0.0f);
    CHECK(buffer.items()[1].x[0] == 1.0f);
  }
  SUBCASE("retention frequency approximates capacity/seen") {
    ReplayBuffer buffer(100);
    const int total = 10000;
    for (int i = 0; i < total; ++i) {
      ReplayItem item;
      item.x = Tensor({1}, {static_cast<float>(i)});
      item.y = Tensor({1});
      buffer.offer(std::move(item), rng);
    }
    CHECK(buffer.size() == 100);
    CHECK(buffer.seen() == total);
    // Probability any fixed sample survives is 100/10000 = 0.01; check the
    // first decile's share lands in 0.01 +- 0.002 per thousand offers.
    int early = 0;
    for (const auto& item : buffer.items()) {
      if (item.x[0] < total / 2) ++early;
    }
    CHECK(early >= 30);
    CHECK(early <= 70);
  }
}

TEST_CASE("nr_step: empty buffer is bitwise plain, buffer fills after") {
  Rng rng(79);
  RootTopModel a(tiny_config(), rng);
  RootTopModel b = a;
  Tensor x = rand_tensor({4, 3, 8, 8}, rng);
  Tensor y = rand_tensor({4, 8}, rng);
  AdamState opt_a(1e-3), opt_b(1e-3);
  ReplayBuffer buffer(16);
  Rng buffer_rng(80);
  double la = nr_step(a, x, y, 1, buffer, opt_a, buffer_rng);
  double lb = train_step(b, x, y, opt_b);
  CHECK(la == lb);
  CHECK(a.param_hash() == b.param_hash());
  CHECK(buffer.size() == 4);  // the batch was offered afterwards

  // Second step draws from the buffer, so the batch grows and paths diverge.
  double la2 = nr_step(a, x, y, 1, buffer, opt_a, buffer_rng);
  double lb2 = train_step(b, x, y, opt_b);
  CHECK(la2 != lb2);
}

TEST_CASE("vae: kl closed forms, determinism, generated width") {
  Rng rng(81);
  LatentVAE vae(6, 8, 3, rng);
  SUBCASE("standard-normal posterior has zero KL") {
    // zero the encoder heads so mu = 0 and logvar = 0
    for (const ParamRef& r : vae.params()) {
      if (r.name.find("mu") != std::string::npos || r.name.find("logvar") != std::string::npos) {
        r.value->fill(0.0f);
      }
    }
    Tensor features = rand_tensor({4, 6}, rng);
    Tensor eps({4, 3});
    auto out = vae.elbo_loss(features, eps, false);
    CHECK(out.kl == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("unit mean in one latent dimension gives KL one half") {
    for (const ParamRef& r : vae.params()) {
      if (r.name.find("mu") != std::string::npos || r.name.find("logvar") != std::string::npos) {
        r.value->fill(0.0f);
      }
      if (r.name == "gen.mu.bias") (*r.value)[0] = 1.0f;
    }
    Tensor features = rand_tensor({4, 6}, rng);
    Tensor eps({4, 3});
    auto out = vae.elbo_loss(features, eps, false);
    CHECK(out.kl == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("same seed generates identical features of width D") {
    LatentVAE g(6, 8, 3, Rng(5));
    AdamState opt(1e-3);
    Rng train_rng(6);
    g.train_step(rand_tensor({8, 6}, train_rng), opt, train_rng);
    Rng seed_a(99), seed_b(99);
    Tensor a = g.generate(5, seed_a);
    Tensor b = g.generate(5, seed_b);
    CHECK(a == b);
    CHECK(a.dim(0) == 5);
    CHECK(a.dim(1) == 6);
  }
  SUBCASE("generate before any training is rejected") {
    LatentVAE g(6, 8, 3, Rng(5));
    Rng r(1);
    CHECK_THROWS_AS(g.generate(3, r), TensorError);
  }
}

TEST_CASE("vae fits a two-point feature set to matching moments") {
  Rng rng(82);
  // Two fixed feature vectors in a 4-dim space.
  Tensor features({2, 4}, {0.8f, -0.2f, 0.5f, 0.1f, -0.4f, 0.6f, -0.1f, 0.3f});
  LatentVAE vae(4, 16, 2, rng);
  vae.beta_kl = 0.05;
  AdamState opt(3e-3);
  Rng train_rng(83);
  for (int step = 0; step < 2000; ++step) vae.train_step(features, opt, train_rng);
  Tensor samples = vae.generate(256, train_rng);
  for (std::int64_t j = 0; j < 4; ++j) {
    double data_mean = 0.5 * (features.at(0, j) + features.at(1, j));
    double gen_mean = 0.0;
    for (std::int64_t i = 0; i < samples.dim(0); ++i) gen_mean += samples.at(i, j);
    gen_mean /= static_cast<double>(samples.dim(0));
    CHECK(std::abs(gen_mean - data_mean) < 0.2);
  }
}

TEST_CASE("lgr round: task 1 has no pseudo samples, rate contract enforced") {
  Rng rng(84);
  RootTopModel model(tiny_config(), rng);
  LatentVAE gen(model.feature_dim(), 8, 4, rng.fork("gen"));
  std::vector<Batch> batches{{rand_tensor({4, 3, 8, 8}, rng), rand_tensor({4, 8}, rng)}};

  SUBCASE("first-task batches emit no generate events") {
    LgrState st(gen, 1e-4, 1e-3, 1e-3);
    std::vector<std::string> events;
    EventSink sink = [&](const std::string& e) { events.push_back(e); };
    Rng gen_rng(1);
    lgr_client_round(model, st, {batches.data(), batches.size()}, gen_rng, &sink);
    for (const auto& e : events) CHECK(e != "generate");
    CHECK(events.front() == "extract");
    CHECK(events.back() == "root-update");
  }
  SUBCASE("eta_root above eta_top is a configuration error") {
    LgrState st(gen, 1e-2, 1e-3, 1e-3);
    Rng gen_rng(1);
    CHECK_THROWS_AS(
        lgr_client_round(model, st, {batches.data(), batches.size()}, gen_rng, nullptr),
        TensorError);
  }
  SUBCASE("equal rates allowed only in test mode") {
    LgrState strict(gen, 1e-3, 1e-3, 1e-3);
    Rng gen_rng(1);
    CHECK_THROWS_AS(
        lgr_client_round(model, strict, {batches.data(), batches.size()}, gen_rng, nullptr),
        TensorError);
    LgrState permissive(gen, 1e-3, 1e-3, 1e-3);
    permissive.allow_equal_rates = true;
    CHECK_NOTHROW(
        lgr_client_round(model, permissive, {batches.data(), batches.size()}, gen_rng, nullptr));
  }
}

TEST_CASE("lgr two-task toy: replay retains the first task better than finetune") {
  // Two synthetic tasks whose labels conflict; compare task-1 loss after
  // training task 2 with LGR against a naive finetune control on the same
  // seeds.
  Rng rng(85);
  ModelConfig mc = tiny_config();
  RootTopModel lgr_model(mc, rng.fork("init"));
  RootTopModel control = lgr_model;

  Rng data_rng(86);
  std::vector<Batch> task1, task2;
  for (int i = 0; i < 6; ++i) {
    Tensor x = rand_tensor({8, 3, 8, 8}, data_rng);
    Tensor y1({8, 8});
    Tensor y2({8, 8});
    for (std::int64_t k = 0; k < y1.size(); ++k) {
      y1[k] = 4.0f;  // task 1 wants high scores
      y2[k] = 2.0f;  // task 2 pulls everything down
    }
    task1.push_back({x, y1});
    task2.push_back({rand_tensor({8, 3, 8, 8}, data_rng), y2});
  }

  LatentVAE gen(lgr_model.feature_dim(), 16, 4, rng.fork("gen"));
  gen.beta_kl = 0.05;
  LgrState st(std::move(gen), 1e-5, 3e-3, 5e-3);
  Rng gen_rng(87);
  for (int round = 0; round < 3; ++round) {
    lgr_client_round(lgr_model, st, {task1.data(), task1.size()}, gen_rng);
  }
  st.tasks_seen = 1;
  for (int round = 0; round < 3; ++round) {
    lgr_client_round(lgr_model, st, {task2.data(), task2.size()}, gen_rng);
  }

  AdamState ctl_opt(3e-3);
  for (int round = 0; round < 3; ++round) {
    for (const Batch& batch : task1) train_step(control, batch.x, batch.y, ctl_opt);
  }
  for (int round = 0; round < 3; ++round) {
    for (const Batch& batch : task2) train_step(control, batch.x, batch.y, ctl_opt);
  }

  auto task1_loss = [&](RootTopModel& m) {
    double acc = 0.0;
    for (const Batch& batch : task1) {
      acc += mse_value(m.forward(batch.x, Mode::kEval), batch.y);
    }
    return acc / static_cast<double>(task1.size());
  };
  CHECK(task1_loss(lgr_model) < task1_loss(control));
}
