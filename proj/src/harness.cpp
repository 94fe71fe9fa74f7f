#include "fedscape/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <thread>

#include <time.h>

namespace fedscape {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// --- config ----------------------------------------------------------------------

int ExperimentConfig::effective_batch_size() const {
  if (batch_size > 0) return batch_size;
  return (n_clients >= 10 && !augment) ? 8 : 16;
}

std::string ExperimentConfig::method_name() const {
  auto fl_name = [&]() -> std::string {
    std::string base = scope == Scope::kRoot ? "FedRoot" : "Fed";
    switch (strategy) {
      case Strategy::kAvg: return base + "Avg";
      case Strategy::kBn: return base + "BN";
      case Strategy::kProx: return base + "Prox";
      case Strategy::kOpt: return base + "Opt";
      case Strategy::kDistill: return base + "Distill";
    }
    return base + "?";
  };
  if (mode == "fl") return fl_name();
  if (cl_method == ClMethod::kLgr) return "FedLGR";
  std::string base;
  if (strategy == Strategy::kAvg) {
    base = scope == Scope::kRoot ? "FedRoot" : "FedAvg";
  } else {
    base = fl_name();
  }
  switch (cl_method) {
    case ClMethod::kNone: return base + "-Finetune";
    case ClMethod::kEwc: return base + "-EWC";
    case ClMethod::kEwcOnline: return base + "-EWCOnline";
    case ClMethod::kSi: return base + "-SI";
    case ClMethod::kMas: return base + "-MAS";
    case ClMethod::kNr: return base + "-NR";
    default: return base + "-?";
  }
}

void ExperimentConfig::validate() const {
  if (mode != "fl" && mode != "fcl") throw ConfigError("mode must be 'fl' or 'fcl'");
  if (n_clients < 2 || n_clients > 10) throw ConfigError("n_clients must be in [2,10]");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (rounds_per_task < 1) throw ConfigError("rounds_per_task must be >= 1");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size != 0 && batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (reg_scope != "all" && reg_scope != "top") throw ConfigError("reg_scope must be all|top");
  if (mode == "fl" && cl_method != ClMethod::kNone) {
    throw ConfigError("cl_method requires mode 'fcl'");
  }
  if (cl_method == ClMethod::kLgr && scope != Scope::kRoot) {
    throw ConfigError("cl_method 'lgr' requires scope 'root'");
  }
  if (mode == "fcl" && strategy == Strategy::kDistill) {
    throw ConfigError("strategy 'distill' is not combinable with continual objectives");
  }
  if (cl_method == ClMethod::kLgr) {
    if (hyper.eta_root < 0.0 || hyper.eta_top < 0.0) {
      throw ConfigError("eta_root/eta_top must be >= 0");
    }
    bool bad = allow_equal_rates ? (hyper.eta_root > hyper.eta_top)
                                 : (hyper.eta_root >= hyper.eta_top);
    if (bad) throw ConfigError("lgr requires eta_root < eta_top");
  }
  if (hyper.prox_mu < 0.0) throw ConfigError("prox_mu must be >= 0");
  if (hyper.distill_alpha < 0.0 || hyper.distill_alpha > 1.0) {
    throw ConfigError("distill_alpha must be in [0,1]");
  }
  if (hyper.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (hyper.gamma <= 0.0 || hyper.gamma > 1.0) throw ConfigError("gamma must be in (0,1]");
  if (hyper.xi <= 0.0) throw ConfigError("xi must be > 0");
  if (hyper.buffer_capacity < 0) throw ConfigError("buffer_capacity must be >= 0");
  if (hyper.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (hyper.gen_hidden < 1) throw ConfigError("gen_hidden must be >= 1");
  if (dataset.n_scenes < 8) throw ConfigError("dataset.n_scenes must be >= 8");
  if (dataset.task_filter < 0 || dataset.task_filter > 2) {
    throw ConfigError("dataset.task_filter must be 0, 1 or 2");
  }
  if (mode == "fcl" && dataset.task_filter != 0) {
    throw ConfigError("task_filter is an fl-only option");
  }
  if (mode == "fl" && dataset.mirror_task2) {
    throw ConfigError("mirror_task2 is an fcl-only option");
  }
  if (threads < 0) throw ConfigError("threads must be >= 0");
}

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown config key: " + where + "." + it.key());
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("bad type for config key: ") + key);
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, "config",
             {"mode", "strategy", "scope", "cl_method", "n_clients", "rounds", "rounds_per_task",
              "local_epochs", "batch_size", "augment", "reg_scope", "seeds", "dataset", "model",
              "hyper", "checked", "deterministic_resources", "sequential", "allow_equal_rates",
              "threads", "log_rounds_dir"});
  ExperimentConfig c;
  read_field(j, "mode", c.mode);
  if (j.contains("strategy")) {
    try {
      c.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    } catch (const TensorError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("scope")) {
    try {
      c.scope = scope_from_name(j.at("scope").get<std::string>());
    } catch (const TensorError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("cl_method")) {
    try {
      c.cl_method = cl_method_from_name(j.at("cl_method").get<std::string>());
    } catch (const TensorError& e) {
      throw ConfigError(e.what());
    }
  }
  read_field(j, "n_clients", c.n_clients);
  read_field(j, "rounds", c.rounds);
  read_field(j, "rounds_per_task", c.rounds_per_task);
  read_field(j, "local_epochs", c.local_epochs);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "augment", c.augment);
  read_field(j, "reg_scope", c.reg_scope);
  read_field(j, "checked", c.checked);
  read_field(j, "deterministic_resources", c.deterministic_resources);
  read_field(j, "sequential", c.sequential);
  read_field(j, "allow_equal_rates", c.allow_equal_rates);
  read_field(j, "threads", c.threads);
  read_field(j, "log_rounds_dir", c.log_rounds_dir);

  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    check_keys(s, "seeds", {"data", "model", "run"});
    read_field(s, "data", c.seeds.data);
    read_field(s, "model", c.seeds.model);
    read_field(s, "run", c.seeds.run);
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset",
               {"n_scenes", "image_size", "non_iid", "task_filter", "mirror_task2"});
    read_field(d, "n_scenes", c.dataset.n_scenes);
    read_field(d, "image_size", c.dataset.image_size);
    read_field(d, "non_iid", c.dataset.non_iid);
    read_field(d, "task_filter", c.dataset.task_filter);
    read_field(d, "mirror_task2", c.dataset.mirror_task2);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"conv_channels", "top_hidden", "top_hidden_relu", "output_bias_init"});
    read_field(m, "conv_channels", c.model.conv_channels);
    read_field(m, "top_hidden", c.model.top_hidden);
    read_field(m, "top_hidden_relu", c.model.top_hidden_relu);
    read_field(m, "output_bias_init", c.model.output_bias_init);
  }
  c.model.image_size = c.dataset.image_size;
  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    check_keys(h, "hyper",
               {"lr", "eta_root", "eta_top", "prox_mu", "server_lr", "distill_alpha", "lambda",
                "gamma", "xi", "beta_kl", "gen_lr", "buffer_capacity", "pseudo_batch",
                "latent_dim", "gen_hidden"});
    read_field(h, "lr", c.hyper.lr);
    read_field(h, "eta_root", c.hyper.eta_root);
    read_field(h, "eta_top", c.hyper.eta_top);
    read_field(h, "prox_mu", c.hyper.prox_mu);
    read_field(h, "server_lr", c.hyper.server_lr);
    read_field(h, "distill_alpha", c.hyper.distill_alpha);
    read_field(h, "lambda", c.hyper.lambda);
    read_field(h, "gamma", c.hyper.gamma);
    read_field(h, "xi", c.hyper.xi);
    read_field(h, "beta_kl", c.hyper.beta_kl);
    read_field(h, "gen_lr", c.hyper.gen_lr);
    read_field(h, "buffer_capacity", c.hyper.buffer_capacity);
    read_field(h, "pseudo_batch", c.hyper.pseudo_batch);
    read_field(h, "latent_dim", c.hyper.latent_dim);
    read_field(h, "gen_hidden", c.hyper.gen_hidden);
  }
  c.validate();
  return c;
}

ordered_json ExperimentConfig::to_json() const {
  ordered_json j;
  j["mode"] = mode;
  j["strategy"] = strategy_name(strategy);
  j["scope"] = scope_name(scope);
  j["cl_method"] = cl_method_name(cl_method);
  j["n_clients"] = n_clients;
  j["rounds"] = rounds;
  j["rounds_per_task"] = rounds_per_task;
  j["local_epochs"] = local_epochs;
  j["batch_size"] = effective_batch_size();
  j["augment"] = augment;
  j["reg_scope"] = reg_scope;
  j["seeds"] = {{"data", seeds.data}, {"model", seeds.model}, {"run", seeds.run}};
  j["dataset"] = {{"n_scenes", dataset.n_scenes},
                  {"image_size", dataset.image_size},
                  {"non_iid", dataset.non_iid},
                  {"task_filter", dataset.task_filter},
                  {"mirror_task2", dataset.mirror_task2}};
  j["model"] = {{"conv_channels", model.conv_channels},
                {"top_hidden", model.top_hidden},
                {"top_hidden_relu", model.top_hidden_relu},
                {"output_bias_init", model.output_bias_init}};
  j["hyper"] = {{"lr", hyper.lr},
                {"eta_root", hyper.eta_root},
                {"eta_top", hyper.eta_top},
                {"prox_mu", hyper.prox_mu},
                {"server_lr", hyper.server_lr},
                {"distill_alpha", hyper.distill_alpha},
                {"lambda", hyper.lambda},
                {"gamma", hyper.gamma},
                {"xi", hyper.xi},
                {"beta_kl", hyper.beta_kl},
                {"gen_lr", hyper.gen_lr},
                {"buffer_capacity", hyper.buffer_capacity},
                {"pseudo_batch", hyper.pseudo_batch},
                {"latent_dim", hyper.latent_dim},
                {"gen_hidden", hyper.gen_hidden}};
  j["checked"] = checked;
  j["deterministic_resources"] = deterministic_resources;
  j["sequential"] = sequential;
  j["allow_equal_rates"] = allow_equal_rates;
  j["threads"] = threads;
  j["log_rounds_dir"] = log_rounds_dir;
  return j;
}

// --- scheduling and timing ----------------------------------------------------------

namespace {

double thread_cpu_seconds() {
  timespec ts;
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

int resolve_threads(const ExperimentConfig& cfg) {
  if (cfg.sequential) return 1;
  int n = cfg.threads;
  if (n <= 0) {
    if (const char* env = std::getenv("FEDSCAPE_THREADS")) {
      n = std::atoi(env);
    }
  }
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  return std::min(n, cfg.n_clients);
}

// Runs fn(i) for i in [0,n), statically partitioned over up to `threads`
// workers. Each index owns its output slot, so scheduling cannot reorder
// anything observable.
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// --- per-client state ------------------------------------------------------------------

struct ClientCtx {
  int id = 0;
  std::vector<std::vector<SceneSample>> shard;  // [task] owned copies, owner tagged
  RootTopModel model;
  AdamState opt;
  ParamSet last_global;  // last broadcast selection (prox anchor, fedopt delta base)
  // distill
  std::optional<RootTopModel> teacher;
  AdamState teacher_opt;
  // continual state
  RegState reg;
  std::optional<ReplayBuffer> buffer;
  std::optional<LgrState> lgr;
  Rng buffer_rng{0};
  Rng gen_rng{0};

  ClientCtx(RootTopModel init, double lr) : model(std::move(init)), opt(lr), teacher_opt(lr) {}
};

struct BatchPlan {
  std::vector<const SceneSample*> samples;
};

// Batches for one epoch: shuffled chunks of batch_size; a trailing chunk of
// size 1 is dropped (BatchNorm needs >= 2 rows).
std::vector<BatchPlan> plan_epoch(const std::vector<SceneSample>& shard, int batch_size,
                                  Rng& shuffle_rng) {
  std::vector<std::size_t> order(shard.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  std::vector<BatchPlan> plans;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    if (end - start < 2) continue;
    BatchPlan p;
    for (std::size_t i = start; i < end; ++i) p.samples.push_back(&shard[order[i]]);
    plans.push_back(std::move(p));
  }
  return plans;
}

Batch assemble_batch(const BatchPlan& plan, int expected_owner, bool do_augment, Rng& aug_rng) {
  std::int64_t b = static_cast<std::int64_t>(plan.samples.size());
  const SceneSample& first = *plan.samples.front();
  std::int64_t c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  Batch batch{Tensor({b, c, h, w}), Tensor({b, static_cast<std::int64_t>(kNumActions)})};
  for (std::int64_t i = 0; i < b; ++i) {
    const SceneSample* s = plan.samples[static_cast<std::size_t>(i)];
    if (s->owner != expected_owner) {
      throw TensorError("shard integrity violation: sample owned by client " +
                        std::to_string(s->owner) + " reached client " +
                        std::to_string(expected_owner));
    }
    const Tensor* img = &s->image;
    SceneSample augmented;
    if (do_augment) {
      augmented = augment(*s, aug_rng);
      img = &augmented.image;
    }
    std::copy(img->data(), img->data() + img->size(), batch.x.data() + i * img->size());
    for (int a = 0; a < kNumActions; ++a) batch.y.at(i, a) = s->labels[a];
  }
  return batch;
}

std::vector<Batch> fixed_order_batches(const std::vector<SceneSample>& shard, int batch_size,
                                       int expected_owner) {
  std::vector<Batch> out;
  Rng unused(0);
  for (std::size_t start = 0; start < shard.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(shard.size(), start + static_cast<std::size_t>(batch_size));
    if (end - start < 2) continue;
    BatchPlan p;
    for (std::size_t i = start; i < end; ++i) p.samples.push_back(&shard[i]);
    out.push_back(assemble_batch(p, expected_owner, /*do_augment=*/false, unused));
  }
  return out;
}

// --- evaluation ------------------------------------------------------------------------

EvalMetrics evaluate_model(RootTopModel& model, const std::vector<SceneSample>& test_set) {
  std::uint64_t before = model.param_hash();
  std::int64_t n = static_cast<std::int64_t>(test_set.size());
  Tensor raw({n, static_cast<std::int64_t>(kNumActions)});
  Tensor target({n, static_cast<std::int64_t>(kNumActions)});
  constexpr std::int64_t kChunk = 128;
  for (std::int64_t start = 0; start < n; start += kChunk) {
    std::int64_t end = std::min(n, start + kChunk);
    std::int64_t b = end - start;
    const Tensor& first = test_set.front().image;
    Tensor x({b, first.dim(0), first.dim(1), first.dim(2)});
    for (std::int64_t i = 0; i < b; ++i) {
      const Tensor& img = test_set[static_cast<std::size_t>(start + i)].image;
      std::copy(img.data(), img.data() + img.size(), x.data() + i * img.size());
    }
    Tensor pred = model.forward(x, Mode::kEval);
    for (std::int64_t i = 0; i < b; ++i) {
      for (int a = 0; a < kNumActions; ++a) {
        raw.at(start + i, a) = pred.at(i, a);
        target.at(start + i, a) = test_set[static_cast<std::size_t>(start + i)].labels[a];
      }
    }
  }
  EvalMetrics m = compute_metrics(raw, clamp_scores(raw), target);
  if (model.param_hash() != before) {
    throw TensorError("evaluation mutated model parameters");
  }
  return m;
}

// --- engine ----------------------------------------------------------------------------

struct Engine {
  const ExperimentConfig& cfg;
  int threads;
  Rng run_root;
  std::vector<ClientCtx> clients;
  std::vector<SceneSample> test_t1, test_t2, test_union;
  ServerState server;
  RunResult result;
  int global_round = 0;
  double agg_cpu_last = 0.0;  // server aggregation cpu of the current round

  explicit Engine(const ExperimentConfig& config)
      : cfg(config), threads(resolve_threads(config)), run_root(config.seeds.run) {}

  void setup() {
    set_checked_mode(cfg.checked);
    auto data = generate_dataset(cfg.dataset.n_scenes, cfg.dataset.image_size, cfg.seeds.data);
    Rng data_rng(cfg.seeds.data);
    FederatedSplit split =
        partition(data, cfg.n_clients, data_rng.fork("partition").next_u64(), cfg.dataset.non_iid);

    if (cfg.dataset.mirror_task2) {
      split.shared_test[1] = split.shared_test[0];
      for (auto& client : split.client_train) client[1] = client[0];
    }
    auto want_task = [&](int task_id) {
      return cfg.dataset.task_filter == 0 || cfg.dataset.task_filter == task_id;
    };
    for (int t = 0; t < 2; ++t) {
      if (!want_task(t + 1)) continue;
      auto& dst = (t == 0) ? test_t1 : test_t2;
      for (std::size_t idx : split.shared_test[static_cast<std::size_t>(t)]) {
        dst.push_back(data[idx]);
      }
    }
    test_union = test_t1;
    test_union.insert(test_union.end(), test_t2.begin(), test_t2.end());

    Rng model_rng(cfg.seeds.model);
    RootTopModel init(cfg.model, model_rng.fork("model"));
    LatentVAE gen_init(init.feature_dim(), cfg.hyper.gen_hidden, cfg.hyper.latent_dim,
                       model_rng.fork("generator"));

    server.strategy = cfg.strategy;
    server.scope = cfg.scope;
    server.server_opt = ServerOpt::kAdam;
    server.opt = AdamState(cfg.hyper.server_lr);
    server.global = select_aggregatable(init.snapshot(), cfg.strategy, cfg.scope);

    clients.reserve(static_cast<std::size_t>(cfg.n_clients));
    for (int c = 0; c < cfg.n_clients; ++c) {
      ClientCtx ctx(init, cfg.hyper.lr);
      ctx.id = c;
      ctx.shard.resize(2);
      for (int t = 0; t < 2; ++t) {
        if (!want_task(t + 1)) continue;
        for (std::size_t idx :
             split.client_train[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)]) {
          SceneSample s = data[idx];
          s.owner = c;
          ctx.shard[static_cast<std::size_t>(t)].push_back(std::move(s));
        }
      }
      if (cfg.mode == "fl" && cfg.dataset.task_filter == 0) {
        // FL trains on the task union; fold arrow scenes into the first list.
        auto& dst = ctx.shard[0];
        for (auto& s : ctx.shard[1]) dst.push_back(std::move(s));
        ctx.shard[1].clear();
      }
      ctx.last_global = server.global;
      if (cfg.strategy == Strategy::kDistill) {
        ctx.teacher = init;
        ctx.teacher_opt = AdamState(cfg.hyper.lr);
      }
      ctx.reg.method = cfg.cl_method;
      ctx.reg.lambda = cfg.hyper.lambda;
      ctx.reg.gamma = cfg.hyper.gamma;
      ctx.reg.xi = cfg.hyper.xi;
      if (cfg.cl_method == ClMethod::kNr) {
        ctx.buffer.emplace(cfg.hyper.buffer_capacity);
      }
      if (cfg.cl_method == ClMethod::kLgr) {
        ctx.lgr.emplace(gen_init, cfg.hyper.eta_root, cfg.hyper.eta_top, cfg.hyper.gen_lr);
        ctx.lgr->generator.beta_kl = cfg.hyper.beta_kl;
        ctx.lgr->pseudo_per_batch = cfg.hyper.pseudo_batch;
        ctx.lgr->allow_equal_rates = cfg.allow_equal_rates;
      }
      ctx.buffer_rng = Rng(cfg.seeds.run).fork("buffer").fork(static_cast<std::uint64_t>(c));
      ctx.gen_rng = Rng(cfg.seeds.run).fork("gen").fork(static_cast<std::uint64_t>(c));
      if (cfg.cl_method == ClMethod::kSi) {
        auto protect = protected_refs(ctx.model);
        ctx.reg.reset_si_reference({protect.data(), protect.size()});
      }
      clients.push_back(std::move(ctx));
    }

    result.config_echo = cfg.to_json();
    result.method = cfg.method_name();
    if (!cfg.log_rounds_dir.empty()) {
      fs::create_directories(cfg.log_rounds_dir);
      save_paramset(log_path("round_000_global.fsps"), server.global);
    }
  }

  std::string log_path(const std::string& name) const {
    return (fs::path(cfg.log_rounds_dir) / name).string();
  }

  std::vector<ParamRef> protected_refs(RootTopModel& model) const {
    bool protect_root = cfg.reg_scope == "all";
    std::vector<ParamRef> out;
    for (const ParamRef& r : model.params()) {
      if (r.segment == Segment::kTop || (protect_root && r.segment == Segment::kRoot)) {
        out.push_back(r);
      }
    }
    return out;
  }

  // One local optimizer step with strategy/CL hooks and SI bookkeeping.
  void local_step(ClientCtx& ctx, const Batch& batch, int task_index) {
    std::vector<GradHook> hooks;
    if (cfg.strategy == Strategy::kProx && cfg.hyper.prox_mu > 0.0) {
      hooks.push_back(prox_grad_hook(ctx.last_global, cfg.hyper.prox_mu));
    }
    bool reg_method = cfg.cl_method == ClMethod::kEwc || cfg.cl_method == ClMethod::kEwcOnline ||
                      cfg.cl_method == ClMethod::kSi || cfg.cl_method == ClMethod::kMas;
    if (reg_method && !ctx.reg.anchors.empty() && ctx.reg.lambda > 0.0) {
      hooks.push_back(reg_grad_hook(ctx.reg, cfg.reg_scope == "all", true));
    }
    std::span<const GradHook> hook_view(hooks.data(), hooks.size());

    std::optional<ParamSet> si_before;
    std::vector<ParamRef> si_refs;
    if (cfg.cl_method == ClMethod::kSi) {
      si_refs = protected_refs(ctx.model);
      si_before = ParamSet::snapshot({si_refs.data(), si_refs.size()});
    }

    if (cfg.strategy == Strategy::kDistill) {
      double alpha = cfg.hyper.distill_alpha;
      if (alpha == 0.0) {
        train_step(ctx.model, batch.x, batch.y, ctx.opt, hook_view);
      } else {
        Tensor teacher_pred = ctx.teacher->forward(batch.x, Mode::kEval);
        ctx.model.zero_grads();
        Tensor pred = ctx.model.forward(batch.x, Mode::kTrain);
        MseOut mixed = distill_loss(pred, teacher_pred, batch.y, alpha);
        Tensor grad_features = ctx.model.backward_top(mixed.grad);
        ctx.model.backward_root(grad_features);
        double loss = mixed.loss;
        for (const GradHook& hook : hook_view) loss += hook(ctx.model);
        if (checked_mode() && !std::isfinite(loss)) throw TensorError("non-finite training loss");
        auto refs = ctx.model.params();
        adam_step({refs.data(), refs.size()}, ctx.opt);
      }
      // Teacher stays personal: trained on the task loss, never aggregated.
      train_step(*ctx.teacher, batch.x, batch.y, ctx.teacher_opt);
    } else if (cfg.cl_method == ClMethod::kNr) {
      nr_step(ctx.model, batch.x, batch.y, task_index + 1, *ctx.buffer, ctx.opt, ctx.buffer_rng);
    } else {
      train_step(ctx.model, batch.x, batch.y, ctx.opt, hook_view);
    }

    if (cfg.cl_method == ClMethod::kSi) {
      ParamSet grads;
      for (const ParamRef& r : si_refs) grads.add({r.name, r.segment, r.tags, *r.grad});
      si_record_step(ctx.reg, {si_refs.data(), si_refs.size()}, grads, *si_before);
    }
  }

  // Local phase for one client in one round; returns its update.
  ClientUpdate client_round(ClientCtx& ctx, int task_index, int round, double* train_cpu,
                            double* comm_cpu, std::string* update_bytes) {
    double t0 = thread_cpu_seconds();
    const auto& shard = ctx.shard[static_cast<std::size_t>(task_index)];
    Rng round_rng = Rng(cfg.seeds.run)
                        .fork("round")
                        .fork(static_cast<std::uint64_t>(round))
                        .fork(static_cast<std::uint64_t>(ctx.id));

    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
      Rng shuffle_rng = round_rng.fork("shuffle").fork(static_cast<std::uint64_t>(epoch));
      Rng aug_rng = round_rng.fork("augment").fork(static_cast<std::uint64_t>(epoch));
      auto plans = plan_epoch(shard, cfg.effective_batch_size(), shuffle_rng);
      if (cfg.cl_method == ClMethod::kLgr) {
        std::vector<Batch> batches;
        batches.reserve(plans.size());
        for (const auto& p : plans) {
          batches.push_back(assemble_batch(p, ctx.id, cfg.augment, aug_rng));
        }
        lgr_client_round(ctx.model, *ctx.lgr, {batches.data(), batches.size()}, ctx.gen_rng);
      } else {
        for (const auto& p : plans) {
          Batch batch = assemble_batch(p, ctx.id, cfg.augment, aug_rng);
          local_step(ctx, batch, task_index);
        }
      }
    }
    double t1 = thread_cpu_seconds();

    ClientUpdate update;
    update.client_id = ctx.id;
    update.round = round;
    update.n_samples = static_cast<std::int64_t>(shard.size());
    ParamSet selected = select_aggregatable(ctx.model.snapshot(), cfg.strategy, cfg.scope);
    if (cfg.strategy == Strategy::kOpt) {
      // Deltas against the last broadcast global.
      ParamSet delta = selected;
      for (std::size_t t = 0; t < delta.size(); ++t) {
        const Tensor& base = ctx.last_global.entries()[t].value;
        Tensor& d = delta.entries()[t].value;
        for (std::int64_t i = 0; i < d.size(); ++i) {
          d[i] = static_cast<float>(static_cast<double>(d[i]) - static_cast<double>(base[i]));
        }
      }
      update.params = std::move(delta);
    } else {
      update.params = std::move(selected);
    }
    *update_bytes = serialize_update(update);
    double t2 = thread_cpu_seconds();
    *train_cpu = t1 - t0;
    *comm_cpu = t2 - t1;
    return update;
  }

  void aggregate_and_broadcast(std::vector<ClientUpdate> updates, int round,
                               std::vector<double>& comm_cpu) {
    double a0 = thread_cpu_seconds();
    if (cfg.strategy == Strategy::kOpt) {
      fedopt_server_step(server, updates);
    } else {
      aggregate_average(server, updates);
    }
    double a1 = thread_cpu_seconds();
    agg_cpu_last = a1 - a0;

    if (!cfg.log_rounds_dir.empty()) {
      char buf[64];
      for (const auto& u : updates) {
        std::snprintf(buf, sizeof(buf), "round_%03d_client_%d.fsps", round, u.client_id);
        std::ofstream f(log_path(buf), std::ios::binary);
        std::string bytes = serialize_update(u);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      }
      std::snprintf(buf, sizeof(buf), "round_%03d_global.fsps", round);
      save_paramset(log_path(buf), server.global);
    }

    parallel_for(cfg.n_clients, threads, [&](int c) {
      double b0 = thread_cpu_seconds();
      auto refs = clients[static_cast<std::size_t>(c)].model.params();
      apply_global({refs.data(), refs.size()}, server.global);
      clients[static_cast<std::size_t>(c)].last_global = server.global;
      double b1 = thread_cpu_seconds();
      comm_cpu[static_cast<std::size_t>(c)] += b1 - b0;
    });
  }

  void run_round(int task_index, int round, const std::string& phase) {
    global_round += 1;
    std::vector<ClientUpdate> updates(static_cast<std::size_t>(cfg.n_clients));
    std::vector<double> train_cpu(static_cast<std::size_t>(cfg.n_clients), 0.0);
    std::vector<double> comm_cpu(static_cast<std::size_t>(cfg.n_clients), 0.0);
    std::vector<std::string> update_bytes(static_cast<std::size_t>(cfg.n_clients));

    parallel_for(cfg.n_clients, threads, [&](int c) {
      updates[static_cast<std::size_t>(c)] =
          client_round(clients[static_cast<std::size_t>(c)], task_index, global_round,
                       &train_cpu[static_cast<std::size_t>(c)],
                       &comm_cpu[static_cast<std::size_t>(c)],
                       &update_bytes[static_cast<std::size_t>(c)]);
    });

    aggregate_and_broadcast(std::move(updates), global_round, comm_cpu);

    for (int c = 0; c < cfg.n_clients; ++c) {
      ResourceRecord r;
      r.client = c;
      r.round = global_round;
      r.payload_bytes = static_cast<std::int64_t>(update_bytes[static_cast<std::size_t>(c)].size());
      if (!cfg.deterministic_resources) {
        r.train_cpu_s = train_cpu[static_cast<std::size_t>(c)];
        r.comm_cpu_s = comm_cpu[static_cast<std::size_t>(c)] +
                       agg_cpu_last / static_cast<double>(cfg.n_clients);
      }
      result.resources.push_back(r);
    }
    evaluate_round(phase);
  }

  void evaluate_round(const std::string& phase) {
    struct SplitSpec {
      const char* name;
      const std::vector<SceneSample>* set;
    };
    std::vector<SplitSpec> splits;
    if (cfg.mode == "fl") {
      splits.push_back({"test", &test_union});
    } else if (phase == "task1") {
      splits.push_back({"test_t1", &test_t1});
    } else {
      splits.push_back({"test_union", &test_union});
      splits.push_back({"test_t1", &test_t1});
    }

    for (const auto& spec : splits) {
      std::vector<EvalMetrics> per_client(static_cast<std::size_t>(cfg.n_clients));
      parallel_for(cfg.n_clients, threads, [&](int c) {
        per_client[static_cast<std::size_t>(c)] =
            evaluate_model(clients[static_cast<std::size_t>(c)].model, *spec.set);
      });
      AggregateRecord agg;
      agg.round = global_round;
      agg.phase = phase;
      agg.split = spec.name;
      double pcc_acc = 0.0;
      int pcc_defined = 0;
      for (int c = 0; c < cfg.n_clients; ++c) {
        const EvalMetrics& m = per_client[static_cast<std::size_t>(c)];
        EvalRecord rec;
        rec.client = c;
        rec.round = global_round;
        rec.phase = phase;
        rec.split = spec.name;
        rec.metrics = m;
        result.records.push_back(rec);
        agg.loss += m.loss;
        agg.rmse += m.rmse;
        agg.pcc_undefined += m.pcc_undefined;
        if (m.pcc_mean.has_value()) {
          pcc_acc += *m.pcc_mean;
          ++pcc_defined;
        }
      }
      agg.loss /= static_cast<double>(cfg.n_clients);
      agg.rmse /= static_cast<double>(cfg.n_clients);
      if (pcc_defined > 0) agg.pcc = pcc_acc / static_cast<double>(pcc_defined);
      result.aggregates.push_back(agg);
    }
  }

  void consolidate_task(int task_index) {
    parallel_for(cfg.n_clients, threads, [&](int c) {
      ClientCtx& ctx = clients[static_cast<std::size_t>(c)];
      const auto& shard = ctx.shard[static_cast<std::size_t>(task_index)];
      switch (cfg.cl_method) {
        case ClMethod::kEwc:
        case ClMethod::kEwcOnline: {
          auto batches = fixed_order_batches(shard, cfg.effective_batch_size(), ctx.id);
          NetHandle h = model_handle(ctx.model, cfg.reg_scope == "all", true);
          ewc_consolidate(h, {batches.data(), batches.size()}, ctx.reg);
          break;
        }
        case ClMethod::kMas: {
          auto batches = fixed_order_batches(shard, cfg.effective_batch_size(), ctx.id);
          NetHandle h = model_handle(ctx.model, cfg.reg_scope == "all", true);
          mas_importance(h, {batches.data(), batches.size()}, ctx.reg);
          break;
        }
        case ClMethod::kSi: {
          auto refs = protected_refs(ctx.model);
          si_consolidate(ctx.reg, {refs.data(), refs.size()});
          break;
        }
        case ClMethod::kLgr:
          ctx.lgr->tasks_seen += 1;
          break;
        default:
          break;  // none / nr: nothing to consolidate
      }
    });
  }

  void finish_replay_manifest() {
    if (cfg.log_rounds_dir.empty()) return;
    ordered_json j;
    j["schema"] = 1;
    j["strategy"] = strategy_name(cfg.strategy);
    j["scope"] = scope_name(cfg.scope);
    j["server_lr"] = cfg.hyper.server_lr;
    j["rounds"] = global_round;
    j["n_clients"] = cfg.n_clients;
    j["server_opt_hash"] = adam_state_hash(server.opt);
    std::ofstream f(log_path("replay_manifest.json"));
    f << j.dump(2) << "\n";
  }

  static std::uint64_t adam_state_hash(const AdamState& st) {
    std::uint64_t h = fnv1a64(&st.t, sizeof(st.t));
    for (const auto& [name, tensor] : st.m) {
      h = fnv1a64(name.data(), name.size(), h);
      h = tensor_hash(tensor, h);
    }
    for (const auto& [name, tensor] : st.v) {
      h = fnv1a64(name.data(), name.size(), h);
      h = tensor_hash(tensor, h);
    }
    return h;
  }
};

void compute_forgetting(RunResult& result, int end_of_task1_round, int final_round) {
  std::map<int, double> after_t1, after_t2;
  for (const auto& rec : result.records) {
    if (rec.split != "test_t1") continue;
    if (rec.round == end_of_task1_round) after_t1[rec.client] = rec.metrics.rmse;
    if (rec.round == final_round) after_t2[rec.client] = rec.metrics.rmse;
  }
  double acc = 0.0;
  int n = 0;
  for (const auto& [client, r1] : after_t1) {
    auto it = after_t2.find(client);
    if (it == after_t2.end()) continue;
    double delta = forgetting_delta(r1, it->second);
    result.forgetting_per_client[client] = delta;
    acc += delta;
    ++n;
  }
  if (n > 0) result.forgetting_mean = acc / static_cast<double>(n);
}

}  // namespace

RunResult run_fl(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.mode != "fl") throw ConfigError("run_fl requires mode 'fl'");
  auto wall0 = std::chrono::steady_clock::now();
  Engine eng(cfg);
  eng.setup();
  // Pre-training evaluation is round 0.
  eng.evaluate_round("fl");
  int task_index = cfg.dataset.task_filter == 2 ? 1 : 0;
  for (int r = 0; r < cfg.rounds; ++r) {
    eng.run_round(task_index, r, "fl");
  }
  eng.finish_replay_manifest();
  eng.result.wall_s =
      cfg.deterministic_resources
          ? 0.0
          : std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return std::move(eng.result);
}

RunResult run_fcl(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.mode != "fcl") throw ConfigError("run_fcl requires mode 'fcl'");
  auto wall0 = std::chrono::steady_clock::now();
  Engine eng(cfg);
  eng.setup();
  eng.evaluate_round("task1");  // round 0, pre-training
  for (int r = 0; r < cfg.rounds_per_task; ++r) eng.run_round(0, r, "task1");
  int end_of_task1 = eng.global_round;
  eng.consolidate_task(0);
  for (int r = 0; r < cfg.rounds_per_task; ++r) eng.run_round(1, r, "task2");
  eng.finish_replay_manifest();
  compute_forgetting(eng.result, end_of_task1, eng.global_round);
  eng.result.wall_s =
      cfg.deterministic_resources
          ? 0.0
          : std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return std::move(eng.result);
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  return cfg.mode == "fl" ? run_fl(cfg) : run_fcl(cfg);
}

const AggregateRecord* find_aggregate(const RunResult& r, int round, const std::string& split) {
  for (const auto& a : r.aggregates) {
    if (a.round == round && a.split == split) return &a;
  }
  return nullptr;
}

const AggregateRecord* last_aggregate(const RunResult& r, const std::string& split) {
  const AggregateRecord* found = nullptr;
  for (const auto& a : r.aggregates) {
    if (a.split == split) found = &a;
  }
  return found;
}

// --- deterministic replay -------------------------------------------------------------

ReplayReport deterministic_replay(const std::string& round_log_dir) {
  fs::path dir(round_log_dir);
  std::ifstream mf(dir / "replay_manifest.json");
  if (!mf) throw TensorError("missing replay manifest in " + round_log_dir);
  json manifest = json::parse(mf);
  Strategy strategy = strategy_from_name(manifest.at("strategy").get<std::string>());
  int rounds = manifest.at("rounds").get<int>();
  int n_clients = manifest.at("n_clients").get<int>();

  ServerState server;
  server.strategy = strategy;
  server.opt = AdamState(manifest.at("server_lr").get<double>());
  server.global = load_paramset((dir / "round_000_global.fsps").string());

  ReplayReport report;
  report.matched = true;
  char buf[64];
  for (int r = 1; r <= rounds; ++r) {
    std::vector<ClientUpdate> updates;
    for (int c = 0; c < n_clients; ++c) {
      std::snprintf(buf, sizeof(buf), "round_%03d_client_%d.fsps", r, c);
      std::ifstream f(dir / buf, std::ios::binary);
      if (!f) throw TensorError(std::string("missing round file: ") + buf);
      std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
      updates.push_back(deserialize_update(bytes));  // checksum-verified
    }
    if (strategy == Strategy::kOpt) {
      fedopt_server_step(server, updates);
    } else {
      aggregate_average(server, updates);
    }
    std::snprintf(buf, sizeof(buf), "round_%03d_global.fsps", r);
    ParamSet recorded = load_paramset((dir / buf).string());
    bool same = recorded.content_hash() == server.global.content_hash();
    if (!same) report.matched = false;
    report.notes.push_back(std::string(buf) + (same ? ": match" : ": MISMATCH"));
    report.rounds += 1;
  }
  if (manifest.contains("server_opt_hash")) {
    std::uint64_t want = manifest.at("server_opt_hash").get<std::uint64_t>();
    std::uint64_t got = Engine::adam_state_hash(server.opt);
    if (want != got) {
      report.matched = false;
      report.notes.push_back("server optimizer state: MISMATCH");
    } else {
      report.notes.push_back("server optimizer state: match");
    }
  }
  return report;
}

}  // namespace fedscape
