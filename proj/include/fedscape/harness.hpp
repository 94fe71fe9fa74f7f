#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedscape/clobj.hpp"
#include "fedscape/dataset.hpp"
#include "fedscape/flstrat.hpp"
#include "fedscape/metrics.hpp"
#include "fedscape/model.hpp"

#include <nlohmann/json.hpp>

namespace fedscape {

class ConfigError : public std::exception {
 public:
  explicit ConfigError(std::string msg) : msg_(std::move(msg)) {}
  const char* what() const noexcept override { return msg_.c_str(); }

 private:
  std::string msg_;
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t model = 2;
  std::uint64_t run = 3;
};

struct HyperParams {
  double lr = 1e-3;
  double eta_root = 1e-4;       // FedLGR root rate
  double eta_top = 1e-3;        // FedLGR top rate
  double prox_mu = 0.01;        // FedProx
  double server_lr = 1e-2;      // FedOpt server optimizer
  double distill_alpha = 0.5;   // FedDistill mixing
  double lambda = 1.0;          // regularizer strength
  double gamma = 0.9;           // EWC-Online decay
  double xi = 0.1;              // SI damping
  double beta_kl = 1.0;         // VAE KL weight
  double gen_lr = 1e-3;         // generator optimizer
  std::int64_t buffer_capacity = 200;  // NR reservoir per client
  std::int64_t pseudo_batch = -1;      // M; -1 matches the real batch size, 0 disables replay
  std::int64_t latent_dim = 8;
  std::int64_t gen_hidden = 32;
};

struct DatasetOptions {
  std::int64_t n_scenes = 512;
  std::int64_t image_size = 32;
  bool non_iid = false;
  int task_filter = 0;  // 0 = both tasks; 1 or 2 restricts FL runs to one task
  // Diagnostic: the task-2 schedule replays the task-1 shard and test set,
  // removing the distribution shift entirely.
  bool mirror_task2 = false;
};

struct ExperimentConfig {
  std::string mode = "fl";  // fl | fcl
  Strategy strategy = Strategy::kAvg;
  Scope scope = Scope::kFull;
  ClMethod cl_method = ClMethod::kNone;  // fcl only
  int n_clients = 2;
  int rounds = 5;           // fl
  int rounds_per_task = 5;  // fcl
  int local_epochs = 1;
  int batch_size = 0;  // 0 = paper rule: 8 for >= 10 clients w/o augmentation, else 16
  bool augment = false;
  std::string reg_scope = "all";  // all | top: segments the CL penalties protect
  Seeds seeds;
  DatasetOptions dataset;
  ModelConfig model;
  HyperParams hyper;
  bool checked = false;
  bool deterministic_resources = false;  // zero out measured timings in outputs
  bool sequential = false;               // force single-worker scheduling
  bool allow_equal_rates = false;        // test mode: FedLGR eta_R == eta_T
  int threads = 0;                       // 0 = FEDSCAPE_THREADS or hardware count
  std::string log_rounds_dir;            // when set, per-round update/global files

  int effective_batch_size() const;
  std::string method_name() const;
  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct EvalRecord {
  int client = 0;
  int round = 0;      // 0 is the pre-training evaluation
  std::string phase;  // fl | task1 | task2
  std::string split;  // test | test_t1 | test_union
  EvalMetrics metrics;
};

// Mean over clients, actions folded first (per-client metrics already
// average over actions).
struct AggregateRecord {
  int round = 0;
  std::string phase, split;
  double loss = 0.0;
  double rmse = 0.0;
  std::optional<double> pcc;
  int pcc_undefined = 0;
};

struct ResourceRecord {
  int client = 0;
  int round = 0;
  std::int64_t payload_bytes = 0;
  double train_cpu_s = 0.0;
  double comm_cpu_s = 0.0;  // serialize + broadcast + per-client share of aggregation
};

struct RunResult {
  std::string schema_version = "1";
  nlohmann::ordered_json config_echo;
  std::string method;
  std::vector<EvalRecord> records;
  std::vector<AggregateRecord> aggregates;
  std::vector<ResourceRecord> resources;
  double wall_s = 0.0;
  std::map<int, double> forgetting_per_client;
  std::optional<double> forgetting_mean;
};

RunResult run_fl(const ExperimentConfig& cfg);
RunResult run_fcl(const ExperimentConfig& cfg);
RunResult run_experiment(const ExperimentConfig& cfg);  // dispatch on mode

// Re-executes aggregation only from a round log, verifying the global
// parameter trajectory bit for bit.
struct ReplayReport {
  int rounds = 0;
  bool matched = false;
  std::vector<std::string> notes;
};
ReplayReport deterministic_replay(const std::string& round_log_dir);

// point lookups used by reports and acceptance checks
const AggregateRecord* find_aggregate(const RunResult& r, int round, const std::string& split);
const AggregateRecord* last_aggregate(const RunResult& r, const std::string& split);

}  // namespace fedscape
