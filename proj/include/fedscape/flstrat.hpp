#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedscape/model.hpp"
#include "fedscape/numcore.hpp"
#include "fedscape/paramset.hpp"

namespace fedscape {

enum class Strategy { kAvg, kBn, kProx, kOpt, kDistill };
enum class Scope { kFull, kRoot };
enum class ServerOpt { kAdam, kSgd };

const char* strategy_name(Strategy s);
const char* scope_name(Scope s);
Strategy strategy_from_name(const std::string& name);
Scope scope_from_name(const std::string& name);

struct ClientUpdate {
  int client_id = 0;
  ParamSet params;  // selected tensors; deltas under FedOpt
  std::int64_t n_samples = 1;
  int round = 0;
};

// The sub-ParamSet a strategy/scope pair transmits: ROOT scope keeps only
// root-segment tensors, the BN strategy drops batchnorm-tagged tensors inside
// the selected scope, and GENERATOR tensors are never transmitted.
ParamSet select_aggregatable(const ParamSet& params, Strategy strategy, Scope scope);
std::vector<ParamRef> select_aggregatable(std::span<const ParamRef> params, Strategy strategy,
                                          Scope scope);

// Sample-count-weighted mean with 64-bit accumulation in client_id order, so
// the result is invariant to update-list permutations bit for bit.
ParamSet weighted_average(const std::vector<ClientUpdate>& updates);

// Proximal gradient: adds mu * (theta - theta_global) for every tensor of the
// anchor; the anchor is the selected subset last broadcast by the server.
GradHook prox_grad_hook(ParamSet global_selected, double mu);
// Penalty value (mu/2)*||theta-theta_g||^2 for reporting and oracle checks.
double prox_penalty(std::span<const ParamRef> params, const ParamSet& global_selected, double mu);

struct ServerState {
  ParamSet global;  // selected subset only; ROOT scope never stores TOP tensors
  Strategy strategy = Strategy::kAvg;
  Scope scope = Scope::kFull;
  int round = 0;
  // FedOpt only.
  ServerOpt server_opt = ServerOpt::kAdam;
  AdamState opt{1e-2};
};

// Plain aggregation (every strategy except FedOpt): weighted average replaces
// the stored global subset and the round counter advances.
void aggregate_average(ServerState& state, const std::vector<ClientUpdate>& updates);

// FedOpt: updates carry deltas theta_client - theta_global_prev. The server
// applies its optimizer to the pseudo-gradient g = -weighted_average(deltas).
void fedopt_server_step(ServerState& state, const std::vector<ClientUpdate>& delta_updates);

// Mixed distillation loss for regression:
//   (1-alpha)*MSE(student, target) + alpha*MSE(student, teacher)
// Returns the loss and its gradient wrt the student prediction.
MseOut distill_loss(const Tensor& student_pred, const Tensor& teacher_pred, const Tensor& target,
                    double alpha);

// Overwrites the client tensors named by the global subset; everything else
// is untouched.
void apply_global(std::span<const ParamRef> client_params, const ParamSet& global);

// Wire format helpers (update files double as round logs and replay input).
std::string serialize_update(const ClientUpdate& update);
ClientUpdate deserialize_update(const std::string& bytes);

// Exact serialized size of the tensors this update transmits.
std::int64_t payload_bytes(const ClientUpdate& update);

}  // namespace fedscape
