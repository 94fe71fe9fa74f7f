#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedscape/model.hpp"
#include "fedscape/paramset.hpp"

namespace fedscape {

enum class ClMethod { kNone, kEwc, kEwcOnline, kSi, kMas, kNr, kLgr };

const char* cl_method_name(ClMethod m);
ClMethod cl_method_from_name(const std::string& name);

// Thin adapter so consolidation passes work on any differentiable net (the
// full model in production, single layers in oracle tests).
struct NetHandle {
  std::function<Tensor(const Tensor& x, Mode mode)> forward;
  std::function<void(const Tensor& grad_pred)> backward;
  std::function<void()> zero_grads;
  std::vector<ParamRef> params;  // the parameters being protected
};

// Handle over a RootTopModel restricted to the protected segments.
NetHandle model_handle(RootTopModel& model, bool protect_root, bool protect_top);

// One importance anchor: parameter snapshot plus elementwise importances.
struct Anchor {
  ParamSet theta_star;
  ParamSet omega;  // >= 0 elementwise
};

struct RegState {
  ClMethod method = ClMethod::kNone;
  double lambda = 1.0;  // penalty coefficient
  double gamma = 0.9;   // EWC-Online decay
  double xi = 0.1;      // SI damping
  std::vector<Anchor> anchors;  // EWC appends; the online methods keep one

  // SI working buffers.
  std::map<std::string, Tensor> si_omega;
  ParamSet si_prev_params;

  void reset_si_reference(std::span<const ParamRef> params);
};

// Diagonal Fisher: F[k] = mean over batches of (dL/dtheta_k)^2 with an MSE
// loss, evaluated in EVAL mode so the pass is batch-composition independent.
// EWC appends a new anchor; EWC-Online folds gamma*F_old + F into its single
// anchor and re-anchors theta*.
void ewc_consolidate(const NetHandle& net, std::span<const Batch> task_batches, RegState& reg);

// MAS: Omega[k] = mean over samples of |d ||pred||^2 / dtheta_k|, evaluated
// per sample in EVAL mode; accumulates into a single anchor.
void mas_importance(const NetHandle& net, std::span<const Batch> task_batches, RegState& reg);

// omega_k += -grad_k * delta_k for one completed optimizer step.
void si_record_step(RegState& reg, std::span<const ParamRef> params, const ParamSet& step_grads,
                    const ParamSet& params_before);
// Omega_k += max(omega_k,0) / ((theta_k - theta_prev_k)^2 + xi); resets omega
// and the reference point.
void si_consolidate(RegState& reg, std::span<const ParamRef> params);

// Quadratic penalty summed over anchors:
//   penalty = sum_a lambda/2 * sum_k Omega_k (theta_k - theta*_k)^2
// When add_grads is set, lambda * Omega . (theta - theta*) is added per anchor.
double reg_penalty(std::span<const ParamRef> params, const RegState& reg, bool add_grads);
GradHook reg_grad_hook(const RegState& reg, bool protect_root, bool protect_top);

// --- naive rehearsal ------------------------------------------------------------

struct ReplayItem {
  Tensor x;  // [3,H,W]
  Tensor y;  // [8]
  int task_id = 0;
};

// Reservoir sampler: every offered sample is retained with equal probability
// capacity/seen once the buffer is full.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::int64_t capacity);

  void offer(ReplayItem item, Rng& rng);
  std::vector<const ReplayItem*> sample(std::int64_t k, Rng& rng) const;  // with replacement

  bool empty() const { return items_.empty(); }
  std::size_t size() const { return items_.size(); }
  std::int64_t capacity() const { return capacity_; }
  std::int64_t seen() const { return seen_; }
  const std::vector<ReplayItem>& items() const { return items_; }

 private:
  std::int64_t capacity_;
  std::int64_t seen_ = 0;
  std::vector<ReplayItem> items_;
};

// Rehearsal step: concatenates the batch with an equal-size buffer draw (when
// non-empty) before the plain train_step, then offers the batch to the buffer.
double nr_step(RootTopModel& model, const Tensor& x, const Tensor& y, int task_id,
               ReplayBuffer& buffer, AdamState& opt, Rng& rng);

// --- latent generative replay ----------------------------------------------------

// Small VAE over root feature vectors. Encoder D->hidden->(mu, logvar),
// decoder z->hidden->D; all parameters live in the GENERATOR segment and are
// never aggregated.
class LatentVAE {
 public:
  LatentVAE(std::int64_t feature_dim, std::int64_t hidden, std::int64_t latent_dim, Rng init_rng);

  struct LossOut {
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
  };

  // One-sample reparameterized ELBO (negated):
  //   MSE(decode(mu + sigma*eps), R) + beta_kl * mean_i KL(q_i || N(0,I)).
  // eps must be [M, latent_dim]. with_grads accumulates parameter gradients.
  LossOut elbo_loss(const Tensor& features, const Tensor& eps, bool with_grads);

  // Adam step on the ELBO; draws eps from rng.
  LossOut train_step(const Tensor& features, AdamState& opt, Rng& rng);

  // Decodes m draws z ~ N(0, I).
  Tensor generate(std::int64_t m, Rng& rng);
  Tensor decode(const Tensor& z);

  std::vector<ParamRef> params();
  void zero_grads();

  std::int64_t feature_dim() const { return feature_dim_; }
  std::int64_t latent_dim() const { return latent_dim_; }
  bool trained() const { return trained_; }

  double beta_kl = 1.0;

 private:
  std::int64_t feature_dim_, latent_dim_;
  DenseLayer enc_;
  ReluLayer enc_relu_;
  DenseLayer mu_head_;
  DenseLayer logvar_head_;
  DenseLayer dec1_;
  ReluLayer dec_relu_;
  DenseLayer dec2_;
  bool trained_ = false;
};

// --- FedLGR client step ------------------------------------------------------------

struct LgrState {
  LatentVAE generator;
  SplitAdam model_opt;  // root at eta_R, top at eta_T
  AdamState gen_opt;
  std::int64_t pseudo_per_batch = -1;  // M; -1 matches the real batch size, 0 disables replay
  int tasks_seen = 0;                  // completed tasks; replay starts at 1
  bool allow_equal_rates = false;      // test mode: eta_R == eta_T permitted

  LgrState(LatentVAE gen, double eta_root, double eta_top, double gen_lr)
      : generator(std::move(gen)), model_opt(eta_root, eta_top), gen_opt(gen_lr) {}
};

struct LgrRoundStats {
  double gen_loss = 0.0;
  double top_loss = 0.0;
  double root_loss = 0.0;
  int batches = 0;
};

using EventSink = std::function<void(const std::string&)>;

// One local round of Latent Generative Replay over the given batches.
// Per batch: extract features, generate pseudo-samples for past tasks, update
// the generator on real+generated features, update the top on labeled real
// and pseudo pairs at eta_T, update the root on current data only at eta_R.
LgrRoundStats lgr_client_round(RootTopModel& model, LgrState& st, std::span<const Batch> batches,
                               Rng& gen_rng, const EventSink* events = nullptr);

}  // namespace fedscape
