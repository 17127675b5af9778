#pragma once

// Learned defense: a client-importance (CI) model that weights client updates
// from three loss/distance features, and a poisoned-data detector (PDD) that
// ranks the defense dataset so its top-beta fraction can serve as the
// "poisoned" side. The two are trained in alternation, one gradient step each
// per federated round, coupled through the aggregated global model.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "ldsim/aggregators.hpp"
#include "ldsim/param_math.hpp"
#include "ldsim/taskgen.hpp"

namespace ldsim {

// ---------------------------------------------------------------------------
// Client importance

// Weights over (mean clean loss, mean poison-side loss, distance).
struct CIParams {
  std::array<double, 3> theta{-1.0, 1.0, -1.0};
  bool operator==(const CIParams&) const = default;
};

struct ClientFeatures {
  double clean_loss = 0.0;   // mean -log f_y over D_dc
  double poison_loss = 0.0;  // mean -log f_y over D_dp
  double dist = 0.0;         // ||phi_j - global_prev||
  std::array<double, 3> as_array() const { return {clean_loss, poison_loss, dist}; }
};

ClientFeatures client_features(const NetworkSpec& net, const ParamVector& phi_j,
                               const ParamVector& global_prev,
                               const Batch& examples,
                               const DefensePartition& partition);

struct ImportanceWeights {
  std::vector<double> weights;
  // All ReLU scores were zero (sum < 1e-12); weights fell back to uniform.
  bool degenerate = false;
};

// w_j = ReLU(theta . s_j) / sum_k ReLU(theta . s_k)
ImportanceWeights client_importance(std::span<const ClientFeatures> features,
                                    const CIParams& theta);

// global_prev + sum_j w_j (phi_j - global_prev). Weights must lie on the
// simplex within 1e-9.
ParamVector aggregate_weighted(const ParamVector& global_prev,
                               std::span<const ParamVector> updates,
                               std::span<const double> weights);

// sum_j w_j phi_j
ParamVector weighted_average(std::span<const ParamVector> updates,
                             std::span<const double> weights);

// sum_{D_dc} -log f_y + sum_{D_dp} -log(1 - f_y), evaluated at `global`.
double defense_loss(const NetworkSpec& net, const ParamVector& global,
                    const Batch& examples, const DefensePartition& partition);

struct ThetaGrad {
  double loss = 0.0;
  std::array<double, 3> grad{};
  bool degenerate = false;
};

// Exact gradient of defense_loss(phi_bar(theta)) w.r.t. theta, where
// phi_bar(theta) = aggregate_weighted(global_prev, updates,
// client_importance(features, theta)). ReLU subgradient 0 at the kink.
ThetaGrad theta_gradient(const CIParams& theta, const NetworkSpec& net,
                         const ParamVector& global_prev,
                         std::span<const ParamVector> updates,
                         std::span<const ClientFeatures> features,
                         const Batch& examples,
                         const DefensePartition& partition);

struct ThetaStepResult {
  CIParams theta;
  bool degenerate = false;  // the step was skipped
};

ThetaStepResult theta_step(const CIParams& theta, const NetworkSpec& net,
                           const ParamVector& global_prev,
                           std::span<const ParamVector> updates,
                           std::span<const ClientFeatures> features,
                           const Batch& examples,
                           const DefensePartition& partition, double lr,
                           std::size_t inner_steps);

// Convenience overload computing the features itself.
ThetaStepResult theta_step(const CIParams& theta, const NetworkSpec& net,
                           const ParamVector& global_prev,
                           std::span<const ParamVector> updates,
                           const Batch& examples,
                           const DefensePartition& partition, double lr,
                           std::size_t inner_steps);

// ---------------------------------------------------------------------------
// Poisoned-data detector
//
//   h1 = ReLU(FE x)            FE: input -> h1 (dense + bias)
//   h2 = ReLU(W1 h1)           W1: h1 -> h2
//   y_hat = softmax(W2 h2)     W2: h2 -> C
//   g1 = ReLU(W3 [y_hat, onehot(y)])   W3: 2C -> g1
//   g2 = W4 g1                 W4: g1 -> 1
//   gamma = min-max normalisation of g2 over the defense dataset
//
// Every layer carries a bias.

struct PddSpec {
  std::size_t input_dim = 16;
  std::size_t n_classes = 4;
  std::size_t h1 = 32;
  std::size_t h2 = 16;
  std::size_t g1 = 16;

  std::size_t param_count() const;
  void validate() const;
  bool operator==(const PddSpec&) const = default;
};

struct PddParams {
  PddSpec spec;
  std::vector<double> values;
  bool operator==(const PddParams&) const = default;
};

// He-style init scaled by `scale`.
PddParams pdd_init(const PddSpec& spec, std::uint64_t seed, double scale);

// Raw scorer outputs g2.
std::vector<double> pdd_raw_scores(const PddParams& psi, const Batch& examples);

// Class probabilities y_hat of the detector's own classifier head.
std::vector<double> pdd_class_probs(const PddParams& psi, std::span<const double> x);

struct GammaScores {
  std::vector<double> gamma;
  std::size_t argmin = 0;  // lowest index attaining the minimum raw score
  std::size_t argmax = 0;  // lowest index attaining the maximum raw score
  // Raw spread below 1e-12: every gamma is 0.5.
  bool degenerate = false;
};

GammaScores normalize_scores(std::span<const double> raw);
GammaScores pdd_score(const PddParams& psi, const Batch& examples);

// Top round(beta n) indices by gamma (descending, ties by ascending index)
// form the poison side; both sides are returned in ascending index order.
DefensePartition partition_defense(std::span<const double> gamma, double beta);

// Per-example l_p - l_c of the global model.
std::vector<double> loss_gap(const NetworkSpec& net, const ParamVector& global,
                             const Batch& examples);

// V = sum_i gamma_i (l_p - l_c)_i with the global model held fixed.
double pdd_cost(const PddParams& psi, const Batch& examples,
                const NetworkSpec& net, const ParamVector& global);

// L_psi = V + lambda * sum_{D_clean} CE(y_hat(x), y)
double psi_objective(const PddParams& psi, const Batch& examples,
                     std::span<const std::size_t> clean_marked,
                     const NetworkSpec& net, const ParamVector& global,
                     double lambda);

struct PsiGrad {
  double value = 0.0;
  std::vector<double> grad;
  bool degenerate = false;
};

// Value and gradient of sum_i coeff_i gamma_i + lambda * sum_{pred_idx} CE.
// The min-max normalisation holds its extremal indices fixed; when the raw
// spread is degenerate only the CE term contributes.
PsiGrad pdd_linear_objective(const PddParams& psi, const Batch& examples,
                             std::span<const double> coeffs,
                             std::span<const std::size_t> pred_idx,
                             double lambda);

struct PsiStepResult {
  PddParams psi;
  bool degenerate = false;
};

PsiStepResult psi_step(const PddParams& psi, const Batch& examples,
                       std::span<const std::size_t> clean_marked,
                       const NetworkSpec& net, const ParamVector& global,
                       double lr, double lambda, std::size_t inner_steps);

// Consistency objective: sum over (i in D_clean, j outside) of
// gamma_i - gamma_j, plus lambda * L_pred.
double consistency_objective(const PddParams& psi, const Batch& examples,
                             std::span<const std::size_t> clean_marked,
                             double lambda);

// Gradient descent on the consistency objective from a seeded random init.
PddParams init_psi(const PddSpec& spec, const Batch& examples,
                   std::span<const std::size_t> clean_marked, double lambda,
                   std::size_t steps, double lr, std::uint64_t seed,
                   double init_scale = 1.0);

// ---------------------------------------------------------------------------
// Round

enum class PsiSchedule { kConstant, kDecay };
enum class PsiUpdateOrder {
  kAfterAggregation,  // psi_t uses the new global model
  kBeforeAggregation  // psi_t uses the previous global model
};

struct LearnDefendConfig {
  double beta = 0.2;
  double lambda = 0.1;
  double theta_lr = 0.01;
  PsiSchedule psi_schedule = PsiSchedule::kConstant;
  // eta(t) = psi_lr [* psi_lr_decay^t]. The cost is a sum over D_d, so at
  // desk scale 1e-3 overshoots and pushes detected poisons back out.
  double psi_lr = 1e-4;
  double psi_lr_decay = 0.1;
  std::size_t inner_steps_theta = 1;
  std::size_t inner_steps_psi = 1;
  CIParams theta_init;
  PddSpec pdd;
  double pdd_init_scale = 1.0;
  std::size_t init_psi_steps = 200;
  double init_psi_lr = 1e-5;
  PsiUpdateOrder psi_order = PsiUpdateOrder::kAfterAggregation;

  void validate() const;
  double psi_lr_at(std::size_t t) const;
};

struct LearnDefendState {
  CIParams theta;
  PddParams psi;
  DefenseDataset data;
};

// init_psi on the dataset's D_clean and theta = theta_init.
LearnDefendState make_learndefend_state(const LearnDefendConfig& cfg,
                                        DefenseDataset data, std::uint64_t seed);

struct RoundOutcome {
  ParamVector global;
  std::vector<double> weights;
  std::vector<ClientFeatures> features;
  bool degenerate_weights = false;
  bool degenerate_scores = false;
};

// One defended aggregation. In order: score D_d with psi_{t-1}; partition at
// beta; client features against global_prev; weights from theta_{t-1};
// weighted aggregation; theta step; psi step on the new global model. With
// `update_params` false the two parameter steps are skipped.
RoundOutcome learndefend_round(LearnDefendState& state, const NetworkSpec& net,
                               const ParamVector& global_prev,
                               std::span<const ParamVector> updates,
                               const LearnDefendConfig& cfg, std::size_t t,
                               bool update_params = true);

// Versioned text checkpoint of the defense state and the global model.
// Floats are written as shortest round-trip decimals.
void save_checkpoint(std::ostream& os, std::size_t round,
                     const LearnDefendState& state, const ParamVector& global);
struct Checkpoint {
  std::size_t round = 0;
  CIParams theta;
  PddParams psi;
  DefensePartition partition;
  ParamVector global;
};
Checkpoint load_checkpoint(std::istream& is);

}  // namespace ldsim
