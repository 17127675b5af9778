#pragma once

// Federated-learning round orchestration: client sampling, honest and
// adversarial local training, defense dispatch and per-round metrics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ldsim/aggregators.hpp"
#include "ldsim/attacks.hpp"
#include "ldsim/learndefend.hpp"
#include "ldsim/param_math.hpp"
#include "ldsim/taskgen.hpp"

namespace ldsim {

enum class DefenseKind { kNone, kBaseline, kLearnDefend };

struct SimConfig {
  std::uint64_t master_seed = 1;
  std::size_t K = 50;
  std::size_t M = 10;
  std::size_t T = 300;

  TaskSpec task;  // task.seed is derived from master_seed
  std::vector<std::size_t> hidden{32};

  // Central pretraining of the initial global model.
  std::size_t pretrain_epochs = 5;
  double pretrain_lr = 0.05;

  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  LrSchedule client_lr{0.001, 0.998};  // indexed by round
  double client_momentum = 0.9;
  double client_weight_decay = 1e-4;
  PartitionScheme partition;

  BackdoorKind backdoor = BackdoorKind::kTriggerPatch;
  int source_class = 1;
  int target_class = 2;
  std::size_t trigger_size = 4;
  double trigger_value = 3.0;
  double transparency = 0.8;
  double edge_offset = 6.0;

  bool attack_enabled = true;
  AttackConfig attack;
  AttackerSchedule schedule;
  std::size_t pool_size = 5;  // drawn pool for the fixed-pool schedule

  DefenseKind defense = DefenseKind::kLearnDefend;
  AggregatorConfig aggregator;
  LearnDefendConfig learndefend;
  DefenseBuildOptions defense_data;

  // theta and psi are frozen in every round t > halt_updates_at.
  std::optional<std::size_t> halt_updates_at;

  void validate() const;
  NetworkSpec network() const;
};

struct RoundMetrics {
  std::size_t round = 0;
  double ma = 0.0;
  double asr = 0.0;
  std::optional<double> attacker_weight;     // mean over attackers this round
  std::optional<double> mean_honest_weight;  // learndefend only
  std::optional<double> ci_diff;
  std::optional<std::size_t> n_true_poison_in_ddp;
  std::int64_t wallclock_ms = 0;
  bool degenerate_weights = false;
  bool degenerate_scores = false;
};

double model_accuracy(const NetworkSpec& net, const ParamVector& global,
                      const Batch& test);
double attack_success_rate(const NetworkSpec& net, const ParamVector& global,
                           const Batch& attack_test);

// Everything fixed for the lifetime of a run.
struct Environment {
  NetworkSpec net;
  Task task;
  BackdoorSpec backdoor;
  ClientPartition clients;
  std::vector<Batch> client_data;
  Batch backdoor_train;  // poisoned source-class training copies
  Batch ma_test;
  Batch attack_test;  // disjoint from ma_test
  BuiltDefense defense;
  std::vector<std::size_t> attacker_pool;
};

struct SimState {
  ParamVector global;
  std::optional<LearnDefendState> ld;
};

Environment make_environment(const SimConfig& cfg);
SimState make_initial_state(const SimConfig& cfg, const Environment& env);

// Sampled participants of round t (uniform without replacement, draw order).
std::vector<std::size_t> sample_participants(const SimConfig& cfg, std::size_t t);

// Seed of client `id`'s local training in round t.
std::uint64_t client_seed(const SimConfig& cfg, std::size_t t, std::size_t id);

RoundMetrics run_round(SimState& state, const Environment& env,
                       const SimConfig& cfg, std::size_t t);

struct ExperimentResult {
  std::vector<RoundMetrics> metrics;
  SimState final_state;
};

// Called after every round with the metrics and the post-round state.
using RoundObserver = std::function<void(const RoundMetrics&, const SimState&)>;

ExperimentResult run_experiment(const SimConfig& cfg,
                                const RoundObserver& observer = {});

}  // namespace ldsim
