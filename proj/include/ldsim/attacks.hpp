#pragma once

// Adversarial clients: PGD-constrained local training, model-replacement
// scaling and attacker scheduling.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ldsim/param_math.hpp"

namespace ldsim {

enum class AttackKind { kPgd, kPgdReplacement };

struct AttackConfig {
  AttackKind kind = AttackKind::kPgdReplacement;
  double eps0 = 2.0;
  double eps_decay = 0.998;
  std::size_t project_every = 10;
  double poison_mix = 0.5;
  // nullopt = auto (scale by the number of participants M).
  std::optional<double> replacement_scale;
  // Local optimisation of the attacker.
  std::size_t local_steps = 50;
  std::size_t batch_size = 32;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const;
  // eps0 * eps_decay^t
  double radius(std::size_t t) const;
  // The displacement scale s: replacement_scale or M.
  double scale(std::size_t M) const;
  // Radius handed to PGD: eps_t for kPgd, eps_t / s for kPgdReplacement.
  double pgd_radius(std::size_t t, std::size_t M) const;
};

// Momentum SGD on minibatches that draw round(poison_mix * batch_size)
// examples from `backdoor_data` and the rest from `honest_data`, projecting
// onto the l2 ball of `radius` around `global` every project_every steps and
// once at the end.
ParamVector pgd_local_train(const NetworkSpec& spec, const ParamVector& global,
                            const Batch& honest_data, const Batch& backdoor_data,
                            const AttackConfig& cfg, double radius,
                            std::uint64_t seed);

// global + s (adv - global), s = cfg.scale(M).
ParamVector model_replacement(const ParamVector& adv, const ParamVector& global,
                              std::size_t M, const AttackConfig& cfg);

enum class ScheduleMode { kFixedFrequency, kFixedPool };

struct AttackerSchedule {
  ScheduleMode mode = ScheduleMode::kFixedFrequency;
  std::size_t period = 10;
  std::vector<std::size_t> pool;

  void validate() const;
};

// Fixed frequency: {participants[0]} when t % period == 0, else {}.
// Fixed pool: the participants that belong to the pool, in participant order.
std::vector<std::size_t> schedule_attackers(const AttackerSchedule& schedule,
                                            std::size_t t,
                                            std::span<const std::size_t> participants);

// A pool of `size` distinct client ids drawn from [0, K).
std::vector<std::size_t> draw_attacker_pool(std::size_t K, std::size_t size,
                                            std::uint64_t seed);

}  // namespace ldsim
