#include "ldsim/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldsim/error.hpp"
#include "ldsim/rng.hpp"
#include "ldsim/taskgen.hpp"

namespace ldsim {

void AttackConfig::validate() const {
  if (!(eps0 >= 0.0)) throw InvalidArgument("attack eps0 must be >= 0");
  if (!(eps_decay > 0.0 && eps_decay <= 1.0)) {
    throw InvalidArgument("attack eps_decay must lie in (0, 1]");
  }
  if (project_every < 1) throw InvalidArgument("attack project_every must be >= 1");
  if (!(poison_mix > 0.0 && poison_mix <= 1.0)) {
    throw InvalidArgument("attack poison_mix must lie in (0, 1]");
  }
  if (replacement_scale && !(*replacement_scale >= 0.0)) {
    throw InvalidArgument("attack replacement scale must be >= 0");
  }
  if (batch_size < 1) throw InvalidArgument("attack batch_size must be >= 1");
  if (!(lr >= 0.0)) throw InvalidArgument("attack lr must be >= 0");
}

double AttackConfig::radius(std::size_t t) const {
  return eps0 * std::pow(eps_decay, static_cast<double>(t));
}

double AttackConfig::scale(std::size_t M) const {
  return replacement_scale ? *replacement_scale : static_cast<double>(M);
}

double AttackConfig::pgd_radius(std::size_t t, std::size_t M) const {
  const double eps = radius(t);
  if (kind == AttackKind::kPgd) return eps;
  const double s = scale(M);
  // A zero scale submits `global` whatever PGD returns.
  return s > 0.0 ? eps / s : 0.0;
}

ParamVector pgd_local_train(const NetworkSpec& spec, const ParamVector& global,
                            const Batch& honest_data, const Batch& backdoor_data,
                            const AttackConfig& cfg, double radius,
                            std::uint64_t seed) {
  cfg.validate();
  check_params(spec, global);
  if (backdoor_data.empty()) {
    throw InvalidArgument("pgd_local_train: empty backdoor data");
  }
  if (!(radius >= 0.0)) throw InvalidArgument("pgd_local_train: negative radius");
  if (radius == 0.0) return global;

  const std::size_t n_bad =
      std::max<std::size_t>(1, round_half_up(cfg.poison_mix *
                                             static_cast<double>(cfg.batch_size)));
  const std::size_t n_good =
      honest_data.empty() ? 0 : cfg.batch_size - std::min(cfg.batch_size, n_bad);

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_bad(0, backdoor_data.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_good(
      0, honest_data.empty() ? 0 : honest_data.size() - 1);

  ParamVector params = global;
  MomentumSgd opt(params.size(), cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> bad_idx(n_bad), good_idx(n_good);
  for (std::size_t step = 1; step <= cfg.local_steps; ++step) {
    for (auto& i : bad_idx) i = pick_bad(rng);
    for (auto& i : good_idx) i = pick_good(rng);
    Batch mb = backdoor_data.subset(bad_idx);
    if (n_good) mb = Batch::concat(mb, honest_data.subset(good_idx));
    LossGrad g = grad(spec, params, mb, LossKind::kCrossEntropy);
    opt.step(params, g.gradient, cfg.lr);
    if (step % cfg.project_every == 0) {
      params = project_l2_ball(params, global, radius);
    }
  }
  return project_l2_ball(params, global, radius);
}

ParamVector model_replacement(const ParamVector& adv, const ParamVector& global,
                              std::size_t M, const AttackConfig& cfg) {
  if (M < 1) throw InvalidArgument("model_replacement: M must be >= 1");
  const double s = cfg.scale(M);
  if (adv.layout_id != global.layout_id || adv.size() != global.size()) {
    throw LayoutMismatch("model_replacement: adversary and global layouts differ");
  }
  if (s == 1.0) return adv;
  // global + s * (adv - global)
  return axpy(s, axpy(-1.0, global, adv), global);
}

void AttackerSchedule::validate() const {
  if (mode == ScheduleMode::kFixedFrequency && period < 1) {
    throw InvalidArgument("attacker schedule period must be >= 1");
  }
  if (mode == ScheduleMode::kFixedPool && pool.empty()) {
    throw InvalidArgument("fixed-pool attacker schedule needs a nonempty pool");
  }
}

std::vector<std::size_t> schedule_attackers(
    const AttackerSchedule& schedule, std::size_t t,
    std::span<const std::size_t> participants) {
  schedule.validate();
  if (participants.empty()) {
    throw InvalidArgument("schedule_attackers: no participants");
  }
  std::vector<std::size_t> out;
  if (schedule.mode == ScheduleMode::kFixedFrequency) {
    if (t % schedule.period == 0) out.push_back(participants[0]);
    return out;
  }
  for (std::size_t p : participants) {
    if (std::find(schedule.pool.begin(), schedule.pool.end(), p) !=
        schedule.pool.end()) {
      out.push_back(p);
    }
  }
  return out;
}

std::vector<std::size_t> draw_attacker_pool(std::size_t K, std::size_t size,
                                            std::uint64_t seed) {
  if (size < 1 || size > K) {
    throw InvalidArgument("attacker pool size must lie in [1, K]");
  }
  std::vector<std::size_t> ids(K);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(size);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace ldsim
