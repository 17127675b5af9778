#include "ldsim/sim.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <numeric>

#include "ldsim/error.hpp"
#include "ldsim/kernels.hpp"
#include "ldsim/rng.hpp"

namespace ldsim {

namespace {

enum Stream : std::uint64_t {
  kTaskSeed = 101,
  kBackdoorSeed,
  kPartitionSeed,
  kBackdoorTrainSeed,
  kAttackTestSeed,
  kDefenseSeed,
  kPoolSeed,
  kInitSeed,
  kPretrainSeed,
  kPsiSeed,
  kSampleSeed,
  kClientSeed,
};

}  // namespace

void SimConfig::validate() const {
  if (K < 1) throw InvalidArgument("K must be >= 1");
  if (M < 1 || M > K) throw InvalidArgument("M must lie in [1, K]");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(client_lr.base >= 0.0) || !(client_lr.decay > 0.0)) {
    throw InvalidArgument("client lr must be >= 0 with a positive decay");
  }
  if (!(pretrain_lr >= 0.0)) throw InvalidArgument("pretrain_lr must be >= 0");
  for (std::size_t h : hidden) {
    if (h < 1) throw InvalidArgument("hidden layer sizes must be >= 1");
  }
  if (partition.kind == PartitionKind::kDirichlet && !(partition.alpha > 0.0)) {
    throw InvalidArgument("dirichlet alpha must be > 0");
  }
  if (source_class == target_class) {
    throw InvalidArgument("source and target class must differ");
  }
  task.validate();
  attack.validate();
  if (schedule.mode == ScheduleMode::kFixedFrequency) {
    schedule.validate();
  } else if (pool_size < 1 || pool_size > K) {
    throw InvalidArgument("pool_size must lie in [1, K]");
  }
  aggregator.validate();
  if (defense == DefenseKind::kLearnDefend) learndefend.validate();
}

NetworkSpec SimConfig::network() const {
  NetworkSpec s;
  s.layer_sizes.push_back(task.dim);
  s.layer_sizes.insert(s.layer_sizes.end(), hidden.begin(), hidden.end());
  s.layer_sizes.push_back(task.n_classes);
  return s;
}

double model_accuracy(const NetworkSpec& net, const ParamVector& global,
                      const Batch& test) {
  if (test.empty()) throw InvalidArgument("model_accuracy: empty test set");
  const auto pred = kernels::predict_classes(net, global, test);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

double attack_success_rate(const NetworkSpec& net, const ParamVector& global,
                           const Batch& attack_test) {
  if (attack_test.empty()) {
    throw InvalidArgument("attack_success_rate: empty attack test set");
  }
  // Labels of the attack set are the attacker's target labels.
  return model_accuracy(net, global, attack_test);
}

Environment make_environment(const SimConfig& cfg) {
  cfg.validate();
  const std::uint64_t seed = cfg.master_seed;
  Environment env;
  env.net = cfg.network();

  TaskSpec ts = cfg.task;
  ts.seed = derive_seed(seed, {kTaskSeed});
  env.task = make_task(ts);
  env.backdoor = make_backdoor(cfg.backdoor, env.task, ts, cfg.source_class,
                               cfg.target_class, cfg.trigger_size,
                               cfg.trigger_value, cfg.transparency,
                               cfg.edge_offset, derive_seed(seed, {kBackdoorSeed}));

  env.clients = partition_clients(env.task.train, cfg.K, cfg.partition,
                                  derive_seed(seed, {kPartitionSeed}));
  for (const auto& idx : env.clients.assignments) {
    env.client_data.push_back(env.task.train.subset(idx));
  }
  env.backdoor_train = make_attack_set(env.task.train, env.backdoor,
                                       derive_seed(seed, {kBackdoorTrainSeed}));

  // Odd-position test examples feed the attack set; the rest measure MA.
  std::vector<std::size_t> ma_idx, atk_idx;
  for (std::size_t i = 0; i < env.task.test.size(); ++i) {
    const bool src = env.task.test.labels[i] == cfg.source_class;
    (i % 2 == 1 && src ? atk_idx : ma_idx).push_back(i);
  }
  env.ma_test = env.task.test.subset(ma_idx);
  env.attack_test = make_attack_set(env.task.test.subset(atk_idx), env.backdoor,
                                    derive_seed(seed, {kAttackTestSeed}));

  DefenseBuildOptions dopts = cfg.defense_data;
  dopts.beta = cfg.learndefend.beta;
  env.defense = build_defense_dataset(env.task.train, env.backdoor, dopts,
                                      derive_seed(seed, {kDefenseSeed}));
  if (cfg.schedule.mode == ScheduleMode::kFixedPool) {
    env.attacker_pool = cfg.schedule.pool.empty()
                            ? draw_attacker_pool(cfg.K, cfg.pool_size,
                                                 derive_seed(seed, {kPoolSeed}))
                            : cfg.schedule.pool;
  }
  return env;
}

SimState make_initial_state(const SimConfig& cfg, const Environment& env) {
  const std::uint64_t seed = cfg.master_seed;
  SimState st;
  st.global = init_params(env.net, derive_seed(seed, {kInitSeed}));
  if (cfg.pretrain_epochs > 0) {
    SgdOptions opts;
    opts.epochs = cfg.pretrain_epochs;
    opts.batch_size = cfg.batch_size;
    opts.lr = {cfg.pretrain_lr, 1.0};
    opts.momentum = cfg.client_momentum;
    opts.weight_decay = cfg.client_weight_decay;
    st.global = sgd_train(env.net, st.global, env.task.train, opts,
                          derive_seed(seed, {kPretrainSeed}));
  }
  if (cfg.defense == DefenseKind::kLearnDefend) {
    LearnDefendConfig ld = cfg.learndefend;
    ld.pdd.input_dim = cfg.task.dim;
    ld.pdd.n_classes = cfg.task.n_classes;
    st.ld = make_learndefend_state(ld, env.defense.dataset,
                                   derive_seed(seed, {kPsiSeed}));
  }
  return st;
}

std::vector<std::size_t> sample_participants(const SimConfig& cfg, std::size_t t) {
  std::vector<std::size_t> ids(cfg.K);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(cfg.master_seed, {kSampleSeed, t}));
  // Partial Fisher-Yates: the first M slots are a uniform draw.
  for (std::size_t i = 0; i < cfg.M; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, cfg.K - 1);
    std::swap(ids[i], ids[d(rng)]);
  }
  ids.resize(cfg.M);
  return ids;
}

std::uint64_t client_seed(const SimConfig& cfg, std::size_t t, std::size_t id) {
  return derive_seed(cfg.master_seed, {kClientSeed, t, id});
}

RoundMetrics run_round(SimState& state, const Environment& env,
                       const SimConfig& cfg, std::size_t t) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::size_t> participants = sample_participants(cfg, t);
  std::vector<std::size_t> attackers;
  if (cfg.attack_enabled) {
    AttackerSchedule sched = cfg.schedule;
    if (sched.mode == ScheduleMode::kFixedPool) sched.pool = env.attacker_pool;
    attackers = schedule_attackers(sched, t, participants);
  }
  const std::size_t M = participants.size();
  std::vector<bool> is_attacker(M, false);
  for (std::size_t j = 0; j < M; ++j) {
    is_attacker[j] = std::find(attackers.begin(), attackers.end(),
                               participants[j]) != attackers.end();
  }

  SgdOptions honest;
  honest.epochs = cfg.local_epochs;
  honest.batch_size = cfg.batch_size;
  honest.lr = {cfg.client_lr.at(t), 1.0};
  honest.momentum = cfg.client_momentum;
  honest.weight_decay = cfg.client_weight_decay;

  std::vector<ClientUpdate> updates(M);
  std::vector<std::exception_ptr> errors(M);
#pragma omp parallel for schedule(dynamic) if (M > 1)
  for (std::size_t j = 0; j < M; ++j) {
    try {
      const std::size_t id = participants[j];
      const Batch& data = env.client_data[id];
      const std::uint64_t s = client_seed(cfg, t, id);
      updates[j].n_examples = data.size();
      if (is_attacker[j]) {
        ParamVector adv = pgd_local_train(env.net, state.global, data,
                                          env.backdoor_train, cfg.attack,
                                          cfg.attack.pgd_radius(t, M), s);
        if (cfg.attack.kind == AttackKind::kPgdReplacement) {
          adv = model_replacement(adv, state.global, M, cfg.attack);
        }
        updates[j].params = std::move(adv);
      } else {
        updates[j].params = data.empty()
                                ? state.global
                                : sgd_train(env.net, state.global, data, honest, s);
      }
    } catch (...) {
      errors[j] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  RoundMetrics m;
  m.round = t;
  switch (cfg.defense) {
    case DefenseKind::kNone:
      state.global = fedavg(updates);
      break;
    case DefenseKind::kBaseline:
      state.global = aggregate(cfg.aggregator, state.global, updates);
      break;
    case DefenseKind::kLearnDefend: {
      std::vector<ParamVector> params;
      params.reserve(M);
      for (const auto& u : updates) params.push_back(u.params);
      const bool update = !cfg.halt_updates_at || t <= *cfg.halt_updates_at;
      const RoundOutcome r = learndefend_round(*state.ld, env.net, state.global,
                                               params, cfg.learndefend, t, update);
      state.global = r.global;
      m.degenerate_weights = r.degenerate_weights;
      m.degenerate_scores = r.degenerate_scores;
      double atk = 0.0, hon = 0.0;
      std::size_t n_atk = 0;
      for (std::size_t j = 0; j < M; ++j) {
        if (is_attacker[j]) {
          atk += r.weights[j];
          ++n_atk;
        } else {
          hon += r.weights[j];
        }
      }
      if (n_atk < M) m.mean_honest_weight = hon / static_cast<double>(M - n_atk);
      if (n_atk > 0) {
        m.attacker_weight = atk / static_cast<double>(n_atk);
        if (m.mean_honest_weight) {
          m.ci_diff = *m.attacker_weight - *m.mean_honest_weight;
        }
      }
      std::size_t hits = 0;
      for (std::size_t i : state.ld->data.partition.poison) {
        hits += env.defense.true_poison[i] ? 1 : 0;
      }
      m.n_true_poison_in_ddp = hits;
      break;
    }
  }

  m.ma = model_accuracy(env.net, state.global, env.ma_test);
  m.asr = attack_success_rate(env.net, state.global, env.attack_test);
  m.wallclock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  return m;
}

ExperimentResult run_experiment(const SimConfig& cfg, const RoundObserver& observer) {
  const Environment env = make_environment(cfg);
  ExperimentResult res;
  res.final_state = make_initial_state(cfg, env);
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    res.metrics.push_back(run_round(res.final_state, env, cfg, t));
    if (observer) observer(res.metrics.back(), res.final_state);
  }
  return res;
}

}  // namespace ldsim
