#include "ldsim/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>

#include "ldsim/io.hpp"

namespace ldsim {

namespace {

std::size_t to_count(const std::string& v) {
  const long long x = parse_int(v);
  if (x < 0) throw InvalidArgument("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

std::uint64_t to_u64(const std::string& v) {
  const std::string_view s = trim(v);
  std::uint64_t x = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("expected an unsigned 64-bit integer, got '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw InvalidArgument("expected true or false, got '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

template <typename E>
E to_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> names) {
  std::string allowed;
  for (const auto& [n, e] : names) {
    if (v == n) return e;
    allowed += allowed.empty() ? n : std::string("|") + n;
  }
  throw InvalidArgument("expected one of " + allowed + ", got '" + v + "'");
}

template <typename E>
std::string from_enum(E e, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, x] : names) {
    if (x == e) return n;
  }
  return "?";
}

const std::initializer_list<std::pair<const char*, PartitionKind>> kPartitionNames{
    {"iid", PartitionKind::kIid}, {"dirichlet", PartitionKind::kDirichlet}};
const std::initializer_list<std::pair<const char*, BackdoorKind>> kBackdoorNames{
    {"label_flip", BackdoorKind::kLabelFlip},
    {"trigger_patch", BackdoorKind::kTriggerPatch},
    {"edge_case", BackdoorKind::kEdgeCase}};
const std::initializer_list<std::pair<const char*, AttackKind>> kAttackNames{
    {"pgd", AttackKind::kPgd}, {"pgd_replacement", AttackKind::kPgdReplacement}};
const std::initializer_list<std::pair<const char*, ScheduleMode>> kScheduleNames{
    {"fixed_frequency", ScheduleMode::kFixedFrequency},
    {"fixed_pool", ScheduleMode::kFixedPool}};
const std::initializer_list<std::pair<const char*, DefenseKind>> kDefenseNames{
    {"none", DefenseKind::kNone},
    {"baseline", DefenseKind::kBaseline},
    {"learndefend", DefenseKind::kLearnDefend}};
const std::initializer_list<std::pair<const char*, PsiSchedule>> kPsiScheduleNames{
    {"constant", PsiSchedule::kConstant}, {"decay", PsiSchedule::kDecay}};
const std::initializer_list<std::pair<const char*, PsiUpdateOrder>> kPsiOrderNames{
    {"after_aggregation", PsiUpdateOrder::kAfterAggregation},
    {"before_aggregation", PsiUpdateOrder::kBeforeAggregation}};

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split(v, ',')) out.push_back(to_count(std::string(trim(p))));
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define LD_SIZE(name, expr)                                                    \
  Field {                                                                      \
    name, [](const ExperimentConfig& c) { return std::to_string(c.expr); },    \
        [](ExperimentConfig& c, const std::string& v) { c.expr = to_count(v); } \
  }
#define LD_REAL(name, expr)                                                      \
  Field {                                                                        \
    name, [](const ExperimentConfig& c) { return format_double(c.expr); },       \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parse_double(v); } \
  }
#define LD_BOOL(name, expr)                                                   \
  Field {                                                                     \
    name, [](const ExperimentConfig& c) { return from_bool(c.expr); },        \
        [](ExperimentConfig& c, const std::string& v) { c.expr = to_bool(v); } \
  }
#define LD_ENUM(name, expr, table)                                                     \
  Field {                                                                              \
    name, [](const ExperimentConfig& c) { return from_enum(c.expr, table); },          \
        [](ExperimentConfig& c, const std::string& v) { c.expr = to_enum(v, table); } \
  }

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      {"run_name", [](const ExperimentConfig& c) { return c.run_name; },
       [](ExperimentConfig& c, const std::string& v) {
         if (v.empty() || v.find_first_of("/\\ ") != std::string::npos) {
           throw InvalidArgument("run_name must be a nonempty name without '/' or spaces");
         }
         c.run_name = v;
       }},
      {"master_seed",
       [](const ExperimentConfig& c) { return std::to_string(c.sim.master_seed); },
       [](ExperimentConfig& c, const std::string& v) { c.sim.master_seed = to_u64(v); }},
      LD_SIZE("K", sim.K),
      LD_SIZE("M", sim.M),
      LD_SIZE("T", sim.T),
      // task
      LD_SIZE("n_classes", sim.task.n_classes),
      LD_SIZE("dim", sim.task.dim),
      LD_REAL("cluster_separation", sim.task.cluster_separation),
      LD_REAL("cluster_std", sim.task.cluster_std),
      LD_SIZE("n_train", sim.task.n_train),
      LD_SIZE("n_test", sim.task.n_test),
      {"hidden", [](const ExperimentConfig& c) { return join_sizes(c.sim.hidden); },
       [](ExperimentConfig& c, const std::string& v) { c.sim.hidden = parse_sizes(v); }},
      LD_SIZE("pretrain_epochs", sim.pretrain_epochs),
      LD_REAL("pretrain_lr", sim.pretrain_lr),
      // honest clients
      LD_SIZE("local_epochs", sim.local_epochs),
      LD_SIZE("batch_size", sim.batch_size),
      LD_REAL("client_lr", sim.client_lr.base),
      LD_REAL("client_lr_decay", sim.client_lr.decay),
      LD_REAL("client_momentum", sim.client_momentum),
      LD_REAL("client_weight_decay", sim.client_weight_decay),
      LD_ENUM("partition", sim.partition.kind, kPartitionNames),
      LD_REAL("dirichlet_alpha", sim.partition.alpha),
      // backdoor
      LD_ENUM("backdoor", sim.backdoor, kBackdoorNames),
      {"source_class", [](const ExperimentConfig& c) { return std::to_string(c.sim.source_class); },
       [](ExperimentConfig& c, const std::string& v) { c.sim.source_class = static_cast<int>(to_count(v)); }},
      {"target_class", [](const ExperimentConfig& c) { return std::to_string(c.sim.target_class); },
       [](ExperimentConfig& c, const std::string& v) { c.sim.target_class = static_cast<int>(to_count(v)); }},
      LD_SIZE("trigger_size", sim.trigger_size),
      LD_REAL("trigger_value", sim.trigger_value),
      LD_REAL("transparency", sim.transparency),
      LD_REAL("edge_offset", sim.edge_offset),
      // attack
      LD_BOOL("attack_enabled", sim.attack_enabled),
      LD_ENUM("attack", sim.attack.kind, kAttackNames),
      LD_REAL("attack_eps0", sim.attack.eps0),
      LD_REAL("attack_eps_decay", sim.attack.eps_decay),
      LD_SIZE("attack_project_every", sim.attack.project_every),
      LD_REAL("attack_poison_mix", sim.attack.poison_mix),
      {"attack_replacement_scale",
       [](const ExperimentConfig& c) {
         return c.sim.attack.replacement_scale
                    ? format_double(*c.sim.attack.replacement_scale)
                    : std::string("auto");
       },
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "auto") {
           c.sim.attack.replacement_scale.reset();
         } else {
           c.sim.attack.replacement_scale = parse_double(v);
         }
       }},
      LD_SIZE("attack_local_steps", sim.attack.local_steps),
      LD_SIZE("attack_batch_size", sim.attack.batch_size),
      LD_REAL("attack_lr", sim.attack.lr),
      LD_REAL("attack_momentum", sim.attack.momentum),
      LD_REAL("attack_weight_decay", sim.attack.weight_decay),
      LD_ENUM("attacker_schedule", sim.schedule.mode, kScheduleNames),
      LD_SIZE("attack_period", sim.schedule.period),
      LD_SIZE("pool_size", sim.pool_size),
      // defense
      LD_ENUM("defense", sim.defense, kDefenseNames),
      {"aggregator",
       [](const ExperimentConfig& c) { return to_string(c.sim.aggregator.rule); },
       [](ExperimentConfig& c, const std::string& v) { c.sim.aggregator.rule = parse_rule(v); }},
      LD_SIZE("krum_f", sim.aggregator.f),
      LD_SIZE("multi_krum_m", sim.aggregator.m),
      LD_REAL("trim_frac", sim.aggregator.trim_frac),
      LD_SIZE("rfa_max_iter", sim.aggregator.rfa_max_iter),
      LD_REAL("rfa_tol", sim.aggregator.rfa_tol),
      LD_REAL("rfa_nu", sim.aggregator.rfa_nu),
      LD_REAL("ndc_norm_bound", sim.aggregator.ndc_norm_bound),
      // defense dataset
      LD_SIZE("defense_size", sim.defense_data.n_total),
      LD_REAL("defense_poison_frac", sim.defense_data.poison_frac),
      LD_REAL("clean_marked_frac", sim.defense_data.clean_marked_frac),
      LD_REAL("clean_mark_noise", sim.defense_data.clean_mark_noise),
      // learned defense
      LD_REAL("beta", sim.learndefend.beta),
      LD_REAL("lambda", sim.learndefend.lambda),
      LD_REAL("theta_lr", sim.learndefend.theta_lr),
      LD_ENUM("psi_schedule", sim.learndefend.psi_schedule, kPsiScheduleNames),
      LD_REAL("psi_lr", sim.learndefend.psi_lr),
      LD_REAL("psi_lr_decay", sim.learndefend.psi_lr_decay),
      LD_SIZE("inner_steps_theta", sim.learndefend.inner_steps_theta),
      LD_SIZE("inner_steps_psi", sim.learndefend.inner_steps_psi),
      {"theta_init",
       [](const ExperimentConfig& c) {
         const auto& t = c.sim.learndefend.theta_init.theta;
         return format_double(t[0]) + "," + format_double(t[1]) + "," +
                format_double(t[2]);
       },
       [](ExperimentConfig& c, const std::string& v) {
         const auto parts = split(v, ',');
         if (parts.size() != 3) throw InvalidArgument("theta_init needs 3 comma-separated values");
         for (int i = 0; i < 3; ++i) {
           c.sim.learndefend.theta_init.theta[i] = parse_double(parts[i]);
         }
       }},
      LD_SIZE("pdd_h1", sim.learndefend.pdd.h1),
      LD_SIZE("pdd_h2", sim.learndefend.pdd.h2),
      LD_SIZE("pdd_g1", sim.learndefend.pdd.g1),
      LD_REAL("pdd_init_scale", sim.learndefend.pdd_init_scale),
      LD_SIZE("init_psi_steps", sim.learndefend.init_psi_steps),
      LD_REAL("init_psi_lr", sim.learndefend.init_psi_lr),
      LD_ENUM("psi_order", sim.learndefend.psi_order, kPsiOrderNames),
      {"halt_updates_at",
       [](const ExperimentConfig& c) {
         return c.sim.halt_updates_at ? std::to_string(*c.sim.halt_updates_at)
                                      : std::string("none");
       },
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "none") {
           c.sim.halt_updates_at.reset();
         } else {
           c.sim.halt_updates_at = to_count(v);
         }
       }},
      // output
      LD_SIZE("checkpoint_every", checkpoint_every),
      LD_BOOL("record_wallclock", record_wallclock),
  };
  return fields;
}

#undef LD_SIZE
#undef LD_REAL
#undef LD_BOOL
#undef LD_ENUM

const Field* find_field(const std::string& key) {
  for (const auto& f : schema()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

ConfigError::ConfigError(const std::string& source, std::size_t line,
                         const std::string& msg)
    : InvalidArgument(line ? source + ":" + std::to_string(line) + ": " + msg
                           : source + ": " + msg),
      line_(line) {}

void set_config_value(ExperimentConfig& cfg, const std::string& key,
                      const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw InvalidArgument("unknown key '" + key + "'");
  f->set(cfg, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : schema()) keys.emplace_back(f.key);
  return keys;
}

ExperimentConfig parse_config(std::istream& is, const std::string& source) {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source, line_no, "expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(source, line_no, "empty key");
    const Field* f = find_field(key);
    if (!f) throw ConfigError(source, line_no, "unknown key '" + key + "'");
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(source, line_no,
                        "duplicate key '" + key + "' (first set on line " +
                            std::to_string(it->second) + ")");
    }
    seen[key] = line_no;
    try {
      f->set(cfg, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(source, line_no, key + ": " + e.what());
    }
  }
  try {
    cfg.sim.validate();
  } catch (const Error& e) {
    throw ConfigError(source, 0, e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, 0, "cannot open config file");
  return parse_config(in, path);
}

std::string resolved_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : schema()) os << f.key << " = " << f.get(cfg) << '\n';
  return os.str();
}

}  // namespace ldsim
