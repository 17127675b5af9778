#include "ldsim/report.hpp"

#include <fstream>
#include <ostream>

#include "ldsim/error.hpp"
#include "ldsim/io.hpp"

namespace ldsim {

namespace {

std::string opt(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  return os;
}

}  // namespace

std::string metrics_row(const RoundMetrics& m, bool record_wallclock) {
  std::string s = std::to_string(m.round);
  s += ',' + format_double(m.ma);
  s += ',' + format_double(m.asr);
  s += ',' + opt(m.attacker_weight);
  s += ',' + opt(m.mean_honest_weight);
  s += ',' + opt(m.ci_diff);
  s += ',';
  if (m.n_true_poison_in_ddp) s += std::to_string(*m.n_true_poison_in_ddp);
  s += ',' + std::to_string(record_wallclock ? m.wallclock_ms : 0);
  return s;
}

void write_metrics_csv(std::ostream& os, const std::vector<RoundMetrics>& trace,
                       bool record_wallclock) {
  os << kMetricsHeader << '\n';
  for (const auto& m : trace) os << metrics_row(m, record_wallclock) << '\n';
}

void save_model(std::ostream& os, std::size_t round, const ParamVector& global) {
  os << "ldsim-model 1\n";
  os << "round " << round << '\n';
  os << "global_layout " << global.layout_id << '\n';
  os << "global " << global.size();
  for (double v : global.values) os << ' ' << format_double(v);
  os << '\n';
}

std::vector<RoundMetrics> run_to_directory(const ExperimentConfig& cfg,
                                           const std::filesystem::path& dir,
                                           std::ostream* log) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "checkpoints");
  {
    auto os = open_out(dir / "resolved_config");
    os << resolved_config(cfg);
  }
  auto checkpoint = [&](std::size_t t, const SimState& st) {
    auto os = open_out(dir / "checkpoints" / ("round_" + std::to_string(t) + ".ckpt"));
    if (st.ld) {
      save_checkpoint(os, t, *st.ld, st.global);
    } else {
      save_model(os, t, st.global);
    }
  };
  auto observer = [&](const RoundMetrics& m, const SimState& st) {
    if (cfg.checkpoint_every > 0 && m.round % cfg.checkpoint_every == 0 &&
        m.round != cfg.sim.T) {
      checkpoint(m.round, st);
    }
    if (log && (m.round % 10 == 0 || m.round == cfg.sim.T)) {
      *log << cfg.run_name << " round " << m.round << " ma " << format_double(m.ma)
           << " asr " << format_double(m.asr);
      if (m.degenerate_weights) *log << " [uniform weights]";
      if (m.degenerate_scores) *log << " [constant pdd scores]";
      *log << '\n';
    }
  };
  ExperimentResult res = run_experiment(cfg.sim, observer);
  checkpoint(cfg.sim.T, res.final_state);
  auto os = open_out(dir / "metrics.csv");
  write_metrics_csv(os, res.metrics, cfg.record_wallclock);
  return res.metrics;
}

SweepAxis parse_axis(const std::string& name) {
  for (auto a : {SweepAxis::kBeta, SweepAxis::kCleanNoise, SweepAxis::kDefenseSize,
                 SweepAxis::kPoolSize, SweepAxis::kDirichletAlpha,
                 SweepAxis::kTriggerSize, SweepAxis::kTransparency,
                 SweepAxis::kParticipants}) {
    if (to_string(a) == name) return a;
  }
  throw InvalidArgument("unknown sweep axis '" + name + "'");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kBeta: return "beta";
    case SweepAxis::kCleanNoise: return "clean_noise";
    case SweepAxis::kDefenseSize: return "defense_size";
    case SweepAxis::kPoolSize: return "pool_size";
    case SweepAxis::kDirichletAlpha: return "dirichlet_alpha";
    case SweepAxis::kTriggerSize: return "trigger_size";
    case SweepAxis::kTransparency: return "transparency";
    case SweepAxis::kParticipants: return "participants";
  }
  return "?";
}

ExperimentConfig sweep_point(const ExperimentConfig& base, SweepAxis axis,
                             const std::string& value, std::size_t index) {
  ExperimentConfig c = base;
  switch (axis) {
    case SweepAxis::kBeta: set_config_value(c, "beta", value); break;
    case SweepAxis::kCleanNoise: set_config_value(c, "clean_mark_noise", value); break;
    case SweepAxis::kDefenseSize: set_config_value(c, "defense_size", value); break;
    case SweepAxis::kPoolSize:
      set_config_value(c, "attacker_schedule", "fixed_pool");
      set_config_value(c, "pool_size", value);
      break;
    case SweepAxis::kDirichletAlpha:
      set_config_value(c, "partition", "dirichlet");
      set_config_value(c, "dirichlet_alpha", value);
      break;
    case SweepAxis::kTriggerSize: set_config_value(c, "trigger_size", value); break;
    case SweepAxis::kTransparency: set_config_value(c, "transparency", value); break;
    case SweepAxis::kParticipants: set_config_value(c, "M", value); break;
  }
  c.sim.master_seed = base.sim.master_seed ^ static_cast<std::uint64_t>(index);
  c.run_name = base.run_name + "_" + to_string(axis) + "_" + std::to_string(index);
  c.sim.validate();
  return c;
}

void write_sweep_csv(std::ostream& os, SweepAxis axis,
                     const std::vector<SweepRow>& rows) {
  os << "axis,value,master_seed,final_ma,final_asr\n";
  for (const auto& r : rows) {
    os << to_string(axis) << ',' << r.value << ',' << r.seed << ','
       << format_double(r.final_ma) << ',' << format_double(r.final_asr) << '\n';
  }
}

void write_ablation_csv(std::ostream& os, const std::vector<RoundMetrics>& frozen,
                        const std::vector<RoundMetrics>& unfrozen,
                        bool record_wallclock) {
  os << "variant," << kMetricsHeader << '\n';
  for (const auto& m : frozen) os << "frozen," << metrics_row(m, record_wallclock) << '\n';
  for (const auto& m : unfrozen) {
    os << "unfrozen," << metrics_row(m, record_wallclock) << '\n';
  }
}

}  // namespace ldsim
