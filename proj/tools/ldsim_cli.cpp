// ldsim: run, sweep and ablate federated-learning experiments.
//
//   ldsim run    --config exp.cfg [--out out] [--seed N] [--quiet]
//   ldsim sweep  --config exp.cfg --axis beta --values 0.1,0.2,0.3
//   ldsim ablate --config exp.cfg --halt-at 100
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ldsim/config.hpp"
#include "ldsim/error.hpp"
#include "ldsim/io.hpp"
#include "ldsim/report.hpp"

namespace fs = std::filesystem;
using namespace ldsim;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (key = value lines)")
      ->required();
  sub->add_option("--out", c.out, "output root; results go to <out>/<run_name>");
  sub->add_option("--seed", c.seed, "override master_seed");
  sub->add_flag("--quiet", c.quiet, "no progress output");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.sim.master_seed = *c.seed;
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  return os;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = load(c);
  run_to_directory(cfg, fs::path(c.out) / cfg.run_name, c.quiet ? nullptr : &std::cerr);
  return 0;
}

int cmd_sweep(const Common& c, const std::string& axis_name,
              const std::string& values) {
  const ExperimentConfig base = load(c);
  SweepAxis axis;
  try {
    axis = parse_axis(axis_name);
  } catch (const InvalidArgument& e) {
    throw ConfigError("--axis", 0, e.what());
  }
  std::vector<std::string> vals;
  for (const auto& v : split(values, ',')) {
    if (!trim(v).empty()) vals.emplace_back(trim(v));
  }
  if (vals.empty()) throw ConfigError("--values", 0, "empty value list");
  std::vector<ExperimentConfig> points;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    try {
      points.push_back(sweep_point(base, axis, vals[i], i));
    } catch (const InvalidArgument& e) {
      throw ConfigError("--values", 0, "value '" + vals[i] + "': " + e.what());
    }
  }

  const fs::path dir = fs::path(c.out) / base.run_name;
  fs::create_directories(dir);
  {
    auto os = open_out(dir / "resolved_config");
    os << resolved_config(base);
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto trace = run_to_directory(points[i], dir / ("point_" + std::to_string(i)),
                                        c.quiet ? nullptr : &std::cerr);
    SweepRow r{vals[i], points[i].sim.master_seed, 0.0, 0.0};
    if (!trace.empty()) {
      r.final_ma = trace.back().ma;
      r.final_asr = trace.back().asr;
    }
    rows.push_back(r);
  }
  auto os = open_out(dir / "sweep.csv");
  write_sweep_csv(os, axis, rows);
  return 0;
}

int cmd_ablate(const Common& c, std::size_t halt_at) {
  const ExperimentConfig base = load(c);
  if (halt_at >= base.sim.T) {
    throw ConfigError("--halt-at", 0, "must be below T = " + std::to_string(base.sim.T));
  }
  if (base.sim.defense != DefenseKind::kLearnDefend) {
    throw ConfigError(c.config, 0, "ablate needs defense = learndefend");
  }
  ExperimentConfig frozen = base, unfrozen = base;
  frozen.sim.halt_updates_at = halt_at;
  frozen.run_name = base.run_name + "_frozen";
  unfrozen.sim.halt_updates_at.reset();
  unfrozen.run_name = base.run_name + "_unfrozen";

  const fs::path dir = fs::path(c.out) / base.run_name;
  std::ostream* log = c.quiet ? nullptr : &std::cerr;
  const auto tf = run_to_directory(frozen, dir / "frozen", log);
  const auto tu = run_to_directory(unfrozen, dir / "unfrozen", log);
  {
    auto os = open_out(dir / "resolved_config");
    os << resolved_config(base);
  }
  auto os = open_out(dir / "ablation.csv");
  write_ablation_csv(os, tf, tu, base.record_wallclock);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated-learning simulator with a learned aggregation defense"};
  app.require_subcommand(1);

  Common run_opts, sweep_opts, ablate_opts;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_opts);

  auto* sweep = app.add_subcommand("sweep", "one run per value of a config axis");
  add_common(sweep, sweep_opts);
  std::string axis, values;
  sweep->add_option("--axis", axis,
                    "beta|clean_noise|defense_size|pool_size|dirichlet_alpha|"
                    "trigger_size|transparency|participants")
      ->required();
  sweep->add_option("--values", values, "comma-separated axis values")->required();

  auto* ablate = app.add_subcommand("ablate", "paired frozen/unfrozen defense runs");
  add_common(ablate, ablate_opts);
  std::size_t halt_at = 0;
  ablate->add_option("--halt-at", halt_at, "last round with defense updates")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*sweep) return cmd_sweep(sweep_opts, axis, values);
    if (*ablate) return cmd_ablate(ablate_opts, halt_at);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
