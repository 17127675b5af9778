#pragma once

// CSV emission and the run/sweep/ablate drivers behind the command line.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ldsim/config.hpp"
#include "ldsim/sim.hpp"

namespace ldsim {

inline constexpr const char* kMetricsHeader =
    "round,ma,asr,attacker_weight,mean_honest_weight,ci_diff,"
    "n_true_poison_in_ddp,wallclock_ms";

// One CSV row (no newline) for `m`; absent values are empty fields.
std::string metrics_row(const RoundMetrics& m, bool record_wallclock);
void write_metrics_csv(std::ostream& os, const std::vector<RoundMetrics>& trace,
                       bool record_wallclock);

// Plain model snapshot for runs without learned-defense state.
void save_model(std::ostream& os, std::size_t round, const ParamVector& global);

// Runs the experiment, writing metrics.csv, resolved_config and
// checkpoints/ into `dir`. Progress lines go to `log` when non-null.
std::vector<RoundMetrics> run_to_directory(const ExperimentConfig& cfg,
                                           const std::filesystem::path& dir,
                                           std::ostream* log);

enum class SweepAxis {
  kBeta,
  kCleanNoise,
  kDefenseSize,
  kPoolSize,
  kDirichletAlpha,
  kTriggerSize,
  kTransparency,
  kParticipants,
};

SweepAxis parse_axis(const std::string& name);
std::string to_string(SweepAxis axis);

// Config for sweep point `index` with axis value `value`: the axis key is set
// and master_seed becomes base_seed XOR index. Throws InvalidArgument when the
// value does not fit the base config.
ExperimentConfig sweep_point(const ExperimentConfig& base, SweepAxis axis,
                             const std::string& value, std::size_t index);

struct SweepRow {
  std::string value;
  std::uint64_t seed = 0;
  double final_ma = 0.0;
  double final_asr = 0.0;
};

void write_sweep_csv(std::ostream& os, SweepAxis axis,
                     const std::vector<SweepRow>& rows);

void write_ablation_csv(std::ostream& os, const std::vector<RoundMetrics>& frozen,
                        const std::vector<RoundMetrics>& unfrozen,
                        bool record_wallclock);

}  // namespace ldsim
