#pragma once

// Flat `key = value` experiment configuration. Blank lines and lines starting
// with '#' are ignored; every key is optional and has a default; unknown or
// repeated keys are errors reported with their line number.

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "ldsim/error.hpp"
#include "ldsim/sim.hpp"

namespace ldsim {

struct ExperimentConfig {
  std::string run_name = "default";
  SimConfig sim;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  // wallclock_ms is written as 0 unless set, keeping metrics.csv reproducible.
  bool record_wallclock = false;
};

class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& msg);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

ExperimentConfig parse_config(std::istream& is, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

// Sets one key from its textual value (same syntax as the file).
void set_config_value(ExperimentConfig& cfg, const std::string& key,
                      const std::string& value);

// Every key in schema order.
std::vector<std::string> config_keys();

// Every key with its current value, one `key = value` per line; parsing the
// result reproduces `cfg`.
std::string resolved_config(const ExperimentConfig& cfg);

}  // namespace ldsim
