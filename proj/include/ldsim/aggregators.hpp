#pragma once

// Fixed robust-aggregation baselines. They only ever see submitted parameter
// vectors and example counts.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ldsim/param_math.hpp"

namespace ldsim {

struct ClientUpdate {
  ParamVector params;
  std::size_t n_examples = 1;
};

enum class AggregationRule {
  kFedAvg,
  kKrum,
  kMultiKrum,
  kBulyan,
  kTrimmedMean,
  kCoordMedian,
  kRfa,
  kNdc,
};

std::string to_string(AggregationRule rule);
AggregationRule parse_rule(const std::string& name);

struct AggregatorConfig {
  AggregationRule rule = AggregationRule::kFedAvg;
  std::size_t f = 1;            // assumed byzantine count (Krum family)
  std::size_t m = 5;            // multi_krum
  double trim_frac = 0.1;       // trimmed_mean
  std::size_t rfa_max_iter = 100;
  double rfa_tol = 1e-8;
  double rfa_nu = 1e-6;
  double ndc_norm_bound = 2.0;

  void validate() const;
};

ParamVector aggregate(const AggregatorConfig& cfg, const ParamVector& global_prev,
                      std::span<const ClientUpdate> updates);

// Individual rules, exposed for testing.
ParamVector fedavg(std::span<const ClientUpdate> updates);

// Krum score of each update: sum of squared distances to its n - f - 2
// nearest peers.
std::vector<double> krum_scores(std::span<const ClientUpdate> updates,
                                std::size_t f);
// Indices of the k best Krum scores (ties by submission index).
std::vector<std::size_t> krum_select(std::span<const ClientUpdate> updates,
                                     std::size_t f, std::size_t k);

struct WeiszfeldTrace {
  std::vector<double> objective;  // sum_i w_i ||z_k - u_i|| per iterate
  std::size_t iterations = 0;
};

// Smoothed Weiszfeld geometric median, weights proportional to example counts.
ParamVector rfa(std::span<const ClientUpdate> updates, std::size_t max_iter,
                double tol, double nu, WeiszfeldTrace* trace = nullptr);

}  // namespace ldsim
