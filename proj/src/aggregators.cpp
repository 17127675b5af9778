#include "ldsim/aggregators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldsim/error.hpp"
#include "ldsim/kernels.hpp"

namespace ldsim {

namespace {

std::vector<std::span<const double>> rows_of(std::span<const ClientUpdate> updates) {
  std::vector<std::span<const double>> rows;
  rows.reserve(updates.size());
  for (const auto& u : updates) rows.emplace_back(u.params.values);
  return rows;
}

void check_updates(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw InvalidArgument("aggregate: no updates");
  const ParamVector& first = updates[0].params;
  for (const auto& u : updates) {
    if (u.params.layout_id != first.layout_id) {
      throw LayoutMismatch("aggregate: updates have different layouts");
    }
    if (u.params.size() != first.size()) {
      throw DimensionMismatch("aggregate update", first.size(), u.params.size());
    }
  }
}

ParamVector wrap(std::vector<double> v, const ParamVector& like) {
  return ParamVector(std::move(v), like.layout_id);
}

ParamVector plain_mean(std::span<const ClientUpdate> updates,
                       std::span<const std::size_t> which) {
  std::vector<std::span<const double>> rows;
  for (std::size_t i : which) rows.emplace_back(updates[i].params.values);
  std::vector<double> w(rows.size(), 1.0 / static_cast<double>(rows.size()));
  return wrap(kernels::weighted_sum(rows, w), updates[0].params);
}

std::size_t krum_min_n(std::size_t f) { return f + 3; }

}  // namespace

std::string to_string(AggregationRule rule) {
  switch (rule) {
    case AggregationRule::kFedAvg: return "fedavg";
    case AggregationRule::kKrum: return "krum";
    case AggregationRule::kMultiKrum: return "multi_krum";
    case AggregationRule::kBulyan: return "bulyan";
    case AggregationRule::kTrimmedMean: return "trimmed_mean";
    case AggregationRule::kCoordMedian: return "coord_median";
    case AggregationRule::kRfa: return "rfa";
    case AggregationRule::kNdc: return "ndc";
  }
  return "?";
}

AggregationRule parse_rule(const std::string& name) {
  for (auto r : {AggregationRule::kFedAvg, AggregationRule::kKrum,
                 AggregationRule::kMultiKrum, AggregationRule::kBulyan,
                 AggregationRule::kTrimmedMean, AggregationRule::kCoordMedian,
                 AggregationRule::kRfa, AggregationRule::kNdc}) {
    if (to_string(r) == name) return r;
  }
  throw InvalidArgument("unknown aggregation rule '" + name + "'");
}

void AggregatorConfig::validate() const {
  if (!(trim_frac >= 0.0 && trim_frac < 0.5)) {
    throw InvalidArgument("trim_frac must lie in [0, 0.5)");
  }
  if (m < 1) throw InvalidArgument("multi_krum m must be >= 1");
  if (!(rfa_nu > 0.0) || !(rfa_tol >= 0.0)) {
    throw InvalidArgument("rfa nu must be > 0 and tol >= 0");
  }
  if (!(ndc_norm_bound >= 0.0)) throw InvalidArgument("ndc norm bound must be >= 0");
}

ParamVector fedavg(std::span<const ClientUpdate> updates) {
  check_updates(updates);
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.n_examples);
  if (!(total > 0.0)) throw InvalidArgument("fedavg: zero total example count");
  std::vector<double> w;
  for (const auto& u : updates) w.push_back(static_cast<double>(u.n_examples) / total);
  return wrap(kernels::weighted_sum(rows_of(updates), w), updates[0].params);
}

std::vector<double> krum_scores(std::span<const ClientUpdate> updates,
                                std::size_t f) {
  check_updates(updates);
  const std::size_t n = updates.size();
  if (n < krum_min_n(f)) throw ArityError("krum", krum_min_n(f), n);
  const std::size_t k = n - f - 2;
  const auto rows = rows_of(updates);
  const std::vector<double> d = kernels::pairwise_sq_distances(rows);
  std::vector<double> scores(n);
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) row.push_back(d[i * n + j]);
    }
    std::sort(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += row[j];
    scores[i] = s;
  }
  return scores;
}

std::vector<std::size_t> krum_select(std::span<const ClientUpdate> updates,
                                     std::size_t f, std::size_t k) {
  const std::vector<double> scores = krum_scores(updates, f);
  std::vector<std::size_t> idx(updates.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

ParamVector rfa(std::span<const ClientUpdate> updates, std::size_t max_iter,
                double tol, double nu, WeiszfeldTrace* trace) {
  check_updates(updates);
  const std::size_t n = updates.size();
  const std::size_t dim = updates[0].params.size();
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.n_examples);
  std::vector<double> alpha(n);
  for (std::size_t i = 0; i < n; ++i) {
    alpha[i] = static_cast<double>(updates[i].n_examples) / total;
  }
  const auto rows = rows_of(updates);
  std::vector<double> z = kernels::weighted_sum(rows, alpha);

  auto distances = [&](const std::vector<double>& p) {
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double t = p[k] - rows[i][k];
        s += t * t;
      }
      dist[i] = std::sqrt(s);
    }
    return dist;
  };
  auto objective = [&](const std::vector<double>& dist) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += alpha[i] * dist[i];
    return s;
  };

  std::vector<double> dist = distances(z);
  if (trace) {
    trace->objective = {objective(dist)};
    trace->iterations = 0;
  }
  std::vector<double> beta(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double bsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      beta[i] = alpha[i] / std::max(nu, dist[i]);
      bsum += beta[i];
    }
    for (double& b : beta) b /= bsum;
    std::vector<double> next = kernels::weighted_sum(rows, beta);
    double step = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double t = next[k] - z[k];
      step += t * t;
    }
    z.swap(next);
    dist = distances(z);
    if (trace) {
      trace->objective.push_back(objective(dist));
      trace->iterations = it + 1;
    }
    if (std::sqrt(step) < tol) break;
  }
  return wrap(std::move(z), updates[0].params);
}

ParamVector aggregate(const AggregatorConfig& cfg, const ParamVector& global_prev,
                      std::span<const ClientUpdate> updates) {
  cfg.validate();
  check_updates(updates);
  const std::size_t n = updates.size();
  switch (cfg.rule) {
    case AggregationRule::kFedAvg:
      return fedavg(updates);

    case AggregationRule::kKrum: {
      if (n < krum_min_n(cfg.f)) throw ArityError("krum", krum_min_n(cfg.f), n);
      return updates[krum_select(updates, cfg.f, 1)[0]].params;
    }

    case AggregationRule::kMultiKrum: {
      const std::size_t need = std::max(krum_min_n(cfg.f), cfg.m);
      if (n < need) throw ArityError("multi_krum", need, n);
      const auto sel = krum_select(updates, cfg.f, cfg.m);
      return plain_mean(updates, sel);
    }

    case AggregationRule::kBulyan: {
      const std::size_t need = 4 * cfg.f + 3;
      if (n < need) throw ArityError("bulyan", need, n);
      const std::size_t theta = n - 2 * cfg.f;
      const std::size_t keep = theta - 2 * cfg.f;
      const auto sel = krum_select(updates, cfg.f, theta);
      std::vector<std::span<const double>> rows;
      for (std::size_t i : sel) rows.emplace_back(updates[i].params.values);
      return wrap(kernels::coordinate_closest_to_median(rows, keep),
                  updates[0].params);
    }

    case AggregationRule::kTrimmedMean: {
      const auto trim = static_cast<std::size_t>(
          std::floor(cfg.trim_frac * static_cast<double>(n)));
      return wrap(kernels::coordinate_trimmed_mean(rows_of(updates), trim),
                  updates[0].params);
    }

    case AggregationRule::kCoordMedian:
      return wrap(kernels::coordinate_median(rows_of(updates)), updates[0].params);

    case AggregationRule::kRfa:
      return rfa(updates, cfg.rfa_max_iter, cfg.rfa_tol, cfg.rfa_nu);

    case AggregationRule::kNdc: {
      std::vector<ClientUpdate> clipped(updates.begin(), updates.end());
      for (auto& u : clipped) {
        const double d = l2_dist(u.params, global_prev);
        if (d > cfg.ndc_norm_bound) {
          const double s = cfg.ndc_norm_bound / d;
          u.params = axpy(s, axpy(-1.0, global_prev, u.params), global_prev);
        }
      }
      return fedavg(clipped);
    }
  }
  throw InvalidArgument("unknown aggregation rule");
}

}  // namespace ldsim
