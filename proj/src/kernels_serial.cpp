#include "ldsim/kernels_serial.hpp"

#include <algorithm>
#include <cmath>

#include "network_impl.hpp"

namespace ldsim::serial {

LossGrad accumulate_loss_grad(const NetworkSpec& spec, const ParamVector& params,
                              const Batch& batch,
                              std::span<const LossKind> kinds) {
  LossGrad out{0.0, ParamVector(std::vector<double>(params.size(), 0.0),
                                params.layout_id)};
  detail::Workspace ws;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double t = batch.targets.empty() ? 0.0 : batch.targets[i];
    out.loss += detail::example_loss_grad(spec, params.values, batch.row(i),
                                          batch.labels[i], t, kinds[i],
                                          out.gradient.values, ws);
  }
  return out;
}

std::vector<double> per_example_losses(const NetworkSpec& spec,
                                       const ParamVector& params,
                                       const Batch& batch, LossKind kind) {
  std::vector<double> out;
  detail::Workspace ws;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double t = batch.targets.empty() ? 0.0 : batch.targets[i];
    detail::forward_into(spec, params.values, batch.row(i), ws);
    out.push_back(detail::output_loss(spec, ws, batch.labels[i], t, kind));
  }
  return out;
}

std::vector<int> predict_classes(const NetworkSpec& spec,
                                 const ParamVector& params, const Batch& batch) {
  std::vector<int> out;
  detail::Workspace ws;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::forward_into(spec, params.values, batch.row(i), ws);
    const auto& z = ws.acts.back();
    int best = 0;
    for (std::size_t k = 1; k < z.size(); ++k) {
      if (z[k] > z[best]) best = static_cast<int>(k);
    }
    out.push_back(best);
  }
  return out;
}

std::vector<double> pairwise_sq_distances(Rows rows) {
  const std::size_t n = rows.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        const double t = rows[i][k] - rows[j][k];
        s += t * t;
      }
      d[i * n + j] = s;
      d[j * n + i] = s;
    }
  }
  return d;
}

std::vector<double> weighted_sum(Rows rows, std::span<const double> weights) {
  std::vector<double> out(rows.empty() ? 0 : rows[0].size(), 0.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out[k] += weights[i] * rows[i][k];
    }
  }
  return out;
}

namespace {

std::vector<double> sorted_column(Rows rows, std::size_t k) {
  std::vector<double> col;
  for (const auto& r : rows) col.push_back(r[k]);
  std::sort(col.begin(), col.end());
  return col;
}

double median_of_sorted(const std::vector<double>& c) {
  const std::size_t n = c.size();
  return n % 2 ? c[n / 2] : 0.5 * (c[n / 2 - 1] + c[n / 2]);
}

}  // namespace

std::vector<double> coordinate_median(Rows rows) {
  std::vector<double> out;
  for (std::size_t k = 0; k < (rows.empty() ? 0 : rows[0].size()); ++k) {
    out.push_back(median_of_sorted(sorted_column(rows, k)));
  }
  return out;
}

std::vector<double> coordinate_trimmed_mean(Rows rows, std::size_t trim) {
  std::vector<double> out;
  for (std::size_t k = 0; k < (rows.empty() ? 0 : rows[0].size()); ++k) {
    const auto c = sorted_column(rows, k);
    double s = 0.0;
    for (std::size_t i = trim; i < c.size() - trim; ++i) s += c[i];
    out.push_back(s / static_cast<double>(c.size() - 2 * trim));
  }
  return out;
}

std::vector<double> coordinate_closest_to_median(Rows rows, std::size_t keep) {
  std::vector<double> out;
  for (std::size_t k = 0; k < (rows.empty() ? 0 : rows[0].size()); ++k) {
    const auto c = sorted_column(rows, k);
    const double med = median_of_sorted(c);
    // Repeatedly take the nearest untaken value; lower value on ties.
    std::vector<bool> taken(c.size(), false);
    for (std::size_t t = 0; t < keep; ++t) {
      std::size_t best = c.size();
      for (std::size_t i = 0; i < c.size(); ++i) {
        if (taken[i]) continue;
        if (best == c.size() ||
            std::abs(c[i] - med) < std::abs(c[best] - med)) {
          best = i;
        }
      }
      taken[best] = true;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (taken[i]) s += c[i];
    }
    out.push_back(s / static_cast<double>(keep));
  }
  return out;
}

}  // namespace ldsim::serial
