#include "ldsim/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "network_impl.hpp"

namespace ldsim::kernels {
namespace {

// Parallel regions below this many work items run on one thread.
constexpr std::size_t kMinParallel = 64;

double targets_at(const Batch& b, std::size_t i) {
  return b.targets.empty() ? 0.0 : b.targets[i];
}

}  // namespace

LossGrad accumulate_loss_grad(const NetworkSpec& spec, const ParamVector& params,
                              const Batch& batch,
                              std::span<const LossKind> kinds) {
  const std::size_t n = batch.size();
  const std::size_t P = params.size();
  const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> chunk_loss(n_chunks, 0.0);
  std::vector<std::vector<double>> chunk_grad(n_chunks);

#pragma omp parallel if (n_chunks > 1)
  {
    detail::Workspace ws;
#pragma omp for schedule(static)
    for (std::size_t c = 0; c < n_chunks; ++c) {
      std::vector<double>& g = chunk_grad[c];
      g.assign(P, 0.0);
      const std::size_t e = std::min(n, (c + 1) * kChunk);
      double loss = 0.0;
      for (std::size_t i = c * kChunk; i < e; ++i) {
        loss += detail::example_loss_grad(spec, params.values, batch.row(i),
                                          batch.labels[i], targets_at(batch, i),
                                          kinds[i], g, ws);
      }
      chunk_loss[c] = loss;
    }
  }

  LossGrad out{0.0, ParamVector(std::vector<double>(P, 0.0), params.layout_id)};
  for (std::size_t c = 0; c < n_chunks; ++c) {
    out.loss += chunk_loss[c];
    for (std::size_t j = 0; j < P; ++j) out.gradient[j] += chunk_grad[c][j];
  }
  return out;
}

std::vector<double> per_example_losses(const NetworkSpec& spec,
                                       const ParamVector& params,
                                       const Batch& batch, LossKind kind) {
  const std::size_t n = batch.size();
  std::vector<double> out(n);
#pragma omp parallel if (n >= kMinParallel)
  {
    detail::Workspace ws;
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      detail::forward_into(spec, params.values, batch.row(i), ws);
      out[i] = detail::output_loss(spec, ws, batch.labels[i],
                                   targets_at(batch, i), kind);
    }
  }
  return out;
}

std::vector<int> predict_classes(const NetworkSpec& spec,
                                 const ParamVector& params, const Batch& batch) {
  const std::size_t n = batch.size();
  std::vector<int> out(n);
#pragma omp parallel if (n >= kMinParallel)
  {
    detail::Workspace ws;
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      detail::forward_into(spec, params.values, batch.row(i), ws);
      const auto& z = ws.acts.back();
      out[i] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    }
  }
  return out;
}

std::vector<double> pairwise_sq_distances(Rows rows) {
  const std::size_t n = rows.size();
  std::vector<double> d(n * n, 0.0);
  const std::size_t dim = n ? rows[0].size() : 0;
#pragma omp parallel for schedule(static) if (n * dim >= 4096)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      // Symmetric entries are computed with the lower index first so that
      // d[i][j] and d[j][i] are bit-identical.
      const auto& a = rows[std::min(i, j)];
      const auto& b = rows[std::max(i, j)];
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double t = a[k] - b[k];
        s += t * t;
      }
      d[i * n + j] = s;
    }
  }
  return d;
}

std::vector<double> weighted_sum(Rows rows, std::span<const double> weights) {
  const std::size_t dim = rows.empty() ? 0 : rows[0].size();
  std::vector<double> out(dim, 0.0);
#pragma omp parallel for schedule(static) if (dim >= 4096)
  for (std::size_t k = 0; k < dim; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) s += weights[i] * rows[i][k];
    out[k] = s;
  }
  return out;
}

std::vector<double> coordinate_median(Rows rows) {
  const std::size_t n = rows.size();
  const std::size_t dim = n ? rows[0].size() : 0;
  std::vector<double> out(dim);
#pragma omp parallel if (dim >= 1024)
  {
    std::vector<double> col(n);
#pragma omp for schedule(static)
    for (std::size_t k = 0; k < dim; ++k) {
      for (std::size_t i = 0; i < n; ++i) col[i] = rows[i][k];
      std::sort(col.begin(), col.end());
      out[k] = (n % 2 == 1) ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
    }
  }
  return out;
}

std::vector<double> coordinate_trimmed_mean(Rows rows, std::size_t trim) {
  const std::size_t n = rows.size();
  const std::size_t dim = n ? rows[0].size() : 0;
  std::vector<double> out(dim);
  const double denom = static_cast<double>(n - 2 * trim);
#pragma omp parallel if (dim >= 1024)
  {
    std::vector<double> col(n);
#pragma omp for schedule(static)
    for (std::size_t k = 0; k < dim; ++k) {
      for (std::size_t i = 0; i < n; ++i) col[i] = rows[i][k];
      std::sort(col.begin(), col.end());
      double s = 0.0;
      for (std::size_t i = trim; i < n - trim; ++i) s += col[i];
      out[k] = s / denom;
    }
  }
  return out;
}

std::vector<double> coordinate_closest_to_median(Rows rows, std::size_t keep) {
  const std::size_t n = rows.size();
  const std::size_t dim = n ? rows[0].size() : 0;
  std::vector<double> out(dim);
#pragma omp parallel if (dim >= 1024)
  {
    std::vector<double> col(n);
    std::vector<std::size_t> idx(n);
#pragma omp for schedule(static)
    for (std::size_t k = 0; k < dim; ++k) {
      for (std::size_t i = 0; i < n; ++i) col[i] = rows[i][k];
      std::sort(col.begin(), col.end());
      const double med =
          (n % 2 == 1) ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(col[a] - med) < std::abs(col[b] - med);
      });
      std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
      double s = 0.0;
      for (std::size_t i = 0; i < keep; ++i) s += col[idx[i]];
      out[k] = s / static_cast<double>(keep);
    }
  }
  return out;
}

}  // namespace ldsim::kernels
