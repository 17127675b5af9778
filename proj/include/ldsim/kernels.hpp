#pragma once

// Data-parallel inner loops (OpenMP). Every kernel has a plain serial twin in
// kernels_serial.hpp used by the tests and the benchmark.
//
// Results never depend on the thread count: per-coordinate kernels write
// disjoint outputs, and batch reductions sum fixed-size example chunks in
// chunk order.

#include <cstddef>
#include <span>
#include <vector>

#include "ldsim/param_math.hpp"

namespace ldsim::kernels {

// Examples per reduction chunk in accumulate_loss_grad.
inline constexpr std::size_t kChunk = 32;

using Rows = std::span<const std::span<const double>>;

// Summed loss and gradient with a per-example loss kind. No shape checks.
LossGrad accumulate_loss_grad(const NetworkSpec& spec, const ParamVector& params,
                              const Batch& batch,
                              std::span<const LossKind> kinds);

std::vector<double> per_example_losses(const NetworkSpec& spec,
                                       const ParamVector& params,
                                       const Batch& batch, LossKind kind);

std::vector<int> predict_classes(const NetworkSpec& spec,
                                 const ParamVector& params, const Batch& batch);

// n x n row-major matrix of squared l2 distances.
std::vector<double> pairwise_sq_distances(Rows rows);

// sum_i w_i * rows[i], summed in row order for every coordinate.
std::vector<double> weighted_sum(Rows rows, std::span<const double> weights);

// Per-coordinate median (mean of the middle two for even n).
std::vector<double> coordinate_median(Rows rows);

// Per-coordinate mean after dropping the `trim` smallest and largest values.
std::vector<double> coordinate_trimmed_mean(Rows rows, std::size_t trim);

// Per-coordinate mean of the `keep` values closest to the coordinate median
// (ties by value order).
std::vector<double> coordinate_closest_to_median(Rows rows, std::size_t keep);

}  // namespace ldsim::kernels
