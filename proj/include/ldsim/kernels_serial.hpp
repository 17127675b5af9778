#pragma once

// Serial reference versions of the kernels in kernels.hpp. Straight loops,
// no chunking; kept for testing and benchmarking only.

#include "ldsim/kernels.hpp"

namespace ldsim::serial {

using kernels::Rows;

LossGrad accumulate_loss_grad(const NetworkSpec& spec, const ParamVector& params,
                              const Batch& batch,
                              std::span<const LossKind> kinds);
std::vector<double> per_example_losses(const NetworkSpec& spec,
                                       const ParamVector& params,
                                       const Batch& batch, LossKind kind);
std::vector<int> predict_classes(const NetworkSpec& spec,
                                 const ParamVector& params, const Batch& batch);
std::vector<double> pairwise_sq_distances(Rows rows);
std::vector<double> weighted_sum(Rows rows, std::span<const double> weights);
std::vector<double> coordinate_median(Rows rows);
std::vector<double> coordinate_trimmed_mean(Rows rows, std::size_t trim);
std::vector<double> coordinate_closest_to_median(Rows rows, std::size_t keep);

}  // namespace ldsim::serial
