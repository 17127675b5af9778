#pragma once

// Single-example forward/backward used by the batch kernels. Internal.

#include <span>
#include <vector>

#include "ldsim/param_math.hpp"

namespace ldsim::detail {

// Scratch buffers for one example; reused across calls to avoid allocation.
struct Workspace {
  std::vector<std::vector<double>> acts;  // acts[0] = input, acts[L] = logits
  std::vector<double> probs;
  std::vector<double> delta;
  std::vector<double> delta_prev;
};

void forward_into(const NetworkSpec& spec, std::span<const double> params,
                  std::span<const double> x, Workspace& ws);

// Loss of one example given the network output already in `ws`.
double output_loss(const NetworkSpec& spec, const Workspace& ws, int label,
                   double target, LossKind kind);

// Runs forward, adds d loss / d params into `grad_accum` (when non-empty) and
// returns the loss.
double example_loss_grad(const NetworkSpec& spec, std::span<const double> params,
                         std::span<const double> x, int label, double target,
                         LossKind kind, std::span<double> grad_accum,
                         Workspace& ws);

}  // namespace ldsim::detail
