#pragma once

// Synthetic classification tasks, backdoor constructions, client partitioning
// and defense-dataset assembly.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "ldsim/param_math.hpp"
#include "ldsim/rng.hpp"

namespace ldsim {

// floor(x + 0.5); every fraction-to-count conversion goes through this.
std::size_t round_half_up(double x);

struct TaskSpec {
  std::size_t n_classes = 4;
  std::size_t dim = 16;
  double cluster_separation = 4.0;
  double cluster_std = 0.7;
  std::size_t n_train = 5000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 1;

  void validate() const;
};

// Gaussian cluster per class. Centre k sits at (sep / sqrt 2) * e_k, so every
// pair of centres is exactly `cluster_separation` apart and coordinates
// [n_classes, dim) carry only noise.
struct Task {
  Batch train;
  Batch test;
  std::vector<std::vector<double>> centers;
};

Task make_task(const TaskSpec& spec);

enum class BackdoorKind { kLabelFlip, kTriggerPatch, kEdgeCase };

struct BackdoorSpec {
  BackdoorKind kind = BackdoorKind::kTriggerPatch;
  int source_class = 1;
  int target_class = 2;
  std::vector<std::size_t> patch_support;
  std::vector<double> patch_values;
  double transparency = 0.8;
  double edge_offset = 6.0;
  // Off-manifold cluster for kEdgeCase (filled by make_backdoor).
  std::vector<double> edge_center;
  double edge_std = 0.7;

  void validate(std::size_t dim, std::size_t n_classes) const;
};

// Desk-scale backdoor over `task`: the trigger patch covers the last
// `trigger_size` coordinates with value `trigger_value`; the edge-case cluster
// sits `edge_offset` from the source centre along a seeded noise direction.
BackdoorSpec make_backdoor(BackdoorKind kind, const Task& task,
                           const TaskSpec& spec, int source, int target,
                           std::size_t trigger_size, double trigger_value,
                           double transparency, double edge_offset,
                           std::uint64_t seed);

struct Example {
  std::vector<double> x;
  int label = 0;
};

// Applies the backdoor to one example:
//   label_flip    : label := target, input untouched
//   trigger_patch : x_i := (1 - tau) x_i + tau p_i on the patch support
//   edge_case     : x ~ N(edge_center, edge_std^2 I), label := target
// Throws when a label-preserving construction receives a non-source label.
Example poison(std::span<const double> x, int label, const BackdoorSpec& spec,
               Rng& rng);

// Poisoned copies of every source-class example of `data` (train or test).
Batch make_attack_set(const Batch& data, const BackdoorSpec& spec,
                      std::uint64_t seed);

enum class PartitionKind { kIid, kDirichlet };

struct PartitionScheme {
  PartitionKind kind = PartitionKind::kIid;
  double alpha = 1.0;
};

struct ClientPartition {
  std::vector<std::vector<std::size_t>> assignments;
  PartitionScheme scheme;
};

// iid: shuffled equal split (sizes differ by at most one).
// dirichlet: per class, shares ~ Dir(alpha 1_K); a draw that leaves some
// client empty is redrawn.
ClientPartition partition_clients(const Batch& train, std::size_t K,
                                  const PartitionScheme& scheme,
                                  std::uint64_t seed);

// Split of the defense dataset into predicted-poison (D_dp) and
// predicted-clean (D_dc) indices.
struct DefensePartition {
  std::vector<std::size_t> poison;
  std::vector<std::size_t> clean;
  bool operator==(const DefensePartition&) const = default;
};

// What a defense may see: examples, the marked-clean subset and the current
// partition. Ground-truth poison flags are deliberately not part of it.
struct DefenseDataset {
  Batch examples;
  std::vector<std::size_t> clean_marked;
  double beta = 0.2;
  DefensePartition partition;

  std::size_t size() const { return examples.size(); }
  // Throws unless the partition is a disjoint cover and clean_marked is a
  // subset of the example indices.
  void validate() const;
};

struct DefenseBuildOptions {
  std::size_t n_total = 500;
  double poison_frac = 0.2;
  double clean_marked_frac = 0.2;
  double clean_mark_noise = 0.0;
  double beta = 0.2;
};

struct BuiltDefense {
  DefenseDataset dataset;
  std::vector<bool> true_poison;  // evaluation only
};

// round(poison_frac n) poisoned copies of source-class training examples plus
// clean training examples, shuffled. D_clean holds round(clean_marked_frac n)
// indices of which round(clean_mark_noise |D_clean|) are in fact poisoned. The
// initial partition puts the first round(beta n) indices in D_dp.
BuiltDefense build_defense_dataset(const Batch& train,
                                   const BackdoorSpec& backdoor,
                                   const DefenseBuildOptions& opts,
                                   std::uint64_t seed);

// Column CSV: header x0..x{d-1},label[,target]; floats shortest round-trip.
void write_batch_csv(std::ostream& os, const Batch& batch);
Batch read_batch_csv(std::istream& is);

// Defense dataset CSV: batch columns plus clean_marked,in_ddp,true_poison.
void write_defense_csv(std::ostream& os, const BuiltDefense& defense);

}  // namespace ldsim
