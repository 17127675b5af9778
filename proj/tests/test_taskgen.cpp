#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "ldsim/error.hpp"
#include "ldsim/taskgen.hpp"
#include "test_util.hpp"

using namespace ldsim;

namespace {

double test_accuracy(const NetworkSpec& s, const ParamVector& p, const Batch& test) {
  const auto pred = predict(s, p, test);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) ok += pred[i] == test.labels[i];
  return static_cast<double>(ok) / static_cast<double>(test.size());
}

ParamVector train_central(const NetworkSpec& s, const Batch& train, std::size_t epochs) {
  SgdOptions o;
  o.epochs = epochs;
  o.lr = {0.05, 1.0};
  return sgd_train(s, init_params(s, 3), train, o, 4);
}

Task default_task() { return make_task(TaskSpec{}); }

BackdoorSpec default_patch(const Task& task) {
  return make_backdoor(BackdoorKind::kTriggerPatch, task, TaskSpec{}, 1, 2, 4, 3.0,
                       0.8, 6.0, 9);
}

}  // namespace

TEST(RoundHalfUp, Values) {
  EXPECT_EQ(round_half_up(0.5), 1u);
  EXPECT_EQ(round_half_up(2.4999), 2u);
  EXPECT_EQ(round_half_up(15.0), 15u);
  EXPECT_THROW(round_half_up(-1.0), InvalidArgument);
}

TEST(MakeTask, DeterministicAndBalanced) {
  TaskSpec s;
  const Task a = make_task(s), b = make_task(s);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  s.seed = 2;
  EXPECT_NE(make_task(s).train, a.train);

  for (const Batch* batch : {&a.train, &a.test}) {
    std::map<int, std::size_t> hist;
    for (int y : batch->labels) ++hist[y];
    ASSERT_EQ(hist.size(), 4u);
    auto [lo, hi] = std::minmax_element(hist.begin(), hist.end(), [](auto& x, auto& y) {
      return x.second < y.second;
    });
    EXPECT_LE(hi->second - lo->second, 1u);
  }
}

TEST(MakeTask, CentresPairwiseSeparated) {
  const Task t = default_task();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < 16; ++k) {
        d2 += (t.centers[i][k] - t.centers[j][k]) * (t.centers[i][k] - t.centers[j][k]);
      }
      EXPECT_NEAR(std::sqrt(d2), 4.0, 1e-12);
    }
  }
}

TEST(MakeTask, Validation) {
  TaskSpec s;
  s.n_classes = 17;
  EXPECT_THROW(make_task(s), InvalidArgument);
  s = {};
  s.n_classes = 1;
  EXPECT_THROW(make_task(s), InvalidArgument);
  s = {};
  s.cluster_separation = 0.0;
  EXPECT_THROW(make_task(s), InvalidArgument);
}

TEST(MakeTask, DefaultSpecIsLearnableCentrally) {
  const Task t = default_task();
  const NetworkSpec s{{16, 32, 4}};
  EXPECT_GE(test_accuracy(s, train_central(s, t.train, 5), t.test), 0.95);
}

TEST(MakeTask, HugeSeparationIsLinearlySeparable) {
  TaskSpec spec;
  spec.cluster_separation = 200.0;
  spec.n_train = 1000;
  const Task t = make_task(spec);
  // Nearest-centre rule as a linear classifier: logit_k = c_k.x - |c_k|^2 / 2.
  const NetworkSpec s{{16, 4}};
  ParamVector p = ParamVector::zeros(s);
  for (std::size_t k = 0; k < 4; ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      p[k * 16 + j] = t.centers[k][j];
      sq += t.centers[k][j] * t.centers[k][j];
    }
    p[64 + k] = -0.5 * sq;
  }
  EXPECT_EQ(test_accuracy(s, p, t.test), 1.0);
  EXPECT_EQ(test_accuracy(s, p, t.train), 1.0);
}

TEST(Poison, LabelFlipKeepsInput) {
  BackdoorSpec b;
  b.kind = BackdoorKind::kLabelFlip;
  Rng rng(1);
  const std::vector<double> v{0.5, -1.0, 2.0};
  const Example e = poison(v, 1, b, rng);
  EXPECT_EQ(e.x, v);
  EXPECT_EQ(e.label, 2);
}

TEST(Poison, TriggerBlend) {
  BackdoorSpec b;
  b.patch_support = {1, 2};
  b.patch_values = {0.0, 7.0};
  Rng rng(1);
  const std::vector<double> v{1.0, 1.0, 1.0, 1.0};
  Example e = poison(v, 1, b, rng);
  EXPECT_DOUBLE_EQ(e.x[1], 0.2);
  EXPECT_EQ(e.x[0], 1.0);
  EXPECT_EQ(e.x[3], 1.0);
  EXPECT_EQ(e.label, 2);
  b.transparency = 1.0;
  e = poison(v, 1, b, rng);
  EXPECT_EQ(e.x[1], 0.0);
  EXPECT_EQ(e.x[2], 7.0);
}

TEST(Poison, RejectsNonSourceLabel) {
  BackdoorSpec b;
  b.patch_support = {0};
  b.patch_values = {1.0};
  Rng rng(1);
  const std::vector<double> v{1.0, 1.0};
  EXPECT_THROW(poison(v, 0, b, rng), InvalidArgument);
  b.kind = BackdoorKind::kLabelFlip;
  EXPECT_THROW(poison(v, 3, b, rng), InvalidArgument);
}

TEST(Poison, BackdoorValidation) {
  BackdoorSpec b;
  b.target_class = b.source_class;
  b.patch_support = {0};
  b.patch_values = {1.0};
  EXPECT_THROW(b.validate(4, 4), InvalidArgument);
  b.target_class = 2;
  b.patch_support.clear();
  b.patch_values.clear();
  EXPECT_THROW(b.validate(4, 4), InvalidArgument);
}

TEST(Poison, PatchTouchesOnlySupportAndIsDeterministic) {
  const Task t = default_task();
  const BackdoorSpec b = default_patch(t);
  const Batch a1 = make_attack_set(t.train, b, 5);
  EXPECT_EQ(a1, make_attack_set(t.train, b, 5));
  std::size_t j = 0;
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    if (t.train.labels[i] != 1) continue;
    const auto orig = t.train.row(i);
    const auto pois = a1.row(j);
    EXPECT_EQ(a1.labels[j], 2);
    for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(orig[k], pois[k]);
    ++j;
  }
  EXPECT_EQ(j, a1.size());
}

TEST(Poison, EdgeCaseDrawsNearOffsetCentre) {
  const Task t = default_task();
  const BackdoorSpec b = make_backdoor(BackdoorKind::kEdgeCase, t, TaskSpec{}, 1, 2,
                                       4, 3.0, 0.8, 6.0, 9);
  double d2 = 0.0;
  for (std::size_t k = 0; k < 16; ++k) {
    d2 += (b.edge_center[k] - t.centers[1][k]) * (b.edge_center[k] - t.centers[1][k]);
  }
  EXPECT_NEAR(std::sqrt(d2), 6.0, 1e-12);
  const Batch a = make_attack_set(t.train, b, 1);
  std::vector<double> mean(16, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < 16; ++k) mean[k] += a.row(i)[k] / a.size();
  }
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(mean[k], b.edge_center[k], 0.15);
}

TEST(Partition, IidSingleClientOwnsEverything) {
  const Task t = default_task();
  const auto p = partition_clients(t.train, 1, {}, 1);
  ASSERT_EQ(p.assignments.size(), 1u);
  EXPECT_EQ(p.assignments[0].size(), t.train.size());
  EXPECT_THROW(partition_clients(t.train, t.train.size() + 1, {}, 1), InvalidArgument);
}

class PartitionCover : public ::testing::TestWithParam<double> {};

TEST_P(PartitionCover, DisjointCover) {
  const Task t = default_task();
  const double alpha = GetParam();
  PartitionScheme sch{alpha > 0 ? PartitionKind::kDirichlet : PartitionKind::kIid,
                      alpha > 0 ? alpha : 1.0};
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto p = partition_clients(t.train, 50, sch, seed);
    std::vector<int> seen(t.train.size(), 0);
    std::size_t lo = t.train.size(), hi = 0;
    for (const auto& a : p.assignments) {
      EXPECT_FALSE(a.empty());
      lo = std::min(lo, a.size());
      hi = std::max(hi, a.size());
      for (auto i : a) ++seen[i];
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    if (sch.kind == PartitionKind::kIid) EXPECT_LE(hi - lo, 1u);
  }
}

INSTANTIATE_TEST_SUITE_P(Alphas, PartitionCover,
                         ::testing::Values(0.0, 0.1, 1.0, 1000.0));

TEST(Partition, DirichletLargeAlphaNearIid) {
  const Task t = default_task();
  std::map<int, double> global;
  for (int y : t.train.labels) global[y] += 1.0 / t.train.size();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto p =
        partition_clients(t.train, 10, {PartitionKind::kDirichlet, 1000.0}, seed);
    for (const auto& a : p.assignments) {
      std::map<int, double> h;
      for (auto i : a) h[t.train.labels[i]] += 1.0 / a.size();
      for (auto [y, g] : global) EXPECT_LE(std::abs(h[y] - g) / g, 0.10);
    }
  }
}

TEST(Partition, DirichletSmallAlphaIsSkewed) {
  const Task t = default_task();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto p =
        partition_clients(t.train, 10, {PartitionKind::kDirichlet, 0.1}, seed);
    double best = 0.0;
    for (const auto& a : p.assignments) {
      std::map<int, double> h;
      for (auto i : a) h[t.train.labels[i]] += 1.0 / a.size();
      for (auto [y, f] : h) best = std::max(best, f);
    }
    EXPECT_GT(best, 0.5);
  }
}

TEST(DefenseSet, DefaultSizes) {
  const Task t = default_task();
  const BuiltDefense d = build_defense_dataset(t.train, default_patch(t), {}, 3);
  EXPECT_EQ(d.dataset.size(), 500u);
  EXPECT_EQ(std::count(d.true_poison.begin(), d.true_poison.end(), true), 100);
  EXPECT_EQ(d.dataset.partition.poison.size(), 100u);
  EXPECT_EQ(d.dataset.clean_marked.size(), 100u);
  for (auto i : d.dataset.clean_marked) EXPECT_FALSE(d.true_poison[i]);
  EXPECT_NO_THROW(d.dataset.validate());
  for (std::size_t i = 0; i < 500; ++i) {
    if (d.true_poison[i]) EXPECT_EQ(d.dataset.examples.labels[i], 2);
  }
}

TEST(DefenseSet, MarkNoise) {
  const Task t = default_task();
  DefenseBuildOptions o;
  o.clean_mark_noise = 0.15;
  const BuiltDefense d = build_defense_dataset(t.train, default_patch(t), o, 3);
  std::size_t noisy = 0;
  for (auto i : d.dataset.clean_marked) noisy += d.true_poison[i];
  EXPECT_EQ(noisy, 15u);
}

TEST(DefenseSet, RepartitionSizesFollowBeta) {
  const Task t = default_task();
  for (double beta : {0.05, 0.1, 0.25, 0.5, 0.9}) {
    DefenseBuildOptions o;
    o.beta = beta;
    const BuiltDefense d = build_defense_dataset(t.train, default_patch(t), o, 1);
    EXPECT_EQ(d.dataset.partition.poison.size(), round_half_up(beta * 500));
    EXPECT_EQ(d.dataset.partition.poison.size() + d.dataset.partition.clean.size(), 500u);
  }
}

TEST(DefenseSet, Errors) {
  const Task t = default_task();
  const BackdoorSpec b = default_patch(t);
  DefenseBuildOptions o;
  o.poison_frac = 0.0;
  EXPECT_THROW(build_defense_dataset(t.train, b, o, 1), InvalidArgument);
  o = {};
  o.poison_frac = 1.0;
  EXPECT_THROW(build_defense_dataset(t.train, b, o, 1), InvalidArgument);
  o = {};
  o.clean_marked_frac = 1.5;
  EXPECT_THROW(build_defense_dataset(t.train, b, o, 1), InvalidArgument);
  o = {};
  o.beta = 1.0;
  EXPECT_THROW(build_defense_dataset(t.train, b, o, 1), InvalidArgument);
}

TEST(Csv, BatchRoundTripIsExact) {
  Batch b = ldsim::testing::random_batch(20, 5, 3, 8);
  b.inputs[0] = 0.1;
  b.inputs[1] = 1e-300;
  std::stringstream ss;
  write_batch_csv(ss, b);
  EXPECT_EQ(ss.str().substr(0, 18), "x0,x1,x2,x3,x4,lab");
  EXPECT_EQ(read_batch_csv(ss), b);
}

TEST(Csv, DefenseCsvHasFlags) {
  const Task t = default_task();
  const BuiltDefense d = build_defense_dataset(t.train, default_patch(t), {}, 3);
  std::stringstream ss;
  write_defense_csv(ss, d);
  std::string header;
  std::getline(ss, header);
  EXPECT_NE(header.find("clean_marked,in_ddp,true_poison"), std::string::npos);
  std::size_t rows = 0;
  for (std::string line; std::getline(ss, line);) ++rows;
  EXPECT_EQ(rows, 500u);
}
