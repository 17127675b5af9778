// Parallel kernels against their serial twins.

#include <benchmark/benchmark.h>

#include <random>

#include "ldsim/kernels.hpp"
#include "ldsim/kernels_serial.hpp"
#include "ldsim/rng.hpp"

using namespace ldsim;

namespace {

Batch make_batch(std::size_t n, std::size_t dim, std::size_t classes) {
  Rng rng(1);
  std::normal_distribution<double> nd;
  Batch b;
  b.dim = dim;
  std::vector<double> x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : x) v = nd(rng);
    b.push_back(x, static_cast<int>(i % classes));
  }
  return b;
}

struct Rows {
  std::vector<std::vector<double>> data;
  std::vector<std::span<const double>> spans;
  Rows(std::size_t n, std::size_t dim) {
    Rng rng(2);
    std::normal_distribution<double> nd;
    data.assign(n, std::vector<double>(dim));
    for (auto& r : data) {
      for (double& v : r) v = nd(rng);
      spans.emplace_back(r);
    }
  }
};

const NetworkSpec kNet{{16, 64, 4}};

template <bool Parallel>
void BM_LossGrad(benchmark::State& st) {
  const Batch b = make_batch(static_cast<std::size_t>(st.range(0)), 16, 4);
  const ParamVector p = init_params(kNet, 3);
  const std::vector<LossKind> kinds(b.size(), LossKind::kCrossEntropy);
  for (auto _ : st) {
    if constexpr (Parallel) {
      benchmark::DoNotOptimize(kernels::accumulate_loss_grad(kNet, p, b, kinds));
    } else {
      benchmark::DoNotOptimize(serial::accumulate_loss_grad(kNet, p, b, kinds));
    }
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <bool Parallel>
void BM_Predict(benchmark::State& st) {
  const Batch b = make_batch(static_cast<std::size_t>(st.range(0)), 16, 4);
  const ParamVector p = init_params(kNet, 3);
  for (auto _ : st) {
    if constexpr (Parallel) {
      benchmark::DoNotOptimize(kernels::predict_classes(kNet, p, b));
    } else {
      benchmark::DoNotOptimize(serial::predict_classes(kNet, p, b));
    }
  }
}

template <bool Parallel>
void BM_Pairwise(benchmark::State& st) {
  const Rows r(10, static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) {
    if constexpr (Parallel) {
      benchmark::DoNotOptimize(kernels::pairwise_sq_distances(r.spans));
    } else {
      benchmark::DoNotOptimize(serial::pairwise_sq_distances(r.spans));
    }
  }
}

template <bool Parallel>
void BM_Median(benchmark::State& st) {
  const Rows r(10, static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) {
    if constexpr (Parallel) {
      benchmark::DoNotOptimize(kernels::coordinate_median(r.spans));
    } else {
      benchmark::DoNotOptimize(serial::coordinate_median(r.spans));
    }
  }
}

template <bool Parallel>
void BM_WeightedSum(benchmark::State& st) {
  const Rows r(10, static_cast<std::size_t>(st.range(0)));
  const std::vector<double> w(10, 0.1);
  for (auto _ : st) {
    if constexpr (Parallel) {
      benchmark::DoNotOptimize(kernels::weighted_sum(r.spans, w));
    } else {
      benchmark::DoNotOptimize(serial::weighted_sum(r.spans, w));
    }
  }
}

}  // namespace

BENCHMARK(BM_LossGrad<true>)->Arg(512)->Arg(4096);
BENCHMARK(BM_LossGrad<false>)->Arg(512)->Arg(4096);
BENCHMARK(BM_Predict<true>)->Arg(4096);
BENCHMARK(BM_Predict<false>)->Arg(4096);
BENCHMARK(BM_Pairwise<true>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Pairwise<false>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Median<true>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Median<false>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_WeightedSum<true>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_WeightedSum<false>)->Arg(1 << 12)->Arg(1 << 16);

BENCHMARK_MAIN();
