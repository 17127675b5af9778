// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Tolerances are pinned below.

#include <omp.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ldsim/aggregators.hpp"
#include "ldsim/config.hpp"
#include "ldsim/learndefend.hpp"
#include "ldsim/report.hpp"
#include "ldsim/rng.hpp"
#include "ldsim/sim.hpp"

using namespace ldsim;

namespace {

constexpr double kGradRelTol = 1e-4;
constexpr double kFdStep = 1e-6;
constexpr std::size_t kMinGradInstances = 20;
constexpr double kAggFormTol = 1e-10;
constexpr std::size_t kAggFormInstances = 1000;
constexpr std::size_t kOracleInstances = 100;
constexpr double kMeanTol = 1e-12;
constexpr double kWeiszfeldMedianTol = 1e-6;
constexpr double kSimplexTol = 1e-12;
constexpr double kNoDefenseAsr = 0.80;
constexpr double kNoDefenseMa = 0.90;
constexpr double kDefendedAsr = 0.15;
constexpr double kMaGap = 0.02;
constexpr double kDetectFrac = 0.9;
constexpr std::size_t kDetectRound = 200;
constexpr std::size_t kCiAfter = 100;
constexpr std::size_t kHaltAt = 100;
constexpr double kHaltGap = 0.30;
constexpr double kNoiseLevel = 0.15;
constexpr double kNoiseAsrGap = 0.05;
constexpr int kSeeds = 5;
constexpr int kSeedQuorum = 4;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("%s %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
  char buf[4096];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<double> normals(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

Batch random_batch(std::size_t n, std::size_t dim, std::size_t n_classes,
                   std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> lab(0, static_cast<int>(n_classes) - 1);
  Batch b;
  b.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(dim);
    for (double& v : x) v = nd(rng);
    b.push_back(x, lab(rng));
  }
  return b;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-7, std::abs(a), std::abs(b)});
}

double central_diff(const std::function<double(const std::vector<double>&)>& f,
                    std::vector<double> x, std::size_t k, double h) {
  const double x0 = x[k];
  x[k] = x0 + h;
  const double fp = f(x);
  x[k] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

// Small fixtures: 67-parameter classifier and 116-parameter detector.
const NetworkSpec kNet{{4, 8, 3}};
const PddSpec kPdd{4, 3, 6, 5, 4};

DefensePartition first_k(std::size_t n, std::size_t k) {
  DefensePartition p;
  for (std::size_t i = 0; i < n; ++i) (i < k ? p.poison : p.clean).push_back(i);
  return p;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = Clock::now();
  std::size_t theta_ok = 0, theta_bad = 0;
  double theta_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 200 && theta_ok + theta_bad < 40; ++seed) {
    const Batch ex = random_batch(20, 4, 3, seed);
    const auto part = first_k(20, 5);
    const ParamVector g = init_params(kNet, seed + 100);
    const std::size_t M = 2 + seed % 5;
    std::vector<ParamVector> ups;
    for (std::size_t j = 0; j < M; ++j) {
      ups.push_back(axpy(1.0, ParamVector(normals(g.size(), seed * 17 + j, 0.3), g.layout_id), g));
    }
    std::vector<ClientFeatures> feats;
    for (const auto& u : ups) feats.push_back(client_features(kNet, u, g, ex, part));
    const auto th = normals(3, seed + 200);
    const CIParams theta{{th[0], th[1], th[2]}};
    bool near_kink = false, any_active = false;
    for (const auto& f : feats) {
      const auto s = f.as_array();
      const double z = th[0] * s[0] + th[1] * s[1] + th[2] * s[2];
      near_kink = near_kink || std::abs(z) < 1e-3;
      any_active = any_active || z > 0;
    }
    if (near_kink || !any_active) continue;
    const auto tg = theta_gradient(theta, kNet, g, ups, feats, ex, part);
    auto loss_at = [&](const std::vector<double>& t) {
      const auto w = client_importance(feats, CIParams{{t[0], t[1], t[2]}});
      return defense_loss(kNet, aggregate_weighted(g, ups, w.weights), ex, part);
    };
    bool ok = !tg.degenerate;
    for (std::size_t k = 0; k < 3; ++k) {
      const double e = rel_err(tg.grad[k], central_diff(loss_at, th, k, kFdStep));
      theta_worst = std::max(theta_worst, e);
      ok = ok && e < kGradRelTol;
    }
    (ok ? theta_ok : theta_bad) += 1;
  }

  std::size_t psi_ok = 0, psi_bad = 0;
  double psi_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 60 && psi_ok + psi_bad < 30; ++seed) {
    const Batch ex = random_batch(12, 4, 3, seed + 40);
    auto psi = pdd_init(kPdd, seed + 50, 0.5);
    const auto jitter = normals(psi.values.size(), seed + 70, 0.05);
    for (std::size_t k = 0; k < jitter.size(); ++k) psi.values[k] += jitter[k];
    const ParamVector g = init_params(kNet, seed + 80, 2.0);
    const std::vector<std::size_t> clean{0, 3, 7};
    const double lambda = 0.3;
    const auto an = pdd_linear_objective(psi, ex, loss_gap(kNet, g, ex), clean, lambda);
    const auto base = pdd_score(psi, ex);
    if (base.degenerate) continue;
    auto value = [&](const std::vector<double>& v) {
      return psi_objective(PddParams{kPdd, v}, ex, clean, kNet, g, lambda);
    };
    auto same_extremes = [&](const std::vector<double>& v) {
      const auto s = pdd_score(PddParams{kPdd, v}, ex);
      return s.argmin == base.argmin && s.argmax == base.argmax;
    };
    bool ok = std::abs(an.value - value(psi.values)) <= 1e-9 * std::max(1.0, std::abs(an.value));
    std::size_t checked = 0;
    for (std::size_t k = 0; k < psi.values.size(); ++k) {
      auto up = psi.values, dn = psi.values;
      up[k] += kFdStep;
      dn[k] -= kFdStep;
      const double fd1 = central_diff(value, psi.values, k, kFdStep);
      const double fd2 = central_diff(value, psi.values, k, kFdStep / 2);
      // Kink or extremal-index switch inside the stencil.
      if (!same_extremes(up) || !same_extremes(dn) || rel_err(fd1, fd2) > 1e-5) continue;
      const double e = rel_err(an.grad[k], fd1);
      psi_worst = std::max(psi_worst, e);
      ok = ok && e < kGradRelTol;
      ++checked;
    }
    if (checked == 0) continue;
    (ok ? psi_ok : psi_bad) += 1;
  }
  const double secs = seconds_since(t0);
  const bool pass = theta_bad == 0 && psi_bad == 0 && theta_ok >= kMinGradInstances &&
                    psi_ok >= kMinGradInstances && secs < 30.0;
  report(1, "gradient fidelity", pass,
         fmt("theta %zu/%zu instances (worst rel %.2e), psi %zu/%zu (worst rel %.2e), "
             "tol %.0e, %.1fs",
             theta_ok, theta_ok + theta_bad, theta_worst, psi_ok, psi_ok + psi_bad, psi_worst,
             kGradRelTol, secs));
}

void aggregation_forms() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  Rng rng(4242);
  std::uniform_int_distribution<std::size_t> nclients(1, 12), ndim(1, 200);
  std::exponential_distribution<double> ex(1.0);
  for (std::size_t inst = 0; inst < kAggFormInstances; ++inst) {
    const std::size_t M = nclients(rng), d = ndim(rng);
    const ParamVector g(normals(d, inst * 31 + 1, 3.0), 7);
    std::vector<ParamVector> ups;
    for (std::size_t j = 0; j < M; ++j) ups.emplace_back(normals(d, inst * 31 + 2 + j, 3.0), 7);
    std::vector<double> w(M);
    for (double& v : w) v = ex(rng);
    if (inst % 5 == 0) w[0] = 0.0;
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    if (s == 0.0) w.assign(M, 1.0 / static_cast<double>(M));
    else for (double& v : w) v /= s;
    const auto residual = aggregate_weighted(g, ups, w);
    const auto plain = weighted_average(ups, w);
    for (std::size_t k = 0; k < d; ++k) {
      worst = std::max(worst, std::abs(residual[k] - plain[k]));
    }
  }
  const double secs = seconds_since(t0);
  report(2, "aggregation-form equivalence", worst <= kAggFormTol && secs < 5.0,
         fmt("%zu instances, max |residual - plain| %.2e (tol %.0e), %.2fs",
             kAggFormInstances, worst, kAggFormTol, secs));
}

// Exhaustive Krum score: minimum over all (n - f - 2)-subsets of the others.
std::vector<double> brute_krum_scores(const std::vector<ClientUpdate>& u, std::size_t f) {
  const std::size_t n = u.size(), k = n - f - 2;
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < u[i].params.size(); ++c) {
        const double diff = u[i].params[c] - u[j].params[c];
        s += diff * diff;
      }
      d.push_back(s);
    }
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 0; mask < (1u << d.size()); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < d.size(); ++j) {
        if (mask >> j & 1u) s += d[j];
      }
      best = std::min(best, s);
    }
    scores[i] = best;
  }
  return scores;
}

// Exhaustive best-m selection: every m-subset, lexicographically smallest
// sorted score list wins, ties by index.
std::vector<std::size_t> brute_select(const std::vector<double>& scores, std::size_t m) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> best;
  std::vector<std::pair<double, std::size_t>> best_key;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != m) continue;
    std::vector<std::pair<double, std::size_t>> key;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) key.emplace_back(scores[i], i);
    }
    std::sort(key.begin(), key.end());
    if (best.empty() || key < best_key) {
      best_key = key;
      best.clear();
      for (const auto& kv : key) best.push_back(kv.second);
    }
  }
  return best;
}

std::vector<double> mean_of(const std::vector<ClientUpdate>& u,
                            const std::vector<std::size_t>& which) {
  std::vector<double> out(u[0].params.size(), 0.0);
  for (std::size_t i : which) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += u[i].params[c];
  }
  for (double& v : out) v /= static_cast<double>(which.size());
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<ClientUpdate> random_updates(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::vector<ClientUpdate> u;
  for (std::size_t i = 0; i < n; ++i) {
    u.push_back({ParamVector(normals(dim, seed * 101 + i), 1), 1 + (seed + i) % 5});
  }
  return u;
}

void baseline_oracles() {
  const auto t0 = Clock::now();
  std::size_t krum_bad = 0, mk_n = 0, mk_bad = 0, bul_n = 0, bul_bad = 0;
  for (std::uint64_t seed = 1; seed <= kOracleInstances; ++seed) {
    const std::size_t f = seed % 2;
    const std::size_t dim = 1 + seed % 3;
    const std::size_t lo = f == 0 ? 3 : 4;
    const std::size_t n = lo + seed % (8 - lo);
    const auto u = random_updates(n, dim, seed);
    const auto oracle = brute_krum_scores(u, f);
    const auto scores = krum_scores(u, f);
    AggregatorConfig c;
    c.f = f;
    c.rule = AggregationRule::kKrum;
    bool ok = scores.size() == n;
    for (std::size_t i = 0; ok && i < n; ++i) ok = std::abs(scores[i] - oracle[i]) <= kMeanTol;
    ok = ok && krum_select(u, f, 1) == brute_select(oracle, 1) &&
         aggregate(c, u[0].params, u) == u[brute_select(oracle, 1)[0]].params;
    krum_bad += ok ? 0 : 1;

    c.rule = AggregationRule::kMultiKrum;
    c.m = 1 + seed % n;
    if (n >= std::max(f + 3, c.m)) {
      ++mk_n;
      const auto sel = brute_select(oracle, c.m);
      auto got = krum_select(u, f, c.m);
      std::sort(got.begin(), got.end());
      auto want = sel;
      std::sort(want.begin(), want.end());
      const bool mk_ok = got == want &&
                         max_abs_diff(aggregate(c, u[0].params, u).values, mean_of(u, sel)) <=
                             kMeanTol;
      mk_bad += mk_ok ? 0 : 1;
    }
    if (n >= 4 * f + 3) {
      ++bul_n;
      c.rule = AggregationRule::kBulyan;
      const auto sel = brute_select(oracle, n - 2 * f);
      const std::size_t keep = n - 4 * f;
      std::vector<double> expect;
      for (std::size_t k = 0; k < dim; ++k) {
        std::vector<double> col;
        for (auto i : sel) col.push_back(u[i].params[k]);
        std::sort(col.begin(), col.end());
        const std::size_t m = col.size();
        const double med = m % 2 ? col[m / 2] : 0.5 * (col[m / 2 - 1] + col[m / 2]);
        std::stable_sort(col.begin(), col.end(), [&](double a, double b) {
          return std::abs(a - med) < std::abs(b - med);
        });
        expect.push_back(std::accumulate(col.begin(), col.begin() + keep, 0.0) /
                         static_cast<double>(keep));
      }
      bul_bad += max_abs_diff(aggregate(c, u[0].params, u).values, expect) <= kMeanTol ? 0 : 1;
    }
  }

  // Sort oracle: median and trimmed mean must match bit for bit.
  std::size_t sort_bad = 0;
  for (std::uint64_t seed = 1; seed <= kOracleInstances; ++seed) {
    const std::size_t n = 1 + seed % 9, dim = 1 + seed % 6;
    const auto u = random_updates(n, dim, seed + 9000);
    AggregatorConfig med;
    med.rule = AggregationRule::kCoordMedian;
    AggregatorConfig tm;
    tm.rule = AggregationRule::kTrimmedMean;
    tm.trim_frac = 0.1 * static_cast<double>(seed % 5);
    const auto trim = static_cast<std::size_t>(std::floor(tm.trim_frac * static_cast<double>(n)));
    const auto got_med = aggregate(med, u[0].params, u);
    const auto got_tm = aggregate(tm, u[0].params, u);
    for (std::size_t k = 0; k < dim; ++k) {
      std::vector<double> col;
      for (const auto& x : u) col.push_back(x.params[k]);
      std::sort(col.begin(), col.end());
      const double m = n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
      double s = 0.0;
      for (std::size_t i = trim; i < n - trim; ++i) s += col[i];
      const double t = s / static_cast<double>(n - 2 * trim);
      sort_bad += (got_med[k] == m && got_tm[k] == t) ? 0 : 1;
    }
  }

  // Weiszfeld: monotone objective; 1-D output equals the sample median.
  std::size_t wz_bad = 0;
  double wz_med_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= kOracleInstances; ++seed) {
    auto u = random_updates(3 + seed % 6, 1 + seed % 5, seed + 7000);
    u[0].params.values.assign(u[0].params.size(), 40.0);
    WeiszfeldTrace tr;
    rfa(u, 200, 1e-12, 1e-6, &tr);
    for (std::size_t k = 1; k < tr.objective.size(); ++k) {
      if (tr.objective[k] > tr.objective[k - 1] + 1e-12) ++wz_bad;
    }
    // Odd count with unit weights: the geometric median is the middle value.
    std::vector<ClientUpdate> one;
    const auto xs = normals(2 * (seed % 4) + 3, seed + 8000, 5.0);
    for (double x : xs) one.push_back({ParamVector({x}, 1), 1});
    auto sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    const double z = rfa(one, 1000, 1e-12, 1e-9)[0];
    wz_med_worst = std::max(wz_med_worst, std::abs(z - sorted[sorted.size() / 2]));
  }
  const double secs = seconds_since(t0);
  const bool pass = krum_bad == 0 && mk_bad == 0 && bul_bad == 0 && sort_bad == 0 &&
                    wz_bad == 0 && wz_med_worst < kWeiszfeldMedianTol && secs < 30.0;
  report(3, "baseline oracles", pass,
         fmt("krum %zu/%llu, multi-krum %zu/%zu, bulyan %zu/%zu, sort-oracle mismatches %zu, "
             "weiszfeld increases %zu, 1-D median err %.1e (tol %.0e), %.2fs",
             static_cast<std::size_t>(kOracleInstances) - krum_bad,
             static_cast<unsigned long long>(kOracleInstances), mk_n - mk_bad, mk_n,
             bul_n - bul_bad, bul_n, sort_bad, wz_bad, wz_med_worst, kWeiszfeldMedianTol, secs));
}

void invariants() {
  std::size_t simplex_bad = 0, gamma_bad = 0, gamma_n = 0, part_bad = 0;
  Rng rng(777);
  std::uniform_int_distribution<std::size_t> nclients(1, 12), nex(2, 60);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::uint64_t inst = 0; inst < 1000; ++inst) {
    const std::size_t M = nclients(rng);
    std::vector<ClientFeatures> feats(M);
    const auto raw = normals(3 * M, inst + 1, 3.0);
    for (std::size_t j = 0; j < M; ++j) {
      feats[j] = {std::abs(raw[3 * j]), std::abs(raw[3 * j + 1]), std::abs(raw[3 * j + 2])};
    }
    auto th = normals(3, inst + 5000);
    if (inst % 10 == 0) th = {0.0, 0.0, 0.0};
    const auto w = client_importance(feats, CIParams{{th[0], th[1], th[2]}});
    const double s = std::accumulate(w.weights.begin(), w.weights.end(), 0.0);
    bool ok = w.weights.size() == M && std::abs(s - 1.0) <= kSimplexTol;
    for (double v : w.weights) ok = ok && v >= 0.0;
    simplex_bad += ok ? 0 : 1;

    const std::size_t n = nex(rng);
    const Batch ex = random_batch(n, 4, 3, inst + 9000);
    const auto g = pdd_score(pdd_init(kPdd, inst + 11000, 1.0), ex);
    if (!g.degenerate) {
      ++gamma_n;
      const auto [lo, hi] = std::minmax_element(g.gamma.begin(), g.gamma.end());
      bool gok = *lo == 0.0 && *hi == 1.0;
      for (double v : g.gamma) gok = gok && v >= 0.0 && v <= 1.0;
      gamma_bad += gok ? 0 : 1;
    }

    const double beta = 0.01 + 0.98 * unit(rng);
    const std::size_t want = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 0.5));
    const auto gam = normals(n, inst + 13000);
    if (want == 0 || want == n) continue;
    const auto p = partition_defense(gam, beta);
    std::vector<std::size_t> all = p.poison;
    all.insert(all.end(), p.clean.begin(), p.clean.end());
    std::sort(all.begin(), all.end());
    bool pok = p.poison.size() == want && p.clean.size() == n - want &&
               std::adjacent_find(all.begin(), all.end()) == all.end() && all.back() == n - 1;
    part_bad += pok ? 0 : 1;
  }
  report(4, "simplex and normalization invariants",
         simplex_bad == 0 && gamma_bad == 0 && part_bad == 0 && gamma_n > 0,
         fmt("simplex violations %zu/1000, gamma range violations %zu/%zu, "
             "partition size violations %zu",
             simplex_bad, gamma_bad, gamma_n, part_bad));
}

// ---------------------------------------------------------------------------
// Simulation criteria

struct Run {
  std::vector<RoundMetrics> metrics;
  double secs = 0.0;
  double final_ma() const { return metrics.back().ma; }
  double final_asr() const { return metrics.back().asr; }
};

Run run(SimConfig c) {
  const auto t0 = Clock::now();
  Run r;
  r.metrics = run_experiment(c).metrics;
  r.secs = seconds_since(t0);
  return r;
}

SimConfig seeded(int seed) {
  SimConfig c;
  c.master_seed = static_cast<std::uint64_t>(seed);
  return c;
}

double mean_gamma_gap(const SimConfig& c) {
  const Environment env = make_environment(c);
  const SimState st = make_initial_state(c, env);
  const auto& d = st.ld->data;
  const auto gamma = pdd_score(st.ld->psi, d.examples).gamma;
  std::vector<bool> marked(gamma.size(), false);
  for (auto i : d.clean_marked) marked[i] = true;
  double a = 0, b = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    (marked[i] ? a : b) += gamma[i];
    (marked[i] ? na : nb) += 1;
  }
  return a / na - b / nb;
}

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) s += (s.empty() ? "" : " ") + p;
  return s;
}

void simulation_criteria() {
  int c5 = 0, c6 = 0, c7 = 0, c8 = 0, c9 = 0, c9_strict = 0, c10 = 0, c11 = 0, c11n = 0;
  double slowest = 0.0;
  std::vector<std::string> d5, d6, d7, d8, d9, d10, d11;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    SimConfig none = seeded(seed);
    none.defense = DefenseKind::kNone;
    SimConfig clean = none;
    clean.attack_enabled = false;
    const Run r_none = run(none), r_clean = run(clean);
    const SimConfig base = seeded(seed);
    const Run r_ld = run(base);
    slowest = std::max({slowest, r_none.secs, r_clean.secs, r_ld.secs});

    const bool ok5 = r_none.final_asr() >= kNoDefenseAsr && r_none.final_ma() >= kNoDefenseMa &&
                     r_ld.final_asr() <= kDefendedAsr &&
                     std::abs(r_ld.final_ma() - r_clean.final_ma()) <= kMaGap;
    c5 += ok5;
    d5.push_back(fmt("s%d[none asr %.3f ma %.3f | ld asr %.3f ma %.3f | clean ma %.3f]", seed,
                     r_none.final_asr(), r_none.final_ma(), r_ld.final_asr(), r_ld.final_ma(),
                     r_clean.final_ma()));

    const auto n_poison = static_cast<double>(
        round_half_up(base.defense_data.poison_frac * static_cast<double>(base.defense_data.n_total)));
    const auto& at200 = r_ld.metrics.at(kDetectRound - 1);
    const double frac = at200.n_true_poison_in_ddp
                            ? static_cast<double>(*at200.n_true_poison_in_ddp) / n_poison
                            : 0.0;
    c6 += frac >= kDetectFrac;
    d6.push_back(fmt("s%d %.2f", seed, frac));

    std::size_t neg = 0, total = 0;
    for (const auto& m : r_ld.metrics) {
      if (m.round > kCiAfter && m.ci_diff) {
        ++total;
        neg += *m.ci_diff < 0.0;
      }
    }
    c7 += total > 0 && neg == total;
    d7.push_back(fmt("s%d %zu/%zu", seed, neg, total));

    // Strong trigger: half the input dimensions, fully opaque.
    SimConfig strong = base;
    strong.trigger_size = strong.task.dim / 2;
    strong.transparency = 1.0;
    SimConfig frozen = strong;
    frozen.halt_updates_at = kHaltAt;
    const Run r_strong = run(strong), r_frozen = run(frozen);
    c8 += r_frozen.final_asr() >= r_strong.final_asr() + kHaltGap;
    d8.push_back(fmt("s%d frozen %.3f unfrozen %.3f", seed, r_frozen.final_asr(),
                     r_strong.final_asr()));

    std::vector<double> asr_by_beta;
    std::string bline = fmt("s%d", seed);
    for (double beta : {0.1, 0.2, 0.3, 0.5}) {
      double a = r_ld.final_asr();
      if (beta != base.learndefend.beta) {
        SimConfig c = base;
        c.learndefend.beta = beta;
        a = run(c).final_asr();
      }
      asr_by_beta.push_back(a);
      bline += fmt(" %.1f:%.3f", beta, a);
    }
    const double others = std::min({asr_by_beta[0], asr_by_beta[2], asr_by_beta[3]});
    c9 += asr_by_beta[1] <= others;
    c9_strict += asr_by_beta[1] < others;
    d9.push_back(bline);

    SimConfig noisy = base;
    noisy.defense_data.clean_mark_noise = kNoiseLevel;
    const Run r_noisy = run(noisy);
    c10 += std::abs(r_noisy.final_asr() - r_ld.final_asr()) <= kNoiseAsrGap;
    d10.push_back(fmt("s%d %.3f vs %.3f", seed, r_noisy.final_asr(), r_ld.final_asr()));

    const double gap = mean_gamma_gap(base), gap_noisy = mean_gamma_gap(noisy);
    c11 += gap < 0.0;
    c11n += gap_noisy < 0.0;
    d11.push_back(fmt("s%d %.3f/%.3f", seed, gap, gap_noisy));
  }
  report(5, "end-to-end defense", c5 >= kSeedQuorum && slowest < 120.0,
         fmt("%d/%d seeds, slowest run %.1fs: %s", c5, kSeeds, slowest, join(d5).c_str()));
  report(6, "poison detection", c6 >= kSeedQuorum,
         fmt("%d/%d seeds with >= %.2f of poisons in D_dp at round %zu: %s", c6, kSeeds,
             kDetectFrac, kDetectRound, join(d6).c_str()));
  report(7, "attacker downweighting", c7 >= kSeedQuorum,
         fmt("%d/%d seeds with ci_diff < 0 in every attack round after %zu: %s", c7, kSeeds,
             kCiAfter, join(d7).c_str()));
  report(8, "halt ablation", c8 >= kSeedQuorum,
         fmt("%d/%d seeds with frozen asr >= unfrozen + %.2f (halt at %zu, strong trigger): %s",
             c8, kSeeds, kHaltGap, kHaltAt, join(d8).c_str()));
  report(9, "beta sensitivity", c9 >= kSeedQuorum,
         fmt("%d/%d seeds with minimum at 0.2 (%d strictly below the rest): %s", c9, kSeeds,
             c9_strict, join(d9).c_str()));
  report(10, "clean-set noise robustness", c10 >= kSeedQuorum,
         fmt("%d/%d seeds with |asr(%.2f) - asr(0)| <= %.2f: %s", c10, kSeeds, kNoiseLevel,
             kNoiseAsrGap, join(d10).c_str()));
  report(11, "init consistency", c11 == kSeeds && c11n >= kSeedQuorum,
         fmt("mean gamma(D_clean) - mean gamma(rest) < 0 on %d/%d seeds, %d/%d with %.2f "
             "noise: %s",
             c11, kSeeds, c11n, kSeeds, kNoiseLevel, join(d11).c_str()));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() /
                        ("ldsim_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  ExperimentConfig cfg;
  cfg.run_name = "determinism";
  cfg.sim.master_seed = 11;
  run_to_directory(cfg, root / "a", nullptr);
  run_to_directory(cfg, root / "b", nullptr);
  // Rerun from the written resolved config with a different thread count.
  const ExperimentConfig again = load_config((root / "a" / "resolved_config").string());
  const int threads = omp_get_max_threads();
  omp_set_num_threads(3);
  run_to_directory(again, root / "c", nullptr);
  omp_set_num_threads(threads);
  const std::string a = slurp(root / "a" / "metrics.csv");
  const bool pass = !a.empty() && a == slurp(root / "b" / "metrics.csv") &&
                    a == slurp(root / "c" / "metrics.csv");
  report(12, "determinism", pass,
         fmt("metrics.csv (%zu bytes) identical across two reruns and a rerun from "
             "resolved_config on 3 threads: %s",
             a.size(), pass ? "yes" : "no"));
  fs::remove_all(root);
}

}  // namespace

int main() {
  try {
    gradient_fidelity();
    aggregation_forms();
    baseline_oracles();
    invariants();
    simulation_criteria();
    determinism();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
