#include "ldsim/learndefend.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "ldsim/error.hpp"
#include "ldsim/io.hpp"
#include "ldsim/kernels.hpp"
#include "ldsim/rng.hpp"

namespace ldsim {

namespace {

constexpr double kDegenerate = 1e-12;

Batch side(const Batch& examples, std::span<const std::size_t> idx) {
  return examples.subset(idx);
}

double mean_ce(const NetworkSpec& net, const ParamVector& params,
               const Batch& data) {
  const auto losses = kernels::per_example_losses(net, params, data,
                                                  LossKind::kCrossEntropy);
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(losses.size());
}

void check_partition(const DefensePartition& p, std::size_t n) {
  if (p.poison.empty() || p.clean.empty()) {
    throw InvalidArgument("defense partition needs both sides nonempty");
  }
  for (std::size_t i : p.poison) {
    if (i >= n) throw InvalidArgument("defense partition index out of range");
  }
  for (std::size_t i : p.clean) {
    if (i >= n) throw InvalidArgument("defense partition index out of range");
  }
}

void check_updates(const ParamVector& global_prev,
                   std::span<const ParamVector> updates) {
  if (updates.empty()) throw InvalidArgument("no client updates");
  for (const auto& u : updates) {
    if (u.layout_id != global_prev.layout_id) {
      throw LayoutMismatch("client update layout differs from the global model");
    }
    if (u.size() != global_prev.size()) {
      throw DimensionMismatch("client update", global_prev.size(), u.size());
    }
  }
}

std::vector<LossKind> defense_kinds(std::size_t n, const DefensePartition& p) {
  std::vector<LossKind> kinds(n, LossKind::kClean);
  for (std::size_t i : p.poison) kinds[i] = LossKind::kPoison;
  return kinds;
}

// Batch restricted to the partition (both sides, ascending index) together
// with the matching loss kinds.
std::pair<Batch, std::vector<LossKind>> defense_batch(const Batch& examples,
                                                      const DefensePartition& p) {
  std::vector<std::size_t> idx(p.poison);
  idx.insert(idx.end(), p.clean.begin(), p.clean.end());
  std::sort(idx.begin(), idx.end());
  const auto all_kinds = defense_kinds(examples.size(), p);
  std::vector<LossKind> kinds;
  kinds.reserve(idx.size());
  for (std::size_t i : idx) kinds.push_back(all_kinds[i]);
  return {examples.subset(idx), std::move(kinds)};
}

// ---------------------------------------------------------------------------
// PDD network

struct PddLayout {
  std::size_t d, C, h1, h2, g1;
  std::size_t w0, b0, w1, b1, w2, b2, w3, b3, w4, b4, total;

  explicit PddLayout(const PddSpec& s)
      : d(s.input_dim), C(s.n_classes), h1(s.h1), h2(s.h2), g1(s.g1) {
    std::size_t o = 0;
    w0 = o; o += h1 * d;
    b0 = o; o += h1;
    w1 = o; o += h2 * h1;
    b1 = o; o += h2;
    w2 = o; o += C * h2;
    b2 = o; o += C;
    w3 = o; o += g1 * 2 * C;
    b3 = o; o += g1;
    w4 = o; o += g1;
    b4 = o; o += 1;
    total = o;
  }
};

struct PddWork {
  std::vector<double> z0, a0, z1, a1, yhat, in3, z3, a3;
  std::vector<double> dz3, dyhat, dlog, da1, dz1, da0, dz0;
  double g2 = 0.0;
};

void dense(const double* W, const double* b, const double* in, std::size_t n_in,
           std::size_t n_out, double* out) {
  for (std::size_t r = 0; r < n_out; ++r) {
    double s = b[r];
    const double* row = W + r * n_in;
    for (std::size_t c = 0; c < n_in; ++c) s += row[c] * in[c];
    out[r] = s;
  }
}

void relu(const std::vector<double>& z, std::vector<double>& a) {
  a.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
}

void pdd_forward(const PddLayout& L, const double* p, std::span<const double> x,
                 int y, PddWork& w) {
  w.z0.resize(L.h1);
  dense(p + L.w0, p + L.b0, x.data(), L.d, L.h1, w.z0.data());
  relu(w.z0, w.a0);
  w.z1.resize(L.h2);
  dense(p + L.w1, p + L.b1, w.a0.data(), L.h1, L.h2, w.z1.data());
  relu(w.z1, w.a1);
  w.yhat.resize(L.C);
  dense(p + L.w2, p + L.b2, w.a1.data(), L.h2, L.C, w.yhat.data());
  const double mx = *std::max_element(w.yhat.begin(), w.yhat.end());
  double z = 0.0;
  for (double& v : w.yhat) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : w.yhat) v /= z;
  w.in3.assign(2 * L.C, 0.0);
  std::copy(w.yhat.begin(), w.yhat.end(), w.in3.begin());
  w.in3[L.C + static_cast<std::size_t>(y)] = 1.0;
  w.z3.resize(L.g1);
  dense(p + L.w3, p + L.b3, w.in3.data(), 2 * L.C, L.g1, w.z3.data());
  relu(w.z3, w.a3);
  dense(p + L.w4, p + L.b4, w.a3.data(), L.g1, 1, &w.g2);
}

double pdd_ce(const PddWork& w, int y) {
  return -std::log(std::max(w.yhat[static_cast<std::size_t>(y)], kProbFloor));
}

// Adds d/dpsi of (up * g2 + pred_weight * CE) for one example whose forward
// pass is in `w`.
void pdd_backward(const PddLayout& L, const double* p, std::span<const double> x,
                  int y, double up, double pred_weight, PddWork& w, double* g) {
  // scorer head
  if (up != 0.0) {
    for (std::size_t k = 0; k < L.g1; ++k) g[L.w4 + k] += up * w.a3[k];
    g[L.b4] += up;
  }
  w.dz3.assign(L.g1, 0.0);
  for (std::size_t k = 0; k < L.g1; ++k) {
    if (w.z3[k] > 0.0) w.dz3[k] = up * p[L.w4 + k];
  }
  w.dyhat.assign(L.C, 0.0);
  for (std::size_t k = 0; k < L.g1; ++k) {
    const double dk = w.dz3[k];
    if (dk == 0.0) continue;
    double* gw = g + L.w3 + k * 2 * L.C;
    const double* pw = p + L.w3 + k * 2 * L.C;
    for (std::size_t m = 0; m < 2 * L.C; ++m) gw[m] += dk * w.in3[m];
    g[L.b3 + k] += dk;
    for (std::size_t c = 0; c < L.C; ++c) w.dyhat[c] += pw[c] * dk;
  }
  // softmax Jacobian plus the classifier cross-entropy
  double dot = 0.0;
  for (std::size_t c = 0; c < L.C; ++c) dot += w.yhat[c] * w.dyhat[c];
  w.dlog.resize(L.C);
  for (std::size_t c = 0; c < L.C; ++c) {
    w.dlog[c] = w.yhat[c] * (w.dyhat[c] - dot);
    if (pred_weight != 0.0) {
      w.dlog[c] += pred_weight *
                   (w.yhat[c] - (c == static_cast<std::size_t>(y) ? 1.0 : 0.0));
    }
  }
  // classifier head
  w.da1.assign(L.h2, 0.0);
  for (std::size_t c = 0; c < L.C; ++c) {
    const double dc = w.dlog[c];
    double* gw = g + L.w2 + c * L.h2;
    const double* pw = p + L.w2 + c * L.h2;
    for (std::size_t k = 0; k < L.h2; ++k) {
      gw[k] += dc * w.a1[k];
      w.da1[k] += pw[k] * dc;
    }
    g[L.b2 + c] += dc;
  }
  w.dz1.resize(L.h2);
  for (std::size_t k = 0; k < L.h2; ++k) w.dz1[k] = w.z1[k] > 0.0 ? w.da1[k] : 0.0;
  w.da0.assign(L.h1, 0.0);
  for (std::size_t r = 0; r < L.h2; ++r) {
    const double dr = w.dz1[r];
    if (dr == 0.0) continue;
    double* gw = g + L.w1 + r * L.h1;
    const double* pw = p + L.w1 + r * L.h1;
    for (std::size_t k = 0; k < L.h1; ++k) {
      gw[k] += dr * w.a0[k];
      w.da0[k] += pw[k] * dr;
    }
    g[L.b1 + r] += dr;
  }
  // feature extractor
  for (std::size_t r = 0; r < L.h1; ++r) {
    const double dr = w.z0[r] > 0.0 ? w.da0[r] : 0.0;
    if (dr == 0.0) continue;
    double* gw = g + L.w0 + r * L.d;
    for (std::size_t k = 0; k < L.d; ++k) gw[k] += dr * x[k];
    g[L.b0 + r] += dr;
  }
}

void check_psi(const PddParams& psi, const Batch& examples) {
  psi.spec.validate();
  if (psi.values.size() != psi.spec.param_count()) {
    throw DimensionMismatch("pdd params", psi.spec.param_count(), psi.values.size());
  }
  if (examples.dim != psi.spec.input_dim) {
    throw DimensionMismatch("pdd input", psi.spec.input_dim, examples.dim);
  }
  examples.validate(psi.spec.n_classes);
}

void check_indices(std::span<const std::size_t> idx, std::size_t n,
                   const char* what) {
  for (std::size_t i : idx) {
    if (i >= n) throw InvalidArgument(std::string(what) + ": index out of range");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Client importance

ClientFeatures client_features(const NetworkSpec& net, const ParamVector& phi_j,
                               const ParamVector& global_prev,
                               const Batch& examples,
                               const DefensePartition& partition) {
  check_params(net, phi_j);
  check_params(net, global_prev);
  check_partition(partition, examples.size());
  ClientFeatures f;
  f.clean_loss = mean_ce(net, phi_j, side(examples, partition.clean));
  f.poison_loss = mean_ce(net, phi_j, side(examples, partition.poison));
  f.dist = l2_dist(phi_j, global_prev);
  return f;
}

ImportanceWeights client_importance(std::span<const ClientFeatures> features,
                                    const CIParams& theta) {
  if (features.empty()) throw InvalidArgument("client_importance: no clients");
  const std::size_t M = features.size();
  ImportanceWeights out;
  out.weights.resize(M);
  double total = 0.0;
  for (std::size_t j = 0; j < M; ++j) {
    const auto s = features[j].as_array();
    const double r = theta.theta[0] * s[0] + theta.theta[1] * s[1] +
                     theta.theta[2] * s[2];
    out.weights[j] = r > 0.0 ? r : 0.0;
    total += out.weights[j];
  }
  if (!(total >= kDegenerate) || !std::isfinite(total)) {
    out.degenerate = true;
    std::fill(out.weights.begin(), out.weights.end(), 1.0 / static_cast<double>(M));
    return out;
  }
  for (double& w : out.weights) w /= total;
  return out;
}

ParamVector aggregate_weighted(const ParamVector& global_prev,
                               std::span<const ParamVector> updates,
                               std::span<const double> weights) {
  check_updates(global_prev, updates);
  if (weights.size() != updates.size()) {
    throw DimensionMismatch("aggregation weights", updates.size(), weights.size());
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= -1e-9)) throw InvalidArgument("aggregation weights must be >= 0");
    total += w;
  }
  if (!(std::abs(total - 1.0) <= 1e-9)) {
    throw InvalidArgument("aggregation weights must sum to 1");
  }
  const std::size_t P = global_prev.size();
  const std::size_t M = updates.size();
  ParamVector out(std::vector<double>(P), global_prev.layout_id);
#pragma omp parallel for schedule(static) if (P >= 4096)
  for (std::size_t k = 0; k < P; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < M; ++j) {
      acc += weights[j] * (updates[j][k] - global_prev[k]);
    }
    out[k] = global_prev[k] + acc;
  }
  return out;
}

ParamVector weighted_average(std::span<const ParamVector> updates,
                             std::span<const double> weights) {
  if (updates.empty()) throw InvalidArgument("weighted_average: no updates");
  check_updates(updates[0], updates);
  if (weights.size() != updates.size()) {
    throw DimensionMismatch("aggregation weights", updates.size(), weights.size());
  }
  std::vector<std::span<const double>> rows;
  for (const auto& u : updates) rows.emplace_back(u.values);
  return {kernels::weighted_sum(rows, weights), updates[0].layout_id};
}

double defense_loss(const NetworkSpec& net, const ParamVector& global,
                    const Batch& examples, const DefensePartition& partition) {
  check_params(net, global);
  check_partition(partition, examples.size());
  const auto clean = kernels::per_example_losses(
      net, global, side(examples, partition.clean), LossKind::kClean);
  const auto poison = kernels::per_example_losses(
      net, global, side(examples, partition.poison), LossKind::kPoison);
  double s = 0.0;
  for (double l : clean) s += l;
  for (double l : poison) s += l;
  return s;
}

ThetaGrad theta_gradient(const CIParams& theta, const NetworkSpec& net,
                         const ParamVector& global_prev,
                         std::span<const ParamVector> updates,
                         std::span<const ClientFeatures> features,
                         const Batch& examples,
                         const DefensePartition& partition) {
  check_updates(global_prev, updates);
  if (features.size() != updates.size()) {
    throw DimensionMismatch("client features", updates.size(), features.size());
  }
  check_partition(partition, examples.size());
  const std::size_t M = updates.size();

  std::vector<double> r(M);
  double R = 0.0;
  for (std::size_t j = 0; j < M; ++j) {
    const auto s = features[j].as_array();
    const double v = theta.theta[0] * s[0] + theta.theta[1] * s[1] +
                     theta.theta[2] * s[2];
    r[j] = v > 0.0 ? v : 0.0;
    R += r[j];
  }
  ThetaGrad out;
  if (!(R >= kDegenerate) || !std::isfinite(R)) {
    out.degenerate = true;
    return out;
  }
  std::vector<double> w(M);
  for (std::size_t j = 0; j < M; ++j) w[j] = r[j] / R;
  const ParamVector phi_bar = aggregate_weighted(global_prev, updates, w);

  auto [batch, kinds] = defense_batch(examples, partition);
  const LossGrad lg = grad_sum(net, phi_bar, batch, kinds);
  out.loss = lg.loss;

  // a_j = <dL/dphi_bar, phi_j - global_prev>
  std::array<double, 3> active{};  // sum over active clients of s_k
  std::array<double, 3> weighted{};  // sum over active clients of a_j s_j
  double a_dot_r = 0.0;
  for (std::size_t j = 0; j < M; ++j) {
    double a = 0.0;
    for (std::size_t k = 0; k < global_prev.size(); ++k) {
      a += lg.gradient[k] * (updates[j][k] - global_prev[k]);
    }
    a_dot_r += a * r[j];
    if (r[j] > 0.0) {
      const auto s = features[j].as_array();
      for (int c = 0; c < 3; ++c) {
        active[c] += s[c];
        weighted[c] += a * s[c];
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    out.grad[c] = weighted[c] / R - a_dot_r * active[c] / (R * R);
  }
  return out;
}

ThetaStepResult theta_step(const CIParams& theta, const NetworkSpec& net,
                           const ParamVector& global_prev,
                           std::span<const ParamVector> updates,
                           std::span<const ClientFeatures> features,
                           const Batch& examples,
                           const DefensePartition& partition, double lr,
                           std::size_t inner_steps) {
  if (!(lr >= 0.0)) throw InvalidArgument("theta_step: lr must be >= 0");
  ThetaStepResult out{theta, false};
  if (lr == 0.0) return out;
  for (std::size_t s = 0; s < inner_steps; ++s) {
    const ThetaGrad g = theta_gradient(out.theta, net, global_prev, updates,
                                       features, examples, partition);
    if (g.degenerate) {
      out.degenerate = true;
      break;
    }
    for (int c = 0; c < 3; ++c) out.theta.theta[c] -= lr * g.grad[c];
  }
  return out;
}

ThetaStepResult theta_step(const CIParams& theta, const NetworkSpec& net,
                           const ParamVector& global_prev,
                           std::span<const ParamVector> updates,
                           const Batch& examples,
                           const DefensePartition& partition, double lr,
                           std::size_t inner_steps) {
  check_updates(global_prev, updates);
  std::vector<ClientFeatures> features;
  for (const auto& u : updates) {
    features.push_back(client_features(net, u, global_prev, examples, partition));
  }
  return theta_step(theta, net, global_prev, updates, features, examples,
                    partition, lr, inner_steps);
}

// ---------------------------------------------------------------------------
// PDD

std::size_t PddSpec::param_count() const { return PddLayout(*this).total; }

void PddSpec::validate() const {
  if (input_dim < 1 || n_classes < 2 || h1 < 1 || h2 < 1 || g1 < 1) {
    throw InvalidArgument("pdd spec: all sizes must be >= 1 and n_classes >= 2");
  }
}

PddParams pdd_init(const PddSpec& spec, std::uint64_t seed, double scale) {
  spec.validate();
  if (!(scale >= 0.0)) throw InvalidArgument("pdd_init: scale must be >= 0");
  const PddLayout L(spec);
  PddParams psi{spec, std::vector<double>(L.total, 0.0)};
  Rng rng(seed);
  auto fill = [&](std::size_t off, std::size_t fan_out, std::size_t fan_in) {
    std::normal_distribution<double> nd(
        0.0, scale * std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::size_t i = 0; i < fan_out * fan_in; ++i) psi.values[off + i] = nd(rng);
  };
  fill(L.w0, L.h1, L.d);
  fill(L.w1, L.h2, L.h1);
  fill(L.w2, L.C, L.h2);
  fill(L.w3, L.g1, 2 * L.C);
  fill(L.w4, 1, L.g1);
  return psi;
}

std::vector<double> pdd_raw_scores(const PddParams& psi, const Batch& examples) {
  check_psi(psi, examples);
  const PddLayout L(psi.spec);
  const std::size_t n = examples.size();
  std::vector<double> out(n);
#pragma omp parallel if (n >= 64)
  {
    PddWork w;
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      pdd_forward(L, psi.values.data(), examples.row(i), examples.labels[i], w);
      out[i] = w.g2;
    }
  }
  return out;
}

std::vector<double> pdd_class_probs(const PddParams& psi, std::span<const double> x) {
  psi.spec.validate();
  if (x.size() != psi.spec.input_dim) {
    throw DimensionMismatch("pdd input", psi.spec.input_dim, x.size());
  }
  const PddLayout L(psi.spec);
  PddWork w;
  pdd_forward(L, psi.values.data(), x, 0, w);
  return w.yhat;
}

GammaScores normalize_scores(std::span<const double> raw) {
  if (raw.size() < 2) throw InvalidArgument("pdd scores need >= 2 examples");
  GammaScores out;
  const std::size_t n = raw.size();
  for (std::size_t i = 1; i < n; ++i) {
    if (raw[i] < raw[out.argmin]) out.argmin = i;
    if (raw[i] > raw[out.argmax]) out.argmax = i;
  }
  const double lo = raw[out.argmin];
  const double spread = raw[out.argmax] - lo;
  out.gamma.resize(n);
  if (!(spread >= kDegenerate)) {
    out.degenerate = true;
    std::fill(out.gamma.begin(), out.gamma.end(), 0.5);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.gamma[i] = std::clamp((raw[i] - lo) / spread, 0.0, 1.0);
  }
  out.gamma[out.argmax] = 1.0;
  return out;
}

GammaScores pdd_score(const PddParams& psi, const Batch& examples) {
  return normalize_scores(pdd_raw_scores(psi, examples));
}

DefensePartition partition_defense(std::span<const double> gamma, double beta) {
  if (gamma.size() < 2) throw InvalidArgument("partition_defense: need >= 2 scores");
  if (!(beta > 0.0 && beta < 1.0)) {
    throw InvalidArgument("partition_defense: beta must lie in (0, 1)");
  }
  const std::size_t n = gamma.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return gamma[a] > gamma[b];
  });
  const std::size_t k = round_half_up(beta * static_cast<double>(n));
  DefensePartition p;
  p.poison.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  p.clean.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(p.poison.begin(), p.poison.end());
  std::sort(p.clean.begin(), p.clean.end());
  return p;
}

std::vector<double> loss_gap(const NetworkSpec& net, const ParamVector& global,
                             const Batch& examples) {
  check_params(net, global);
  const auto lp = kernels::per_example_losses(net, global, examples, LossKind::kPoison);
  const auto lc = kernels::per_example_losses(net, global, examples, LossKind::kClean);
  std::vector<double> c(examples.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = lp[i] - lc[i];
  return c;
}

double pdd_cost(const PddParams& psi, const Batch& examples,
                const NetworkSpec& net, const ParamVector& global) {
  const GammaScores g = pdd_score(psi, examples);
  const auto c = loss_gap(net, global, examples);
  double v = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) v += g.gamma[i] * c[i];
  return v;
}

namespace {

double pred_loss(const PddParams& psi, const Batch& examples,
                 std::span<const std::size_t> idx) {
  const PddLayout L(psi.spec);
  PddWork w;
  double s = 0.0;
  for (std::size_t i : idx) {
    pdd_forward(L, psi.values.data(), examples.row(i), examples.labels[i], w);
    s += pdd_ce(w, examples.labels[i]);
  }
  return s;
}

}  // namespace

double psi_objective(const PddParams& psi, const Batch& examples,
                     std::span<const std::size_t> clean_marked,
                     const NetworkSpec& net, const ParamVector& global,
                     double lambda) {
  if (clean_marked.empty()) throw InvalidArgument("psi_objective: D_clean is empty");
  check_indices(clean_marked, examples.size(), "psi_objective");
  const double v = pdd_cost(psi, examples, net, global);
  if (lambda == 0.0) return v;
  return v + lambda * pred_loss(psi, examples, clean_marked);
}

PsiGrad pdd_linear_objective(const PddParams& psi, const Batch& examples,
                             std::span<const double> coeffs,
                             std::span<const std::size_t> pred_idx,
                             double lambda) {
  check_psi(psi, examples);
  const std::size_t n = examples.size();
  if (coeffs.size() != n) throw DimensionMismatch("pdd coefficients", n, coeffs.size());
  check_indices(pred_idx, n, "pdd objective");
  const PddLayout L(psi.spec);

  const std::vector<double> raw = pdd_raw_scores(psi, examples);
  const GammaScores gs = normalize_scores(raw);
  PsiGrad out;
  out.degenerate = gs.degenerate;

  // d objective / d g2 per example.
  std::vector<double> up(n, 0.0);
  if (!gs.degenerate) {
    const double spread = raw[gs.argmax] - raw[gs.argmin];
    double sum_cg = 0.0, sum_c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out.value += coeffs[i] * gs.gamma[i];
      up[i] = coeffs[i] / spread;
      sum_cg += coeffs[i] * gs.gamma[i];
      sum_c += coeffs[i];
    }
    up[gs.argmin] += (sum_cg - sum_c) / spread;
    up[gs.argmax] += -sum_cg / spread;
  } else {
    for (std::size_t i = 0; i < n; ++i) out.value += coeffs[i] * 0.5;
  }
  std::vector<double> pw(n, 0.0);
  for (std::size_t i : pred_idx) pw[i] += lambda;

  const std::size_t P = L.total;
  const std::size_t chunk = kernels::kChunk;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  std::vector<std::vector<double>> cg(n_chunks);
  std::vector<double> closs(n_chunks, 0.0);
#pragma omp parallel if (n_chunks > 1)
  {
    PddWork w;
#pragma omp for schedule(static)
    for (std::size_t c = 0; c < n_chunks; ++c) {
      cg[c].assign(P, 0.0);
      const std::size_t e = std::min(n, (c + 1) * chunk);
      for (std::size_t i = c * chunk; i < e; ++i) {
        if (up[i] == 0.0 && pw[i] == 0.0) continue;
        pdd_forward(L, psi.values.data(), examples.row(i), examples.labels[i], w);
        if (pw[i] != 0.0) closs[c] += pw[i] * pdd_ce(w, examples.labels[i]);
        pdd_backward(L, psi.values.data(), examples.row(i), examples.labels[i],
                     up[i], pw[i], w, cg[c].data());
      }
    }
  }
  out.grad.assign(P, 0.0);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    out.value += closs[c];
    for (std::size_t k = 0; k < P; ++k) out.grad[k] += cg[c][k];
  }
  return out;
}

PsiStepResult psi_step(const PddParams& psi, const Batch& examples,
                       std::span<const std::size_t> clean_marked,
                       const NetworkSpec& net, const ParamVector& global,
                       double lr, double lambda, std::size_t inner_steps) {
  if (clean_marked.empty()) throw InvalidArgument("psi_step: D_clean is empty");
  if (!(lr >= 0.0)) throw InvalidArgument("psi_step: lr must be >= 0");
  if (!(lambda >= 0.0)) throw InvalidArgument("psi_step: lambda must be >= 0");
  PsiStepResult out{psi, false};
  if (lr == 0.0) return out;
  // The global model is constant for this objective, so the loss gap is too.
  const std::vector<double> c = loss_gap(net, global, examples);
  for (std::size_t s = 0; s < inner_steps; ++s) {
    const PsiGrad g = pdd_linear_objective(out.psi, examples, c, clean_marked, lambda);
    out.degenerate = out.degenerate || g.degenerate;
    for (std::size_t k = 0; k < g.grad.size(); ++k) out.psi.values[k] -= lr * g.grad[k];
  }
  return out;
}

namespace {

std::vector<double> consistency_coeffs(std::size_t n,
                                       std::span<const std::size_t> clean_marked) {
  std::vector<bool> marked(n, false);
  for (std::size_t i : clean_marked) {
    if (i >= n) throw InvalidArgument("D_clean index out of range");
    marked[i] = true;
  }
  const auto n_clean =
      static_cast<double>(std::count(marked.begin(), marked.end(), true));
  const double n_rest = static_cast<double>(n) - n_clean;
  if (n_clean == 0.0) throw InvalidArgument("init_psi: D_clean is empty");
  if (n_rest == 0.0) throw InvalidArgument("init_psi: D_clean covers all of D_d");
  // sum_{i clean, j rest} (gamma_i - gamma_j)
  //   = n_rest * sum_clean gamma - n_clean * sum_rest gamma
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = marked[i] ? n_rest : -n_clean;
  return c;
}

}  // namespace

double consistency_objective(const PddParams& psi, const Batch& examples,
                             std::span<const std::size_t> clean_marked,
                             double lambda) {
  const auto c = consistency_coeffs(examples.size(), clean_marked);
  const GammaScores g = pdd_score(psi, examples);
  double v = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) v += c[i] * g.gamma[i];
  if (lambda == 0.0) return v;
  return v + lambda * pred_loss(psi, examples, clean_marked);
}

PddParams init_psi(const PddSpec& spec, const Batch& examples,
                   std::span<const std::size_t> clean_marked, double lambda,
                   std::size_t steps, double lr, std::uint64_t seed,
                   double init_scale) {
  const auto c = consistency_coeffs(examples.size(), clean_marked);
  if (!(lr >= 0.0)) throw InvalidArgument("init_psi: lr must be >= 0");
  PddParams psi = pdd_init(spec, seed, init_scale);
  check_psi(psi, examples);
  for (std::size_t s = 0; s < steps; ++s) {
    const PsiGrad g = pdd_linear_objective(psi, examples, c, clean_marked, lambda);
    for (std::size_t k = 0; k < g.grad.size(); ++k) psi.values[k] -= lr * g.grad[k];
  }
  return psi;
}

// ---------------------------------------------------------------------------
// Round

void LearnDefendConfig::validate() const {
  if (!(beta > 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in (0, 1)");
  if (!(lambda >= 0.0)) throw InvalidArgument("lambda must be >= 0");
  if (!(theta_lr > 0.0)) throw InvalidArgument("theta_lr must be > 0");
  if (!(psi_lr > 0.0)) throw InvalidArgument("psi_lr must be > 0");
  if (psi_schedule == PsiSchedule::kDecay && !(psi_lr_decay > 0.0 && psi_lr_decay <= 1.0)) {
    throw InvalidArgument("psi_lr_decay must lie in (0, 1]");
  }
  if (inner_steps_theta < 1 || inner_steps_psi < 1) {
    throw InvalidArgument("inner steps must be >= 1");
  }
  for (double v : theta_init.theta) {
    if (!std::isfinite(v)) throw InvalidArgument("theta_init must be finite");
  }
  pdd.validate();
  if (!(pdd_init_scale > 0.0)) throw InvalidArgument("pdd_init_scale must be > 0");
  if (!(init_psi_lr >= 0.0)) throw InvalidArgument("init_psi_lr must be >= 0");
}

double LearnDefendConfig::psi_lr_at(std::size_t t) const {
  if (psi_schedule == PsiSchedule::kConstant) return psi_lr;
  return psi_lr * std::pow(psi_lr_decay, static_cast<double>(t));
}

LearnDefendState make_learndefend_state(const LearnDefendConfig& cfg,
                                        DefenseDataset data, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  LearnDefendState st;
  st.theta = cfg.theta_init;
  st.psi = init_psi(cfg.pdd, data.examples, data.clean_marked, cfg.lambda,
                    cfg.init_psi_steps, cfg.init_psi_lr, seed, cfg.pdd_init_scale);
  st.data = std::move(data);
  return st;
}

RoundOutcome learndefend_round(LearnDefendState& state, const NetworkSpec& net,
                               const ParamVector& global_prev,
                               std::span<const ParamVector> updates,
                               const LearnDefendConfig& cfg, std::size_t t,
                               bool update_params) {
  check_params(net, global_prev);
  check_updates(global_prev, updates);
  const Batch& ex = state.data.examples;
  const double eta = cfg.psi_lr_at(t);

  RoundOutcome out;
  if (update_params && cfg.psi_order == PsiUpdateOrder::kBeforeAggregation) {
    const auto r = psi_step(state.psi, ex, state.data.clean_marked, net, global_prev,
                            eta, cfg.lambda, cfg.inner_steps_psi);
    state.psi = r.psi;
    out.degenerate_scores = r.degenerate;
  }

  const GammaScores gs = pdd_score(state.psi, ex);
  out.degenerate_scores = out.degenerate_scores || gs.degenerate;
  state.data.partition = partition_defense(gs.gamma, cfg.beta);
  state.data.beta = cfg.beta;

  const std::size_t M = updates.size();
  out.features.resize(M);
  const Batch dc = side(ex, state.data.partition.clean);
  const Batch dp = side(ex, state.data.partition.poison);
#pragma omp parallel for schedule(static) if (M > 1)
  for (std::size_t j = 0; j < M; ++j) {
    out.features[j].clean_loss = mean_ce(net, updates[j], dc);
    out.features[j].poison_loss = mean_ce(net, updates[j], dp);
    out.features[j].dist = l2_dist(updates[j], global_prev);
  }

  const ImportanceWeights iw = client_importance(out.features, state.theta);
  out.weights = iw.weights;
  out.degenerate_weights = iw.degenerate;
  out.global = aggregate_weighted(global_prev, updates, out.weights);

  if (update_params) {
    const ThetaStepResult ts =
        theta_step(state.theta, net, global_prev, updates, out.features, ex,
                   state.data.partition, cfg.theta_lr, cfg.inner_steps_theta);
    state.theta = ts.theta;
    if (cfg.psi_order == PsiUpdateOrder::kAfterAggregation) {
      const auto r = psi_step(state.psi, ex, state.data.clean_marked, net,
                              out.global, eta, cfg.lambda, cfg.inner_steps_psi);
      state.psi = r.psi;
      out.degenerate_scores = out.degenerate_scores || r.degenerate;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointMagic = "ldsim-checkpoint";
constexpr int kCheckpointVersion = 1;

template <typename T>
void write_list(std::ostream& os, const char* key, const std::vector<T>& v) {
  os << key << ' ' << v.size();
  for (const T& x : v) {
    if constexpr (std::is_floating_point_v<T>) {
      os << ' ' << format_double(x);
    } else {
      os << ' ' << x;
    }
  }
  os << '\n';
}

std::vector<std::string> expect_line(std::istream& is, const char* key) {
  std::string line;
  if (!std::getline(is, line)) {
    throw Error(std::string("checkpoint: missing '") + key + "' line");
  }
  std::vector<std::string> tok;
  std::istringstream ss(line);
  for (std::string s; ss >> s;) tok.push_back(s);
  if (tok.empty() || tok[0] != key) {
    throw Error(std::string("checkpoint: expected '") + key + "' line");
  }
  return tok;
}

std::size_t to_size(const std::string& s) {
  const long long v = parse_int(s);
  if (v < 0) throw Error("checkpoint: negative count");
  return static_cast<std::size_t>(v);
}

template <typename T>
std::vector<T> read_list(const std::vector<std::string>& tok, std::size_t first) {
  if (tok.size() <= first) throw Error("checkpoint: truncated list");
  const std::size_t n = to_size(tok[first]);
  if (tok.size() != first + 1 + n) throw Error("checkpoint: list length mismatch");
  std::vector<T> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(parse_double(tok[first + 1 + i]));
    } else {
      out.push_back(to_size(tok[first + 1 + i]));
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(std::ostream& os, std::size_t round,
                     const LearnDefendState& state, const ParamVector& global) {
  const PddSpec& s = state.psi.spec;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "round " << round << '\n';
  os << "theta " << format_double(state.theta.theta[0]) << ' '
     << format_double(state.theta.theta[1]) << ' '
     << format_double(state.theta.theta[2]) << '\n';
  os << "pdd_spec " << s.input_dim << ' ' << s.n_classes << ' ' << s.h1 << ' '
     << s.h2 << ' ' << s.g1 << '\n';
  write_list(os, "psi", state.psi.values);
  write_list(os, "ddp", state.data.partition.poison);
  write_list(os, "ddc", state.data.partition.clean);
  os << "global_layout " << global.layout_id << '\n';
  write_list(os, "global", global.values);
}

Checkpoint load_checkpoint(std::istream& is) {
  Checkpoint ck;
  {
    const auto tok = expect_line(is, kCheckpointMagic);
    if (tok.size() != 2 || parse_int(tok[1]) != kCheckpointVersion) {
      throw Error("checkpoint: unsupported version");
    }
  }
  {
    const auto tok = expect_line(is, "round");
    if (tok.size() != 2) throw Error("checkpoint: bad round line");
    ck.round = to_size(tok[1]);
  }
  {
    const auto tok = expect_line(is, "theta");
    if (tok.size() != 4) throw Error("checkpoint: bad theta line");
    for (int c = 0; c < 3; ++c) ck.theta.theta[c] = parse_double(tok[c + 1]);
  }
  {
    const auto tok = expect_line(is, "pdd_spec");
    if (tok.size() != 6) throw Error("checkpoint: bad pdd_spec line");
    ck.psi.spec = {to_size(tok[1]), to_size(tok[2]), to_size(tok[3]),
                   to_size(tok[4]), to_size(tok[5])};
  }
  ck.psi.values = read_list<double>(expect_line(is, "psi"), 1);
  if (ck.psi.values.size() != ck.psi.spec.param_count()) {
    throw Error("checkpoint: psi size does not match pdd_spec");
  }
  ck.partition.poison = read_list<std::size_t>(expect_line(is, "ddp"), 1);
  ck.partition.clean = read_list<std::size_t>(expect_line(is, "ddc"), 1);
  {
    const auto tok = expect_line(is, "global_layout");
    if (tok.size() != 2) throw Error("checkpoint: bad global_layout line");
    ck.global.layout_id = std::stoull(tok[1]);
  }
  ck.global.values = read_list<double>(expect_line(is, "global"), 1);
  return ck;
}

}  // namespace ldsim
