#include "ldsim/param_math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ldsim/error.hpp"
#include "ldsim/kernels.hpp"
#include "ldsim/rng.hpp"
#include "network_impl.hpp"

namespace ldsim {

void NetworkSpec::validate() const {
  if (layer_sizes.size() < 2) {
    throw InvalidArgument("NetworkSpec needs at least two layers");
  }
  for (std::size_t s : layer_sizes) {
    if (s == 0) throw InvalidArgument("NetworkSpec layer sizes must be >= 1");
  }
  if (head == Head::kLinearScalar && output_dim() != 1) {
    throw InvalidArgument("linear-scalar head needs output dim 1");
  }
}

std::size_t NetworkSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    n += (layer_sizes[l] + 1) * layer_sizes[l + 1];
  }
  return n;
}

std::uint64_t NetworkSpec::layout_id() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  feed(layer_sizes.size());
  for (std::size_t s : layer_sizes) feed(s);
  feed(static_cast<std::uint64_t>(activation));
  feed(static_cast<std::uint64_t>(head));
  return h;
}

void Batch::push_back(std::span<const double> x, int label) {
  if (dim == 0 && inputs.empty()) dim = x.size();
  if (x.size() != dim) throw DimensionMismatch("Batch::push_back", dim, x.size());
  inputs.insert(inputs.end(), x.begin(), x.end());
  labels.push_back(label);
}

Batch Batch::subset(std::span<const std::size_t> indices) const {
  Batch out;
  out.dim = dim;
  out.inputs.reserve(indices.size() * dim);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw InvalidArgument("Batch::subset index out of range");
    auto r = row(i);
    out.inputs.insert(out.inputs.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
    if (!targets.empty()) out.targets.push_back(targets[i]);
  }
  return out;
}

Batch Batch::concat(const Batch& a, const Batch& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.dim != b.dim) throw DimensionMismatch("Batch::concat", a.dim, b.dim);
  if (a.targets.empty() != b.targets.empty()) {
    throw InvalidArgument("Batch::concat: targets present on one side only");
  }
  Batch out = a;
  out.inputs.insert(out.inputs.end(), b.inputs.begin(), b.inputs.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.targets.insert(out.targets.end(), b.targets.begin(), b.targets.end());
  return out;
}

void Batch::validate(std::size_t n_classes) const {
  if (inputs.size() != labels.size() * dim) {
    throw DimensionMismatch("Batch inputs", labels.size() * dim, inputs.size());
  }
  if (!targets.empty() && targets.size() != labels.size()) {
    throw DimensionMismatch("Batch targets", labels.size(), targets.size());
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw InvalidArgument("Batch label " + std::to_string(y) +
                            " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

void check_params(const NetworkSpec& spec, const ParamVector& params) {
  if (params.layout_id != spec.layout_id()) {
    throw LayoutMismatch("parameter vector does not belong to this network");
  }
  if (params.size() != spec.param_count()) {
    throw DimensionMismatch("parameter vector", spec.param_count(),
                            params.size());
  }
}

namespace {

void check_input(const NetworkSpec& spec, std::size_t n) {
  if (n != spec.input_dim()) {
    throw DimensionMismatch("network input", spec.input_dim(), n);
  }
}

void check_batch(const NetworkSpec& spec, const Batch& batch, LossKind kind) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  check_input(spec, batch.dim);
  if (kind == LossKind::kSquared) {
    if (spec.head != Head::kLinearScalar) {
      throw InvalidArgument("squared loss needs a linear-scalar head");
    }
    if (batch.targets.size() != batch.size()) {
      throw DimensionMismatch("regression targets", batch.size(),
                              batch.targets.size());
    }
  } else {
    if (spec.head != Head::kSoftmax) {
      throw InvalidArgument("classification loss needs a softmax head");
    }
    batch.validate(spec.output_dim());
  }
}

void check_same_layout(const ParamVector& x, const ParamVector& y) {
  if (x.layout_id != y.layout_id) {
    throw LayoutMismatch("parameter vectors have different layouts");
  }
  if (x.size() != y.size()) {
    throw DimensionMismatch("parameter vector", x.size(), y.size());
  }
}

}  // namespace

namespace detail {

void forward_into(const NetworkSpec& spec, std::span<const double> params,
                  std::span<const double> x, Workspace& ws) {
  const std::size_t L = spec.num_layers();
  ws.acts.resize(L + 1);
  ws.acts[0].assign(x.begin(), x.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t fin = spec.layer_sizes[l];
    const std::size_t fout = spec.layer_sizes[l + 1];
    const double* W = params.data() + off;
    const double* b = W + fin * fout;
    const std::vector<double>& in = ws.acts[l];
    std::vector<double>& out = ws.acts[l + 1];
    out.resize(fout);
    for (std::size_t o = 0; o < fout; ++o) {
      double z = b[o];
      const double* w = W + o * fin;
      for (std::size_t i = 0; i < fin; ++i) z += w[i] * in[i];
      out[o] = (l + 1 < L) ? std::max(0.0, z) : z;
    }
    off += (fin + 1) * fout;
  }
  if (spec.head == Head::kSoftmax) {
    const std::vector<double>& z = ws.acts[L];
    ws.probs.resize(z.size());
    const double zmax = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      ws.probs[k] = std::exp(z[k] - zmax);
      s += ws.probs[k];
    }
    for (double& p : ws.probs) p /= s;
  } else {
    ws.probs = ws.acts[L];
  }
}

namespace {

// 1 - p_y computed as the sum of the other classes for accuracy near 1.
double complement(const std::vector<double>& p, int y) {
  double q = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (static_cast<int>(k) != y) q += p[k];
  }
  return q;
}

double clamp_prob(double p) {
  return std::clamp(p, kProbFloor, 1.0 - kProbFloor);
}

}  // namespace

double output_loss(const NetworkSpec& spec, const Workspace& ws, int label,
                   double target, LossKind kind) {
  (void)spec;
  switch (kind) {
    case LossKind::kClean:
    case LossKind::kCrossEntropy:
      return -std::log(clamp_prob(ws.probs[label]));
    case LossKind::kPoison:
      return -std::log(clamp_prob(complement(ws.probs, label)));
    case LossKind::kSquared: {
      const double r = ws.probs[0] - target;
      return 0.5 * r * r;
    }
  }
  return 0.0;
}

double example_loss_grad(const NetworkSpec& spec, std::span<const double> params,
                         std::span<const double> x, int label, double target,
                         LossKind kind, std::span<double> grad_accum,
                         Workspace& ws) {
  forward_into(spec, params, x, ws);
  const double loss = output_loss(spec, ws, label, target, kind);
  if (grad_accum.empty()) return loss;

  const std::size_t L = spec.num_layers();
  const std::size_t C = spec.output_dim();
  ws.delta.assign(C, 0.0);
  switch (kind) {
    case LossKind::kClean:
    case LossKind::kCrossEntropy:
      for (std::size_t k = 0; k < C; ++k) ws.delta[k] = ws.probs[k];
      ws.delta[label] -= 1.0;
      break;
    case LossKind::kPoison: {
      // d/dz_k [-log(1 - p_y)] = p_y (delta_yk - p_k) / (1 - p_y)
      const double py = ws.probs[label];
      const double q = std::max(complement(ws.probs, label), kProbFloor);
      for (std::size_t k = 0; k < C; ++k) {
        const double d = (static_cast<int>(k) == label ? 1.0 : 0.0) - ws.probs[k];
        ws.delta[k] = py * d / q;
      }
      break;
    }
    case LossKind::kSquared:
      ws.delta[0] = ws.probs[0] - target;
      break;
  }

  // Walk layers backwards; offsets computed from the end.
  std::size_t off = spec.param_count();
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t fin = spec.layer_sizes[l];
    const std::size_t fout = spec.layer_sizes[l + 1];
    off -= (fin + 1) * fout;
    const double* W = params.data() + off;
    double* gW = grad_accum.data() + off;
    double* gb = gW + fin * fout;
    const std::vector<double>& in = ws.acts[l];
    for (std::size_t o = 0; o < fout; ++o) {
      const double d = ws.delta[o];
      if (d == 0.0) continue;
      double* g = gW + o * fin;
      for (std::size_t i = 0; i < fin; ++i) g[i] += d * in[i];
      gb[o] += d;
    }
    if (l == 0) break;
    ws.delta_prev.assign(fin, 0.0);
    for (std::size_t o = 0; o < fout; ++o) {
      const double d = ws.delta[o];
      if (d == 0.0) continue;
      const double* w = W + o * fin;
      for (std::size_t i = 0; i < fin; ++i) ws.delta_prev[i] += w[i] * d;
    }
    // ReLU subgradient: 0 at the kink.
    for (std::size_t i = 0; i < fin; ++i) {
      if (in[i] <= 0.0) ws.delta_prev[i] = 0.0;
    }
    ws.delta.swap(ws.delta_prev);
  }
  return loss;
}

}  // namespace detail

std::vector<double> logits(const NetworkSpec& spec, const ParamVector& params,
                           std::span<const double> x) {
  check_params(spec, params);
  check_input(spec, x.size());
  detail::Workspace ws;
  detail::forward_into(spec, params.values, x, ws);
  return ws.acts.back();
}

std::vector<double> forward(const NetworkSpec& spec, const ParamVector& params,
                            std::span<const double> x) {
  check_params(spec, params);
  check_input(spec, x.size());
  detail::Workspace ws;
  detail::forward_into(spec, params.values, x, ws);
  return ws.probs;
}

LossGrad grad(const NetworkSpec& spec, const ParamVector& params,
              const Batch& batch, LossKind kind) {
  check_params(spec, params);
  check_batch(spec, batch, kind);
  std::vector<LossKind> kinds(batch.size(), kind);
  LossGrad out = kernels::accumulate_loss_grad(spec, params, batch, kinds);
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (double& g : out.gradient.values) g *= inv;
  return out;
}

LossGrad grad_sum(const NetworkSpec& spec, const ParamVector& params,
                  const Batch& batch, std::span<const LossKind> kinds) {
  check_params(spec, params);
  if (kinds.size() != batch.size()) {
    throw DimensionMismatch("per-example loss kinds", batch.size(), kinds.size());
  }
  for (LossKind k : {LossKind::kClean, LossKind::kPoison}) {
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) {
      check_batch(spec, batch, k);
    }
  }
  if (batch.empty()) throw InvalidArgument("empty batch");
  return kernels::accumulate_loss_grad(spec, params, batch, kinds);
}

std::vector<double> example_losses(const NetworkSpec& spec,
                                   const ParamVector& params,
                                   const Batch& batch, LossKind kind) {
  check_params(spec, params);
  check_batch(spec, batch, kind);
  return kernels::per_example_losses(spec, params, batch, kind);
}

std::vector<int> predict(const NetworkSpec& spec, const ParamVector& params,
                         const Batch& batch) {
  check_params(spec, params);
  check_input(spec, batch.dim);
  return kernels::predict_classes(spec, params, batch);
}

ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  check_same_layout(x, y);
  ParamVector out = y;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + y[i];
  return out;
}

double l2_norm(const ParamVector& x) {
  double s = 0.0;
  for (double v : x.values) s += v * v;
  return std::sqrt(s);
}

double l2_dist(const ParamVector& x, const ParamVector& y) {
  check_same_layout(x, y);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s);
}

ParamVector project_l2_ball(const ParamVector& x, const ParamVector& center,
                            double eps) {
  if (!(eps >= 0.0)) throw InvalidArgument("projection radius must be >= 0");
  const double d = l2_dist(x, center);
  if (d <= eps) return x;
  if (eps == 0.0) return center;
  ParamVector out = center;
  double scale = eps / d;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = center[i] + scale * (x[i] - center[i]);
  }
  // Rounding can leave the result a hair outside; shrink until inside so the
  // projection is idempotent.
  while (l2_dist(out, center) > eps) {
    scale = std::nextafter(scale, 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = center[i] + scale * (x[i] - center[i]);
    }
  }
  return out;
}

double LrSchedule::at(std::size_t t) const {
  return base * std::pow(decay, static_cast<double>(t));
}

MomentumSgd::MomentumSgd(std::size_t n, double momentum, double weight_decay)
    : velocity_(n, 0.0), momentum_(momentum), weight_decay_(weight_decay) {}

void MomentumSgd::step(ParamVector& params, const ParamVector& gradient,
                       double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double d = gradient[i] + weight_decay_ * params[i];
    velocity_[i] = momentum_ * velocity_[i] + d;
    params[i] -= lr * velocity_[i];
  }
}

ParamVector sgd_train(const NetworkSpec& spec, const ParamVector& start,
                      const Batch& data, const SgdOptions& opts,
                      std::uint64_t seed) {
  check_params(spec, start);
  if (data.empty()) throw InvalidArgument("sgd_train: empty training data");
  if (opts.batch_size == 0) throw InvalidArgument("sgd_train: batch_size 0");
  if (opts.lr.base < 0.0) throw InvalidArgument("sgd_train: negative lr");
  check_batch(spec, data, opts.loss);
  if (opts.lr.base == 0.0) return start;

  ParamVector params = start;
  MomentumSgd opt(params.size(), opts.momentum, opts.weight_decay);
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const double lr = opts.lr.at(epoch);
    if (!(lr > 0.0)) throw InvalidArgument("sgd_train: non-positive lr");
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += opts.batch_size) {
      const std::size_t e = std::min(order.size(), s + opts.batch_size);
      Batch mb = data.subset(std::span(order).subspan(s, e - s));
      LossGrad g = grad(spec, params, mb, opts.loss);
      opt.step(params, g.gradient, lr);
    }
  }
  return params;
}

ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed,
                        double scale) {
  spec.validate();
  ParamVector p = ParamVector::zeros(spec);
  Rng rng(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t fin = spec.layer_sizes[l];
    const std::size_t fout = spec.layer_sizes[l + 1];
    std::normal_distribution<double> nd(
        0.0, scale * std::sqrt(2.0 / static_cast<double>(fin)));
    for (std::size_t i = 0; i < fin * fout; ++i) p[off + i] = nd(rng);
    off += (fin + 1) * fout;
  }
  return p;
}

}  // namespace ldsim
