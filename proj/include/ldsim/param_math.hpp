#pragma once

// Flat parameter vectors, small dense networks with hand-written
// forward/backward passes, momentum SGD and l2-ball projection.
//
// All arithmetic is float64. A network's parameters are stored flat, layer by
// layer, each layer as a row-major weight matrix (fan_out x fan_in) followed
// by its bias vector (fan_out).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ldsim {

// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before any log.
inline constexpr double kProbFloor = 1e-12;

enum class Activation { kRelu };
enum class Head { kSoftmax, kLinearScalar };

struct NetworkSpec {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::kRelu;
  Head head = Head::kSoftmax;

  // Throws InvalidArgument unless there are >= 2 layers, all sizes >= 1.
  void validate() const;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  // Sum over layers of (fan_in + 1) * fan_out.
  std::size_t param_count() const;
  // Stable identifier of the flat layout (FNV-1a over the shape).
  std::uint64_t layout_id() const;
};

struct ParamVector {
  std::vector<double> values;
  std::uint64_t layout_id = 0;

  ParamVector() = default;
  ParamVector(std::vector<double> v, std::uint64_t layout)
      : values(std::move(v)), layout_id(layout) {}

  static ParamVector zeros(const NetworkSpec& spec) {
    return {std::vector<double>(spec.param_count(), 0.0), spec.layout_id()};
  }

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool operator==(const ParamVector&) const = default;
};

// n x dim row-major inputs with class labels. `targets` is only used by the
// linear-scalar head (squared loss) and is otherwise empty.
struct Batch {
  std::size_t dim = 0;
  std::vector<double> inputs;
  std::vector<int> labels;
  std::vector<double> targets;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const double> row(std::size_t i) const {
    return {inputs.data() + i * dim, dim};
  }
  std::span<double> row(std::size_t i) { return {inputs.data() + i * dim, dim}; }

  void push_back(std::span<const double> x, int label);
  Batch subset(std::span<const std::size_t> indices) const;
  // Concatenation; both batches must share `dim`.
  static Batch concat(const Batch& a, const Batch& b);
  // Throws unless every label is in [0, n_classes) and shapes agree.
  void validate(std::size_t n_classes) const;

  bool operator==(const Batch&) const = default;
};

// Per-example losses:
//   kClean / kCrossEntropy : -log f_y(x)
//   kPoison                : -log(1 - f_y(x))
//   kSquared               : 0.5 (out - target)^2   (linear-scalar head only)
enum class LossKind { kClean, kPoison, kCrossEntropy, kSquared };

// Class-probability vector (softmax head) or the single output (scalar head).
std::vector<double> forward(const NetworkSpec& spec, const ParamVector& params,
                            std::span<const double> x);

// Raw pre-softmax outputs.
std::vector<double> logits(const NetworkSpec& spec, const ParamVector& params,
                           std::span<const double> x);

struct LossGrad {
  double loss = 0.0;
  ParamVector gradient;
};

// Mean loss over the batch and its gradient.
LossGrad grad(const NetworkSpec& spec, const ParamVector& params,
              const Batch& batch, LossKind kind);

// Summed loss with a per-example loss kind, and its gradient.
LossGrad grad_sum(const NetworkSpec& spec, const ParamVector& params,
                  const Batch& batch, std::span<const LossKind> kinds);

// Per-example loss values (no gradient).
std::vector<double> example_losses(const NetworkSpec& spec,
                                   const ParamVector& params,
                                   const Batch& batch, LossKind kind);

// Argmax class per example; ties go to the lowest class index.
std::vector<int> predict(const NetworkSpec& spec, const ParamVector& params,
                         const Batch& batch);

// a*x + y
ParamVector axpy(double a, const ParamVector& x, const ParamVector& y);
double l2_norm(const ParamVector& x);
double l2_dist(const ParamVector& x, const ParamVector& y);

// Nearest point to x inside the closed l2 ball around `center`. Returns x
// unchanged when it is already inside.
ParamVector project_l2_ball(const ParamVector& x, const ParamVector& center,
                            double eps);

// lr(t) = base * decay^t
struct LrSchedule {
  double base = 0.01;
  double decay = 1.0;
  double at(std::size_t t) const;
};

struct SgdOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  LrSchedule lr;  // indexed by epoch
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LossKind loss = LossKind::kCrossEntropy;
};

// Heavy-ball SGD with coupled l2 weight decay:
//   d = g + wd * p;  v = mu * v + d;  p -= lr * v
class MomentumSgd {
 public:
  MomentumSgd(std::size_t n, double momentum, double weight_decay);
  void step(ParamVector& params, const ParamVector& gradient, double lr);

 private:
  std::vector<double> velocity_;
  double momentum_;
  double weight_decay_;
};

// Mini-batch momentum SGD over shuffled epochs. Deterministic given `seed`.
// A zero learning rate returns `start` unchanged.
ParamVector sgd_train(const NetworkSpec& spec, const ParamVector& start,
                      const Batch& data, const SgdOptions& opts,
                      std::uint64_t seed);

// He-style random initialisation (weights ~ N(0, scale^2 * 2/fan_in), zero
// bias).
ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed,
                        double scale = 1.0);

// Throws LayoutMismatch / DimensionMismatch when `params` does not fit spec.
void check_params(const NetworkSpec& spec, const ParamVector& params);

}  // namespace ldsim
