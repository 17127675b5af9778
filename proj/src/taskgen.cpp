#include "ldsim/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "ldsim/error.hpp"
#include "ldsim/io.hpp"

namespace ldsim {

namespace {

enum Stream : std::uint64_t {
  kTrain = 1,
  kTest,
  kEdge,
  kPoisonPick,
  kCleanPick,
  kShuffle,
  kMarks,
  kPoisonDraw,
};

void check_fraction(const char* name, double v) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw InvalidArgument(std::string(name) + " must lie in [0, 1]");
  }
}

Batch sample_clusters(const TaskSpec& spec,
                      const std::vector<std::vector<double>>& centers,
                      std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % spec.n_classes);
  }
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> nd(0.0, spec.cluster_std);
  Batch b;
  b.dim = spec.dim;
  b.inputs.reserve(n * spec.dim);
  for (int y : labels) {
    for (std::size_t k = 0; k < spec.dim; ++k) {
      b.inputs.push_back(centers[y][k] + nd(rng));
    }
    b.labels.push_back(y);
  }
  return b;
}

// k distinct draws from [0, n), or with replacement when k > n.
std::vector<std::size_t> pick(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k <= n) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    return idx;
  }
  std::uniform_int_distribution<std::size_t> u(0, n - 1);
  std::vector<std::size_t> out(k);
  for (auto& v : out) v = u(rng);
  return out;
}

}  // namespace

std::size_t round_half_up(double x) {
  if (!(x >= 0.0)) throw InvalidArgument("round_half_up: negative count");
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

void TaskSpec::validate() const {
  if (n_classes < 2) throw InvalidArgument("TaskSpec: n_classes must be >= 2");
  if (dim < 2) throw InvalidArgument("TaskSpec: dim must be >= 2");
  if (n_classes > dim) {
    throw InvalidArgument("TaskSpec: cannot place " +
                          std::to_string(n_classes) +
                          " equidistant centres in dim " + std::to_string(dim));
  }
  if (!(cluster_separation > 0.0)) {
    throw InvalidArgument("TaskSpec: cluster_separation must be > 0");
  }
  if (!(cluster_std > 0.0)) throw InvalidArgument("TaskSpec: cluster_std must be > 0");
  if (n_train < n_classes || n_test < 1) {
    throw InvalidArgument("TaskSpec: too few train/test examples");
  }
}

Task make_task(const TaskSpec& spec) {
  spec.validate();
  Task task;
  const double r = spec.cluster_separation / std::sqrt(2.0);
  task.centers.assign(spec.n_classes, std::vector<double>(spec.dim, 0.0));
  for (std::size_t c = 0; c < spec.n_classes; ++c) task.centers[c][c] = r;
  task.train = sample_clusters(spec, task.centers, spec.n_train,
                               derive_seed(spec.seed, {kTrain}));
  task.test = sample_clusters(spec, task.centers, spec.n_test,
                              derive_seed(spec.seed, {kTest}));
  return task;
}

void BackdoorSpec::validate(std::size_t dim, std::size_t n_classes) const {
  const auto nc = static_cast<int>(n_classes);
  if (source_class < 0 || source_class >= nc || target_class < 0 ||
      target_class >= nc) {
    throw InvalidArgument("BackdoorSpec: class index out of range");
  }
  if (source_class == target_class) {
    throw InvalidArgument("BackdoorSpec: source_class must differ from target_class");
  }
  if (kind == BackdoorKind::kTriggerPatch) {
    if (patch_support.empty()) {
      throw InvalidArgument("BackdoorSpec: trigger patch needs a nonempty support");
    }
    if (patch_values.size() != patch_support.size()) {
      throw DimensionMismatch("BackdoorSpec patch values", patch_support.size(),
                              patch_values.size());
    }
    for (std::size_t i : patch_support) {
      if (i >= dim) throw InvalidArgument("BackdoorSpec: patch index out of range");
    }
    if (!(transparency > 0.0 && transparency <= 1.0)) {
      throw InvalidArgument("BackdoorSpec: transparency must lie in (0, 1]");
    }
  }
  if (kind == BackdoorKind::kEdgeCase && edge_center.size() != dim) {
    throw DimensionMismatch("BackdoorSpec edge centre", dim, edge_center.size());
  }
}

BackdoorSpec make_backdoor(BackdoorKind kind, const Task& task,
                           const TaskSpec& spec, int source, int target,
                           std::size_t trigger_size, double trigger_value,
                           double transparency, double edge_offset,
                           std::uint64_t seed) {
  BackdoorSpec b;
  b.kind = kind;
  b.source_class = source;
  b.target_class = target;
  b.transparency = transparency;
  b.edge_offset = edge_offset;
  b.edge_std = spec.cluster_std;
  if (kind == BackdoorKind::kTriggerPatch) {
    if (trigger_size == 0 || trigger_size > spec.dim) {
      throw InvalidArgument("trigger_size must lie in [1, dim]");
    }
    for (std::size_t i = spec.dim - trigger_size; i < spec.dim; ++i) {
      b.patch_support.push_back(i);
      b.patch_values.push_back(trigger_value);
    }
  }
  if (kind == BackdoorKind::kEdgeCase) {
    // Unit direction inside the noise-only coordinates.
    Rng rng(derive_seed(seed, {kEdge}));
    std::normal_distribution<double> nd;
    std::vector<double> u(spec.dim, 0.0);
    double norm = 0.0;
    while (norm == 0.0) {
      for (std::size_t k = spec.n_classes; k < spec.dim; ++k) {
        u[k] = nd(rng);
        norm += u[k] * u[k];
      }
      if (spec.n_classes == spec.dim) {
        u.assign(spec.dim, 1.0);
        norm = static_cast<double>(spec.dim);
      }
    }
    norm = std::sqrt(norm);
    b.edge_center = task.centers.at(source);
    for (std::size_t k = 0; k < spec.dim; ++k) {
      b.edge_center[k] += edge_offset * u[k] / norm;
    }
  }
  b.validate(spec.dim, spec.n_classes);
  return b;
}

Example poison(std::span<const double> x, int label, const BackdoorSpec& spec,
               Rng& rng) {
  Example out{std::vector<double>(x.begin(), x.end()), spec.target_class};
  switch (spec.kind) {
    case BackdoorKind::kLabelFlip:
    case BackdoorKind::kTriggerPatch:
      if (label != spec.source_class) {
        throw InvalidArgument("poison: example label " + std::to_string(label) +
                              " is not the source class " +
                              std::to_string(spec.source_class));
      }
      break;
    case BackdoorKind::kEdgeCase:
      break;
  }
  if (spec.kind == BackdoorKind::kTriggerPatch) {
    const double tau = spec.transparency;
    for (std::size_t j = 0; j < spec.patch_support.size(); ++j) {
      const std::size_t i = spec.patch_support[j];
      out.x[i] = (1.0 - tau) * x[i] + tau * spec.patch_values[j];
    }
  } else if (spec.kind == BackdoorKind::kEdgeCase) {
    std::normal_distribution<double> nd(0.0, spec.edge_std);
    for (std::size_t k = 0; k < out.x.size(); ++k) {
      out.x[k] = spec.edge_center[k] + nd(rng);
    }
  }
  return out;
}

Batch make_attack_set(const Batch& data, const BackdoorSpec& spec,
                      std::uint64_t seed) {
  Rng rng(seed);
  Batch out;
  out.dim = data.dim;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] != spec.source_class) continue;
    Example e = poison(data.row(i), data.labels[i], spec, rng);
    out.push_back(e.x, e.label);
  }
  return out;
}

ClientPartition partition_clients(const Batch& train, std::size_t K,
                                  const PartitionScheme& scheme,
                                  std::uint64_t seed) {
  if (K < 1) throw InvalidArgument("partition_clients: K must be >= 1");
  const std::size_t n = train.size();
  if (K > n) {
    throw InvalidArgument("partition_clients: " + std::to_string(K) +
                          " clients for " + std::to_string(n) + " examples");
  }
  Rng rng(seed);
  ClientPartition part;
  part.scheme = scheme;

  if (scheme.kind == PartitionKind::kIid) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    part.assignments.resize(K);
    for (std::size_t j = 0; j < K; ++j) {
      const std::size_t b = j * n / K;
      const std::size_t e = (j + 1) * n / K;
      part.assignments[j].assign(idx.begin() + b, idx.begin() + e);
      std::sort(part.assignments[j].begin(), part.assignments[j].end());
    }
    return part;
  }

  if (!(scheme.alpha > 0.0)) {
    throw InvalidArgument("partition_clients: dirichlet alpha must be > 0");
  }
  int max_label = *std::max_element(train.labels.begin(), train.labels.end());
  std::vector<std::vector<std::size_t>> by_class(max_label + 1);
  for (std::size_t i = 0; i < n; ++i) by_class[train.labels[i]].push_back(i);

  std::gamma_distribution<double> gamma(scheme.alpha, 1.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    part.assignments.assign(K, {});
    for (auto cls : by_class) {
      if (cls.empty()) continue;
      std::shuffle(cls.begin(), cls.end(), rng);
      std::vector<double> share(K);
      double total = 0.0;
      while (total <= 0.0) {
        total = 0.0;
        for (auto& s : share) {
          s = gamma(rng);
          total += s;
        }
      }
      double cum = 0.0;
      std::size_t prev = 0;
      for (std::size_t j = 0; j < K; ++j) {
        cum += share[j];
        const std::size_t cut =
            j + 1 == K ? cls.size()
                       : std::min(cls.size(), round_half_up(cum / total *
                                                            static_cast<double>(cls.size())));
        for (std::size_t i = prev; i < cut; ++i) {
          part.assignments[j].push_back(cls[i]);
        }
        prev = std::max(prev, cut);
      }
    }
    const bool ok = std::none_of(part.assignments.begin(), part.assignments.end(),
                                 [](const auto& a) { return a.empty(); });
    if (ok) {
      for (auto& a : part.assignments) std::sort(a.begin(), a.end());
      return part;
    }
  }
  throw InvalidArgument("partition_clients: could not give every client data");
}

void DefenseDataset::validate() const {
  const std::size_t n = size();
  std::vector<int> seen(n, 0);
  for (std::size_t i : partition.poison) {
    if (i >= n) throw InvalidArgument("defense partition index out of range");
    ++seen[i];
  }
  for (std::size_t i : partition.clean) {
    if (i >= n) throw InvalidArgument("defense partition index out of range");
    ++seen[i];
  }
  for (int s : seen) {
    if (s != 1) throw InvalidArgument("defense partition is not a disjoint cover");
  }
  for (std::size_t i : clean_marked) {
    if (i >= n) throw InvalidArgument("clean-marked index out of range");
  }
}

BuiltDefense build_defense_dataset(const Batch& train,
                                   const BackdoorSpec& backdoor,
                                   const DefenseBuildOptions& opts,
                                   std::uint64_t seed) {
  check_fraction("poison_frac", opts.poison_frac);
  check_fraction("clean_marked_frac", opts.clean_marked_frac);
  check_fraction("clean_mark_noise", opts.clean_mark_noise);
  if (!(opts.beta > 0.0 && opts.beta < 1.0)) {
    throw InvalidArgument("beta must lie in (0, 1)");
  }
  const std::size_t n = opts.n_total;
  const std::size_t n_poison =
      round_half_up(opts.poison_frac * static_cast<double>(n));
  if (n_poison < 1 || n_poison >= n) {
    throw InvalidArgument(
        "defense dataset needs at least one poisoned and one clean example");
  }
  const std::size_t n_clean = n - n_poison;
  const std::size_t n_marked =
      round_half_up(opts.clean_marked_frac * static_cast<double>(n));
  const std::size_t n_noisy =
      round_half_up(opts.clean_mark_noise * static_cast<double>(n_marked));
  if (n_noisy > n_poison || n_marked - n_noisy > n_clean) {
    throw InvalidArgument("clean-marked subset does not fit the dataset");
  }
  if (n_clean > train.size()) {
    throw InvalidArgument("not enough training examples for the defense set");
  }

  std::vector<std::size_t> source_idx;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] == backdoor.source_class) source_idx.push_back(i);
  }
  if (source_idx.empty() && backdoor.kind != BackdoorKind::kEdgeCase) {
    throw InvalidArgument("training set has no source-class examples");
  }

  struct Item {
    std::vector<double> x;
    int label;
    bool poisoned;
  };
  std::vector<Item> items;
  items.reserve(n);
  {
    Rng rng(derive_seed(seed, {kPoisonPick}));
    Rng draw(derive_seed(seed, {kPoisonDraw}));
    const std::size_t pool = source_idx.empty() ? train.size() : source_idx.size();
    for (std::size_t k : pick(pool, n_poison, rng)) {
      const std::size_t i = source_idx.empty() ? k : source_idx[k];
      const int y = source_idx.empty() ? backdoor.source_class : train.labels[i];
      Example e = poison(train.row(i), y, backdoor, draw);
      items.push_back({std::move(e.x), e.label, true});
    }
  }
  {
    Rng rng(derive_seed(seed, {kCleanPick}));
    for (std::size_t i : pick(train.size(), n_clean, rng)) {
      auto r = train.row(i);
      items.push_back({{r.begin(), r.end()}, train.labels[i], false});
    }
  }
  {
    Rng rng(derive_seed(seed, {kShuffle}));
    std::shuffle(items.begin(), items.end(), rng);
  }

  BuiltDefense out;
  DefenseDataset& d = out.dataset;
  d.beta = opts.beta;
  d.examples.dim = train.dim;
  for (const Item& it : items) {
    d.examples.push_back(it.x, it.label);
    out.true_poison.push_back(it.poisoned);
  }

  std::vector<std::size_t> poisoned, clean;
  for (std::size_t i = 0; i < n; ++i) {
    (out.true_poison[i] ? poisoned : clean).push_back(i);
  }
  Rng rng(derive_seed(seed, {kMarks}));
  for (std::size_t k : pick(clean.size(), n_marked - n_noisy, rng)) {
    d.clean_marked.push_back(clean[k]);
  }
  for (std::size_t k : pick(poisoned.size(), n_noisy, rng)) {
    d.clean_marked.push_back(poisoned[k]);
  }
  std::sort(d.clean_marked.begin(), d.clean_marked.end());

  const std::size_t n_dp = round_half_up(opts.beta * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_dp ? d.partition.poison : d.partition.clean).push_back(i);
  }
  return out;
}

void write_batch_csv(std::ostream& os, const Batch& batch) {
  for (std::size_t k = 0; k < batch.dim; ++k) os << 'x' << k << ',';
  os << "label";
  const bool has_t = !batch.targets.empty();
  if (has_t) os << ",target";
  os << '\n';
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (double v : batch.row(i)) os << format_double(v) << ',';
    os << batch.labels[i];
    if (has_t) os << ',' << format_double(batch.targets[i]);
    os << '\n';
  }
}

Batch read_batch_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("CSV: missing header");
  const auto header = split(line, ',');
  Batch b;
  std::size_t label_col = header.size();
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "label") label_col = c;
  }
  if (label_col == header.size()) throw InvalidArgument("CSV: no label column");
  b.dim = label_col;
  const bool has_t = header.size() > label_col + 1 && header[label_col + 1] == "target";
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != header.size()) {
      throw InvalidArgument("CSV line " + std::to_string(lineno) +
                            ": wrong field count");
    }
    for (std::size_t k = 0; k < b.dim; ++k) b.inputs.push_back(parse_double(f[k]));
    b.labels.push_back(static_cast<int>(parse_int(f[label_col])));
    if (has_t) b.targets.push_back(parse_double(f[label_col + 1]));
  }
  return b;
}

void write_defense_csv(std::ostream& os, const BuiltDefense& defense) {
  const DefenseDataset& d = defense.dataset;
  std::vector<char> marked(d.size(), 0), in_dp(d.size(), 0);
  for (std::size_t i : d.clean_marked) marked[i] = 1;
  for (std::size_t i : d.partition.poison) in_dp[i] = 1;
  for (std::size_t k = 0; k < d.examples.dim; ++k) os << 'x' << k << ',';
  os << "label,clean_marked,in_ddp,true_poison\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.examples.row(i)) os << format_double(v) << ',';
    os << d.examples.labels[i] << ',' << int(marked[i]) << ',' << int(in_dp[i])
       << ',' << int(defense.true_poison[i]) << '\n';
  }
}

}  // namespace ldsim
