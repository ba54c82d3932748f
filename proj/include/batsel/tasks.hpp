#pragma once

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batsel/dataset.hpp"
#include "batsel/model.hpp"

namespace batsel {

enum class TaskKind {
  kGaussianClasses,    // two Gaussian classes; pool mostly pushed outward along the class axis
  kLinearGaussian,     // Gaussian least squares with a broader pool covariate law
  kLogisticBenchmark,  // well-specified logistic model, pool from the same law
};

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kGaussianClasses: return "gaussian-classes";
    case TaskKind::kLinearGaussian: return "linear-gaussian";
    case TaskKind::kLogisticBenchmark: return "logistic-benchmark";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "gaussian-classes") return TaskKind::kGaussianClasses;
  if (s == "linear-gaussian") return TaskKind::kLinearGaussian;
  if (s == "logistic-benchmark") return TaskKind::kLogisticBenchmark;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

struct TaskSpec {
  std::string name = "S1";
  TaskKind kind = TaskKind::kGaussianClasses;
  long dim = 12;
  long n_adaptation = 180;
  long pool_size = 600;
  long n_test = 2000;
  // gaussian-classes: class means ±class_sep·e₁; non-helpful pool points
  // move a further `shift` outward. linear-gaussian: pool covariates are
  // scaled by (1 + shift).
  double class_sep = 1.0;
  double shift = 1.5;
  double helpful_fraction = 0.1;
  double label_sigma = 0.5;       // linear-gaussian response noise
  double harmful_fraction = 0.0;  // linear-gaussian pool rows with labels offset by 8·label_sigma
  double weight_scale = 1.0;      // logistic-benchmark: true weights ~ N(0, scale²)
  double noise_sigma = 0.0;       // loss-side logit noise
  double l2_lambda = 0.01;
  std::vector<long> hidden;  // empty: single-layer model
  Activation activation = Activation::kTanh;

  static TaskSpec s1() { return {}; }

  static TaskSpec q1() {
    TaskSpec t;
    t.name = "Q1";
    t.kind = TaskKind::kLinearGaussian;
    t.dim = 5;
    t.n_adaptation = 200;
    t.pool_size = 200;
    t.n_test = 2000;
    t.shift = 0.5;
    t.helpful_fraction = 0.0;
    t.l2_lambda = 0.0;
    return t;
  }

  static TaskSpec logistic_benchmark() {
    TaskSpec t;
    t.name = "L1";
    t.kind = TaskKind::kLogisticBenchmark;
    t.dim = 10;
    t.n_adaptation = 200;
    t.pool_size = 100;
    t.n_test = 50;
    t.shift = 0.0;
    t.helpful_fraction = 0.0;
    return t;
  }

  void validate() const {
    if (dim < 1) throw ConfigError("task dim must be >= 1 (degenerate covariance)");
    if (n_adaptation < 4) throw ConfigError("n_adaptation must be >= 4");
    if (pool_size < 0 || n_test < 0) throw ConfigError("sizes must be >= 0");
    if (!(helpful_fraction >= 0.0 && helpful_fraction <= 1.0))
      throw ConfigError("helpful_fraction must lie in [0, 1]");
    if (!(harmful_fraction >= 0.0 && harmful_fraction <= 1.0))
      throw ConfigError("harmful_fraction must lie in [0, 1]");
    if (!std::isfinite(shift) || !std::isfinite(class_sep)) throw ConfigError("non-finite task geometry");
    if (kind == TaskKind::kLinearGaussian && !(1.0 + shift > 0.0))
      throw ConfigError("pool covariate scale 1 + shift must be > 0 (degenerate covariance)");
    if (!(label_sigma >= 0.0) || !(weight_scale >= 0.0)) throw ConfigError("scales must be >= 0");
  }

  ModelSpec model() const {
    const Head head = kind == TaskKind::kLinearGaussian ? Head::kLinear : Head::kLogisticBinary;
    if (hidden.empty()) return {{{dim, 1}}, Activation::kIdentity, head};
    return ModelSpec::mlp(dim, hidden, activation, head);
  }

  LossSpec loss() const {
    return {kind == TaskKind::kLinearGaussian ? LossKind::kSquaredError : LossKind::kLogLoss,
            noise_sigma, l2_lambda};
  }
};

/// Samples from the task's two laws. Per-task constants (true weights) are
/// fixed at construction from `seed`.
class TaskSampler {
 public:
  TaskSampler(const TaskSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    const long d = spec_.dim;
    if (spec_.kind == TaskKind::kLinearGaussian) {
      scales_ = Eigen::VectorXd::LinSpaced(d, 0.5, 2.0);
      if (d == 1) scales_[0] = 1.0;
      truth_ = Eigen::VectorXd::LinSpaced(d + 1, -1.0, 1.0);
    } else if (spec_.kind == TaskKind::kLogisticBenchmark) {
      Rng rng(derive_seed(seed, "truth"));
      std::normal_distribution<double> nd(0.0, 1.0);
      truth_.resize(d + 1);
      for (long i = 0; i <= d; ++i) truth_[i] = spec_.weight_scale * nd(rng);
    }
  }

  const TaskSpec& spec() const { return spec_; }
  /// True parameter of the well-specified kinds ([w; b]); empty otherwise.
  const Eigen::VectorXd& truth() const { return truth_; }

  /// Draws one row from the adaptation law (pool = false) or the pool law.
  /// `helpful` pool rows follow the adaptation law.
  void draw(Rng& rng, bool pool, bool helpful, bool harmful, Eigen::Ref<Eigen::VectorXd> x,
            double& y) const {
    std::normal_distribution<double> nd(0.0, 1.0);
    const long d = spec_.dim;
    switch (spec_.kind) {
      case TaskKind::kGaussianClasses: {
        const int label = std::uniform_int_distribution<int>(0, 1)(rng);
        const double s = label == 1 ? 1.0 : -1.0;
        const double offset = spec_.class_sep + (pool && !helpful ? spec_.shift : 0.0);
        for (long i = 0; i < d; ++i) x[i] = nd(rng);
        x[0] += s * offset;
        y = label;
        break;
      }
      case TaskKind::kLinearGaussian: {
        const double broad = pool && !helpful ? 1.0 + spec_.shift : 1.0;
        for (long i = 0; i < d; ++i) x[i] = nd(rng) * scales_[i] * broad;
        y = x.dot(truth_.head(d)) + truth_[d] + spec_.label_sigma * nd(rng);
        if (harmful) y += 8.0 * spec_.label_sigma;
        break;
      }
      case TaskKind::kLogisticBenchmark: {
        for (long i = 0; i < d; ++i) x[i] = nd(rng);
        const double z = x.dot(truth_.head(d)) + truth_[d];
        y = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < detail::sigmoid(z) ? 1.0 : 0.0;
        break;
      }
    }
  }

  std::vector<LabeledExample> adaptation(Rng& rng, long n, const std::string& prefix = "a",
                                         Split split = Split::kAdaptation) const {
    std::vector<LabeledExample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
      LabeledExample e{make_id(prefix, i), Eigen::VectorXd(spec_.dim), 0.0, split};
      draw(rng, false, false, false, e.x, e.y);
      out.push_back(std::move(e));
    }
    return out;
  }

  /// Pool rows; exactly round-down(helpful_fraction · n) of them are helpful
  /// and round-down(harmful_fraction · n) of the rest harmful, at random
  /// positions. `helpful_out` (if given) receives the helpful flags.
  std::vector<LabeledExample> pool(Rng& rng, long n, const std::string& prefix = "b",
                                   std::vector<bool>* helpful_out = nullptr,
                                   std::vector<bool>* harmful_out = nullptr) const {
    const long nh = static_cast<long>(std::floor(spec_.helpful_fraction * static_cast<double>(n) + 1e-9));
    const long nbad = std::min(
        n - nh, static_cast<long>(std::floor(spec_.harmful_fraction * static_cast<double>(n) + 1e-9)));
    std::vector<int> kind(static_cast<std::size_t>(n), 0);
    for (long i = 0; i < nh; ++i) kind[static_cast<std::size_t>(i)] = 1;
    for (long i = nh; i < nh + nbad; ++i) kind[static_cast<std::size_t>(i)] = 2;
    std::shuffle(kind.begin(), kind.end(), rng);
    std::vector<LabeledExample> out;
    out.reserve(static_cast<std::size_t>(n));
    if (helpful_out) helpful_out->assign(static_cast<std::size_t>(n), false);
    if (harmful_out) harmful_out->assign(static_cast<std::size_t>(n), false);
    for (long i = 0; i < n; ++i) {
      const int k = kind[static_cast<std::size_t>(i)];
      LabeledExample e{make_id(prefix, i), Eigen::VectorXd(spec_.dim), 0.0, Split::kBackbone};
      draw(rng, true, k == 1, k == 2, e.x, e.y);
      if (helpful_out) (*helpful_out)[static_cast<std::size_t>(i)] = k == 1;
      if (harmful_out) (*harmful_out)[static_cast<std::size_t>(i)] = k == 2;
      out.push_back(std::move(e));
    }
    return out;
  }

  /// Adaptation-law draw as a design matrix [x, 1] and targets, for large
  /// population samples.
  void population(Rng& rng, long n, Eigen::MatrixXd& X, Eigen::VectorXd& y) const {
    X.resize(n, spec_.dim + 1);
    y.resize(n);
    Eigen::VectorXd x(spec_.dim);
    for (long i = 0; i < n; ++i) {
      draw(rng, false, false, false, x, y[i]);
      X.row(i).head(spec_.dim) = x.transpose();
      X(i, spec_.dim) = 1.0;
    }
  }

 private:
  static std::string make_id(const std::string& prefix, long i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%05ld", prefix.c_str(), i);
    return buf;
  }

  TaskSpec spec_;
  Eigen::VectorXd scales_;
  Eigen::VectorXd truth_;
};

struct TaskData {
  std::vector<LabeledExample> adaptation;
  std::vector<LabeledExample> pool;
  std::vector<LabeledExample> test;  // held-out, adaptation law, split = validation
  std::vector<bool> helpful;         // per pool row
};

inline TaskData generate_task(const TaskSpec& spec, std::uint64_t seed) {
  const TaskSampler sampler(spec, seed);
  TaskData t;
  Rng ra(derive_seed(seed, "task", "adaptation"));
  Rng rp(derive_seed(seed, "task", "pool"));
  Rng rt(derive_seed(seed, "task", "test"));
  t.adaptation = sampler.adaptation(ra, spec.n_adaptation, "a");
  t.pool = sampler.pool(rp, spec.pool_size, "b", &t.helpful);
  t.test = sampler.adaptation(rt, spec.n_test, "t", Split::kValidation);
  return t;
}

/// FNV-1a over the JSONL serialization of all three sets.
inline std::uint64_t task_checksum(const TaskData& t) {
  std::ostringstream os;
  write_jsonl(os, t.adaptation);
  write_jsonl(os, t.pool);
  write_jsonl(os, t.test);
  return fnv1a(os.str());
}

}  // namespace batsel
