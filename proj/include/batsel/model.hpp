#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batsel/common.hpp"
#include "batsel/dataset.hpp"

namespace batsel {

enum class Activation { kIdentity, kTanh, kRelu };
enum class Head { kLogisticBinary, kSoftmax, kLinear };
enum class LossKind { kLogLoss, kSquaredError };

struct LayerDims {
  long in = 0;
  long out = 0;
};

/// Layered model f = f_L ∘ … ∘ f_1. Each layer is affine (W, b); the
/// activation is applied between layers, never after the last one, whose
/// output feeds the head as logits.
struct ModelSpec {
  std::vector<LayerDims> layers;
  Activation activation = Activation::kTanh;
  Head head = Head::kLogisticBinary;

  static ModelSpec logistic(long input_dim) {
    return {{{input_dim, 1}}, Activation::kIdentity, Head::kLogisticBinary};
  }
  static ModelSpec linear(long input_dim) {
    return {{{input_dim, 1}}, Activation::kIdentity, Head::kLinear};
  }
  static ModelSpec softmax(long input_dim, long classes) {
    return {{{input_dim, classes}}, Activation::kIdentity, Head::kSoftmax};
  }
  static ModelSpec mlp(long input_dim, const std::vector<long>& hidden, Activation act,
                       Head head, long classes = 2) {
    ModelSpec s;
    s.activation = act;
    s.head = head;
    long prev = input_dim;
    for (long h : hidden) {
      s.layers.push_back({prev, h});
      prev = h;
    }
    s.layers.push_back({prev, head == Head::kSoftmax ? classes : 1});
    return s;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("model needs at least one layer");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].in < 1 || layers[l].out < 1)
        throw ConfigError("layer " + std::to_string(l) + " has a non-positive dimension");
      if (l > 0 && layers[l].in != layers[l - 1].out)
        throw ConfigError("layer " + std::to_string(l) + " input does not match previous output");
    }
    const long out = layers.back().out;
    if (head == Head::kSoftmax && out < 2) throw ConfigError("softmax head needs >= 2 outputs");
    if (head != Head::kSoftmax && out != 1)
      throw ConfigError("logistic/linear heads need exactly 1 output");
  }

  std::size_t num_layers() const { return layers.size(); }
  long input_dim() const { return layers.front().in; }
  long output_dim() const { return layers.back().out; }
  long layer_size(std::size_t l) const { return layers[l].out * (layers[l].in + 1); }
  long total_dim() const {
    long d = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) d += layer_size(l);
    return d;
  }
  bool classification() const { return head != Head::kLinear; }
  long num_classes() const {
    return head == Head::kSoftmax ? output_dim() : (head == Head::kLogisticBinary ? 2 : 0);
  }
};

/// Per-layer flattened parameters: W (out × in, row-major) followed by b.
struct ModelParameters {
  std::vector<Eigen::VectorXd> layers;

  long total_dim() const {
    long d = 0;
    for (const auto& v : layers) d += v.size();
    return d;
  }

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(total_dim());
    long off = 0;
    for (const auto& v : layers) {
      out.segment(off, v.size()) = v;
      off += v.size();
    }
    return out;
  }

  static ModelParameters unflatten(const ModelSpec& spec, const Eigen::VectorXd& flat) {
    if (flat.size() != spec.total_dim()) throw InputError("flat parameter size mismatch");
    ModelParameters p;
    long off = 0;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      p.layers.push_back(flat.segment(off, spec.layer_size(l)));
      off += spec.layer_size(l);
    }
    return p;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& v : layers) s += v.squaredNorm();
    return s;
  }

  bool operator==(const ModelParameters& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].size() != o.layers[l].size()) return false;
      // Bitwise equality: determinism contracts are checked with this.
      for (long i = 0; i < layers[l].size(); ++i)
        if (layers[l][i] != o.layers[l][i]) return false;
    }
    return true;
  }
};

inline void check_parameters(const ModelSpec& spec, const ModelParameters& p) {
  if (p.layers.size() != spec.num_layers()) throw InputError("parameter layer count mismatch");
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    if (p.layers[l].size() != spec.layer_size(l))
      throw InputError("parameter shape mismatch at layer " + std::to_string(l));
    if (!p.layers[l].allFinite())
      throw NumericalError("non-finite parameter at layer " + std::to_string(l));
  }
}

/// Seeded uniform(−0.1, 0.1) initialization, layer by layer.
inline ModelParameters init_parameters(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  ModelParameters p;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    Eigen::VectorXd v(spec.layer_size(l));
    for (long i = 0; i < v.size(); ++i) v[i] = u(rng);
    p.layers.push_back(std::move(v));
  }
  return p;
}

struct LossSpec {
  LossKind kind = LossKind::kLogLoss;
  double noise_sigma = 0.0;  // stddev of additive Gaussian noise on the logits
  double l2_lambda = 0.0;    // weight of ½‖θ‖²

  void validate(const ModelSpec& spec) const {
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw ConfigError("noise_sigma must be >= 0");
    if (!(l2_lambda >= 0.0) || !std::isfinite(l2_lambda))
      throw ConfigError("l2_lambda must be >= 0");
    if (spec.classification() != (kind == LossKind::kLogLoss))
      throw ConfigError("log-loss pairs with classification heads, squared error with linear");
  }
};

inline void check_label(const ModelSpec& spec, const LabeledExample& e) {
  if (spec.head == Head::kLinear) return;
  const double k = static_cast<double>(spec.num_classes());
  if (e.y != std::floor(e.y) || e.y < 0.0 || e.y >= k)
    throw InputError("label " + std::to_string(e.y) + " out of range for head at id '" + e.id + "'");
}

namespace detail {

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline RowMajorMap weights(const ModelSpec& spec, const ModelParameters& p, std::size_t l) {
  return RowMajorMap(p.layers[l].data(), spec.layers[l].out, spec.layers[l].in);
}

inline auto bias(const ModelSpec& spec, const ModelParameters& p, std::size_t l) {
  return p.layers[l].segment(spec.layers[l].out * spec.layers[l].in, spec.layers[l].out);
}

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::kIdentity: return z;
    case Activation::kTanh: return std::tanh(z);
    case Activation::kRelu: return z > 0.0 ? z : 0.0;
  }
  return z;
}

inline double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::kIdentity: return 1.0;
    case Activation::kTanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::kRelu: return z > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Class probabilities for classification heads (length 2 for logistic).
inline Eigen::VectorXd class_probs(Head head, const Eigen::VectorXd& logits) {
  if (head == Head::kSoftmax) return softmax(logits);
  const double p = sigmoid(logits[0]);
  Eigen::VectorXd out(2);
  out << 1.0 - p, p;
  return out;
}

/// Loss of one (noisy) logit vector; writes ∂loss/∂logits into dz.
inline double head_loss(Head head, const Eigen::VectorXd& z, double y, Eigen::VectorXd& dz) {
  switch (head) {
    case Head::kLogisticBinary: {
      dz.resize(1);
      dz[0] = sigmoid(z[0]) - y;
      return softplus(z[0]) - y * z[0];
    }
    case Head::kSoftmax: {
      const double m = z.maxCoeff();
      const double lse = m + std::log((z.array() - m).exp().sum());
      const auto c = static_cast<long>(y);
      dz = softmax(z);
      dz[c] -= 1.0;
      return lse - z[c];
    }
    case Head::kLinear: {
      dz.resize(1);
      dz[0] = z[0] - y;
      return 0.5 * dz[0] * dz[0];
    }
  }
  return 0.0;
}

}  // namespace detail

struct ForwardPass {
  std::vector<Eigen::VectorXd> inputs;  // input seen by each layer
  std::vector<Eigen::VectorXd> pre;     // affine output of each layer
  Eigen::VectorXd logits;
};

inline ForwardPass forward_pass(const ModelSpec& spec, const ModelParameters& p,
                                const Eigen::VectorXd& x) {
  if (x.size() != spec.input_dim()) {
    throw InputError("input dimension " + std::to_string(x.size()) + " does not match model input " +
                     std::to_string(spec.input_dim()));
  }
  ForwardPass fp;
  fp.inputs.reserve(spec.num_layers());
  fp.pre.reserve(spec.num_layers());
  Eigen::VectorXd a = x;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    fp.inputs.push_back(a);
    Eigen::VectorXd z = detail::weights(spec, p, l) * a + detail::bias(spec, p, l);
    fp.pre.push_back(z);
    if (l + 1 < spec.num_layers())
      a = z.unaryExpr([&](double v) { return detail::activate(spec.activation, v); });
    else
      fp.logits = std::move(z);
  }
  return fp;
}

/// Deterministic prediction: class probabilities, or the regression value.
inline Eigen::VectorXd forward(const ModelSpec& spec, const ModelParameters& p,
                               const Eigen::VectorXd& x) {
  const ForwardPass fp = forward_pass(spec, p, x);
  if (spec.head == Head::kLinear) return fp.logits;
  return detail::class_probs(spec.head, fp.logits);
}

/// Chain rule from ∂loss/∂logits back to every layer's (W, b). Excludes the
/// regularizer.
inline std::vector<Eigen::VectorXd> backprop(const ModelSpec& spec, const ModelParameters& p,
                                             const ForwardPass& fp, Eigen::VectorXd delta) {
  std::vector<Eigen::VectorXd> grads(spec.num_layers());
  for (std::size_t l = spec.num_layers(); l-- > 0;) {
    const long in = spec.layers[l].in;
    const long out = spec.layers[l].out;
    Eigen::VectorXd g(spec.layer_size(l));
    const Eigen::VectorXd& a = fp.inputs[l];
    for (long k = 0; k < out; ++k) g.segment(k * in, in) = delta[k] * a;
    g.segment(out * in, out) = delta;
    grads[l] = std::move(g);
    if (l > 0) {
      Eigen::VectorXd back = detail::weights(spec, p, l).transpose() * delta;
      const Eigen::VectorXd& z = fp.pre[l - 1];
      for (long i = 0; i < back.size(); ++i) back[i] *= detail::activate_grad(spec.activation, z[i]);
      delta = std::move(back);
    }
  }
  return grads;
}

struct LossValue {
  double data = 0.0;  // mean over noise draws of the head loss
  double reg = 0.0;   // λ·½‖θ‖²
  double total() const { return data + reg; }
};

struct LossAndGrad {
  LossValue loss;
  std::vector<Eigen::VectorXd> grad;  // per layer, includes λθ
};

namespace detail {

inline void check_delta(int delta) {
  if (delta < 1) throw ConfigError("delta must be >= 1");
}

/// Draws `delta` logit perturbations and returns the averaged head loss and
/// averaged ∂loss/∂logits. With noise_sigma = 0 no randomness is consumed.
inline double noisy_head(const ModelSpec& spec, const Eigen::VectorXd& logits, double y,
                         const LossSpec& ls, int delta, Rng& rng, Eigen::VectorXd& dz_mean) {
  dz_mean = Eigen::VectorXd::Zero(logits.size());
  Eigen::VectorXd dz;
  if (ls.noise_sigma == 0.0) {
    const double l = head_loss(spec.head, logits, y, dz);
    dz_mean = dz;
    return l;
  }
  double total = 0.0;
  Eigen::VectorXd z(logits.size());
  for (int d = 0; d < delta; ++d) {
    for (long i = 0; i < z.size(); ++i) z[i] = logits[i] + ls.noise_sigma * standard_normal(rng);
    total += head_loss(spec.head, z, y, dz);
    dz_mean += dz;
  }
  dz_mean /= static_cast<double>(delta);
  return total / static_cast<double>(delta);
}

}  // namespace detail

inline LossAndGrad loss_and_grad(const ModelSpec& spec, const ModelParameters& p,
                                 const LabeledExample& ex, const LossSpec& ls, int delta, Rng& rng,
                                 bool want_grad = true) {
  detail::check_delta(delta);
  const ForwardPass fp = forward_pass(spec, p, ex.x);
  Eigen::VectorXd dz;
  LossAndGrad out;
  out.loss.data = detail::noisy_head(spec, fp.logits, ex.y, ls, delta, rng, dz);
  out.loss.reg = ls.l2_lambda * 0.5 * p.squared_norm();
  if (!std::isfinite(out.loss.data)) throw NumericalError("non-finite loss at id '" + ex.id + "'");
  if (want_grad) {
    out.grad = backprop(spec, p, fp, std::move(dz));
    if (ls.l2_lambda != 0.0)
      for (std::size_t l = 0; l < out.grad.size(); ++l) out.grad[l] += ls.l2_lambda * p.layers[l];
    for (const auto& g : out.grad)
      if (!g.allFinite()) throw NumericalError("non-finite gradient at id '" + ex.id + "'");
  }
  return out;
}

/// Mean of `delta` independent noise-draw losses plus the L2 term.
inline double loss(const ModelSpec& spec, const ModelParameters& p, const LabeledExample& ex,
                   const LossSpec& ls, int delta, Rng& rng) {
  return loss_and_grad(spec, p, ex, ls, delta, rng, false).loss.total();
}

/// Gradient of the δ-averaged loss, one vector per layer.
inline std::vector<Eigen::VectorXd> grad_per_layer(const ModelSpec& spec, const ModelParameters& p,
                                                   const LabeledExample& ex, const LossSpec& ls,
                                                   int delta, Rng& rng) {
  return loss_and_grad(spec, p, ex, ls, delta, rng, true).grad;
}

/// How the second moment E[∇L ∇Lᵀ | x] of one example is formed.
enum class Moment {
  kModelExpected,  // expectation over y ~ p(y | x; θ) under the model
  kObserved,       // outer product of the gradient at the recorded label
};

struct MomentRow {
  double weight = 1.0;
  std::vector<Eigen::VectorXd> grad;
};

/// Weighted gradient rows whose weighted outer-product sum is the example's
/// second moment. Observed: one row at the recorded label. Model-expected:
/// classification enumerates labels c with weight p̄_c (p̄ = δ-averaged
/// predictive probabilities); regression uses the symmetric two-point rule
/// y = z̄ ± residual_scale, which reproduces E[(z − y)²] = residual_scale².
inline std::vector<MomentRow> moment_rows(const ModelSpec& spec, const ModelParameters& p,
                                          const LabeledExample& ex, const LossSpec& ls, int delta,
                                          Rng& rng, Moment moment, double residual_scale = 1.0) {
  if (moment == Moment::kObserved) return {{1.0, grad_per_layer(spec, p, ex, ls, delta, rng)}};

  detail::check_delta(delta);
  const ForwardPass fp = forward_pass(spec, p, ex.x);
  const long out_dim = fp.logits.size();
  Eigen::VectorXd mean_out = Eigen::VectorXd::Zero(spec.classification() ? spec.num_classes() : 1);
  {
    const int draws = ls.noise_sigma == 0.0 ? 1 : delta;
    Eigen::VectorXd z(out_dim);
    for (int d = 0; d < draws; ++d) {
      for (long i = 0; i < out_dim; ++i)
        z[i] = fp.logits[i] + (ls.noise_sigma == 0.0 ? 0.0 : ls.noise_sigma * standard_normal(rng));
      mean_out += spec.classification() ? detail::class_probs(spec.head, z) : z;
    }
    mean_out /= static_cast<double>(draws);
  }

  std::vector<MomentRow> rows;
  auto add_row = [&](double w, Eigen::VectorXd dz) {
    MomentRow r{w, backprop(spec, p, fp, std::move(dz))};
    if (ls.l2_lambda != 0.0)
      for (std::size_t l = 0; l < r.grad.size(); ++l) r.grad[l] += ls.l2_lambda * p.layers[l];
    for (const auto& g : r.grad)
      if (!g.allFinite()) throw NumericalError("non-finite gradient at id '" + ex.id + "'");
    rows.push_back(std::move(r));
  };

  switch (spec.head) {
    case Head::kLogisticBinary:
      for (int c = 0; c < 2; ++c) add_row(mean_out[c], Eigen::VectorXd::Constant(1, mean_out[1] - c));
      break;
    case Head::kSoftmax:
      for (long c = 0; c < mean_out.size(); ++c) {
        Eigen::VectorXd dz = mean_out;
        dz[c] -= 1.0;
        add_row(mean_out[c], std::move(dz));
      }
      break;
    case Head::kLinear:
      add_row(0.5, Eigen::VectorXd::Constant(1, residual_scale));
      add_row(0.5, Eigen::VectorXd::Constant(1, -residual_scale));
      break;
  }
  return rows;
}

/// Deterministic, unregularized mean loss; the held-out evaluation metric.
inline double mean_data_loss(const ModelSpec& spec, const ModelParameters& p,
                             const std::vector<LabeledExample>& xs, const LossSpec& ls) {
  if (xs.empty()) throw InputError("cannot evaluate loss on an empty set");
  LossSpec det = ls;
  det.noise_sigma = 0.0;
  det.l2_lambda = 0.0;
  Rng unused(0);
  double s = 0.0;
  for (const auto& e : xs) s += loss(spec, p, e, det, 1, unused);
  return s / static_cast<double>(xs.size());
}

}  // namespace batsel
