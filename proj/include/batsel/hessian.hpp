#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batsel/model.hpp"

namespace batsel {

inline constexpr long kDenseParameterCap = 500;

enum class HessianSource { kAuto, kAnalytic, kFiniteDifference };

struct ExactHessian {
  Eigen::MatrixXd matrix;
  HessianSource source = HessianSource::kAnalytic;
};

inline void check_dense_size(const ModelSpec& spec) {
  if (spec.total_dim() > kDenseParameterCap) {
    throw SizeError("dense path refuses D = " + std::to_string(spec.total_dim()) + " > " +
                    std::to_string(kDenseParameterCap));
  }
}

inline HessianSource resolve_source(const ModelSpec& spec, HessianSource s) {
  if (s == HessianSource::kAuto)
    return spec.num_layers() == 1 ? HessianSource::kAnalytic : HessianSource::kFiniteDifference;
  if (s == HessianSource::kAnalytic && spec.num_layers() != 1)
    throw ConfigError("analytic Hessian is only available for single-layer models");
  return s;
}

/// Flattened gradient of the noise-free loss. `with_reg` toggles the λθ term.
inline Eigen::VectorXd flat_gradient(const ModelSpec& spec, const ModelParameters& p,
                                     const LabeledExample& ex, const LossSpec& ls, bool with_reg) {
  LossSpec det = ls;
  det.noise_sigma = 0.0;
  if (!with_reg) det.l2_lambda = 0.0;
  Rng unused(0);
  const auto g = grad_per_layer(spec, p, ex, det, 1, unused);
  return ModelParameters{g}.flatten();
}

namespace detail {

/// Head curvature ∂²loss/∂z² at the logits.
inline Eigen::MatrixXd head_curvature(Head head, const Eigen::VectorXd& logits) {
  switch (head) {
    case Head::kLogisticBinary: {
      const double p = sigmoid(logits[0]);
      return Eigen::MatrixXd::Constant(1, 1, p * (1.0 - p));
    }
    case Head::kSoftmax: {
      const Eigen::VectorXd p = softmax(logits);
      Eigen::MatrixXd c = -p * p.transpose();
      c.diagonal() += p;
      return c;
    }
    case Head::kLinear: return Eigen::MatrixXd::Identity(1, 1);
  }
  return {};
}

/// Adds the single-layer data-loss Hessian of one example into `acc`.
inline void add_analytic(const ModelSpec& spec, const ModelParameters& p, const LabeledExample& ex,
                         Eigen::MatrixXd& acc) {
  const ForwardPass fp = forward_pass(spec, p, ex.x);
  const Eigen::MatrixXd c = head_curvature(spec.head, fp.logits);
  const long in = spec.layers[0].in;
  const long out = spec.layers[0].out;
  Eigen::VectorXd xt(in + 1);
  xt << ex.x, 1.0;
  const Eigen::MatrixXd xx = xt * xt.transpose();
  auto idx = [&](long k, long j) { return j < in ? k * in + j : out * in + k; };
  for (long k = 0; k < out; ++k)
    for (long k2 = 0; k2 < out; ++k2) {
      const double ckk = c(k, k2);
      if (ckk == 0.0) continue;
      for (long j = 0; j <= in; ++j)
        for (long j2 = 0; j2 <= in; ++j2) acc(idx(k, j), idx(k2, j2)) += ckk * xx(j, j2);
    }
}

inline void add_finite_difference(const ModelSpec& spec, const ModelParameters& p,
                                  const LabeledExample& ex, const LossSpec& ls, double h,
                                  Eigen::MatrixXd& acc) {
  const Eigen::VectorXd theta = p.flatten();
  Eigen::MatrixXd local(theta.size(), theta.size());
  for (long i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    const auto gp = flat_gradient(spec, ModelParameters::unflatten(spec, tp), ex, ls, false);
    const auto gm = flat_gradient(spec, ModelParameters::unflatten(spec, tm), ex, ls, false);
    local.col(i) = (gp - gm) / (2.0 * h);
  }
  acc += 0.5 * (local + local.transpose());
}

}  // namespace detail

/// Σ_i ∇²ℓ_i over the noise-free per-example loss. With `with_reg`, each
/// example also contributes λI, so the result is the Hessian of the summed
/// regularized loss.
inline ExactHessian hessian_sum(const ModelSpec& spec, const ModelParameters& p,
                                const ExampleRefs& xs, const LossSpec& ls,
                                HessianSource source = HessianSource::kAuto, bool with_reg = true,
                                double fd_step = 1e-4) {
  spec.validate();
  check_dense_size(spec);
  check_parameters(spec, p);
  ExactHessian out;
  out.source = resolve_source(spec, source);
  const long d = spec.total_dim();
  out.matrix = Eigen::MatrixXd::Zero(d, d);
  for (const auto* e : xs) {
    if (out.source == HessianSource::kAnalytic)
      detail::add_analytic(spec, p, *e, out.matrix);
    else
      detail::add_finite_difference(spec, p, *e, ls, fd_step, out.matrix);
  }
  if (with_reg) out.matrix.diagonal().array() += ls.l2_lambda * static_cast<double>(xs.size());
  if (!out.matrix.allFinite()) throw NumericalError("non-finite Hessian");
  return out;
}

/// Mean per-example Hessian plus λI, the Hessian of the empirical risk.
inline ExactHessian exact_hessian(const ModelSpec& spec, const ModelParameters& p,
                                  const ExampleRefs& xs, const LossSpec& ls,
                                  HessianSource source = HessianSource::kAuto) {
  if (xs.empty()) throw InputError("exact_hessian needs at least one example");
  ExactHessian h = hessian_sum(spec, p, xs, ls, source, true);
  h.matrix /= static_cast<double>(xs.size());
  return h;
}

inline ExactHessian exact_hessian(const ModelSpec& spec, const ModelParameters& p,
                                  const std::vector<LabeledExample>& xs, const LossSpec& ls,
                                  HessianSource source = HessianSource::kAuto) {
  return exact_hessian(spec, p, refs_of(xs), ls, source);
}

/// Offsets of each layer inside the flattened parameter vector.
inline std::vector<long> layer_offsets(const ModelSpec& spec) {
  std::vector<long> off{0};
  for (std::size_t l = 0; l < spec.num_layers(); ++l) off.push_back(off.back() + spec.layer_size(l));
  return off;
}

}  // namespace batsel
