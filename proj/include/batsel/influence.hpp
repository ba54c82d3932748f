#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batsel/hessian.hpp"
#include "batsel/model.hpp"

namespace batsel {

enum class CurvatureMode { kExactDense, kSmImplicit };

/// Per-example, per-layer gradient rows. With the model-expected moment an
/// example contributes one row per label, pre-scaled so that the mean of row
/// outer products equals the mean per-example second moment; the id is then
/// repeated for each of its rows.
struct GradientBundle {
  std::vector<std::string> example_ids;
  std::vector<Eigen::MatrixXd> grads;  // per layer: rows × D_l
  int delta_used = 1;
  Moment moment = Moment::kObserved;
  long num_examples = 0;

  long rows() const { return static_cast<long>(example_ids.size()); }
  std::size_t num_layers() const { return grads.size(); }

  void validate(const ModelSpec& spec) const {
    if (grads.size() != spec.num_layers()) throw InputError("bundle layer count mismatch");
    for (std::size_t l = 0; l < grads.size(); ++l) {
      if (grads[l].rows() != rows()) throw InputError("bundle row count does not match ids");
      if (grads[l].cols() != spec.layer_size(l)) throw InputError("bundle column count mismatch");
      if (!grads[l].allFinite()) throw NumericalError("non-finite entry in gradient bundle");
    }
  }
};

/// Moment rows of every example, in input order. Example i draws its noise
/// from derive_seed(seed, id_i), so rows do not depend on bundle composition.
inline GradientBundle collect_gradients(const ModelSpec& spec, const ModelParameters& p,
                                        const ExampleRefs& xs, const LossSpec& ls, int delta,
                                        std::uint64_t seed, Moment moment = Moment::kObserved,
                                        double residual_scale = 1.0, unsigned threads = 1) {
  if (xs.empty()) throw InputError("collect_gradients needs at least one example");
  check_parameters(spec, p);
  std::vector<std::vector<MomentRow>> per(xs.size());
  parallel_for(xs.size(), threads, [&](std::size_t i) {
    check_label(spec, *xs[i]);
    Rng rng(derive_seed(seed, xs[i]->id));
    per[i] = moment_rows(spec, p, *xs[i], ls, delta, rng, moment, residual_scale);
  });

  GradientBundle b;
  b.delta_used = delta;
  b.moment = moment;
  b.num_examples = static_cast<long>(xs.size());
  const long per_example = static_cast<long>(per.front().size());
  const long n_rows = per_example * b.num_examples;
  for (std::size_t l = 0; l < spec.num_layers(); ++l)
    b.grads.emplace_back(n_rows, spec.layer_size(l));
  b.example_ids.reserve(static_cast<std::size_t>(n_rows));
  long r = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (const auto& row : per[i]) {
      const double s = moment == Moment::kObserved ? 1.0 : std::sqrt(per_example * row.weight);
      for (std::size_t l = 0; l < spec.num_layers(); ++l) b.grads[l].row(r) = s * row.grad[l];
      b.example_ids.push_back(xs[i]->id);
      ++r;
    }
  }
  return b;
}

inline GradientBundle collect_gradients(const ModelSpec& spec, const ModelParameters& p,
                                        const std::vector<LabeledExample>& xs, const LossSpec& ls,
                                        int delta, std::uint64_t seed,
                                        Moment moment = Moment::kObserved) {
  return collect_gradients(spec, p, refs_of(xs), ls, delta, seed, moment);
}

/// λ_l = scale · mean_i ‖g_i,l‖² / D_l, floored at 1e-12.
inline std::vector<double> default_damping(const GradientBundle& b, double scale = 0.1) {
  std::vector<double> lam;
  for (const auto& g : b.grads) {
    const double mean_sq = g.rows() > 0 ? g.squaredNorm() / static_cast<double>(g.rows()) : 0.0;
    lam.push_back(std::max(1e-12, scale * mean_sq / static_cast<double>(g.cols())));
  }
  return lam;
}

/// Block-diagonal damped curvature (1/n)Σ g gᵀ + λ_l I, or any dense
/// per-layer matrix. Immutable once built.
class CurvatureOperator {
 public:
  static CurvatureOperator from_bundle(const GradientBundle& b, const std::vector<double>& lambda,
                                       CurvatureMode mode) {
    if (lambda.size() != b.num_layers()) throw ConfigError("one damping value per layer required");
    for (double l : lambda)
      if (!(l > 0.0) || !std::isfinite(l)) throw ConfigError("damping must be > 0");
    if (b.rows() < 1) throw InputError("curvature needs at least one gradient row");
    CurvatureOperator op;
    op.mode_ = mode;
    op.lambda_ = lambda;
    op.rows_ = b.grads;
    if (mode == CurvatureMode::kExactDense) {
      for (std::size_t l = 0; l < b.num_layers(); ++l) {
        Eigen::MatrixXd m = op.gram(l);
        m.diagonal().array() += lambda[l];
        op.set_dense(std::move(m));
      }
    } else {
      for (const auto& g : op.rows_)
        op.inv_denoms_.push_back(
            (g.rowwise().squaredNorm().array() + lambda[op.inv_denoms_.size()]).inverse().matrix());
    }
    return op;
  }

  /// Dense blocks taken as-is; `lambda` records the damping already inside.
  static CurvatureOperator from_dense(std::vector<Eigen::MatrixXd> blocks,
                                      std::vector<double> lambda) {
    if (lambda.size() != blocks.size()) throw ConfigError("one damping value per layer required");
    CurvatureOperator op;
    op.mode_ = CurvatureMode::kExactDense;
    op.lambda_ = std::move(lambda);
    for (auto& m : blocks) op.set_dense(std::move(m));
    return op;
  }

  CurvatureMode mode() const { return mode_; }
  std::size_t num_layers() const { return lambda_.size(); }
  double lambda(std::size_t l) const { return lambda_.at(l); }
  const std::vector<double>& damping() const { return lambda_; }
  long layer_dim(std::size_t l) const {
    return mode_ == CurvatureMode::kExactDense ? dense_.at(l).rows() : rows_.at(l).cols();
  }
  bool has_rows() const { return !rows_.empty(); }

  const Eigen::MatrixXd& dense(std::size_t l) const {
    if (mode_ != CurvatureMode::kExactDense) throw ConfigError("implicit operator has no dense block");
    return dense_.at(l);
  }

  /// Undamped (1/n) Σ g gᵀ for layer l.
  Eigen::MatrixXd gram(std::size_t l) const {
    if (rows_.empty()) throw ConfigError("operator was not built from gradients");
    const auto& g = rows_.at(l);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.cols(), g.cols());
    m.selfadjointView<Eigen::Lower>().rankUpdate(g.transpose());
    m.triangularView<Eigen::Upper>() = m.transpose();
    return m / static_cast<double>(g.rows());
  }

  Eigen::MatrixXd apply_inverse(std::size_t l, const Eigen::MatrixXd& v) const {
    if (l >= num_layers()) throw InputError("layer index out of range");
    if (v.rows() != layer_dim(l)) {
      throw InputError("apply_inverse: vector dimension " + std::to_string(v.rows()) +
                       " does not match layer dimension " + std::to_string(layer_dim(l)));
    }
    if (mode_ == CurvatureMode::kExactDense) return solvers_[l].solve(v);
    // Sherman–Morrison per row, summed: (1/(nλ)) Σ_i (v − g_i g_iᵀv / (λ + g_iᵀg_i)).
    const auto& g = rows_[l];
    const double n = static_cast<double>(g.rows());
    Eigen::MatrixXd gv = g * v;
    gv.array().colwise() *= inv_denoms_[l].array();
    Eigen::MatrixXd out = n * v - g.transpose() * gv;
    return out / (n * lambda_[l]);
  }

  Eigen::VectorXd apply_inverse(std::size_t l, const Eigen::VectorXd& v) const {
    return apply_inverse(l, Eigen::MatrixXd(v)).col(0);
  }

 private:
  void set_dense(Eigen::MatrixXd m) {
    Eigen::LDLT<Eigen::MatrixXd> solver(m);
    if (solver.info() != Eigen::Success || !solver.isPositive() ||
        (solver.vectorD().array().abs() < 1e-300).any())
      throw NumericalError("curvature block " + std::to_string(dense_.size()) +
                           " is singular or indefinite after damping");
    dense_.push_back(std::move(m));
    solvers_.push_back(std::move(solver));
  }

  CurvatureMode mode_ = CurvatureMode::kExactDense;
  std::vector<double> lambda_;
  std::vector<Eigen::MatrixXd> rows_;
  std::vector<Eigen::VectorXd> inv_denoms_;
  std::vector<Eigen::MatrixXd> dense_;
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> solvers_;
};

inline CurvatureOperator build_curvature(const GradientBundle& b, const std::vector<double>& lambda,
                                         CurvatureMode mode) {
  return CurvatureOperator::from_bundle(b, lambda, mode);
}

/// Q per layer: either Gram factors U with Q = UᵀU, or dense blocks.
struct ValidationCurvature {
  CurvatureMode mode = CurvatureMode::kSmImplicit;
  std::vector<Eigen::MatrixXd> factors;
  std::vector<Eigen::MatrixXd> dense;

  std::size_t num_layers() const { return mode == CurvatureMode::kSmImplicit ? factors.size() : dense.size(); }

  Eigen::MatrixXd block(std::size_t l) const {
    if (mode == CurvatureMode::kExactDense) return dense.at(l);
    return factors.at(l).transpose() * factors.at(l);
  }

  static ValidationCurvature from_blocks(std::vector<Eigen::MatrixXd> blocks) {
    ValidationCurvature q;
    q.mode = CurvatureMode::kExactDense;
    q.dense = std::move(blocks);
    return q;
  }
};

/// Splits a dense D × D matrix into its per-layer diagonal blocks.
inline std::vector<Eigen::MatrixXd> diagonal_blocks(const ModelSpec& spec, const Eigen::MatrixXd& m) {
  const auto off = layer_offsets(spec);
  std::vector<Eigen::MatrixXd> out;
  for (std::size_t l = 0; l < spec.num_layers(); ++l)
    out.push_back(m.block(off[l], off[l], spec.layer_size(l), spec.layer_size(l)));
  return out;
}

/// Q for the summed validation data loss. Exact mode: its true Hessian.
/// Implicit mode: the Bartlett surrogate Σ_v E[q_v q_vᵀ] as Gram factors.
/// The regularizer is not part of validation error.
inline ValidationCurvature estimate_Q(const ModelSpec& spec, const ModelParameters& p,
                                      const ExampleRefs& validation, const LossSpec& ls,
                                      CurvatureMode mode, int delta = 1, std::uint64_t seed = 0,
                                      Moment moment = Moment::kObserved,
                                      double residual_scale = 1.0,
                                      HessianSource source = HessianSource::kAuto) {
  if (validation.empty()) throw ConfigError("validation split is empty; Q is undefined");
  LossSpec data_only = ls;
  data_only.l2_lambda = 0.0;
  if (mode == CurvatureMode::kExactDense) {
    const ExactHessian h = hessian_sum(spec, p, validation, data_only, source, false);
    return ValidationCurvature::from_blocks(diagonal_blocks(spec, h.matrix));
  }
  const GradientBundle b =
      collect_gradients(spec, p, validation, data_only, delta, seed, moment, residual_scale);
  ValidationCurvature q;
  q.mode = CurvatureMode::kSmImplicit;
  const double s = std::sqrt(static_cast<double>(b.num_examples) / static_cast<double>(b.rows()));
  for (const auto& g : b.grads) q.factors.push_back(s * g);
  return q;
}

enum class ScoreMode {
  kBartlett,  // H ← G and H(x) ← G(x); needs a log-loss
  kExact,     // exact Hessians for H and H(x)
};

namespace detail {

/// Candidate pieces Z consumes: moment rows and (exact mode) its Hessian.
struct CandidateTerms {
  std::vector<MomentRow> rows;
  std::vector<Eigen::MatrixXd> hessian;  // per-layer blocks, exact mode only
};

inline CandidateTerms candidate_terms(const LabeledExample& cand, const ModelSpec& spec,
                                      const ModelParameters& p, const LossSpec& ls, int delta,
                                      std::uint64_t seed, ScoreMode mode, Moment moment,
                                      double residual_scale, HessianSource source) {
  CandidateTerms t;
  Rng rng(derive_seed(seed, cand.id));
  t.rows = moment_rows(spec, p, cand, ls, delta, rng, moment, residual_scale);
  if (mode == ScoreMode::kExact) {
    const ExactHessian h = hessian_sum(spec, p, {&cand}, ls, source, true);
    t.hessian = diagonal_blocks(spec, h.matrix);
  }
  return t;
}

inline double finite_score(double z, const std::string& id) {
  if (!std::isfinite(z)) throw NumericalError("non-finite score for candidate '" + id + "'");
  return z;
}

}  // namespace detail

/// Z(x) = −Tr(G(x)H⁻¹QH⁻¹) + 2Tr(H(x)H⁻¹QH⁻¹GH⁻¹), summed over layers.
/// In Bartlett mode H = G (the damped operator) and H(x) = G(x), so Z
/// collapses to Tr(G(x)G⁻¹QG⁻¹) = Σ_rows w (G⁻¹g)ᵀQ(G⁻¹g) and `H` is unused.
/// Direct evaluation without amortization; ScoreEngine is the fast path.
inline double score_Z(const LabeledExample& cand, const ModelSpec& spec, const ModelParameters& p,
                      const CurvatureOperator& G, const CurvatureOperator& H,
                      const ValidationCurvature& Q, const LossSpec& ls, int delta,
                      std::uint64_t seed, ScoreMode mode = ScoreMode::kBartlett,
                      Moment moment = Moment::kModelExpected, double residual_scale = 1.0) {
  if (mode == ScoreMode::kBartlett && ls.kind != LossKind::kLogLoss)
    throw ConfigError("Bartlett mode requires a log-loss");
  const auto t = detail::candidate_terms(cand, spec, p, ls, delta, seed, mode, moment,
                                         residual_scale, HessianSource::kAuto);
  double z = 0.0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const Eigen::MatrixXd q = Q.block(l);
    const CurvatureOperator& inv = mode == ScoreMode::kBartlett ? G : H;
    for (const auto& r : t.rows) {
      const Eigen::VectorXd u = inv.apply_inverse(l, r.grad[l]);
      z += (mode == ScoreMode::kBartlett ? 1.0 : -1.0) * r.weight * u.dot(q * u);
    }
    if (mode == ScoreMode::kExact) {
      // B = H⁻¹QH⁻¹ G H⁻¹ with the undamped Gram in the middle.
      const Eigen::MatrixXd a = inv.apply_inverse(l, Eigen::MatrixXd(inv.apply_inverse(l, q).transpose()));
      const Eigen::MatrixXd gh = inv.apply_inverse(l, G.gram(l)).transpose();
      const Eigen::MatrixXd b = a * gh;
      z += 2.0 * (t.hessian[l].array() * b.transpose().array()).sum();
    }
  }
  return detail::finite_score(z, cand.id);
}

struct ScoreConfig {
  ScoreMode mode = ScoreMode::kBartlett;
  CurvatureMode g_mode = CurvatureMode::kSmImplicit;  // how G (or H) is inverted
  CurvatureMode q_mode = CurvatureMode::kSmImplicit;  // Gram Q or exact Hessian Q
  Moment moment = Moment::kModelExpected;
  int delta = 3;
  std::uint64_t seed = 0;
  double damping_scale = 0.1;
  std::optional<std::vector<double>> damping;  // overrides the default rule
  HessianSource hessian_source = HessianSource::kAuto;

  void validate() const {
    if (delta < 1) throw ConfigError("delta must be >= 1");
    if (!(damping_scale > 0.0)) throw ConfigError("damping_scale must be > 0");
  }
};

/// Builds G, H, Q once at the surrogate and amortizes the per-layer
/// products over candidates: Bartlett keeps W_l = G_l⁻¹U_lᵀ (or
/// M_l = G_l⁻¹Q_lG_l⁻¹ for dense Q); exact keeps A_l = H⁻¹QH⁻¹ and
/// B_l = A_l G_l H⁻¹.
class ScoreEngine {
 public:
  ScoreEngine(const ModelSpec& spec, ModelParameters params, const ExampleRefs& train,
              const ExampleRefs& validation, const LossSpec& ls, const ScoreConfig& cfg)
      : ScoreEngine(spec, std::move(params), train, ls, cfg, [&](const ScoreEngine& self) {
          return estimate_Q(self.spec_, self.params_, validation, self.ls_, cfg.q_mode, cfg.delta,
                            derive_seed(cfg.seed, "Q"), cfg.moment, self.residual_scale_,
                            cfg.hessian_source);
        }) {}

  /// Uses a caller-supplied Q (e.g. a fixed weighting matrix).
  ScoreEngine(const ModelSpec& spec, ModelParameters params, const ExampleRefs& train,
              const LossSpec& ls, const ScoreConfig& cfg, ValidationCurvature q)
      : ScoreEngine(spec, std::move(params), train, ls, cfg,
                    [&](const ScoreEngine&) { return std::move(q); }) {}

  double score(const LabeledExample& cand) const {
    const auto t = detail::candidate_terms(cand, spec_, params_, ls_, cfg_.delta,
                                           derive_seed(cfg_.seed, "Z"), cfg_.mode, cfg_.moment,
                                           residual_scale_, cfg_.hessian_source);
    double z = 0.0;
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      for (const auto& r : t.rows) {
        if (cfg_.mode == ScoreMode::kBartlett && !w_.empty()) {
          z += r.weight * (w_[l].transpose() * r.grad[l]).squaredNorm();
        } else {
          const Eigen::MatrixXd& a = cfg_.mode == ScoreMode::kBartlett ? m_[l] : a_[l];
          z += (cfg_.mode == ScoreMode::kBartlett ? 1.0 : -1.0) * r.weight *
               r.grad[l].dot(a * r.grad[l]);
        }
      }
      if (cfg_.mode == ScoreMode::kExact)
        z += 2.0 * (t.hessian[l].array() * b_[l].transpose().array()).sum();
    }
    return detail::finite_score(z, cand.id);
  }

  std::vector<double> score_all(const ExampleRefs& cands, unsigned threads = thread_count()) const {
    std::vector<double> z(cands.size());
    parallel_for(cands.size(), threads, [&](std::size_t i) { z[i] = score(*cands[i]); });
    return z;
  }

  const CurvatureOperator& G() const { return g_; }
  const ValidationCurvature& Q() const { return q_; }
  const std::vector<double>& damping() const { return g_.damping(); }
  double residual_scale() const { return residual_scale_; }
  const ScoreConfig& config() const { return cfg_; }

 private:
  template <class MakeQ>
  ScoreEngine(const ModelSpec& spec, ModelParameters params, const ExampleRefs& train,
              const LossSpec& ls, const ScoreConfig& cfg, MakeQ&& make_q)
      : spec_(spec), params_(std::move(params)), ls_(ls), cfg_(cfg) {
    spec_.validate();
    ls_.validate(spec_);
    cfg_.validate();
    if (cfg_.mode == ScoreMode::kBartlett && ls_.kind != LossKind::kLogLoss)
      throw ConfigError("Bartlett mode requires a log-loss");
    if (train.empty()) throw InputError("scoring needs a nonempty training set");
    residual_scale_ = training_residual_scale(train);

    const GradientBundle bundle = collect_gradients(spec_, params_, train, ls_, cfg_.delta,
                                                    derive_seed(cfg_.seed, "G"), cfg_.moment,
                                                    residual_scale_);
    const std::vector<double> lam =
        cfg_.damping ? *cfg_.damping : default_damping(bundle, cfg_.damping_scale);
    if (cfg_.mode == ScoreMode::kBartlett) {
      g_ = CurvatureOperator::from_bundle(bundle, lam, cfg_.g_mode);
    } else {
      g_ = CurvatureOperator::from_bundle(bundle, lam, CurvatureMode::kSmImplicit);
      const ExactHessian h = exact_hessian(spec_, params_, train, ls_, cfg_.hessian_source);
      auto blocks = diagonal_blocks(spec_, h.matrix);
      for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].diagonal().array() += lam[l];
      h_ = CurvatureOperator::from_dense(std::move(blocks), lam);
    }
    q_ = make_q(*this);
    if (q_.num_layers() != spec_.num_layers()) throw ConfigError("Q layer count mismatch");
    precompute();
  }

  double training_residual_scale(const ExampleRefs& train) const {
    if (spec_.head != Head::kLinear) return 1.0;
    double s = 0.0;
    for (const auto* e : train) {
      const double r = forward(spec_, params_, e->x)[0] - e->y;
      s += r * r;
    }
    return std::sqrt(s / static_cast<double>(train.size()));
  }

  void precompute() {
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      if (cfg_.mode == ScoreMode::kBartlett) {
        if (q_.mode == CurvatureMode::kSmImplicit) {
          w_.push_back(g_.apply_inverse(l, Eigen::MatrixXd(q_.factors[l].transpose())));
        } else {
          const Eigen::MatrixXd gq = g_.apply_inverse(l, q_.dense[l]);
          m_.push_back(g_.apply_inverse(l, Eigen::MatrixXd(gq.transpose())));
        }
      } else {
        const Eigen::MatrixXd hq = h_.apply_inverse(l, q_.block(l));
        Eigen::MatrixXd a = h_.apply_inverse(l, Eigen::MatrixXd(hq.transpose()));
        a = 0.5 * (a + a.transpose());
        const Eigen::MatrixXd gh = h_.apply_inverse(l, g_.gram(l)).transpose();
        b_.push_back(a * gh);
        a_.push_back(std::move(a));
      }
    }
  }

  ModelSpec spec_;
  ModelParameters params_;
  LossSpec ls_;
  ScoreConfig cfg_;
  double residual_scale_ = 1.0;
  CurvatureOperator g_;
  CurvatureOperator h_;
  ValidationCurvature q_;
  std::vector<Eigen::MatrixXd> w_, m_, a_, b_;
};

}  // namespace batsel
