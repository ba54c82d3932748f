#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batsel/hessian.hpp"
#include "batsel/influence.hpp"
#include "batsel/selection.hpp"
#include "batsel/stats.hpp"
#include "batsel/tasks.hpp"
#include "json.hpp"

namespace batsel {

/// Brute-force Z: dense per-layer matrices assembled by explicit loops and
/// inverted explicitly. Shares no code with ScoreEngine beyond gradients and
/// exact Hessians, so the two can be compared.
class ExactScorer {
 public:
  struct Options {
    ScoreMode mode = ScoreMode::kExact;
    CurvatureMode q_mode = CurvatureMode::kExactDense;
    Moment moment = Moment::kModelExpected;
    int delta = 1;
    std::uint64_t seed = 0;
    double damping_scale = 0.1;
    std::optional<std::vector<double>> damping;
    std::optional<std::vector<Eigen::MatrixXd>> q_blocks;  // fixed Q, skips validation
  };

  ExactScorer(const ModelSpec& spec, const ModelParameters& p, const ExampleRefs& train,
              const ExampleRefs& validation, const LossSpec& ls, Options opt)
      : spec_(spec), p_(p), ls_(ls), opt_(std::move(opt)) {
    check_dense_size(spec_);
    if (opt_.mode == ScoreMode::kBartlett && ls_.kind != LossKind::kLogLoss)
      throw ConfigError("Bartlett mode requires a log-loss");
    residual_ = 1.0;
    if (spec_.head == Head::kLinear) {
      double s = 0.0;
      for (const auto* e : train) {
        const double r = forward(spec_, p_, e->x)[0] - e->y;
        s += r * r;
      }
      residual_ = std::sqrt(s / static_cast<double>(train.size()));
    }

    // Training Gram as a plain average of weighted outer products.
    const auto off = layer_offsets(spec_);
    const long D = spec_.total_dim();
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(D, D);
    std::vector<double> layer_sq(spec_.num_layers(), 0.0);
    const std::uint64_t gseed = derive_seed(opt_.seed, "G");
    for (const auto* e : train) {
      Rng rng(derive_seed(gseed, e->id));
      for (const auto& r : moment_rows(spec_, p_, *e, ls_, opt_.delta, rng, opt_.moment, residual_)) {
        const Eigen::VectorXd g = ModelParameters{r.grad}.flatten();
        gram += r.weight * g * g.transpose();
        for (std::size_t l = 0; l < spec_.num_layers(); ++l)
          layer_sq[l] += r.weight * g.segment(off[l], spec_.layer_size(l)).squaredNorm();
      }
    }
    gram /= static_cast<double>(train.size());

    std::vector<double> lam;
    if (opt_.damping) {
      lam = *opt_.damping;
    } else {
      for (std::size_t l = 0; l < spec_.num_layers(); ++l)
        lam.push_back(std::max(1e-12, opt_.damping_scale * layer_sq[l] /
                                          static_cast<double>(train.size()) /
                                          static_cast<double>(spec_.layer_size(l))));
    }
    damping_ = lam;

    Eigen::MatrixXd h;
    if (opt_.mode == ScoreMode::kBartlett) {
      h = gram;
    } else {
      h = hessian_sum(spec_, p_, train, ls_, HessianSource::kAuto, true).matrix /
          static_cast<double>(train.size());
    }

    Eigen::MatrixXd q;
    if (opt_.q_blocks) {
      q = Eigen::MatrixXd::Zero(D, D);
      for (std::size_t l = 0; l < spec_.num_layers(); ++l)
        q.block(off[l], off[l], spec_.layer_size(l), spec_.layer_size(l)) = (*opt_.q_blocks)[l];
    } else if (opt_.q_mode == CurvatureMode::kExactDense) {
      LossSpec data_only = ls_;
      data_only.l2_lambda = 0.0;
      q = hessian_sum(spec_, p_, validation, data_only, HessianSource::kAuto, false).matrix;
    } else {
      LossSpec data_only = ls_;
      data_only.l2_lambda = 0.0;
      q = Eigen::MatrixXd::Zero(D, D);
      const std::uint64_t qseed = derive_seed(opt_.seed, "Q");
      for (const auto* e : validation) {
        Rng rng(derive_seed(qseed, e->id));
        for (const auto& r : moment_rows(spec_, p_, *e, data_only, opt_.delta, rng, opt_.moment, residual_)) {
          const Eigen::VectorXd g = ModelParameters{r.grad}.flatten();
          q += r.weight * g * g.transpose();
        }
      }
    }

    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      const long o = off[l], n = spec_.layer_size(l);
      Eigen::MatrixXd hl = h.block(o, o, n, n);
      hl.diagonal().array() += lam[l];
      const Eigen::FullPivLU<Eigen::MatrixXd> lu(hl);
      if (!lu.isInvertible()) throw NumericalError("H block " + std::to_string(l) + " is singular");
      const Eigen::MatrixXd hinv = lu.inverse();
      const Eigen::MatrixXd a = hinv * q.block(o, o, n, n) * hinv;
      a_.push_back(a);
      if (opt_.mode == ScoreMode::kExact) b_.push_back(a * gram.block(o, o, n, n) * hinv);
    }
  }

  double operator()(const LabeledExample& cand) const {
    const auto off = layer_offsets(spec_);
    Rng rng(derive_seed(derive_seed(opt_.seed, "Z"), cand.id));
    const auto rows = moment_rows(spec_, p_, cand, ls_, opt_.delta, rng, opt_.moment, residual_);
    Eigen::MatrixXd hx;
    if (opt_.mode == ScoreMode::kExact) hx = hessian_sum(spec_, p_, {&cand}, ls_).matrix;
    double z = 0.0;
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      const long o = off[l], n = spec_.layer_size(l);
      // Tr(G(x) A) with G(x) = Σ_c w_c g_c g_cᵀ.
      Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(n, n);
      for (const auto& r : rows) gx += r.weight * r.grad[l] * r.grad[l].transpose();
      const double t1 = (gx * a_[l]).trace();
      if (opt_.mode == ScoreMode::kBartlett) {
        z += t1;
      } else {
        z += -t1 + 2.0 * (hx.block(o, o, n, n) * b_[l]).trace();
      }
    }
    if (!std::isfinite(z)) throw NumericalError("non-finite exact score for '" + cand.id + "'");
    return z;
  }

  const std::vector<double>& damping() const { return damping_; }

 private:
  ModelSpec spec_;
  ModelParameters p_;
  LossSpec ls_;
  Options opt_;
  double residual_ = 1.0;
  std::vector<double> damping_;
  std::vector<Eigen::MatrixXd> a_, b_;
};

inline double exact_Z(const LabeledExample& cand, const ModelSpec& spec, const ModelParameters& p,
                      const ExampleRefs& train, const ExampleRefs& validation, const LossSpec& ls,
                      const ExactScorer::Options& opt = {}) {
  return ExactScorer(spec, p, train, validation, ls, opt)(cand);
}

struct ContractionReport {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
  double slack = 0.0;  // lhs − rhs; reported, never used to flip `holds`
  double gamma = 0.0;
};

/// lhs = γ‖(H^{bat|A})⁻¹ Σ_{D^bat} ∇L‖, rhs = ‖(H^{bat|A} − H^bat)⁻¹ Σ_{D^A} ∇L‖
/// with summed exact Hessians of the regularized per-example loss at `p`.
/// An empty selection gives H^bat = 0.
inline ContractionReport check_contraction(const ModelSpec& spec, const ExampleRefs& adaptation,
                               const ExampleRefs& selected, const ModelParameters& p, double gamma,
                               const LossSpec& ls) {
  if (adaptation.empty()) throw InputError("check_contraction needs adaptation examples");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  ExampleRefs all = adaptation;
  all.insert(all.end(), selected.begin(), selected.end());
  const Eigen::MatrixXd h_all = hessian_sum(spec, p, all, ls).matrix;
  Eigen::MatrixXd h_sel = Eigen::MatrixXd::Zero(h_all.rows(), h_all.cols());
  if (!selected.empty()) h_sel = hessian_sum(spec, p, selected, ls).matrix;
  const Eigen::MatrixXd h_a = h_all - h_sel;

  Eigen::VectorXd g_a = Eigen::VectorXd::Zero(h_all.rows());
  Eigen::VectorXd g_sel = Eigen::VectorXd::Zero(h_all.rows());
  for (const auto* e : adaptation) g_a += flat_gradient(spec, p, *e, ls, true);
  for (const auto* e : selected) g_sel += flat_gradient(spec, p, *e, ls, true);

  const Eigen::FullPivLU<Eigen::MatrixXd> lu_all(h_all), lu_a(h_a);
  if (!lu_all.isInvertible()) throw NumericalError("H^{bat|A} is singular");
  if (!lu_a.isInvertible()) throw NumericalError("H^A is singular");
  ContractionReport r;
  r.gamma = gamma;
  r.lhs = gamma * lu_all.solve(Eigen::VectorXd(g_a + g_sel)).norm();
  r.rhs = lu_a.solve(g_a).norm();
  r.holds = r.lhs <= r.rhs;
  r.slack = r.lhs - r.rhs;
  return r;
}

/// Newton's method on the mean regularized loss of a single-layer logistic
/// or linear model over a design matrix X = [x, 1].
inline Eigen::VectorXd fit_convex_matrix(Head head, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                         double l2, int max_iter = 100) {
  const long n = X.rows(), d = X.cols();
  if (n == 0) throw InputError("cannot fit an empty sample");
  Eigen::VectorXd th = Eigen::VectorXd::Zero(d);
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd r, w;
    if (head == Head::kLinear) {
      r = X * th - y;
      w = Eigen::VectorXd::Ones(n);
    } else {
      const Eigen::VectorXd p = (X * th).unaryExpr([](double z) { return detail::sigmoid(z); });
      r = p - y;
      w = p.array() * (1.0 - p.array());
    }
    Eigen::VectorXd g = X.transpose() * r / static_cast<double>(n) + l2 * th;
    Eigen::MatrixXd h = X.transpose() * w.asDiagonal() * X / static_cast<double>(n);
    h.diagonal().array() += l2;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 1e-14 * h.diagonal().maxCoeff()).any())
      throw NumericalError("Newton system is singular");
    const Eigen::VectorXd step = ldlt.solve(g);
    th -= step;
    if (!th.allFinite()) throw NumericalError("Newton iteration diverged");
    // Linear heads converge in one step; the second only polishes rounding.
    if (head == Head::kLinear && it >= 1) break;
    if (head != Head::kLinear && step.norm() <= 1e-13 * (1.0 + th.norm())) break;
  }
  return th;
}

inline void check_convex(const ModelSpec& spec) {
  spec.validate();
  if (spec.num_layers() != 1 || spec.head == Head::kSoftmax)
    throw ConfigError("estimate is defined only for convex single-layer logistic/linear tasks");
}

/// Design matrix [x, 1] of a set of examples.
inline void design_matrix(const ExampleRefs& xs, Eigen::MatrixXd& X, Eigen::VectorXd& y) {
  const long n = static_cast<long>(xs.size()), d = xs.empty() ? 0 : xs.front()->x.size();
  X.resize(n, d + 1);
  y.resize(n);
  for (long i = 0; i < n; ++i) {
    X.row(i).head(d) = xs[static_cast<std::size_t>(i)]->x.transpose();
    X(i, d) = 1.0;
    y[i] = xs[static_cast<std::size_t>(i)]->y;
  }
}

/// Single-layer parameters ([W row; b]) from a flat [w; b] vector.
inline ModelParameters single_layer_params(const Eigen::VectorXd& th) { return {{th}}; }

inline ModelParameters fit_convex(const ModelSpec& spec, const ExampleRefs& xs, const LossSpec& ls) {
  check_convex(spec);
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  design_matrix(xs, X, y);
  return single_layer_params(fit_convex_matrix(spec.head, X, y, ls.l2_lambda));
}

enum class RhoMethod { kPlain, kBat };
enum class WeightMatrix { kIdentity, kRiskHessian };

inline std::string_view to_string(RhoMethod m) { return m == RhoMethod::kPlain ? "plain" : "bat"; }
inline std::string_view to_string(WeightMatrix s) {
  return s == WeightMatrix::kIdentity ? "identity" : "risk-hessian";
}

struct RhoConfig {
  std::vector<long> k_grid{256, 512, 1024, 2048, 4096};
  int seeds = 20;
  std::uint64_t base_seed = 0;
  WeightMatrix S = WeightMatrix::kIdentity;
  double gamma = 0.8;
  double pool_factor = 4.0;  // pool size per backbone slot
  long population = 1000000;
  std::optional<Eigen::VectorXd> theta_star;  // skips the population fit
  double plateau_tolerance = 0.1;
};

struct RhoEstimate {
  RhoMethod method = RhoMethod::kPlain;
  WeightMatrix S = WeightMatrix::kIdentity;
  std::vector<long> k_grid;
  std::vector<double> mean_error;                 // mean k‖θ̂_k − θ*‖²_S per k
  std::vector<std::vector<double>> per_seed;      // [k][seed]
  std::vector<double> contraction_fraction;             // share of seeds where the contraction holds (bat)
  std::vector<ContractionReport> contraction_last;            // per seed at the largest k (bat)
  double rho_hat = 0.0;
  double last_slope = 0.0;  // log-log slope over the last grid interval
  bool plateau = false;
  Eigen::VectorXd theta_star;
};

/// θ* and S at the population optimum of the adaptation law.
struct Population {
  Eigen::VectorXd theta_star;
  Eigen::MatrixXd S;
};

inline Population population_optimum(const TaskSpec& task, std::uint64_t seed, const RhoConfig& cfg) {
  const ModelSpec spec = task.model();
  check_convex(spec);
  const TaskSampler sampler(task, seed);
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Rng rng(derive_seed(seed, "population"));
  sampler.population(rng, cfg.population, X, y);
  Population pop;
  pop.theta_star = cfg.theta_star ? *cfg.theta_star : fit_convex_matrix(spec.head, X, y, task.l2_lambda);
  const long d = X.cols();
  if (cfg.S == WeightMatrix::kIdentity) {
    pop.S = Eigen::MatrixXd::Identity(d, d);
  } else {
    Eigen::VectorXd w = Eigen::VectorXd::Ones(X.rows());
    if (spec.head != Head::kLinear) {
      const Eigen::VectorXd p = (X * pop.theta_star).unaryExpr([](double z) { return detail::sigmoid(z); });
      w = p.array() * (1.0 - p.array());
    }
    pop.S = X.transpose() * w.asDiagonal() * X / static_cast<double>(X.rows());
    pop.S.diagonal().array() += task.l2_lambda;
  }
  return pop;
}

/// Empirical asymptotic error coefficient: for each k, the seed average of
/// k‖θ̂_k − θ*‖²_S. Plain fits k adaptation draws. BAT fits n = round(γk)
/// adaptation draws plus the top k − n of a pool of pool_factor·(k − n)
/// candidates, scored in exact mode at the adaptation-only fit with Q = S.
inline RhoEstimate estimate_rho(const TaskSpec& task, RhoMethod method, const RhoConfig& cfg,
                                unsigned threads = thread_count()) {
  const ModelSpec spec = task.model();
  check_convex(spec);
  if (cfg.k_grid.empty()) throw ConfigError("k grid is empty");
  if (cfg.seeds < 1) throw ConfigError("need at least one seed");
  const LossSpec ls = task.loss();
  const Population pop = population_optimum(task, cfg.base_seed, cfg);
  const TaskSampler sampler(task, cfg.base_seed);

  RhoEstimate est;
  est.method = method;
  est.S = cfg.S;
  est.k_grid = cfg.k_grid;
  est.theta_star = pop.theta_star;
  const std::size_t nk = cfg.k_grid.size(), ns = static_cast<std::size_t>(cfg.seeds);
  est.per_seed.assign(nk, std::vector<double>(ns, 0.0));
  std::vector<std::vector<ContractionReport>> reports(nk, std::vector<ContractionReport>(ns));

  auto err = [&](const Eigen::VectorXd& th, long k) {
    const Eigen::VectorXd d = th - pop.theta_star;
    return static_cast<double>(k) * d.dot(pop.S * d);
  };

  parallel_for(nk * ns, threads, [&](std::size_t job) {
    const std::size_t ki = job / ns, s = job % ns;
    const long k = cfg.k_grid[ki];
    const std::uint64_t seed = derive_seed(cfg.base_seed, "rho-seed", std::to_string(s) + "/" + std::to_string(k));
    Rng rng(seed);
    if (method == RhoMethod::kPlain) {
      const auto xs = sampler.adaptation(rng, k);
      est.per_seed[ki][s] = err(fit_convex(spec, refs_of(xs), ls).layers[0], k);
      return;
    }
    const long n = std::clamp<long>(round_half_up(cfg.gamma * static_cast<double>(k)), 1, k);
    const long m = k - n;
    const auto xs = sampler.adaptation(rng, n);
    const ExampleRefs adapt = refs_of(xs);
    const ModelParameters surrogate = fit_convex(spec, adapt, ls);
    const auto pool = sampler.pool(rng, static_cast<long>(std::ceil(cfg.pool_factor * static_cast<double>(m))));
    ExampleRefs chosen;
    if (m > 0 && !pool.empty()) {
      ScoreConfig sc;
      sc.mode = ScoreMode::kExact;
      sc.moment = Moment::kModelExpected;
      sc.delta = 1;
      sc.seed = seed;
      const ScoreEngine engine(spec, surrogate, adapt, ls, sc, ValidationCurvature::from_blocks({pop.S}));
      const ExampleRefs cands = refs_of(pool);
      const auto z = engine.score_all(cands, 1);
      std::vector<std::string> ids;
      for (const auto& e : pool) ids.push_back(e.id);
      const auto recs = select(z, ids, choose_eta(z, ids, m));
      for (std::size_t i = 0; i < recs.size(); ++i)
        if (recs[i].selected) chosen.push_back(cands[i]);
    }
    ExampleRefs all = adapt;
    all.insert(all.end(), chosen.begin(), chosen.end());
    est.per_seed[ki][s] = err(fit_convex(spec, all, ls).layers[0], k);
    reports[ki][s] = check_contraction(spec, adapt, chosen, single_layer_params(pop.theta_star),
                                 static_cast<double>(n) / static_cast<double>(k), ls);
  });

  for (std::size_t ki = 0; ki < nk; ++ki) {
    est.mean_error.push_back(mean(est.per_seed[ki]));
    if (method == RhoMethod::kBat) {
      double h = 0.0;
      for (const auto& r : reports[ki]) h += r.holds ? 1.0 : 0.0;
      est.contraction_fraction.push_back(h / static_cast<double>(ns));
    }
  }
  if (method == RhoMethod::kBat) est.contraction_last = reports.back();
  est.rho_hat = est.mean_error.back();
  if (nk >= 2) {
    const double c1 = est.mean_error[nk - 2], c2 = est.mean_error[nk - 1];
    const double k1 = static_cast<double>(cfg.k_grid[nk - 2]), k2 = static_cast<double>(cfg.k_grid[nk - 1]);
    est.last_slope = std::log(c2 / c1) / std::log(k2 / k1);
    est.plateau = std::isfinite(est.last_slope) && std::abs(est.last_slope) < cfg.plateau_tolerance;
  }
  return est;
}

inline nlohmann::json to_json(const ContractionReport& r) {
  return {{"lhs", r.lhs}, {"rhs", r.rhs}, {"holds", r.holds}, {"slack", r.slack}, {"gamma", r.gamma}};
}

inline nlohmann::json to_json(const RhoEstimate& e) {
  nlohmann::json j;
  j["method"] = std::string(to_string(e.method));
  j["S"] = std::string(to_string(e.S));
  j["k_grid"] = e.k_grid;
  j["mean_error"] = e.mean_error;
  j["rho_hat"] = e.rho_hat;
  j["last_slope"] = e.last_slope;
  j["plateau"] = e.plateau;
  j["contraction_fraction"] = e.contraction_fraction;
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : e.contraction_last) reps.push_back(to_json(r));
  j["contraction_reports"] = reps;
  j["theta_star"] = std::vector<double>(e.theta_star.data(), e.theta_star.data() + e.theta_star.size());
  return j;
}

}  // namespace batsel
