#include <gtest/gtest.h>

#include <cmath>

#include "batsel/batsel.hpp"
#include "test_util.hpp"

using namespace batsel;
using namespace batsel::testing;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST(ExactHessian, LogisticClosedForm) {
  const ModelSpec spec = ModelSpec::logistic(3);
  Rng rng(1);
  const ModelParameters p = random_params(spec, rng);
  const auto xs = random_examples(spec, rng, 25);
  const LossSpec ls = loss_for(spec, 0.0, 0.05);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(4, 4);
  for (const auto& e : xs) {
    Eigen::Vector4d xt;
    xt << e.x, 1.0;
    const double q = sig(p.layers[0].dot(xt));
    ref += q * (1 - q) * xt * xt.transpose() / 25.0;
  }
  ref.diagonal().array() += 0.05;
  EXPECT_LT((exact_hessian(spec, p, xs, ls).matrix - ref).norm(), 1e-13);
}

TEST(ExactHessian, LeastSquaresIsGramOfDesign) {
  const ModelSpec spec = ModelSpec::linear(4);
  Rng rng(2);
  const auto xs = random_examples(spec, rng, 9);
  const auto h = hessian_sum(spec, random_params(spec, rng), refs_of(xs), loss_for(spec), HessianSource::kAuto,
                             false);
  Eigen::MatrixXd X(9, 5);
  for (int i = 0; i < 9; ++i) X.row(i) << xs[i].x.transpose(), 1.0;
  EXPECT_LT((h.matrix - X.transpose() * X).norm(), 1e-12);
  EXPECT_EQ(h.source, HessianSource::kAnalytic);
}

TEST(ExactHessian, SoftmaxAnalyticMatchesFiniteDifference) {
  const ModelSpec spec = ModelSpec::softmax(3, 4);
  Rng rng(3);
  const ModelParameters p = random_params(spec, rng);
  const auto xs = random_examples(spec, rng, 6);
  const LossSpec ls = loss_for(spec);
  const auto a = hessian_sum(spec, p, refs_of(xs), ls, HessianSource::kAnalytic);
  const auto f = hessian_sum(spec, p, refs_of(xs), ls, HessianSource::kFiniteDifference);
  EXPECT_LT((a.matrix - f.matrix).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ExactHessian, MlpCurvatureMatchesSecondDifferenceOfLoss) {
  const ModelSpec spec = ModelSpec::mlp(4, {4}, Activation::kTanh, Head::kLogisticBinary);  // D = 25
  Rng rng(4);
  const ModelParameters p = random_params(spec, rng);
  const auto xs = random_examples(spec, rng, 5);
  const LossSpec ls = loss_for(spec);
  const Eigen::MatrixXd h = hessian_sum(spec, p, refs_of(xs), ls).matrix;
  EXPECT_LT((h - h.transpose()).cwiseAbs().maxCoeff(), 1e-6);
  auto total = [&](const Eigen::VectorXd& th) {
    double s = 0.0;
    Rng r(0);
    for (const auto& e : xs) s += loss(spec, ModelParameters::unflatten(spec, th), e, ls, 1, r);
    return s;
  };
  const Eigen::VectorXd th = p.flatten();
  for (int c = 0; c < 10; ++c) {
    const Eigen::VectorXd v = gaussian_vector(rng, th.size()).normalized();
    const double step = 1e-3;
    const double second = (total(th + step * v) - 2.0 * total(th) + total(th - step * v)) / (step * step);
    EXPECT_NEAR(v.dot(h * v), second, 1e-5 * std::max(1.0, std::abs(second)));
  }
}

TEST(ExactHessian, DenseCapIsEnforced) {
  const ModelSpec big = ModelSpec::mlp(30, {20}, Activation::kTanh, Head::kLogisticBinary);  // D = 641
  ASSERT_GT(big.total_dim(), kDenseParameterCap);
  Rng rng(5);
  const auto xs = random_examples(big, rng, 2);
  try {
    hessian_sum(big, init_parameters(big, 0), refs_of(xs), loss_for(big));
    FAIL();
  } catch (const SizeError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
  EXPECT_THROW(exact_hessian(ModelSpec::logistic(2), init_parameters(ModelSpec::logistic(2), 0),
                             ExampleRefs{}, loss_for(ModelSpec::logistic(2))),
               InputError);
  EXPECT_THROW(hessian_sum(big, init_parameters(big, 0), refs_of(xs), loss_for(big), HessianSource::kAnalytic),
               ConfigError);
}

TEST(ExactScorer, AgreesWithEngineOnDensePath) {
  const ModelSpec spec = ModelSpec::mlp(3, {3}, Activation::kTanh, Head::kSoftmax, 3);
  Rng rng(6);
  const auto train = random_examples(spec, rng, 40, "a");
  const auto val = random_examples(spec, rng, 10, "v");
  const auto pool = random_examples(spec, rng, 8, "b");
  const LossSpec ls = loss_for(spec, 0.2, 0.01);
  const ModelParameters p = train_from(spec, init_parameters(spec, 2), refs_of(train), ls, {80, 0.5, 1 << 30, 2}).params;
  for (auto mode : {ScoreMode::kBartlett, ScoreMode::kExact}) {
    for (auto qm : {CurvatureMode::kSmImplicit, CurvatureMode::kExactDense}) {
      ScoreConfig cfg;
      cfg.mode = mode;
      cfg.g_mode = CurvatureMode::kExactDense;
      cfg.q_mode = qm;
      cfg.delta = 2;
      cfg.seed = 8;
      const ScoreEngine engine(spec, p, refs_of(train), refs_of(val), ls, cfg);
      ExactScorer::Options opt;
      opt.mode = mode;
      opt.q_mode = qm;
      opt.delta = 2;
      opt.seed = 8;
      const ExactScorer oracle(spec, p, refs_of(train), refs_of(val), ls, opt);
      for (std::size_t l = 0; l < engine.damping().size(); ++l)
        EXPECT_NEAR(engine.damping()[l], oracle.damping()[l], 1e-12 * oracle.damping()[l]);
      for (const auto& c : pool) {
        const double want = oracle(c);
        EXPECT_NEAR(engine.score(c), want, 1e-8 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST(ExactScorer, ZeroGradientCandidateScoresZeroInBartlettMode) {
  const ModelSpec spec = ModelSpec::logistic(2);
  ModelParameters far{{Eigen::Vector3d(0.0, 0.0, 800.0)}};
  Rng rng(7);
  const auto train = random_examples(spec, rng, 10);
  const LabeledExample cand{"z", Eigen::Vector2d::Zero(), 1.0, Split::kBackbone};
  ExactScorer::Options opt;
  opt.mode = ScoreMode::kBartlett;
  opt.q_mode = CurvatureMode::kSmImplicit;
  opt.damping = std::vector<double>{0.1};
  EXPECT_EQ(exact_Z(cand, spec, far, refs_of(train), refs_of(train), loss_for(spec), opt), 0.0);
}

TEST(Contraction, EmptySelectionHoldsWithEquality) {
  TaskSpec t = TaskSpec::logistic_benchmark();
  t.dim = 4;
  const TaskData d = generate_task(t, 1);
  const ModelSpec spec = t.model();
  const ModelParameters p = init_parameters(spec, 3);
  const auto r = check_contraction(spec, refs_of(d.adaptation), {}, p, 1.0, t.loss());
  EXPECT_EQ(r.lhs, r.rhs);
  EXPECT_TRUE(r.holds);
  EXPECT_EQ(r.slack, 0.0);
  EXPECT_THROW(check_contraction(spec, {}, {}, p, 1.0, t.loss()), InputError);
  EXPECT_THROW(check_contraction(spec, refs_of(d.adaptation), {}, p, 0.0, t.loss()), ConfigError);
}

TEST(Contraction, HessianDecomposesOverSubsets) {
  TaskSpec t = TaskSpec::logistic_benchmark();
  t.dim = 3;
  const TaskData d = generate_task(t, 2);
  const ModelSpec spec = t.model();
  const ModelParameters p = init_parameters(spec, 1);
  ExampleRefs all = refs_of(d.adaptation);
  const ExampleRefs sel = refs_of(d.pool);
  all.insert(all.end(), sel.begin(), sel.end());
  const Eigen::MatrixXd h_all = hessian_sum(spec, p, all, t.loss()).matrix;
  const Eigen::MatrixXd h_a = hessian_sum(spec, p, refs_of(d.adaptation), t.loss()).matrix;
  const Eigen::MatrixXd h_s = hessian_sum(spec, p, sel, t.loss()).matrix;
  EXPECT_LT((h_all - h_a - h_s).norm(), 1e-10 * h_all.norm());
}

// Brute-force search over single-candidate selections: a candidate whose
// gradient cancels the adaptation gradient satisfies the inequality, one
// that reinforces it does not.
TEST(Contraction, HelpfulAndHarmfulCandidatesByPairSearch) {
  TaskSpec t = TaskSpec::logistic_benchmark();
  t.dim = 3;
  t.n_adaptation = 30;
  t.pool_size = 200;
  const TaskData d = generate_task(t, 3);
  const ModelSpec spec = t.model();
  const LossSpec ls = t.loss();
  // Away from the optimum so that g_A is sizeable.
  const ModelParameters p{{Eigen::Vector4d(1.5, -1.0, 0.5, 0.8)}};
  const double gamma = 30.0 / 31.0;
  double best = std::numeric_limits<double>::infinity(), worst = -best;
  for (const auto& c : d.pool) {
    const auto r = check_contraction(spec, refs_of(d.adaptation), {&c}, p, gamma, ls);
    EXPECT_EQ(r.holds, r.lhs <= r.rhs);
    best = std::min(best, r.slack);
    worst = std::max(worst, r.slack);
  }
  EXPECT_LT(best, 0.0);
  EXPECT_GT(worst, 0.0);
}

TEST(Contraction, SlackGrowsAsGammaApproachesOne) {
  TaskSpec t = TaskSpec::logistic_benchmark();
  t.dim = 3;
  const TaskData d = generate_task(t, 4);
  const ModelSpec spec = t.model();
  const ModelParameters p{{Eigen::Vector4d(0.3, 0.3, -0.2, 0.1)}};
  const ExampleRefs sel{&d.pool[0], &d.pool[1]};
  double prev = -std::numeric_limits<double>::infinity();
  for (double g : {0.5, 0.8, 0.95, 0.99, 1.0}) {
    const auto r = check_contraction(spec, refs_of(d.adaptation), sel, p, g, t.loss());
    EXPECT_GT(r.slack, prev);
    prev = r.slack;
  }
}

TEST(FitConvex, NewtonReachesStationaryPoint) {
  TaskSpec t = TaskSpec::logistic_benchmark();
  t.dim = 5;
  const TaskData d = generate_task(t, 5);
  const ModelSpec spec = t.model();
  const ModelParameters th = fit_convex(spec, refs_of(d.adaptation), t.loss());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(6);
  for (const auto& e : d.adaptation) g += flat_gradient(spec, th, e, t.loss(), true);
  EXPECT_LT(g.norm(), 1e-9);
  const ModelSpec mlp = ModelSpec::mlp(5, {2}, Activation::kTanh, Head::kLogisticBinary);
  EXPECT_THROW(fit_convex(mlp, refs_of(d.adaptation), t.loss()), ConfigError);
}

// Ordinary least squares at a well-specified linear model: k·E‖θ̂ − θ*‖²
// tends to σ²·tr(E[x̃x̃ᵀ]⁻¹) = σ²(Σ_i 1/s_i² + 1) with independent
// zero-mean covariates of scale s_i.
TEST(EstimateRho, PlainLeastSquaresMatchesClosedForm) {
  const TaskSpec t = TaskSpec::q1();
  const TaskSampler s(t, 0);
  RhoConfig cfg;
  cfg.k_grid = {4096};
  cfg.seeds = 300;
  cfg.theta_star = s.truth();
  cfg.population = 10;
  const auto est = estimate_rho(t, RhoMethod::kPlain, cfg);
  double tr = 1.0;
  for (double sc : Eigen::VectorXd::LinSpaced(5, 0.5, 2.0)) tr += 1.0 / (sc * sc);
  const double expected = t.label_sigma * t.label_sigma * tr;
  EXPECT_NEAR(est.rho_hat, expected, 0.1 * expected);
}

TEST(EstimateRho, PlateauUnderBothWeightMatrices) {
  const TaskSpec t = TaskSpec::q1();
  const TaskSampler s(t, 0);
  for (auto S : {WeightMatrix::kIdentity, WeightMatrix::kRiskHessian}) {
    RhoConfig cfg;
    cfg.S = S;
    cfg.k_grid = {256, 4096};
    cfg.seeds = 400;
    cfg.theta_star = s.truth();
    cfg.population = 20000;
    const auto est = estimate_rho(t, RhoMethod::kPlain, cfg);
    EXPECT_TRUE(est.plateau) << to_string(S) << " slope " << est.last_slope;
  }
}

TEST(EstimateRho, BatArmRunsAndReportsContraction) {
  const TaskSpec t = TaskSpec::q1();
  RhoConfig cfg;
  cfg.k_grid = {64, 128};
  cfg.seeds = 4;
  cfg.population = 20000;
  const auto a = estimate_rho(t, RhoMethod::kBat, cfg, 1);
  const auto b = estimate_rho(t, RhoMethod::kBat, cfg, 2);
  ASSERT_EQ(a.contraction_fraction.size(), 2u);
  for (double f : a.contraction_fraction) EXPECT_TRUE(f >= 0.0 && f <= 1.0);
  EXPECT_EQ(a.contraction_last.size(), 4u);
  EXPECT_EQ(a.mean_error, b.mean_error);
  const auto j = to_json(a);
  EXPECT_EQ(j["method"], "bat");
  EXPECT_EQ(j["contraction_reports"].size(), 4u);
}

TEST(EstimateRho, RejectsNonConvexTasksAndEmptyGrids) {
  TaskSpec t = TaskSpec::q1();
  RhoConfig cfg;
  cfg.population = 100;
  cfg.k_grid = {};
  EXPECT_THROW(estimate_rho(t, RhoMethod::kPlain, cfg), ConfigError);
  t.hidden = {3};
  cfg.k_grid = {64};
  EXPECT_THROW(estimate_rho(t, RhoMethod::kPlain, cfg), ConfigError);
}
