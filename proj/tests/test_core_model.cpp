#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "batsel/batsel.hpp"
#include "test_util.hpp"

using namespace batsel;
using namespace batsel::testing;

namespace {

LabeledExample example(Eigen::VectorXd x, double y, std::string id = "x") {
  return {std::move(id), std::move(x), y, Split::kAdaptation};
}

/// Flattened gradient by central differences of the δ-averaged loss. The
/// rng is copied for every evaluation so all evaluations see the same draws.
Eigen::VectorXd fd_gradient(const ModelSpec& spec, const ModelParameters& p, const LabeledExample& e,
                            const LossSpec& ls, int delta, const Rng& rng, double h) {
  const Eigen::VectorXd th = p.flatten();
  Eigen::VectorXd g(th.size());
  for (long i = 0; i < th.size(); ++i) {
    Eigen::VectorXd a = th, b = th;
    a[i] += h;
    b[i] -= h;
    Rng ra = rng, rb = rng;
    g[i] = (loss(spec, ModelParameters::unflatten(spec, a), e, ls, delta, ra) -
            loss(spec, ModelParameters::unflatten(spec, b), e, ls, delta, rb)) /
           (2.0 * h);
  }
  return g;
}

}  // namespace

TEST(Forward, LogisticAtZeroParametersIsOneHalf) {
  const ModelSpec spec = ModelSpec::logistic(4);
  ModelParameters p{{Eigen::VectorXd::Zero(5)}};
  Rng rng(3);
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd out = forward(spec, p, gaussian_vector(rng, 4, 3.0));
    EXPECT_EQ(out[1], 0.5);
    EXPECT_EQ(out.sum(), 1.0);
  }
}

TEST(Forward, SoftmaxWithEqualLogitsIsUniform) {
  const ModelSpec spec = ModelSpec::softmax(3, 4);
  ModelParameters p{{Eigen::VectorXd::Zero(spec.layer_size(0))}};
  p.layers[0].tail(4).setConstant(1.7);  // equal biases, zero weights
  const Eigen::VectorXd out = forward(spec, p, Eigen::Vector3d(1.0, -2.0, 0.5));
  for (long i = 0; i < 4; ++i) EXPECT_NEAR(out[i], 0.25, 1e-15);
}

TEST(Forward, TwoLayerTanhMatchesScalarEvaluator) {
  const ModelSpec spec = ModelSpec::mlp(3, {4}, Activation::kTanh, Head::kLogisticBinary);
  const ModelParameters p = init_parameters(spec, 1);
  const double x[3] = {0.3, -1.2, 2.0};
  // Independent evaluator: W1 is 4×3 row-major then b1, W2 is 1×4 then b2.
  const double* w1 = p.layers[0].data();
  const double* b1 = w1 + 12;
  const double* w2 = p.layers[1].data();
  const double b2 = w2[4];
  double z = b2;
  for (int k = 0; k < 4; ++k) {
    double a = b1[k];
    for (int j = 0; j < 3; ++j) a += w1[k * 3 + j] * x[j];
    z += w2[k] * std::tanh(a);
  }
  const double expected = 1.0 / (1.0 + std::exp(-z));
  const Eigen::VectorXd out = forward(spec, p, Eigen::Vector3d(x[0], x[1], x[2]));
  EXPECT_NEAR(out[1], expected, 1e-15);
}

TEST(Forward, DimensionMismatchIsInputError) {
  const ModelSpec spec = ModelSpec::logistic(3);
  const ModelParameters p = init_parameters(spec, 0);
  EXPECT_THROW(forward(spec, p, Eigen::VectorXd::Zero(2)), InputError);
}

TEST(ModelSpec, ValidationRejectsBadShapes) {
  EXPECT_THROW(ModelSpec{}.validate(), ConfigError);
  ModelSpec s{{{3, 4}, {5, 1}}, Activation::kTanh, Head::kLogisticBinary};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW((ModelSpec{{{3, 2}}, Activation::kIdentity, Head::kLinear}.validate()), ConfigError);
  EXPECT_THROW((ModelSpec{{{3, 1}}, Activation::kIdentity, Head::kSoftmax}.validate()), ConfigError);
  EXPECT_NO_THROW(ModelSpec::mlp(3, {4, 5}, Activation::kRelu, Head::kSoftmax, 3).validate());
  EXPECT_EQ(ModelSpec::mlp(3, {4}, Activation::kTanh, Head::kLogisticBinary).total_dim(), 4 * 4 + 5);
}

TEST(Loss, NoiseFreeIgnoresDelta) {
  const ModelSpec spec = ModelSpec::mlp(3, {4}, Activation::kTanh, Head::kSoftmax, 3);
  Rng prng(5);
  const ModelParameters p = random_params(spec, prng);
  const auto e = example(gaussian_vector(prng, 3), 2.0);
  const LossSpec ls = loss_for(spec, 0.0, 0.1);
  Rng r1(1), r3(1);
  EXPECT_EQ(loss(spec, p, e, ls, 1, r1), loss(spec, p, e, ls, 3, r3));
}

TEST(Loss, PerfectPredictionIsZeroPlusRegularizer) {
  const ModelSpec spec = ModelSpec::logistic(1);
  ModelParameters p{{Eigen::Vector2d(0.0, 60.0)}};
  const auto e = example(Eigen::VectorXd::Constant(1, 0.4), 1.0);
  Rng rng(0);
  EXPECT_LT(loss(spec, p, e, loss_for(spec), 1, rng), 1e-20);
  const double lam = 0.25;
  EXPECT_NEAR(loss(spec, p, e, loss_for(spec, 0.0, lam), 1, rng), lam * 0.5 * 3600.0, 1e-9);
}

TEST(Loss, DeltaThreeIsMeanOfThreeSingleDraws) {
  const ModelSpec spec = ModelSpec::mlp(2, {3}, Activation::kTanh, Head::kSoftmax, 3);
  Rng prng(8);
  const ModelParameters p = random_params(spec, prng);
  const auto e = example(gaussian_vector(prng, 2), 1.0);
  const LossSpec ls = loss_for(spec, 0.1);
  Rng joint(42), single(42);
  const double three = loss(spec, p, e, ls, 3, joint);
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) sum += loss(spec, p, e, ls, 1, single);
  EXPECT_NEAR(three, sum / 3.0, 1e-15);
}

TEST(Loss, LogLossIsNonNegative) {
  Rng rng(11);
  for (int c = 0; c < 50; ++c) {
    ModelSpec spec = random_spec(rng);
    if (!spec.classification()) continue;
    const ModelParameters p = random_params(spec, rng, 2.0);
    const auto xs = random_examples(spec, rng, 3);
    for (const auto& e : xs) EXPECT_GE(loss(spec, p, e, loss_for(spec, 0.3), 3, rng), 0.0);
  }
}

TEST(Loss, RegularizerDifferenceIsHalfSquaredNorm) {
  Rng rng(12);
  for (int c = 0; c < 20; ++c) {
    const ModelSpec spec = random_spec(rng);
    const ModelParameters p = random_params(spec, rng);
    const auto e = random_examples(spec, rng, 1).front();
    const double a = 0.37;
    Rng r1(c), r2(c);
    const LossAndGrad with = loss_and_grad(spec, p, e, loss_for(spec, 0.1, a), 2, r1, false);
    const LossAndGrad without = loss_and_grad(spec, p, e, loss_for(spec, 0.1, 0.0), 2, r2, false);
    EXPECT_EQ(with.loss.data, without.loss.data);
    EXPECT_EQ(with.loss.reg, a * 0.5 * p.squared_norm());
    EXPECT_NEAR(with.loss.total() - without.loss.total(), a * 0.5 * p.squared_norm(),
                1e-14 * std::max(1.0, with.loss.total()));
  }
}

TEST(Loss, NonFiniteLossCarriesId) {
  const ModelSpec spec = ModelSpec::linear(1);
  ModelParameters p{{Eigen::Vector2d(1e300, 0.0)}};
  const auto e = example(Eigen::VectorXd::Constant(1, 1e300), 0.0, "bad-row");
  Rng rng(0);
  try {
    loss(spec, p, e, loss_for(spec), 1, rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& err) {
    EXPECT_NE(std::string(err.what()).find("bad-row"), std::string::npos);
  }
}

TEST(Loss, VarianceShrinksWithDelta) {
  const ModelSpec spec = ModelSpec::logistic(3);
  const ModelParameters p{{Eigen::Vector4d(0.5, -0.2, 0.1, 0.3)}};
  const auto e = example(Eigen::Vector3d(1.0, 0.5, -1.0), 1.0);
  const LossSpec ls = loss_for(spec, 0.5);
  std::vector<double> v1, v3;
  for (int s = 0; s < 200; ++s) {
    Rng a(derive_seed(s, "d1")), b(derive_seed(s, "d3"));
    v1.push_back(loss(spec, p, e, ls, 1, a));
    v3.push_back(loss(spec, p, e, ls, 3, b));
  }
  EXPECT_LT(variance(v3), variance(v1));
}

TEST(Gradient, ZeroAtPerfectConfidence) {
  const ModelSpec spec = ModelSpec::logistic(2);
  ModelParameters p{{Eigen::Vector3d(0.0, 0.0, 40.0)}};
  const auto e = example(Eigen::Vector2d(0.3, -0.2), 1.0);
  Rng rng(0);
  const auto g = grad_per_layer(spec, p, e, loss_for(spec), 1, rng);
  EXPECT_LT(g[0].norm(), 1e-8);
}

TEST(Gradient, LogisticMatchesClosedForm) {
  const ModelSpec spec = ModelSpec::logistic(4);
  Rng rng(21);
  for (int c = 0; c < 20; ++c) {
    const ModelParameters p = random_params(spec, rng);
    const auto e = example(gaussian_vector(rng, 4), static_cast<double>(c % 2));
    Eigen::VectorXd xt(5);
    xt << e.x, 1.0;
    const double pr = 1.0 / (1.0 + std::exp(-p.layers[0].dot(xt)));
    const Eigen::VectorXd expected = (pr - e.y) * xt;
    Rng r(0);
    const auto g = grad_per_layer(spec, p, e, loss_for(spec), 1, r);
    for (long i = 0; i < 5; ++i) EXPECT_NEAR(g[0][i], expected[i], 1e-15);
  }
}

TEST(Gradient, ShapesMatchParameters) {
  const ModelSpec spec = ModelSpec::mlp(3, {5, 2}, Activation::kRelu, Head::kSoftmax, 4);
  Rng rng(2);
  const ModelParameters p = random_params(spec, rng);
  const auto g = grad_per_layer(spec, p, random_examples(spec, rng, 1).front(), loss_for(spec), 1, rng);
  ASSERT_EQ(g.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(g[l].size(), spec.layer_size(l));
}

// Every head/activation/depth combination, random parameters, random noise
// and L2; analytic gradient against central differences with h = 1e-5.
TEST(GradientProperty, MatchesFiniteDifferencesOn100Cases) {
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const ModelSpec spec = random_spec(rng);
    const ModelParameters p = random_params(spec, rng);
    const auto e = random_examples(spec, rng, 1).front();
    const double noise = c % 2 ? 0.1 : 0.0;
    const double l2 = (c % 3) * 0.05;
    const int delta = 1 + c % 3;
    const LossSpec ls = loss_for(spec, noise, l2);
    const Rng state(derive_seed(c, "fd"));
    Rng r = state;
    const Eigen::VectorXd g = ModelParameters{grad_per_layer(spec, p, e, ls, delta, r)}.flatten();
    const Eigen::VectorXd fd = fd_gradient(spec, p, e, ls, delta, state, 1e-5);
    worst = std::max(worst, relative_error(g, fd));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const ModelSpec spec = ModelSpec::mlp(2, {3}, Activation::kTanh, Head::kLogisticBinary);
  Rng rng(1);
  const auto xs = random_examples(spec, rng, 10);
  const TrainConfig cfg{0, 0.1, 4, 77};
  const TrainResult r = train(spec, xs, loss_for(spec), cfg);
  EXPECT_TRUE(r.params == init_parameters(spec, 77));
  EXPECT_TRUE(r.loss_trace.empty());
}

TEST(Train, SeparableDataReachesLowLoss) {
  const ModelSpec spec = ModelSpec::logistic(2);
  Rng rng(4);
  std::vector<LabeledExample> xs;
  for (int i = 0; i < 40; ++i) {
    const double y = i % 2;
    Eigen::VectorXd x = gaussian_vector(rng, 2, 0.3);
    x[0] += y ? 2.0 : -2.0;
    xs.push_back(example(x, y, "s" + std::to_string(i)));
  }
  const TrainResult r = train(spec, xs, loss_for(spec), {500, 1.0, 1 << 30, 0});
  EXPECT_LT(mean_data_loss(spec, r.params, xs, loss_for(spec)), 0.1);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(Train, SameConfigIsBitIdentical) {
  const ModelSpec spec = ModelSpec::mlp(3, {4}, Activation::kTanh, Head::kSoftmax, 3);
  Rng rng(9);
  const auto xs = random_examples(spec, rng, 30);
  const TrainConfig cfg{50, 0.2, 7, 123};
  const LossSpec ls = loss_for(spec, 0.1, 0.01);
  const TrainResult a = train(spec, xs, ls, cfg);
  const TrainResult b = train(spec, xs, ls, cfg);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  const TrainResult c = train(spec, xs, ls, {50, 0.2, 7, 124});
  EXPECT_FALSE(a.params == c.params);
}

TEST(Train, DivergenceReportsStep) {
  const ModelSpec spec = ModelSpec::linear(1);
  std::vector<LabeledExample> xs{example(Eigen::VectorXd::Constant(1, 10.0), 1.0)};
  try {
    train(spec, xs, loss_for(spec), {2000, 10.0, 1, 0});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GT(e.step(), 0);
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
  }
}

TEST(Train, RejectsEmptyDataAndBadLabels) {
  const ModelSpec spec = ModelSpec::logistic(1);
  EXPECT_THROW(train(spec, std::vector<LabeledExample>{}, loss_for(spec), {}), InputError);
  std::vector<LabeledExample> xs{example(Eigen::VectorXd::Zero(1), 2.0, "y2")};
  EXPECT_THROW(train(spec, xs, loss_for(spec), {}), InputError);
  EXPECT_THROW(train(spec, xs, loss_for(spec), {1, -1.0, 1, 0}), ConfigError);
}

TEST(Dataset, JsonlRoundTripAndValidation) {
  std::vector<LabeledExample> xs{
      {"a", Eigen::Vector2d(0.5, -1.25), 1.0, Split::kAdaptation},
      {"b", Eigen::Vector2d(3.0, 0.1), 0.0, Split::kBackbone},
      {"c", Eigen::Vector2d(-2.0, 1e-3), 1.5, Split::kValidation},
  };
  std::stringstream ss;
  write_jsonl(ss, xs);
  const Dataset ds = read_jsonl(ss);
  ASSERT_EQ(ds.examples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ds.examples[i].id, xs[i].id);
    EXPECT_EQ(ds.examples[i].x, xs[i].x);
    EXPECT_EQ(ds.examples[i].y, xs[i].y);
    EXPECT_EQ(ds.examples[i].split, xs[i].split);
  }
  EXPECT_EQ(ds.of_split(Split::kBackbone).size(), 1u);
}

TEST(Dataset, RejectsDuplicatesRaggedAndMalformed) {
  auto parse = [](const std::string& s) {
    std::stringstream ss(s);
    return read_jsonl(ss);
  };
  try {
    parse(R"({"id":"x1","x":[1,2],"y":0,"split":"adaptation"}
{"id":"x1","x":[1,2],"y":1,"split":"backbone"})");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos);
  }
  EXPECT_THROW(parse(R"({"id":"a","x":[1,2],"y":0,"split":"adaptation"}
{"id":"b","x":[1],"y":0,"split":"adaptation"})"),
               InputError);
  EXPECT_THROW(parse(R"({"id":"a","x":[1,2],"y":0,"split":"test"})"), InputError);
  EXPECT_THROW(parse(R"({"id":"a","x":[1,2],"split":"adaptation"})"), InputError);
  EXPECT_THROW(parse("{not json"), InputError);
}
