#include <gtest/gtest.h>

#include <sstream>

#include "bon/embedding.hpp"
#include "oracles.hpp"

namespace {

// Scalar probe L = c . f(x) so that dL/df = c.
double probe(const bon::EmbeddingModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& c) {
  return c.dot(bon::embed(m, x));
}

void check_gradients(bon::Arch arch, int instances) {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    auto model = bon::EmbeddingModel::create(arch, 6, 5, 4, rng);
    for (auto& b : model.params) b += 0.1 * Eigen::MatrixXd::Random(b.rows(), b.cols());  // non-zero biases
    const Eigen::VectorXd x = oracle::random_vector(rng, 6);
    const Eigen::VectorXd c = oracle::random_vector(rng, 4);
    const auto analytic = bon::backward(model, bon::forward(model, x), c);
    const auto numeric = oracle::finite_difference(model.params, [&] { return probe(model, x, c); });
    worst = std::max(worst, oracle::worst_relative_error(analytic, numeric));
  }
  EXPECT_LT(worst, 1e-4);
}

}  // namespace

TEST(Forward, NormalizesThreeFour) {
  bon::Rng rng(0);
  auto m = bon::EmbeddingModel::create(bon::Arch::linear, 4, 0, 4, rng);
  m.params[0] = Eigen::MatrixXd::Identity(4, 4);
  Eigen::VectorXd x(4);
  x << 3, 4, 0, 0;
  const Eigen::VectorXd y = bon::embed(m, x);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  EXPECT_EQ(y[2], 0.0);
  EXPECT_EQ(y[3], 0.0);
}

TEST(Forward, OutputIsUnitNorm) {
  bon::Rng rng(1);
  for (auto arch : {bon::Arch::linear, bon::Arch::one_hidden_tanh}) {
    const auto m = bon::EmbeddingModel::create(arch, 8, 16, 5, rng);
    for (int i = 0; i < 50; ++i) EXPECT_NEAR(bon::embed(m, oracle::random_vector(rng, 8, 3.0)).norm(), 1.0, 1e-12);
  }
}

TEST(Forward, ZeroWeightsAreDegenerate) {
  bon::Rng rng(2);
  auto m = bon::EmbeddingModel::create(bon::Arch::linear, 3, 0, 2, rng);
  m.params[0].setZero();
  EXPECT_THROW(bon::embed(m, Eigen::Vector3d(1, 2, 3)), bon::DegenerateEmbedding);
  EXPECT_THROW(bon::embed(m, Eigen::Vector2d(1, 2)), bon::ContractViolation);
}

TEST(Backward, ZeroUpstreamGivesZeroBuffer) {
  bon::Rng rng(3);
  const auto m = bon::EmbeddingModel::create(bon::Arch::one_hidden_tanh, 4, 3, 2, rng);
  const auto g = bon::backward(m, bon::forward(m, Eigen::Vector4d(1, -1, 2, 0.5)), Eigen::Vector2d::Zero());
  for (const auto& b : g) EXPECT_TRUE(b.isZero(0.0));
}

TEST(Backward, LinearMatchesFiniteDifferences) { check_gradients(bon::Arch::linear, 100); }
TEST(Backward, TanhMatchesFiniteDifferences) { check_gradients(bon::Arch::one_hidden_tanh, 100); }

TEST(Backward, LinearGradientOfNormVanishes) {
  // ||f||^2 is constant, so back-propagating 2f must give an all-zero gradient.
  bon::Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto m = bon::EmbeddingModel::create(bon::Arch::linear, 5, 0, 3, rng);
    const auto cache = bon::forward(m, oracle::random_vector(rng, 5));
    const auto g = bon::backward(m, cache, 2.0 * cache.output);
    for (const auto& b : g) EXPECT_LT(b.cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Backward, ShapeMismatchIsContractViolation) {
  bon::Rng rng(5);
  const auto m = bon::EmbeddingModel::create(bon::Arch::linear, 3, 0, 2, rng);
  EXPECT_THROW(bon::backward(m, bon::forward(m, Eigen::Vector3d(1, 0, 0)), Eigen::Vector3d::Ones()),
               bon::ContractViolation);
}

TEST(Sgd, ScalarStep) {
  bon::ParameterBlocks w{Eigen::MatrixXd::Constant(1, 1, 2.0)};
  bon::sgd_step(w, {Eigen::MatrixXd::Constant(1, 1, 0.5)}, 1.0);
  EXPECT_DOUBLE_EQ(w[0](0, 0), 1.5);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  bon::Rng rng(6);
  auto m = bon::EmbeddingModel::create(bon::Arch::one_hidden_tanh, 3, 4, 2, rng);
  const auto before = m;
  bon::sgd_step(m.params, bon::zeros_like(m.params), 0.1);
  EXPECT_EQ(m, before);
}

TEST(Sgd, NonFiniteGradientAborts) {
  bon::ParameterBlocks w{Eigen::MatrixXd::Constant(1, 1, 2.0)};
  EXPECT_THROW(bon::sgd_step(w, {Eigen::MatrixXd::Constant(1, 1, std::nan(""))}, 1.0), bon::NumericError);
  EXPECT_DOUBLE_EQ(w[0](0, 0), 2.0);
  bon::Optimizer adam(bon::OptimizerKind::adam, {1e-3, 0.9, 100});
  EXPECT_THROW(adam.step(w, {Eigen::MatrixXd::Constant(1, 1, INFINITY)}), bon::NumericError);
}

TEST(Schedule, StepDecay) {
  const bon::LrSchedule s{1.0, 0.9, 50000};
  EXPECT_DOUBLE_EQ(s.lr(0), 1.0);
  EXPECT_DOUBLE_EQ(s.lr(49999), 1.0);
  EXPECT_DOUBLE_EQ(s.lr(50000), 0.9);
  EXPECT_NEAR(s.lr(100000), 0.81, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first Adam step is lr * sign(g) (up to eps).
  bon::ParameterBlocks w{Eigen::MatrixXd::Zero(2, 1)};
  bon::Optimizer opt(bon::OptimizerKind::adam, {0.01, 1.0, 0});
  opt.step(w, {(Eigen::MatrixXd(2, 1) << 3.0, -0.2).finished()});
  EXPECT_NEAR(w[0](0, 0), -0.01, 1e-9);
  EXPECT_NEAR(w[0](1, 0), 0.01, 1e-9);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  bon::Rng rng(7);
  for (auto arch : {bon::Arch::linear, bon::Arch::one_hidden_tanh}) {
    const auto m = bon::EmbeddingModel::create(arch, 5, 7, 3, rng);
    std::stringstream ss;
    bon::save_model(m, ss);
    EXPECT_EQ(bon::load_model(ss), m);
  }
}

TEST(Checkpoint, TruncatedAndBadMagic) {
  bon::Rng rng(8);
  const auto m = bon::EmbeddingModel::create(bon::Arch::linear, 5, 0, 3, rng);
  std::stringstream ss;
  bon::save_model(m, ss);
  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(bon::load_model(cut), bon::ParseError);
  std::stringstream bad("XONMDL1" + bytes.substr(7));
  EXPECT_THROW(bon::load_model(bad), bon::ParseError);
}
