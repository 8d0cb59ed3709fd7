#include "racelearn/neuralnet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace racelearn;

namespace {

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = n(rng);
        }
    }
    return m;
}

// Loss including the decay term, written out independently of the library.
double full_loss(const NetParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& t, double wd)
{
    double loss = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        Eigen::VectorXd h1(p.shape().h1);
        for (int i = 0; i < p.shape().h1; ++i) {
            double z = p.b1()(i);
            for (int j = 0; j < p.shape().in; ++j) {
                z += p.w1()(i, j) * x(r, j);
            }
            h1(i) = std::tanh(z);
        }
        Eigen::VectorXd h2(p.shape().h2);
        for (int i = 0; i < p.shape().h2; ++i) {
            double z = p.b2()(i);
            for (int j = 0; j < p.shape().h1; ++j) {
                z += p.w2()(i, j) * h1(j);
            }
            h2(i) = std::tanh(z);
        }
        for (int i = 0; i < p.shape().out; ++i) {
            double y = p.b3()(i);
            for (int j = 0; j < p.shape().h2; ++j) {
                y += p.w3()(i, j) * h2(j);
            }
            loss += (y - t(r, i)) * (y - t(r, i));
        }
    }
    loss /= static_cast<double>(x.rows() * p.shape().out);
    const Eigen::VectorXd w = p.weight_mask().cwiseProduct(p.flat());
    return loss + 0.5 * wd * w.squaredNorm();
}

} // namespace

TEST(NeuralNet, ParamCountAndLayout)
{
    const MlpShape s{8, 20, 20, 3};
    EXPECT_EQ(s.param_count(), 8u * 20 + 20 + 20 * 20 + 20 + 3 * 20 + 3);
    const NetParams p(s);
    EXPECT_EQ(p.b3_offset() + 3, static_cast<Eigen::Index>(s.param_count()));
    EXPECT_EQ(p.weight_mask().sum(), 8.0 * 20 + 20 * 20 + 3 * 20);
    EXPECT_ANY_THROW(NetParams(s, Eigen::VectorXd::Zero(5)));
}

TEST(NeuralNet, ForwardMatchesScalarOracle)
{
    const auto p = init_params({4, 6, 5, 2}, 3);
    const Eigen::MatrixXd x = random_matrix(7, 4, 4);
    const Eigen::MatrixXd t = Eigen::MatrixXd::Zero(7, 2);
    EXPECT_NEAR(mse_loss(p, x, t), full_loss(p, x, t, 0.0), 1e-12);
    const Eigen::VectorXd one = forward(p, Eigen::VectorXd(x.row(2).transpose()));
    const Eigen::MatrixXd batch = forward(p, x);
    EXPECT_NEAR((one - batch.row(2).transpose()).norm(), 0.0, 1e-12);
}

TEST(NeuralNet, GradientMatchesFiniteDifferences)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto p = init_params({5, 7, 6, 3}, seed);
        const Eigen::MatrixXd x = random_matrix(9, 5, seed + 100);
        const Eigen::MatrixXd t = random_matrix(9, 3, seed + 200);
        const double wd = 0.01;
        const Eigen::VectorXd g = gradient(p, x, t, wd);
        const double h = 1e-6;
        for (Eigen::Index k = 0; k < p.flat().size(); ++k) {
            const double keep = p.flat()(k);
            p.flat()(k) = keep + h;
            const double up = full_loss(p, x, t, wd);
            p.flat()(k) = keep - h;
            const double dn = full_loss(p, x, t, wd);
            p.flat()(k) = keep;
            const double fd = (up - dn) / (2 * h);
            EXPECT_NEAR(g(k), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(NeuralNet, AdamFirstStepIsSignedLearningRate)
{
    Eigen::VectorXd theta(3);
    theta << 1.0, -2.0, 0.5;
    Eigen::VectorXd g(3);
    g << 0.3, -4.0, 0.0;
    AdamState st;
    adam_step(st, theta, g, 0.01);
    EXPECT_NEAR(theta(0), 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-12);
    EXPECT_NEAR(theta(1), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-12);
    EXPECT_EQ(theta(2), 0.5);
    EXPECT_EQ(st.step, 1);
}

TEST(NeuralNet, AdamSecondStepOracle)
{
    Eigen::VectorXd theta = Eigen::VectorXd::Constant(1, 0.0);
    AdamState st;
    adam_step(st, theta, Eigen::VectorXd::Constant(1, 1.0), 0.1);
    adam_step(st, theta, Eigen::VectorXd::Constant(1, 3.0), 0.1);
    const double m = 0.9 * 0.1 + 0.1 * 3.0;
    const double v = 0.999 * 0.001 + 0.001 * 9.0;
    const double mh = m / (1 - 0.81);
    const double vh = v / (1 - 0.999 * 0.999);
    const double expected = -0.1 / (1.0 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(theta(0), expected, 1e-10);
}

TEST(NeuralNet, NormalizerRoundTrip)
{
    const Eigen::MatrixXd x = random_matrix(50, 4, 9) * 3.0;
    Eigen::MatrixXd y = random_matrix(50, 2, 10);
    y.col(1).setConstant(2.5);
    const auto n = fit_normalizer(x, y);
    const Eigen::MatrixXd z = n.apply_inputs(x);
    EXPECT_NEAR(z.colwise().mean().norm(), 0.0, 1e-12);
    for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(std::sqrt(z.col(c).squaredNorm() / 50.0), 1.0, 1e-12);
    }
    EXPECT_NEAR((n.invert_inputs(z) - x).norm(), 0.0, 1e-10);
    EXPECT_NEAR((n.invert_outputs(n.apply_outputs(y)) - y).norm(), 0.0, 1e-10);
    EXPECT_EQ(n.out_std(1), Normalizer::min_std);

    const auto uncentered = fit_normalizer(x, y, false);
    EXPECT_EQ(uncentered.out_mean.norm(), 0.0);
}

TEST(NeuralNet, TrainFitsSmoothFunction)
{
    const int n = 400;
    Eigen::MatrixXd x(n, 2);
    Eigen::MatrixXd y(n, 1);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int i = 0; i < n; ++i) {
        x(i, 0) = u(rng);
        x(i, 1) = u(rng);
        y(i, 0) = std::sin(x(i, 0)) + 0.5 * x(i, 1);
    }
    const auto norm = fit_normalizer(x, y);
    TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 50;
    cfg.learning_rate = 5e-3;
    cfg.weight_decay = 0.0;
    const auto r = train(init_params({2, 16, 16, 1}, 2), x, y, norm, cfg);
    ASSERT_EQ(r.loss_history.size(), 300u);
    EXPECT_LT(r.loss_history.back(), 0.05 * r.loss_history.front());
    const Eigen::MatrixXd pred = norm.invert_outputs(forward(r.params, norm.apply_inputs(x)));
    EXPECT_LT((pred - y).squaredNorm() / n, 0.01);
}

TEST(NeuralNet, TrainIsDeterministic)
{
    const Eigen::MatrixXd x = random_matrix(60, 3, 5);
    const Eigen::MatrixXd y = random_matrix(60, 2, 6);
    const auto norm = fit_normalizer(x, y);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.seed = 77;
    const auto a = train(init_params({3, 5, 5, 2}, 1), x, y, norm, cfg);
    const auto b = train(init_params({3, 5, 5, 2}, 1), x, y, norm, cfg);
    EXPECT_TRUE(a.params == b.params);
    EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(NeuralNet, JsonRoundTrip)
{
    const auto p = init_params({8, 4, 3, 3}, 12);
    const auto norm = fit_normalizer(random_matrix(20, 8, 1), random_matrix(20, 3, 2));
    const auto [q, n2] = net_from_json(nlohmann::json::parse(net_to_json(p, norm).dump()));
    EXPECT_TRUE(p == q);
    EXPECT_EQ(norm.in_std, n2.in_std);
    EXPECT_EQ(norm.out_mean, n2.out_mean);
}

TEST(NeuralNet, RejectsBadInput)
{
    const auto p = init_params({3, 4, 4, 2}, 0);
    EXPECT_ANY_THROW(forward(p, Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 5))));
    EXPECT_ANY_THROW(gradient(p, Eigen::MatrixXd::Zero(0, 3), Eigen::MatrixXd::Zero(0, 2), 0.0));
    TrainConfig bad;
    bad.batch_size = 0;
    EXPECT_ANY_THROW(train(p, Eigen::MatrixXd::Zero(4, 3), Eigen::MatrixXd::Zero(4, 2), Normalizer::identity(3, 2), bad));
}
