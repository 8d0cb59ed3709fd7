#include "racelearn/learner.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace racelearn;

namespace {

Dataset plant_samples(const PlantParams& p, int n, std::uint64_t seed, double vmin = 6.0, double vmax = 30.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> vx(vmin, vmax);
    std::uniform_real_distribution<double> vy(-0.8, 0.8);
    std::uniform_real_distribution<double> r(-0.5, 0.5);
    std::uniform_real_distribution<double> steer(-0.1, 0.1);
    std::uniform_real_distribution<double> acc(-5.0, 3.0);
    Dataset ds;
    for (int i = 0; i < n; ++i) {
        Sample s{};
        s.state = {0, 0, 0, vx(rng), vy(rng), r(rng)};
        s.control = {acc(rng), steer(rng)};
        s.target = plant_derivative({s.state, s.control.steer}, s.control, p);
        s.t = 0.02 * i;
        ds.samples.push_back(s);
    }
    return ds;
}

Eigen::VectorXd random_vector(int n, std::mt19937_64& rng)
{
    std::normal_distribution<double> z(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v(i) = z(rng);
    }
    return v;
}

struct Bootstrapped {
    Dataset data;
    SemiParamModel model;
    GmmModel gmm;
};

const Bootstrapped& bootstrapped()
{
    static const Bootstrapped b = [] {
        Bootstrapped out;
        out.data = plant_samples(PlantParams{}, 3000, 21);
        BootstrapOptions o;
        o.train.epochs = 80;
        o.fit.iterations = 100;
        out.model = bootstrap(out.data, VehicleParams{}, o).model;
        GmmFitConfig g;
        g.components = 8;
        g.seed = 2;
        out.gmm = fit_em(out.model.norm.apply_inputs(semiparam_feature_matrix(out.data, out.model.vehicle)), g).model;
        return out;
    }();
    return b;
}

// Runs sessions over consecutive 500-sample chunks of `stream`.
SemiParamModel adapt(const Bootstrapped& b, const Dataset& stream, UpdateRule rule, int passes)
{
    LearnerConfig cfg;
    cfg.rule = rule;
    cfg.seed = 5;
    OnlineLearner learner(b.model, b.gmm, cfg);
    for (int p = 0; p < passes; ++p) {
        for (const auto& s : stream) {
            learner.observe(s.state, s.control, s.target);
        }
    }
    return *learner.snapshot();
}

} // namespace

TEST(LocalBuffer, FillsAtCapacity)
{
    const auto& b = bootstrapped();
    LocalBuffer buf(500);
    for (int i = 0; i < 499; ++i) {
        EXPECT_FALSE(push_sample(buf, b.data[i].state, b.data[i].control, b.data[i].target, b.model).full);
    }
    EXPECT_TRUE(push_sample(buf, b.data[499].state, b.data[499].control, b.data[499].target, b.model).full);
    EXPECT_EQ(buf.size(), 500u);
    push_sample(buf, b.data[500].state, b.data[500].control, b.data[500].target, b.model);
    EXPECT_EQ(buf.size(), 500u);
    buf.clear();
    EXPECT_TRUE(buf.empty());
}

TEST(LocalBuffer, ResidualOfParametricTargetIsZero)
{
    SemiParamModel m;
    LocalBuffer buf(4);
    const VehicleState s{0, 0, 0, 12.0, 0.1, 0.05};
    const ControlInput u{0.5, 0.02};
    push_sample(buf, s, u, parametric_derivative(s, u, m.vehicle), m);
    EXPECT_LT(buf.targets().norm(), 1e-12);
    EXPECT_EQ(buf.inputs()(0, 0), 12.0);
}

TEST(LocalBuffer, DropsNonFinite)
{
    SemiParamModel m;
    LocalBuffer buf(4);
    VehicleState s{0, 0, 0, 12.0, std::nan(""), 0.0};
    const auto st = push_sample(buf, s, {}, {}, m);
    EXPECT_FALSE(st.accepted);
    EXPECT_TRUE(buf.empty());
    EXPECT_EQ(buf.dropped(), 1u);
}

TEST(LocalBuffer, KeepsArrivalOrderWhenWrapping)
{
    LocalBuffer buf(3);
    for (int i = 0; i < 5; ++i) {
        Eigen::RowVectorXd in = Eigen::RowVectorXd::Constant(semiparam_inputs, i);
        Eigen::RowVectorXd out = Eigen::RowVectorXd::Constant(semiparam_outputs, i);
        buf.push(in, out);
    }
    const auto x = buf.inputs();
    EXPECT_EQ(x(0, 0), 2.0);
    EXPECT_EQ(x(1, 0), 3.0);
    EXPECT_EQ(x(2, 0), 4.0);
}

TEST(ConstrainedAlpha, Examples)
{
    Eigen::VectorXd g(3);
    g << 1.0, -2.0, 0.5;
    EXPECT_EQ(constrained_alpha(g, g), 1.0);
    EXPECT_NEAR(constrained_alpha(-2.0 * g, g), 0.5, 1e-15);
    Eigen::VectorXd perp(3);
    perp << 2.0, 1.0, 0.0;
    EXPECT_EQ(constrained_alpha(perp, g), 1.0);
    EXPECT_EQ(constrained_alpha(g, Eigen::VectorXd::Zero(3)), 1.0);
    EXPECT_ANY_THROW(constrained_alpha(g, Eigen::VectorXd::Zero(2)));
}

TEST(ConstrainedAlpha, MatchesGridSearch)
{
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto gl = random_vector(10, rng);
        const auto gid = random_vector(10, rng);
        double best = 0.0;
        for (int k = 0; k <= 1000; ++k) {
            const double a = k * 1e-3;
            if ((a * gl + gid).dot(gid) >= 0.0) {
                best = a;
            }
        }
        const double alpha = constrained_alpha(gl, gid);
        EXPECT_NEAR(alpha, best, 1e-3 + 1e-12);
        EXPECT_GE((alpha * gl + gid).dot(gid), -1e-9);
        EXPECT_GE(alpha, 0.0);
        EXPECT_LE(alpha, 1.0);
    }
}

TEST(ConstrainedStep, PerfectRehearsalIsPureLocalStep)
{
    auto net = init_params({8, 6, 6, 3}, 1);
    std::mt19937_64 rng(2);
    Eigen::MatrixXd lx(10, 8);
    for (int i = 0; i < 10; ++i) {
        lx.row(i) = random_vector(8, rng).transpose();
    }
    const Eigen::MatrixXd lt = Eigen::MatrixXd::Ones(10, 3);
    const Eigen::MatrixXd rx = lx.reverse();
    const Eigen::MatrixXd rt = forward(net, rx);
    LearnerConfig cfg;
    cfg.weight_decay = 0.0;
    auto copy = net;
    AdamState a;
    AdamState b;
    const auto r = constrained_step(net, a, lx, lt, rx, rt, cfg);
    EXPECT_EQ(r.alpha, 1.0);
    EXPECT_LT(r.norm_id, 1e-14);
    adam_step(b, copy.flat(), gradient(copy, lx, lt, 0.0), cfg.learning_rate);
    EXPECT_LT((net.flat() - copy.flat()).norm(), 1e-12);
}

TEST(ConstrainedStep, IdenticalBatchesDoubleTheGradient)
{
    auto net = init_params({8, 5, 5, 3}, 3);
    std::mt19937_64 rng(4);
    Eigen::MatrixXd x(6, 8);
    Eigen::MatrixXd t(6, 3);
    for (int i = 0; i < 6; ++i) {
        x.row(i) = random_vector(8, rng).transpose();
        t.row(i) = random_vector(3, rng).transpose();
    }
    LearnerConfig cfg;
    AdamState opt;
    const Eigen::VectorXd g = gradient(net, x, t, cfg.weight_decay);
    const auto r = constrained_step(net, opt, x, t, x, t, cfg);
    EXPECT_EQ(r.alpha, 1.0);
    EXPECT_LT((r.combined - 2.0 * g).norm(), 1e-12);
}

TEST(ConstrainedStep, ConstraintHoldsOnRandomBatches)
{
    std::mt19937_64 rng(6);
    LearnerConfig cfg;
    for (int trial = 0; trial < 200; ++trial) {
        auto net = init_params({8, 5, 5, 3}, static_cast<std::uint64_t>(trial));
        Eigen::MatrixXd lx(4, 8), lt(4, 3), rx(4, 8), rt(4, 3);
        for (int i = 0; i < 4; ++i) {
            lx.row(i) = random_vector(8, rng).transpose();
            lt.row(i) = random_vector(3, rng).transpose();
            rx.row(i) = random_vector(8, rng).transpose();
            rt.row(i) = random_vector(3, rng).transpose();
        }
        const Eigen::VectorXd gid = gradient(net, rx, rt, cfg.weight_decay);
        AdamState opt;
        const auto r = constrained_step(net, opt, lx, lt, rx, rt, cfg);
        EXPECT_GE(r.combined.dot(gid), -1e-9);
    }
}

TEST(Rehearsal, TargetsComeFromSnapshot)
{
    const auto& b = bootstrapped();
    const NetParams zero(b.model.net.shape());
    const auto z = generate_rehearsal_batch(b.gmm, zero, 50, 1);
    EXPECT_EQ(z.targets.norm(), 0.0);
    const auto r1 = generate_rehearsal_batch(b.gmm, b.model.net, 50, 7);
    const auto r2 = generate_rehearsal_batch(b.gmm, b.model.net, 50, 7);
    EXPECT_EQ(r1.inputs, r2.inputs);
    EXPECT_EQ(r1.targets, r2.targets);
    const Eigen::VectorXd g = gradient(b.model.net, r1.inputs, r1.targets, 0.0);
    EXPECT_LT(g.norm(), 1e-12);
}

TEST(Session, DeterministicAndClearsBuffer)
{
    const auto& b = bootstrapped();
    LearnerConfig cfg;
    cfg.seed = 3;
    LocalBuffer buf(500);
    for (int i = 0; i < 500; ++i) {
        push_sample(buf, b.data[i].state, b.data[i].control, b.data[i].target, b.model);
    }
    AdamState o1;
    AdamState o2;
    const auto s1 = training_session(b.model, buf, b.gmm, o1, cfg, 0);
    const auto s2 = training_session(b.model, buf, b.gmm, o2, cfg, 0);
    EXPECT_FALSE(s1.aborted);
    EXPECT_TRUE(s1.model.net == s2.model.net);
    EXPECT_EQ(s1.gmm.means[0], s2.gmm.means[0]);
    EXPECT_EQ(s1.steps.size(), 15u);
    EXPECT_EQ(s1.gmm.incremental_batches, b.gmm.incremental_batches + 1);

    OnlineLearner learner(b.model, b.gmm, cfg);
    int sessions = 0;
    for (int i = 0; i < 1000; ++i) {
        if (learner.observe(b.data[i].state, b.data[i].control, b.data[i].target)) {
            ++sessions;
            EXPECT_TRUE(learner.buffer().empty());
        }
    }
    EXPECT_EQ(sessions, 2);
    EXPECT_EQ(learner.sessions(), 2u);
}

TEST(Session, NoDriftOnBootstrapDistribution)
{
    const auto& b = bootstrapped();
    const double before = evaluate_mse(b.model, b.data).aggregate;
    const auto fresh = plant_samples(PlantParams{}, 1000, 99);
    const auto after = adapt(b, fresh, UpdateRule::constrained, 1);
    EXPECT_LT(evaluate_mse(after, b.data).aggregate, 1.2 * before);
}

TEST(Session, AdaptsToModifiedDynamicsAndForgetsLessThanSgd)
{
    const auto& b = bootstrapped();
    const auto plant = modify_dynamics(PlantParams{}, 1430.0, 0.8);
    const auto stream = plant_samples(plant, 1500, 31, 6.0, 14.0);
    const auto held_out = plant_samples(plant, 1000, 32, 6.0, 14.0);
    const double boot_mod = evaluate_mse(b.model, held_out).aggregate;
    const auto constrained = adapt(b, stream, UpdateRule::constrained, 15);
    const auto sgd = adapt(b, stream, UpdateRule::plain_sgd, 15);
    EXPECT_LT(evaluate_mse(constrained, held_out).aggregate, 0.3 * boot_mod);
    EXPECT_LT(evaluate_mse(constrained, b.data).aggregate, evaluate_mse(sgd, b.data).aggregate);
}
