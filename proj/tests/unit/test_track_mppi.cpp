#include "racelearn/race.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace racelearn;

namespace {

// Closed square, counter-clockwise from the origin along +x, 1 m spacing.
Track square(double side, double half_width)
{
    std::vector<TrackPoint> pts;
    double s = 0.0;
    auto leg = [&](double x0, double y0, double dx, double dy) {
        for (int k = 0; k < static_cast<int>(side); ++k) {
            pts.push_back({s, x0 + dx * k, y0 + dy * k, half_width, half_width});
            s += 1.0;
        }
    };
    leg(0, 0, 1, 0);
    leg(side, 0, 0, 1);
    leg(side, side, -1, 0);
    leg(0, side, 0, -1);
    return Track(pts);
}

class Frozen final : public DynamicsModel {
public:
    StateDerivative d{};
    [[nodiscard]] StateDerivative predict(const VehicleState&, const ControlInput&) const override { return d; }
};

// The sampler's documented noise: per-sample splitmix64 stream seeded from
// (seed, call, sample), AR(1) along the horizon.
std::vector<ControlInput> noise_sequence(const MppiConfig& cfg, std::uint64_t call, std::size_t i)
{
    detail::SplitMix64 rng(mix_seed(cfg.seed, call, i));
    std::normal_distribution<double> g(0.0, 1.0);
    const double rho = cfg.noise_correlation;
    const double inn = std::sqrt(1 - rho * rho);
    std::vector<ControlInput> out;
    double ea = cfg.sigma_accel * g(rng);
    double es = cfg.sigma_steer * g(rng);
    for (int j = 0; j < cfg.horizon; ++j) {
        if (j > 0) {
            ea = rho * ea + inn * cfg.sigma_accel * g(rng);
            es = rho * es + inn * cfg.sigma_steer * g(rng);
        }
        out.push_back(cfg.limits.clamp({ea, es}));
    }
    return out;
}

CostWeights zero_weights()
{
    CostWeights w;
    w.off_track = w.progress = w.speed = w.accel_effort = w.steer_effort = w.steer_rate = w.slip = w.boundary = 0.0;
    return w;
}

} // namespace

TEST(Track, StraightProjection)
{
    const auto t = square(100, 5.0);
    EXPECT_NEAR(t.length(), 400.0, 1e-9);
    const auto q = track_query(t, 50.0, 1.0);
    EXPECT_NEAR(q.s, 50.0, 1e-9);
    EXPECT_NEAR(q.offset, 1.0, 1e-9);
    EXPECT_TRUE(q.inside);
    const auto c = track_query(t, 30.0, 0.0);
    EXPECT_NEAR(c.offset, 0.0, 1e-12);
    EXPECT_TRUE(c.inside);
    EXPECT_FALSE(track_query(t, 50.0, -10.0).inside);
    EXPECT_NEAR(track_query(t, 50.0, -10.0).offset, -10.0, 1e-9);
}

TEST(Track, WrapAndDelta)
{
    const auto t = square(100, 5.0);
    EXPECT_NEAR(t.wrap_s(410.0), 10.0, 1e-12);
    EXPECT_NEAR(t.wrap_s(-5.0), 395.0, 1e-12);
    EXPECT_NEAR(t.s_delta(398.0, 2.0), 4.0, 1e-12);
    EXPECT_NEAR(t.s_delta(2.0, 398.0), -4.0, 1e-12);
}

TEST(Track, BuiltinsAreClosedWithExpectedLength)
{
    const auto oval = make_oval();
    EXPECT_NEAR(oval.length(), 300.0 + 2.0 * std::numbers::pi * 50.0, 0.5);
    const auto ring = make_ring(60.0);
    EXPECT_NEAR(ring.length(), 2.0 * std::numbers::pi * 60.0, 0.5);
    std::size_t quarter = ring.segment_at(ring.length() / 4);
    EXPECT_NEAR(ring.curvature_at(quarter), 1.0 / 60.0, 1e-3);
}

TEST(Track, CsvRoundTripAndValidation)
{
    const auto t = make_ring(30.0);
    std::stringstream buf;
    write_track_csv(buf, t);
    const auto back = read_track_csv(buf);
    EXPECT_EQ(back.size(), t.size());
    EXPECT_NEAR(back.length(), t.length(), 1e-9);
    std::vector<TrackPoint> open{{0, 0, 0, 1, 1}, {1, 1, 0, 1, 1}, {2, 2, 0, 1, 1}};
    EXPECT_ANY_THROW(Track{open});
    EXPECT_ANY_THROW(load_track("/nonexistent/track.csv"));
}

TEST(RolloutCost, StationaryStartCostsSpeedTermOnly)
{
    const auto t = square(1000, 5.0);
    const ParametricModel model{VehicleParams{}};
    const CostWeights w;
    const int H = 30;
    std::vector<ControlInput> u(H);
    const double c = rollout_cost(model, t, {10.0, 0, 0, 0, 0, 0}, u, w);
    EXPECT_DOUBLE_EQ(c, H * w.speed * w.speed_target * w.speed_target);
    EXPECT_DOUBLE_EQ(c, H * 162.0);
}

TEST(RolloutCost, OffTrackChargedFromExitOn)
{
    const auto t = square(1000, 5.0);
    Frozen model;
    model.d.dy = 50.0;
    auto w = zero_weights();
    w.off_track = 1e4;
    const int H = 20;
    std::vector<ControlInput> u(H);
    // One metre sideways per step; outside from step 6 (offset 6 > 5).
    const int k = 6;
    EXPECT_DOUBLE_EQ(rollout_cost(model, t, {100.0, 0, 0, 0, 0, 0}, u, w), (H - k + 1) * 1e4);
}

TEST(RolloutCost, ProgressAndEffortTerms)
{
    const auto t = square(1000, 5.0);
    Frozen model;
    model.d.dx = 10.0;
    auto w = zero_weights();
    w.progress = 2.0;
    w.accel_effort = 0.5;
    const std::vector<ControlInput> u(25, ControlInput{2.0, 0.0});
    EXPECT_NEAR(rollout_cost(model, t, {100.0, 0, 0, 0, 0, 0}, u, w), -2.0 * 10.0 * 0.02 * 25 + 25 * 0.5 * 4.0, 1e-9);
}

TEST(RolloutCost, SlowerRolloutCostsMore)
{
    const auto t = square(1000, 5.0);
    const ParametricModel model{VehicleParams{}};
    const VehicleState s0{100.0, 0, 0, 10.0, 0, 0};
    const std::vector<ControlInput> faster(50, ControlInput{2.0, 0.0});
    const std::vector<ControlInput> slower(50, ControlInput{-2.0, 0.0});
    EXPECT_LT(rollout_cost(model, t, s0, faster, CostWeights{}), rollout_cost(model, t, s0, slower, CostWeights{}));
}

TEST(RolloutCost, NonFiniteIsInfinite)
{
    const auto t = square(1000, 5.0);
    Frozen model;
    model.d.dvx = std::numeric_limits<double>::quiet_NaN();
    const std::vector<ControlInput> u(5);
    EXPECT_TRUE(std::isinf(rollout_cost(model, t, {100.0, 0, 0, 0, 0, 0}, u, CostWeights{})));
}

TEST(ComputeControl, EqualCostsAverageTheNoise)
{
    const auto t = square(1000, 5.0);
    const Frozen model;
    MppiConfig cfg;
    cfg.horizon = 10;
    cfg.samples = 64;
    cfg.exploration_fraction = 0.0;
    cfg.seed = 9;
    ControllerState st;
    const auto r = compute_control(st, model, t, {100.0, 0, 0, 0, 0, 0}, cfg, zero_weights());
    for (int j = 0; j < cfg.horizon; ++j) {
        ControlInput mean{};
        for (int i = 0; i < cfg.samples; ++i) {
            const auto n = noise_sequence(cfg, 0, static_cast<std::size_t>(i));
            mean.accel += n[static_cast<std::size_t>(j)].accel / cfg.samples;
            mean.steer += n[static_cast<std::size_t>(j)].steer / cfg.samples;
        }
        EXPECT_NEAR(r.plan[static_cast<std::size_t>(j)].accel, mean.accel, 1e-12);
        EXPECT_NEAR(r.plan[static_cast<std::size_t>(j)].steer, mean.steer, 1e-12);
    }
    EXPECT_NEAR(r.effective_samples, 64.0, 1e-9);
}

TEST(ComputeControl, ColdTemperaturePicksBestSample)
{
    const auto t = square(1000, 5.0);
    const Frozen model;
    MppiConfig cfg;
    cfg.horizon = 8;
    cfg.samples = 32;
    cfg.temperature = 1e-9;
    cfg.exploration_fraction = 0.0;
    cfg.seed = 4;
    auto w = zero_weights();
    w.accel_effort = 1.0;
    w.steer_effort = 1.0;
    std::size_t best = 0;
    double best_cost = 1e300;
    for (std::size_t i = 0; i < 32; ++i) {
        double c = 0.0;
        for (const auto& u : noise_sequence(cfg, 0, i)) {
            c += u.accel * u.accel + u.steer * u.steer;
        }
        if (c < best_cost) {
            best_cost = c;
            best = i;
        }
    }
    ControllerState st;
    const auto r = compute_control(st, model, t, {100.0, 0, 0, 0, 0, 0}, cfg, w);
    const auto want = noise_sequence(cfg, 0, best);
    for (std::size_t j = 0; j < want.size(); ++j) {
        EXPECT_NEAR(r.plan[j].accel, want[j].accel, 1e-9);
        EXPECT_NEAR(r.plan[j].steer, want[j].steer, 1e-9);
    }
    EXPECT_NEAR(r.min_cost, best_cost, 1e-9);
}

TEST(ComputeControl, SingleSampleIsNominalPlusNoise)
{
    const auto t = square(1000, 5.0);
    const ParametricModel model{VehicleParams{}};
    MppiConfig cfg;
    cfg.horizon = 12;
    cfg.samples = 1;
    cfg.exploration_fraction = 0.0;
    ControllerState st;
    const auto r = compute_control(st, model, t, {100.0, 0, 0, 12.0, 0, 0}, cfg, CostWeights{});
    const auto n = noise_sequence(cfg, 0, 0);
    for (std::size_t j = 0; j < n.size(); ++j) {
        EXPECT_NEAR(r.plan[j].accel, n[j].accel, 1e-12);
        EXPECT_NEAR(r.plan[j].steer, n[j].steer, 1e-12);
    }
    EXPECT_EQ(r.u.accel, r.plan.front().accel);
}

TEST(ComputeControl, LimitsShiftAndDeterminism)
{
    const auto t = make_oval();
    const ParametricModel model{VehicleParams{}};
    MppiConfig cfg;
    cfg.horizon = 20;
    cfg.samples = 64;
    cfg.sigma_steer = 0.8;
    cfg.sigma_accel = 10.0;
    const VehicleState s0{0, 0, 0, 15.0, 0, 0};
    ControllerState a;
    ControllerState b;
    const auto ra = compute_control(a, model, t, s0, cfg, CostWeights{});
    const auto rb = compute_control(b, model, t, s0, cfg, CostWeights{});
    EXPECT_EQ(ra.u.accel, rb.u.accel);
    EXPECT_EQ(ra.u.steer, rb.u.steer);
    for (const auto& u : ra.plan) {
        EXPECT_TRUE(cfg.limits.contains(u));
    }
    for (std::size_t j = 0; j + 1 < ra.plan.size(); ++j) {
        EXPECT_EQ(a.nominal[j].accel, ra.plan[j + 1].accel);
    }
    EXPECT_EQ(a.nominal.back().steer, ra.plan.back().steer);
    EXPECT_ANY_THROW(compute_control(a, model, t, {0, 0, 0, std::nan(""), 0, 0}, cfg, CostWeights{}));
    cfg.samples = 0;
    EXPECT_ANY_THROW(compute_control(a, model, t, s0, cfg, CostWeights{}));
}

TEST(RaceLoop, ExactModelCompletesTwoCleanLaps)
{
    const auto t = make_oval(150.0, 50.0, 8.0);
    const PlantParams plant;
    RaceConfig cfg;
    cfg.laps = 2;
    cfg.mppi.samples = 128;
    cfg.mppi.horizon = 50;
    cfg.telemetry = true;
    const auto log = race_loop(plant, std::make_shared<PlantModel>(plant), nullptr, t, cfg);
    EXPECT_FALSE(log.aborted) << log.abort_reason;
    ASSERT_EQ(log.lap_times.size(), 2u);
    EXPECT_EQ(log.off_track_events, 0);
    double sum = log.partial_lap_time;
    for (double l : log.lap_times) {
        sum += l;
    }
    EXPECT_NEAR(sum, log.total_time, 0.021);
    const auto gg = gg_from_telemetry(log.telemetry);
    EXPECT_EQ(gg.size() + 1, log.telemetry.size());
    EXPECT_LT(max_abs_lateral(gg), 1.5 * plant.mu * plant.g);
}

TEST(Gg, AccelerationsFromTelemetry)
{
    std::vector<TelemetryRow> rows(2);
    rows[0].t = 0.0;
    rows[0].state = {0, 0, 0, 10.0, 0.5, 0.2};
    rows[1].t = 0.1;
    rows[1].state = {0, 0, 0, 10.5, 0.6, 0.2};
    const auto gg = gg_from_telemetry(rows);
    ASSERT_EQ(gg.size(), 1u);
    EXPECT_NEAR(gg[0].a_long, 5.0 - 0.2 * 0.5, 1e-12);
    EXPECT_NEAR(gg[0].a_lat, 1.0 + 0.2 * 10.0, 1e-12);
    rows[1].t = 0.0;
    EXPECT_ANY_THROW(gg_from_telemetry(rows));
}
