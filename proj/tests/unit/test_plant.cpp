#include "racelearn/plant.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace racelearn;

TEST(Plant, ZeroStateIsEquilibrium)
{
    const PlantParams p;
    PlantState s{};
    for (int k = 0; k < 50; ++k) {
        s = plant_step(s, {}, p, 0.02);
    }
    for (double v : s.vehicle.to_array()) {
        EXPECT_EQ(v, 0.0);
    }
    EXPECT_EQ(s.actual_steer, 0.0);
}

TEST(Plant, DragOnStraight)
{
    const PlantParams p;
    const auto d = plant_derivative({{0, 0, 0, 20.0, 0, 0}, 0.0}, {}, p);
    EXPECT_NEAR(d.dvx, -0.7 * 400.0 / 1350.0, 1e-12);
    EXPECT_NEAR(d.dvx, -0.2074, 1e-4);
    EXPECT_NEAR(d.dvy, 0.0, 1e-12);
    EXPECT_NEAR(d.dyaw_rate, 0.0, 1e-12);
}

TEST(Plant, LowSpeedIsKinematic)
{
    const PlantParams p;
    const auto d = plant_derivative({{0, 0, 0, 0.5, 0, 0}, 0.2}, {1.0, 0.2}, p);
    EXPECT_NEAR(d.dx, 0.5, 1e-12);
    EXPECT_NEAR(d.dvy, 0.0, 1e-12);
    EXPECT_NEAR(d.dyaw_rate, 0.0, 1e-12);
    EXPECT_NEAR(d.dvx, 1.0 - 0.7 * 0.25 / 1350.0, 1e-12);
}

TEST(Plant, AccelerationWithDragStaysBelowIdeal)
{
    const PlantParams p;
    PlantState s{};
    for (int k = 0; k < 50; ++k) {
        s = plant_step(s, {2.0, 0.0}, p, 0.02);
    }
    EXPECT_LT(s.vehicle.vx, 2.0);
    EXPECT_GT(s.vehicle.vx, 1.99);
    EXPECT_NEAR(s.vehicle.x, 1.0, 0.01);
}

TEST(Plant, SteeringLagTimeConstant)
{
    const PlantParams p;
    PlantState s{{0, 0, 0, 10.0, 0, 0}, 0.0};
    const double dt = 0.02;
    const int steps = static_cast<int>(std::lround(p.steer_lag_tau / dt));
    for (int k = 0; k < steps; ++k) {
        s = plant_step(s, {0.0, 0.1}, p, dt);
    }
    EXPECT_NEAR(s.actual_steer / 0.1, 1.0 - std::exp(-1.0), 1e-12);
    EXPECT_NEAR(s.actual_steer / 0.1, 0.63, 0.05);
}

TEST(Plant, HeavierCarRotatesSlower)
{
    const PlantParams p;
    const auto heavy = modify_dynamics(p, 1430.0, p.mu);
    const PlantState s{{0, 0, 0, 15.0, 0, 0}, 0.05};
    const auto a = plant_derivative(s, {}, p);
    const auto b = plant_derivative(s, {}, heavy);
    EXPECT_NE(a.dyaw_rate, b.dyaw_rate);
    EXPECT_NE(a.dvy, b.dvy);
}

TEST(Plant, ModifyDynamics)
{
    const auto m = modify_dynamics(PlantParams{}, 1430.0, 0.8);
    EXPECT_EQ(m.m, 1430.0);
    EXPECT_EQ(m.mu, 0.8);
    EXPECT_EQ(m.Iz, PlantParams{}.Iz);
    EXPECT_ANY_THROW(modify_dynamics(PlantParams{}, 1430.0, 0.0));
    EXPECT_ANY_THROW(modify_dynamics(PlantParams{}, -1.0, 0.8));
}

TEST(Plant, MirrorSymmetry)
{
    const PlantParams p;
    PlantState a{{0, 0, 0, 18.0, 0.2, 0.1}, 0.04};
    PlantState b{{0, 0, 0, 18.0, -0.2, -0.1}, -0.04};
    for (int k = 0; k < 100; ++k) {
        const double steer = 0.05 * std::sin(0.1 * k);
        a = plant_step(a, {0.5, steer}, p, 0.02);
        b = plant_step(b, {0.5, -steer}, p, 0.02);
    }
    EXPECT_NEAR(a.vehicle.x, b.vehicle.x, 1e-9);
    EXPECT_NEAR(a.vehicle.y, -b.vehicle.y, 1e-9);
    EXPECT_NEAR(a.vehicle.psi, -b.vehicle.psi, 1e-9);
    EXPECT_NEAR(a.vehicle.vx, b.vehicle.vx, 1e-9);
    EXPECT_NEAR(a.vehicle.vy, -b.vehicle.vy, 1e-9);
    EXPECT_NEAR(a.vehicle.yaw_rate, -b.vehicle.yaw_rate, 1e-9);
}

TEST(Plant, DiffersFromBicycleModel)
{
    const PlantParams p;
    const PlantState s{{0, 0, 0, 20.0, 0.3, 0.2}, 0.05};
    const ControlInput u{2.0, 0.05};
    const auto d = plant_derivative(s, u, p);
    const auto b = parametric_derivative(s.vehicle, u, p.vehicle());
    const double diff = std::abs(d.dvx - b.dvx) + std::abs(d.dvy - b.dvy) + std::abs(d.dyaw_rate - b.dyaw_rate);
    EXPECT_GT(diff, 1e-3);
}

TEST(Plant, LoadTransferConservesWeight)
{
    const PlantParams p;
    for (double a : {-6.0, -1.0, 0.0, 2.0, 4.0}) {
        const auto l = plant_vertical_loads(p, a);
        EXPECT_NEAR(l.front + l.rear, p.m * p.g / 2.0, 1e-9);
    }
    EXPECT_LT(plant_vertical_loads(p, 3.0).front, plant_vertical_loads(p, 0.0).front);
}

TEST(Plant, NeverReverses)
{
    const PlantParams p;
    PlantState s{{0, 0, 0, 0.3, 0, 0}, 0.0};
    for (int k = 0; k < 50; ++k) {
        s = plant_step(s, {-5.0, 0.0}, p, 0.02);
        EXPECT_GE(s.vehicle.vx, 0.0);
    }
}

TEST(Plant, RejectsBadInput)
{
    const PlantParams p;
    PlantState s{};
    s.vehicle.vy = std::nan("");
    EXPECT_ANY_THROW(plant_step(s, {}, p, 0.02));
    EXPECT_ANY_THROW(plant_step(PlantState{}, {}, p, 0.0));
}
