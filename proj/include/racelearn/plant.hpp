#ifndef RACELEARN_PLANT_HPP
#define RACELEARN_PLANT_HPP

#include "racelearn/core.hpp"
#include "racelearn/dataset_io.hpp"
#include "racelearn/parametric.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace racelearn {

/// Ground-truth simulator parameters. The vehicle-model subset shares names
/// with VehicleParams; drag, C.G. height and steering lag exist only here.
struct PlantParams {
    double m{1350.0};
    double Iz{2500.0};
    double lf{1.2};
    double lr{1.6};
    double Cs_front{80000.0};
    double Cs_rear{90000.0};
    double mu{1.0};
    double g{9.81};
    double drag_coeff{0.7};     ///< N s^2 / m^2
    double steer_lag_tau{0.08}; ///< s
    double h_cg{0.45};          ///< C.G. height for longitudinal load transfer, m
    ControlLimits limits{};

    [[nodiscard]] bool valid() const
    {
        for (double v : {m, Iz, lf, lr, Cs_front, Cs_rear, g, drag_coeff, steer_lag_tau, h_cg}) {
            if (!(v > 0.0) || !std::isfinite(v)) {
                return false;
            }
        }
        return mu > 0.0 && mu <= 2.0;
    }

    /// The bicycle-model view of this plant (what a perfect parametric fit would see).
    [[nodiscard]] VehicleParams vehicle() const { return {m, Iz, lf, lr, Cs_front, Cs_rear, mu, g}; }
    bool operator==(const PlantParams&) const = default;
};

/// Time constant of the low-speed lateral scrub, s.
inline constexpr double scrub_time = 0.1;

struct PlantState {
    VehicleState vehicle;
    double actual_steer{};
};

/// Per-tire vertical loads including longitudinal load transfer from the
/// commanded acceleration.
inline AxleLoads plant_vertical_loads(const PlantParams& p, double accel)
{
    const double wheelbase = p.lf + p.lr;
    const double transfer = p.m * accel * p.h_cg / (2.0 * wheelbase);
    const auto stat = vertical_loads(p.vehicle());
    return {std::max(stat.front - transfer, 0.1 * stat.front), std::max(stat.rear + transfer, 0.1 * stat.rear)};
}

inline StateDerivative plant_derivative(const PlantState& ps, const ControlInput& u, const PlantParams& p)
{
    const auto& s = ps.vehicle;
    detail::require(s.finite() && u.finite() && std::isfinite(ps.actual_steer), "plant_derivative: non-finite input");
    const auto loads = plant_vertical_loads(p, u.accel);
    const auto slip = slip_angles(s, {u.accel, ps.actual_steer}, p.vehicle());
    const double fyf = lateral_force(slip.front, p.Cs_front, p.mu, loads.front);
    const double fyr = lateral_force(slip.rear, p.Cs_rear, p.mu, loads.rear);
    const double c = std::cos(s.psi);
    const double sn = std::sin(s.psi);
    StateDerivative d{c * s.vx - sn * s.vy,
                      sn * s.vx + c * s.vy,
                      s.yaw_rate,
                      s.yaw_rate * s.vy + u.accel - p.drag_coeff * s.vx * std::abs(s.vx) / p.m,
                      -s.yaw_rate * s.vx + (2.0 / p.m) * (fyf * std::cos(ps.actual_steer) + fyr),
                      (2.0 / p.Iz) * (p.lf * fyf - p.lr * fyr)};
    if (s.vx < low_speed_guard) {
        // Below the guard the slip model is off; sideways sliding and spinning
        // are instead stopped by friction-limited scrub.
        const double limit = p.mu * p.g;
        d.dvy -= std::clamp(s.vy / scrub_time, -limit, limit);
        d.dyaw_rate -= std::clamp(s.yaw_rate / scrub_time, -limit, limit);
    }
    return d;
}

/// Classic RK4 on the vehicle state with the actuator held, followed by the
/// exact first-order-lag update of the steering actuator. Longitudinal speed
/// is clamped at zero (the vehicle does not reverse).
inline PlantState plant_step(const PlantState& ps, const ControlInput& command, const PlantParams& p, double dt)
{
    detail::require(dt > 0.0, "plant_step: dt must be positive");
    const ControlInput u = p.limits.clamp(command);
    auto add = [](const VehicleState& s, const StateDerivative& d, double h) {
        return VehicleState{s.x + d.dx * h,           s.y + d.dy * h,   s.psi + d.dpsi * h,
                            s.vx + d.dvx * h,         s.vy + d.dvy * h, s.yaw_rate + d.dyaw_rate * h};
    };
    auto eval = [&](const VehicleState& s) { return plant_derivative({s, ps.actual_steer}, u, p); };

    const auto& s0 = ps.vehicle;
    const auto k1 = eval(s0);
    const auto k2 = eval(add(s0, k1, dt / 2.0));
    const auto k3 = eval(add(s0, k2, dt / 2.0));
    const auto k4 = eval(add(s0, k3, dt));
    const auto a1 = k1.to_array();
    const auto a2 = k2.to_array();
    const auto a3 = k3.to_array();
    const auto a4 = k4.to_array();
    std::array<double, 6> mix{};
    for (std::size_t i = 0; i < 6; ++i) {
        mix[i] = (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]) / 6.0;
    }
    const auto avg = StateDerivative::from_array(mix);

    PlantState next;
    next.vehicle = add(s0, avg, dt);
    next.vehicle.psi = wrap_angle(next.vehicle.psi);
    if (next.vehicle.vx < 0.0) {
        next.vehicle.vx = 0.0;
    }
    const double blend = 1.0 - std::exp(-dt / p.steer_lag_tau);
    next.actual_steer = ps.actual_steer + (u.steer - ps.actual_steer) * blend;
    return next;
}

/// Copy of `p` with mass and friction replaced.
inline PlantParams modify_dynamics(const PlantParams& p, double new_mass, double new_mu)
{
    detail::require(new_mass > 0.0 && std::isfinite(new_mass), "modify_dynamics: mass must be positive");
    detail::require(new_mu > 0.0 && new_mu <= 2.0, "modify_dynamics: friction coefficient must be in (0, 2]");
    PlantParams out = p;
    out.m = new_mass;
    out.mu = new_mu;
    return out;
}

inline PlantParams plant_params_from(const KeyValues& kv, PlantParams base = {})
{
    auto pick = [&](const char* key, double& field) {
        if (auto it = kv.find(key); it != kv.end()) {
            field = it->second;
        }
    };
    pick("m", base.m);
    pick("Iz", base.Iz);
    pick("lf", base.lf);
    pick("lr", base.lr);
    pick("Cs_front", base.Cs_front);
    pick("Cs_rear", base.Cs_rear);
    pick("mu", base.mu);
    pick("g", base.g);
    pick("drag_coeff", base.drag_coeff);
    pick("steer_lag_tau", base.steer_lag_tau);
    pick("h_cg", base.h_cg);
    pick("accel_min", base.limits.accel_min);
    pick("accel_max", base.limits.accel_max);
    pick("steer_max", base.limits.steer_max);
    detail::require(base.valid(), "plant params: values must be positive and mu in (0, 2]");
    return base;
}

inline void save_plant_params(const std::string& path, const PlantParams& p)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << "# plant parameters (SI units)\n";
    write_key_values(out, {{"m", p.m},
                           {"Iz", p.Iz},
                           {"lf", p.lf},
                           {"lr", p.lr},
                           {"Cs_front", p.Cs_front},
                           {"Cs_rear", p.Cs_rear},
                           {"mu", p.mu},
                           {"g", p.g},
                           {"drag_coeff", p.drag_coeff},
                           {"steer_lag_tau", p.steer_lag_tau},
                           {"h_cg", p.h_cg},
                           {"accel_min", p.limits.accel_min},
                           {"accel_max", p.limits.accel_max},
                           {"steer_max", p.limits.steer_max}});
}

inline PlantParams load_plant_params(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    return plant_params_from(parse_key_values(in));
}

} // namespace racelearn

#endif // RACELEARN_PLANT_HPP
