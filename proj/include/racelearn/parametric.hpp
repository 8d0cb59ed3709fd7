#ifndef RACELEARN_PARAMETRIC_HPP
#define RACELEARN_PARAMETRIC_HPP

#include "racelearn/core.hpp"
#include "racelearn/dataset_io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace racelearn {

/// Below this longitudinal speed the slip angles are forced to zero.
inline constexpr double low_speed_guard = 1.0;

/// Parameters of the dynamic bicycle model with brush tires.
struct VehicleParams {
    double m{1350.0};
    double Iz{2500.0};
    double lf{1.2};
    double lr{1.6};
    double Cs_front{80000.0};
    double Cs_rear{90000.0};
    double mu{1.0};
    double g{9.81};

    [[nodiscard]] bool valid() const
    {
        for (double v : {m, Iz, lf, lr, Cs_front, Cs_rear, mu, g}) {
            if (!(v > 0.0) || !std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }
    bool operator==(const VehicleParams&) const = default;
};

struct TireForce {
    double fy_front{};
    double fy_rear{};
};

struct AxleLoads {
    double front{};
    double rear{};
};

struct SlipAngles {
    double front{};
    double rear{};
};

/// Static per-tire vertical loads of the lumped axles.
inline AxleLoads vertical_loads(const VehicleParams& p)
{
    const double wheelbase = p.lf + p.lr;
    const double weight = p.m * p.g;
    return {p.lr * weight / (2.0 * wheelbase), p.lf * weight / (2.0 * wheelbase)};
}

inline SlipAngles slip_angles(const VehicleState& s, const ControlInput& u, const VehicleParams& p)
{
    if (s.vx < low_speed_guard) {
        return {};
    }
    return {u.steer - std::atan((s.vy + s.yaw_rate * p.lf) / s.vx), -std::atan((s.vy - s.yaw_rate * p.lr) / s.vx)};
}

/// Slip angle at which the whole contact patch slides.
inline double critical_slip_angle(double Cs, double mu, double Fz)
{
    return std::atan(3.0 * mu * Fz / Cs);
}

/// Fromm brush tire: cubic in tan(alpha) up to the critical slip angle,
/// saturated at the friction limit beyond it.
inline double brush_tire_force(double alpha, double Cs, double mu, double Fz)
{
    const double limit = mu * Fz;
    if (std::abs(alpha) > critical_slip_angle(Cs, mu, Fz)) {
        return alpha > 0.0 ? -limit : limit;
    }
    const double t = std::tan(alpha);
    return -Cs * t + (Cs * Cs / (3.0 * limit)) * std::abs(t) * t - (Cs * Cs * Cs / (27.0 * limit * limit)) * t * t * t;
}

/// Lateral force acting on the body. The brush formula returns the force in
/// the tire's own sign convention (opposing positive slip), so it is negated
/// here: a positive slip angle pushes the axle towards positive y.
inline double lateral_force(double alpha, double Cs, double mu, double Fz)
{
    return -brush_tire_force(alpha, Cs, mu, Fz);
}

inline TireForce tire_forces(const VehicleState& s, const ControlInput& u, const VehicleParams& p)
{
    const auto loads = vertical_loads(p);
    const auto slip = slip_angles(s, u, p);
    return {lateral_force(slip.front, p.Cs_front, p.mu, loads.front),
            lateral_force(slip.rear, p.Cs_rear, p.mu, loads.rear)};
}

/// Dynamic bicycle model. The first pose row uses the standard rotation
/// cos(psi) vx - sin(psi) vy.
inline StateDerivative parametric_derivative(const VehicleState& s, const ControlInput& u, const VehicleParams& p)
{
    const auto f = tire_forces(s, u, p);
    const double c = std::cos(s.psi);
    const double sn = std::sin(s.psi);
    return {c * s.vx - sn * s.vy,
            sn * s.vx + c * s.vy,
            s.yaw_rate,
            s.yaw_rate * s.vy + u.accel,
            -s.yaw_rate * s.vx + (2.0 / p.m) * (f.fy_front * std::cos(u.steer) + f.fy_rear),
            (2.0 / p.Iz) * (p.lf * f.fy_front - p.lr * f.fy_rear)};
}

/// Mean squared error of the velocity rows (dvx, dvy, dyaw_rate), averaged
/// over samples and channels.
inline double parametric_velocity_mse(const Dataset& ds, const VehicleParams& p)
{
    if (ds.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (const auto& s : ds) {
        const auto d = parametric_derivative(s.state, s.control, p);
        const double ex = d.dvx - s.target.dvx;
        const double ey = d.dvy - s.target.dvy;
        const double er = d.dyaw_rate - s.target.dyaw_rate;
        acc += ex * ex + ey * ey + er * er;
    }
    return acc / (3.0 * static_cast<double>(ds.size()));
}

struct FitConfig {
    int iterations{500};
    double step{1e-2};
    double fd_step{1e-5};
};

struct FitResult {
    VehicleParams params;
    double initial_loss{};
    double final_loss{};
    int iterations{};
    bool diverged{false};
    std::vector<std::string> warnings;
};

/// Fits {Cs_front, Cs_rear, mu, Iz} by gradient descent on log-parameters with
/// central finite-difference gradients; m, lf, lr and g are taken from `init`.
/// The objective is the velocity-row MSE divided by its initial value so the
/// fixed step size is independent of the data's units.
inline FitResult fit_parameters(const Dataset& ds, const VehicleParams& init, FitConfig cfg = {})
{
    detail::require(!ds.empty(), "fit_parameters: empty dataset");
    detail::require(init.valid(), "fit_parameters: invalid initial parameters");

    auto unpack = [&](const std::array<double, 4>& z) {
        VehicleParams p = init;
        p.Cs_front = std::exp(z[0]);
        p.Cs_rear = std::exp(z[1]);
        p.mu = std::exp(z[2]);
        p.Iz = std::exp(z[3]);
        return p;
    };
    std::array<double, 4> z{std::log(init.Cs_front), std::log(init.Cs_rear), std::log(init.mu), std::log(init.Iz)};

    FitResult res;
    res.initial_loss = parametric_velocity_mse(ds, init);
    res.params = init;
    res.final_loss = res.initial_loss;
    if (res.initial_loss == 0.0) {
        return res;
    }
    const double scale = 1.0 / res.initial_loss;
    auto objective = [&](const std::array<double, 4>& zz) { return scale * parametric_velocity_mse(ds, unpack(zz)); };

    double best = 1.0;
    std::array<double, 4> best_z = z;
    double current = 1.0;
    for (int it = 0; it < cfg.iterations; ++it) {
        std::array<double, 4> grad{};
        double norm2 = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            auto zp = z;
            auto zm = z;
            zp[k] += cfg.fd_step;
            zm[k] -= cfg.fd_step;
            grad[k] = (objective(zp) - objective(zm)) / (2.0 * cfg.fd_step);
            norm2 += grad[k] * grad[k];
        }
        if (it == 0 && norm2 < 1e-16) {
            res.warnings.emplace_back(
                "fit_parameters: zero gradient; tire and inertia parameters are not identifiable from this data "
                "(no lateral excitation)");
            break;
        }
        if (norm2 < 1e-20) {
            break;
        }
        for (std::size_t k = 0; k < 4; ++k) {
            z[k] -= cfg.step * grad[k];
        }
        current = objective(z);
        res.iterations = it + 1;
        if (!std::isfinite(current)) {
            break;
        }
        if (current < best) {
            best = current;
            best_z = z;
        }
    }
    if (!(current <= 1.0)) {
        res.diverged = true;
        res.warnings.emplace_back("fit_parameters: loss increased over the run; returning best iterate");
    }
    res.params = best < 1.0 ? unpack(best_z) : init;
    res.final_loss = best < 1.0 ? best * res.initial_loss : res.initial_loss;
    return res;
}

inline std::vector<std::pair<std::string, double>> to_key_values(const VehicleParams& p)
{
    return {{"m", p.m},   {"Iz", p.Iz}, {"lf", p.lf}, {"lr", p.lr}, {"Cs_front", p.Cs_front},
            {"Cs_rear", p.Cs_rear}, {"mu", p.mu}, {"g", p.g}};
}

inline VehicleParams vehicle_params_from(const KeyValues& kv, VehicleParams base = {})
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
    detail::require(base.valid(), "vehicle params: all values must be positive");
    return base;
}

inline void save_vehicle_params(const std::string& path, const VehicleParams& p)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << "# dynamic bicycle model parameters (SI units)\n";
    write_key_values(out, to_key_values(p));
}

inline VehicleParams load_vehicle_params(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    return vehicle_params_from(parse_key_values(in));
}

} // namespace racelearn

#endif // RACELEARN_PARAMETRIC_HPP
