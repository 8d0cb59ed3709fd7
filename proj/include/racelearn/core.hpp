#ifndef RACELEARN_CORE_HPP
#define RACELEARN_CORE_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace racelearn {

namespace detail {

inline void require(bool cond, const std::string& what)
{
    if (!cond) {
        throw std::invalid_argument(what);
    }
}

} // namespace detail

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) noexcept
{
    constexpr double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) {
        a += two_pi;
    } else if (a > std::numbers::pi) {
        a -= two_pi;
    }
    return a;
}

/// Pose in the global frame, velocities in the body frame.
struct VehicleState {
    double x{};
    double y{};
    double psi{};
    double vx{};
    double vy{};
    double yaw_rate{};

    [[nodiscard]] std::array<double, 6> to_array() const { return {x, y, psi, vx, vy, yaw_rate}; }
    static VehicleState from_array(const std::array<double, 6>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }
    [[nodiscard]] bool finite() const
    {
        const auto a = to_array();
        return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
    }
    bool operator==(const VehicleState&) const = default;
};

struct ControlInput {
    double accel{};  ///< m/s^2
    double steer{};  ///< front steering angle, rad

    [[nodiscard]] bool finite() const { return std::isfinite(accel) && std::isfinite(steer); }
    bool operator==(const ControlInput&) const = default;
};

struct ControlLimits {
    double accel_min{-8.8};
    double accel_max{4.9};
    double steer_max{0.5};

    [[nodiscard]] ControlInput clamp(const ControlInput& u) const
    {
        return {std::clamp(u.accel, accel_min, accel_max), std::clamp(u.steer, -steer_max, steer_max)};
    }
    [[nodiscard]] bool contains(const ControlInput& u) const
    {
        return u.accel >= accel_min && u.accel <= accel_max && std::abs(u.steer) <= steer_max;
    }
    bool operator==(const ControlLimits&) const = default;
};

/// Time derivative of a VehicleState.
struct StateDerivative {
    double dx{};
    double dy{};
    double dpsi{};
    double dvx{};
    double dvy{};
    double dyaw_rate{};

    [[nodiscard]] std::array<double, 6> to_array() const { return {dx, dy, dpsi, dvx, dvy, dyaw_rate}; }
    static StateDerivative from_array(const std::array<double, 6>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }
    [[nodiscard]] std::array<double, 3> velocity_rows() const { return {dvx, dvy, dyaw_rate}; }
    [[nodiscard]] bool finite() const
    {
        const auto a = to_array();
        return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
    }
    bool operator==(const StateDerivative&) const = default;
};

/// One (state, control) input paired with its derivative target.
struct Sample {
    VehicleState state;
    ControlInput control;
    StateDerivative target;
    double t{};
};

/// Raw log record before targets are computed.
struct LogEntry {
    double t{};
    VehicleState state;
    ControlInput control;
};

struct Dataset {
    std::vector<Sample> samples;

    [[nodiscard]] std::size_t size() const { return samples.size(); }
    [[nodiscard]] bool empty() const { return samples.empty(); }
    const Sample& operator[](std::size_t i) const { return samples[i]; }
    Sample& operator[](std::size_t i) { return samples[i]; }
    auto begin() const { return samples.begin(); }
    auto end() const { return samples.end(); }
};

struct SimConfig {
    double dt{0.02};
    unsigned long long seed{0};
};

/// One forward-Euler step; heading is re-wrapped.
inline VehicleState integrate_step(const VehicleState& s, const StateDerivative& d, double dt)
{
    detail::require(dt > 0.0 && std::isfinite(dt), "integrate_step: dt must be positive and finite");
    detail::require(s.finite(), "integrate_step: non-finite state");
    detail::require(d.finite(), "integrate_step: non-finite derivative");
    return {s.x + d.dx * dt,
            s.y + d.dy * dt,
            wrap_angle(s.psi + d.dpsi * dt),
            s.vx + d.dvx * dt,
            s.vy + d.dvy * dt,
            s.yaw_rate + d.dyaw_rate * dt};
}

/// Forward-difference derivative targets. Entry i pairs (state_i, control_i)
/// with (state_{i+1} - state_i) / (t_{i+1} - t_i); the last entry is consumed.
inline Dataset compute_targets(std::span<const LogEntry> log)
{
    detail::require(log.size() >= 2, "compute_targets: need at least two log entries");
    Dataset ds;
    ds.samples.reserve(log.size() - 1);
    for (std::size_t i = 0; i + 1 < log.size(); ++i) {
        const auto& a = log[i];
        const auto& b = log[i + 1];
        const double h = b.t - a.t;
        detail::require(h > 0.0, "compute_targets: timestamps must be strictly increasing (index " +
                                     std::to_string(i + 1) + ")");
        StateDerivative d{(b.state.x - a.state.x) / h,
                          (b.state.y - a.state.y) / h,
                          wrap_angle(b.state.psi - a.state.psi) / h,
                          (b.state.vx - a.state.vx) / h,
                          (b.state.vy - a.state.vy) / h,
                          (b.state.yaw_rate - a.state.yaw_rate) / h};
        ds.samples.push_back({a.state, a.control, d, a.t});
    }
    return ds;
}

/// Savitzky-Golay weights that evaluate, at offset `eval_at`, the least-squares
/// polynomial of `order` fitted to the sample offsets `first .. first+window-1`.
inline Eigen::VectorXd savgol_weights(int window, int order, int first, int eval_at)
{
    Eigen::MatrixXd vander(window, order + 1);
    for (int r = 0; r < window; ++r) {
        const double z = static_cast<double>(first + r);
        double p = 1.0;
        for (int c = 0; c <= order; ++c) {
            vander(r, c) = p;
            p *= z;
        }
    }
    Eigen::RowVectorXd basis(order + 1);
    double p = 1.0;
    for (int c = 0; c <= order; ++c) {
        basis(c) = p;
        p *= static_cast<double>(eval_at);
    }
    // weights^T = basis * pinv(V)
    const Eigen::MatrixXd pinv = vander.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(window, window));
    return (basis * pinv).transpose();
}

/// Savitzky-Golay filter; edges use the polynomial fitted to the first/last window.
inline std::vector<double> savgol_filter(std::span<const double> signal, int window, int order)
{
    detail::require(window > 0 && window % 2 == 1, "savgol_filter: window must be a positive odd integer");
    detail::require(order >= 0 && order < window, "savgol_filter: poly order must be in [0, window)");
    const auto n = static_cast<int>(signal.size());
    detail::require(window <= n, "savgol_filter: window larger than signal");
    const int half = window / 2;
    std::vector<double> out(signal.size());

    const Eigen::VectorXd centre = savgol_weights(window, order, -half, 0);
    for (int i = half; i < n - half; ++i) {
        double acc = 0.0;
        for (int k = 0; k < window; ++k) {
            acc += centre(k) * signal[i - half + k];
        }
        out[i] = acc;
    }
    for (int i = 0; i < half; ++i) {
        const Eigen::VectorXd head = savgol_weights(window, order, 0, i);
        const Eigen::VectorXd tail = savgol_weights(window, order, 0, window - 1 - i);
        double a = 0.0;
        double b = 0.0;
        for (int k = 0; k < window; ++k) {
            a += head(k) * signal[k];
            b += tail(k) * signal[n - window + k];
        }
        out[i] = a;
        out[n - 1 - i] = b;
    }
    return out;
}

/// Smooths the velocity channels (vx, vy, yaw_rate) of a raw log; positions and
/// heading are untouched.
inline std::vector<LogEntry> smooth_log(std::span<const LogEntry> log, int window = 21, int order = 3)
{
    detail::require(window > 0 && window % 2 == 1, "smooth: window must be odd");
    detail::require(order < window, "smooth: poly order must be smaller than window");
    detail::require(static_cast<std::size_t>(window) <= log.size(), "smooth: window larger than dataset");
    std::vector<double> vx, vy, r;
    vx.reserve(log.size());
    vy.reserve(log.size());
    r.reserve(log.size());
    for (const auto& e : log) {
        vx.push_back(e.state.vx);
        vy.push_back(e.state.vy);
        r.push_back(e.state.yaw_rate);
    }
    const auto svx = savgol_filter(vx, window, order);
    const auto svy = savgol_filter(vy, window, order);
    const auto sr = savgol_filter(r, window, order);
    std::vector<LogEntry> out(log.begin(), log.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].state.vx = svx[i];
        out[i].state.vy = svy[i];
        out[i].state.yaw_rate = sr[i];
    }
    return out;
}

/// Dataset overload: smooths the velocity channels of the stored states.
inline Dataset smooth_dataset(const Dataset& ds, int window = 21, int order = 3)
{
    std::vector<LogEntry> log;
    log.reserve(ds.size());
    for (const auto& s : ds) {
        log.push_back({s.t, s.state, s.control});
    }
    const auto sm = smooth_log(log, window, order);
    Dataset out = ds;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].state = sm[i].state;
    }
    return out;
}

struct SplitFractions {
    double train{0.6};
    double validation{0.35};
    double test{0.05};
};

struct DatasetSplit {
    Dataset train;
    Dataset validation;
    Dataset test;
};

/// Partitions a dataset into disjoint longitudinal-velocity bands, lowest
/// speeds first. Ties keep original order; each band is returned in time order.
inline DatasetSplit velocity_sorted_split(const Dataset& ds, SplitFractions f = {})
{
    detail::require(!ds.empty(), "velocity_sorted_split: empty dataset");
    detail::require(f.train > 0.0 && f.validation > 0.0 && f.test > 0.0,
                    "velocity_sorted_split: fractions must be positive");
    detail::require(std::abs(f.train + f.validation + f.test - 1.0) < 1e-9,
                    "velocity_sorted_split: fractions must sum to 1");
    const std::size_t n = ds.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ds[a].state.vx < ds[b].state.vx; });
    const auto n_train = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(n) + 1e-9));
    const auto n_val = std::min(n - n_train,
                                static_cast<std::size_t>(std::floor(f.validation * static_cast<double>(n) + 1e-9)));

    auto take = [&](std::size_t from, std::size_t to) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                     order.begin() + static_cast<std::ptrdiff_t>(to));
        std::sort(idx.begin(), idx.end());
        Dataset part;
        part.samples.reserve(idx.size());
        for (auto i : idx) {
            part.samples.push_back(ds[i]);
        }
        return part;
    };
    return {take(0, n_train), take(n_train, n_train + n_val), take(n_train + n_val, n)};
}

} // namespace racelearn

#endif // RACELEARN_CORE_HPP
