#ifndef RACELEARN_RACE_HPP
#define RACELEARN_RACE_HPP

#include "racelearn/core.hpp"
#include "racelearn/learner.hpp"
#include "racelearn/mppi.hpp"
#include "racelearn/plant.hpp"
#include "racelearn/semiparam.hpp"
#include "racelearn/track.hpp"

#include <cmath>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

namespace racelearn {

struct RaceConfig {
    int laps{10};
    MppiConfig mppi{};
    CostWeights weights{};
    double start_speed{10.0};
    double max_time{0.0};            ///< s of simulated time; 0 means laps * 300 s
    double stationary_limit{10.0};   ///< s below stationary_speed before aborting
    double stationary_speed{0.5};
    double off_track_limit{5.0};     ///< s of continuous off-track driving before aborting
    std::vector<double> snapshot_times{0.0, 60.0, 120.0};
    bool telemetry{true};
};

struct TelemetryRow {
    double t{};
    VehicleState state;
    ControlInput control;
    double s{};
    double offset{};
    bool inside{true};
    bool fallback{false};
};

struct ModelSnapshot {
    std::string label;  ///< "lap_<k>" or "t_<seconds>"
    double t{};
    int lap{};          ///< completed laps when taken
    std::shared_ptr<const SemiParamModel> model;
};

struct RaceLog {
    std::vector<double> lap_times;
    /// Mean over each lap of the driving model's one-step prediction error
    /// (velocity rows, averaged over the three channels); the last entry
    /// covers an unfinished lap if there is one.
    std::vector<double> lap_mse;
    double total_time{};
    double partial_lap_time{};  ///< time since the last completed lap
    int off_track_events{};
    long long off_track_steps{};
    long long fallback_steps{};
    double mean_effective_samples{};
    bool aborted{false};
    std::string abort_reason;
    std::vector<TelemetryRow> telemetry;
    Dataset collected;                 ///< (state, control, finite-difference target) seen while driving
    std::vector<ModelSnapshot> snapshots;
    std::uint64_t learning_sessions{};
};

namespace detail {

inline VehicleState start_state(const Track& track, double speed)
{
    const auto& p0 = track.points().front();
    return {p0.x, p0.y, track.heading_at(0), speed, 0.0, 0.0};
}

inline std::string seconds_label(double t)
{
    const auto whole = static_cast<long long>(std::llround(t));
    return "t_" + std::to_string(whole);
}

} // namespace detail

/// Closed-loop race: controller on `model` (or on the learner's latest
/// snapshot when `learner` is given) driving the plant. Stops after
/// `cfg.laps` laps, at the time limit, or on an abort condition.
inline RaceLog race_loop(const PlantParams& plant, std::shared_ptr<const DynamicsModel> model, OnlineLearner* learner,
                         const Track& track, const RaceConfig& cfg)
{
    detail::require(plant.valid(), "race_loop: invalid plant parameters");
    detail::require(model != nullptr || learner != nullptr, "race_loop: need a model or a learner");
    detail::require(cfg.laps >= 1, "race_loop: laps must be positive");
    const double dt = cfg.mppi.dt;
    const double max_time = cfg.max_time > 0.0 ? cfg.max_time : 300.0 * cfg.laps;
    const auto max_steps = static_cast<long long>(std::ceil(max_time / dt));

    RaceLog log;
    PlantState ps{detail::start_state(track, cfg.start_speed), 0.0};
    ControllerState ctl;
    std::shared_ptr<const SemiParamModel> current;
    std::shared_ptr<const DynamicsModel> active = model;
    auto refresh = [&]() {
        if (learner == nullptr) {
            return;
        }
        auto snap = learner->snapshot();
        if (snap != current) {
            current = snap;
            active = std::make_shared<SemiParamDynamics>(current);
        }
    };
    refresh();

    std::size_t next_snapshot = 0;
    auto take_timed_snapshots = [&](double t) {
        while (learner != nullptr && next_snapshot < cfg.snapshot_times.size() &&
               t + 1e-9 >= cfg.snapshot_times[next_snapshot]) {
            log.snapshots.push_back({detail::seconds_label(cfg.snapshot_times[next_snapshot]), t,
                                     static_cast<int>(log.lap_times.size()), learner->snapshot()});
            ++next_snapshot;
        }
    };
    if (learner != nullptr) {
        log.snapshots.push_back({"lap_0", 0.0, 0, learner->snapshot()});
    }

    auto q = track.query(ps.vehicle.x, ps.vehicle.y);
    double lap_start = 0.0;
    double traversed = 0.0;
    double stationary_for = 0.0;
    double off_for = 0.0;
    bool was_off = false;
    double t = 0.0;
    double ess_sum = 0.0;
    long long control_steps = 0;
    double lap_err = 0.0;
    long long lap_n = 0;

    for (long long step = 0; step < max_steps; ++step) {
        take_timed_snapshots(t);
        const auto cr = compute_control(ctl, *active, track, ps.vehicle, cfg.mppi, cfg.weights);
        if (cr.fallback) {
            ++log.fallback_steps;
        }
        ess_sum += cr.effective_samples;
        ++control_steps;
        const auto u = plant.limits.clamp(cr.u);
        if (cfg.telemetry) {
            log.telemetry.push_back({t, ps.vehicle, u, q.s, q.offset, q.inside, cr.fallback});
        }
        const auto predicted = active->predict(ps.vehicle, u);
        const auto next = plant_step(ps, u, plant, dt);
        t += dt;

        const auto& a = ps.vehicle;
        const auto& b = next.vehicle;
        const StateDerivative target{(b.x - a.x) / dt,         (b.y - a.y) / dt,
                                     wrap_angle(b.psi - a.psi) / dt, (b.vx - a.vx) / dt,
                                     (b.vy - a.vy) / dt,       (b.yaw_rate - a.yaw_rate) / dt};
        log.collected.samples.push_back({a, u, target, t - dt});
        lap_err += (std::pow(predicted.dvx - target.dvx, 2) + std::pow(predicted.dvy - target.dvy, 2) +
                    std::pow(predicted.dyaw_rate - target.dyaw_rate, 2)) /
                   3.0;
        ++lap_n;
        if (learner != nullptr && learner->observe(a, u, target)) {
            refresh();
        }
        ps = next;

        const auto nq = track.query_near(ps.vehicle.x, ps.vehicle.y, q.segment);
        const double ds = track.s_delta(q.s, nq.s);
        traversed += ds;
        const bool wrapped = ds > 0.0 && nq.s < q.s;
        q = nq;
        if (wrapped && traversed >= 0.8 * track.length()) {
            log.lap_times.push_back(t - lap_start);
            log.lap_mse.push_back(lap_err / static_cast<double>(lap_n));
            lap_err = 0.0;
            lap_n = 0;
            lap_start = t;
            traversed = 0.0;
            if (learner != nullptr) {
                log.snapshots.push_back({"lap_" + std::to_string(log.lap_times.size()), t,
                                         static_cast<int>(log.lap_times.size()), learner->snapshot()});
            }
            if (static_cast<int>(log.lap_times.size()) >= cfg.laps) {
                break;
            }
        }

        if (!q.inside) {
            ++log.off_track_steps;
            off_for += dt;
            if (!was_off) {
                ++log.off_track_events;
            }
        } else {
            off_for = 0.0;
        }
        was_off = !q.inside;
        stationary_for = ps.vehicle.vx < cfg.stationary_speed ? stationary_for + dt : 0.0;
        if (off_for > cfg.off_track_limit) {
            log.aborted = true;
            log.abort_reason = "off track for more than " + std::to_string(cfg.off_track_limit) + " s";
            break;
        }
        if (stationary_for > cfg.stationary_limit) {
            log.aborted = true;
            log.abort_reason = "stationary for more than " + std::to_string(cfg.stationary_limit) + " s";
            break;
        }
    }
    take_timed_snapshots(t);
    if (lap_n > 0) {
        log.lap_mse.push_back(lap_err / static_cast<double>(lap_n));
    }
    if (!log.aborted && static_cast<int>(log.lap_times.size()) < cfg.laps) {
        log.aborted = true;
        log.abort_reason = "time limit reached";
    }
    log.total_time = t;
    log.mean_effective_samples = control_steps > 0 ? ess_sum / static_cast<double>(control_steps) : 0.0;
    log.partial_lap_time = t - lap_start;
    if (learner != nullptr) {
        log.learning_sessions = learner->sessions();
    }
    return log;
}

/// Body-frame accelerations of one telemetry step.
struct GgRecord {
    double t{};
    double a_long{};
    double a_lat{};
};

/// Longitudinal and lateral accelerations from consecutive telemetry rows:
/// a_long = dvx/dt - yaw_rate * vy, a_lat = dvy/dt + yaw_rate * vx.
inline std::vector<GgRecord> gg_from_telemetry(const std::vector<TelemetryRow>& rows)
{
    std::vector<GgRecord> out;
    if (rows.size() < 2) {
        return out;
    }
    out.reserve(rows.size() - 1);
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
        const auto& a = rows[i];
        const auto& b = rows[i + 1];
        const double h = b.t - a.t;
        detail::require(h > 0.0, "gg_from_telemetry: timestamps must increase");
        const double dvx = (b.state.vx - a.state.vx) / h;
        const double dvy = (b.state.vy - a.state.vy) / h;
        out.push_back({a.t, dvx - a.state.yaw_rate * a.state.vy, dvy + a.state.yaw_rate * a.state.vx});
    }
    return out;
}

inline double max_abs_lateral(const std::vector<GgRecord>& gg)
{
    double m = 0.0;
    for (const auto& r : gg) {
        m = std::max(m, std::abs(r.a_lat));
    }
    return m;
}

inline void write_telemetry_csv(std::ostream& out, const std::vector<TelemetryRow>& rows)
{
    using detail::fmt_double;
    out << "t,x,y,psi,vx,vy,yaw_rate,accel,steer,s,offset,inside,fallback\n";
    for (const auto& r : rows) {
        const auto& s = r.state;
        out << fmt_double(r.t) << ',' << fmt_double(s.x) << ',' << fmt_double(s.y) << ',' << fmt_double(s.psi)
            << ',' << fmt_double(s.vx) << ',' << fmt_double(s.vy) << ',' << fmt_double(s.yaw_rate) << ','
            << fmt_double(r.control.accel) << ',' << fmt_double(r.control.steer) << ',' << fmt_double(r.s) << ','
            << fmt_double(r.offset) << ',' << (r.inside ? 1 : 0) << ',' << (r.fallback ? 1 : 0) << '\n';
    }
}

inline void write_gg_csv(std::ostream& out, const std::vector<GgRecord>& gg)
{
    using detail::fmt_double;
    out << "t,a_long,a_lat\n";
    for (const auto& r : gg) {
        out << fmt_double(r.t) << ',' << fmt_double(r.a_long) << ',' << fmt_double(r.a_lat) << '\n';
    }
}

} // namespace racelearn

#endif // RACELEARN_RACE_HPP
