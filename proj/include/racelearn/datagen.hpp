#ifndef RACELEARN_DATAGEN_HPP
#define RACELEARN_DATAGEN_HPP

#include "racelearn/core.hpp"
#include "racelearn/learner.hpp"
#include "racelearn/plant.hpp"
#include "racelearn/track.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace racelearn {

/// Scripted stand-in for a human driver: pure-pursuit steering, randomized
/// piecewise speed targets capped by the curvature ahead, and small steering
/// and throttle dither for excitation.
struct SpeedProfile {
    double v_min{5.0};
    double v_max{45.0};
    double hold_min{4.0};  ///< s each target is held
    double hold_max{10.0};
    double lateral_accel_max{5.5};  ///< at mu = 1; scaled by the plant's friction
    double brake_decel{4.0};  ///< planning deceleration for the curvature cap
    double speed_gain{3.0};
    double brake_limit_factor{1.25};  ///< hardest braking as a multiple of brake_decel
    double jerk_limit{15.0};          ///< m/s^3, pedal rate limit
    double steer_dither{0.03};  ///< rad amplitude
    double accel_dither{1.0};   ///< m/s^2 amplitude
};

struct GenDataConfig {
    double duration{600.0};
    double dt{0.02};
    double chunk{30.0};  ///< s; a chunk that leaves the track is regenerated
    int max_retries{20};
    int max_backtracks{50};
    int smooth_window{21};
    int smooth_order{3};
    double start_speed{10.0};
    SpeedProfile profile{};
    std::uint64_t seed{0};
};

struct GenDataResult {
    std::vector<LogEntry> raw_log;
    Dataset dataset;
    int discarded_chunks{0};
};

namespace detail {

struct DriverState {
    PlantState plant;
    std::size_t hint{0};
    double v_target{20.0};
    double hold_left{0.0};
    double t{0.0};
    double accel{0.0};
    std::array<double, 3> phase{};
};

/// Speed allowed at the current position so that the vehicle can slow down for
/// every upcoming curvature within the braking horizon.
inline double curvature_speed_cap(const Track& track, std::size_t seg, double v, const SpeedProfile& prof)
{
    const double horizon = 30.0 + v * v / (2.0 * prof.brake_decel);
    const auto& pts = track.points();
    double cap = prof.v_max;
    double dist = 0.0;
    for (std::size_t k = 0; dist < horizon && k < pts.size(); ++k) {
        const std::size_t i = (seg + k) % pts.size();
        const double kappa = std::abs(track.curvature_at(i));
        if (kappa > 1e-6) {
            const double v_corner = std::sqrt(prof.lateral_accel_max / kappa);
            cap = std::min(cap, std::sqrt(v_corner * v_corner + 2.0 * prof.brake_decel * dist));
        }
        const auto& p = pts[i];
        const auto& q = pts[(i + 1) % pts.size()];
        dist += std::hypot(q.x - p.x, q.y - p.y);
    }
    return cap;
}

} // namespace detail

/// Pure-pursuit steering towards the centreline point `lookahead` metres ahead.
inline double pure_pursuit_steer(const Track& track, const VehicleState& s, const TrackQuery& q, double wheelbase,
                                 double lookahead)
{
    const auto [tx, ty] = track.position_at(q.s + lookahead);
    const double dx = tx - s.x;
    const double dy = ty - s.y;
    const double local_y = -std::sin(s.psi) * dx + std::cos(s.psi) * dy;
    const double d2 = dx * dx + dy * dy;
    return std::atan(2.0 * wheelbase * local_y / std::max(d2, 1e-6));
}

/// Drives the plant around the track and returns the raw log plus the smoothed
/// dataset with finite-difference targets.
inline GenDataResult gen_data(const PlantParams& plant, const Track& track, const GenDataConfig& cfg)
{
    detail::require(cfg.duration > 0.0 && cfg.dt > 0.0, "gen_data: duration and dt must be positive");
    auto prof = cfg.profile;
    prof.lateral_accel_max *= plant.mu;
    const double wheelbase = plant.lf + plant.lr;

    detail::DriverState st;
    {
        const auto& p0 = track.points().front();
        st.plant.vehicle = {p0.x, p0.y, track.heading_at(0), cfg.start_speed, 0.0, 0.0};
    }
    GenDataResult res;
    res.raw_log.reserve(static_cast<std::size_t>(cfg.duration / cfg.dt) + 2);
    const auto steps_total = static_cast<long long>(std::llround(cfg.duration / cfg.dt));
    const auto chunk_steps = std::max<long long>(1, std::llround(cfg.chunk / cfg.dt));

    // Accepted chunks are kept with their start state so that a chunk whose
    // start is already unrecoverable can be rolled back.
    struct Accepted {
        detail::DriverState start;
        std::size_t log_size;
    };
    std::vector<Accepted> accepted_chunks;
    std::uint64_t attempt_counter = 0;
    int backtracks = 0;
    long long done = 0;
    while (done < steps_total) {
        const auto chunk_index = static_cast<std::uint64_t>(accepted_chunks.size());
        const long long n = std::min(chunk_steps, steps_total - done);
        bool accepted = false;
        for (int attempt = 0; attempt <= cfg.max_retries && !accepted; ++attempt) {
            std::mt19937_64 rng(mix_seed(cfg.seed, chunk_index, attempt_counter++));
            std::uniform_real_distribution<double> uni(0.0, 1.0);
            detail::DriverState cur = st;
            if (attempt > 0) {
                cur.hold_left = 0.0;  // fresh speed target on retry
            }
            for (auto& ph : cur.phase) {
                ph = 2.0 * std::numbers::pi * uni(rng);
            }
            std::vector<LogEntry> chunk;
            chunk.reserve(static_cast<std::size_t>(n));
            bool off = false;
            for (long long k = 0; k < n; ++k) {
                const auto& s = cur.plant.vehicle;
                const auto q = track.query_near(s.x, s.y, cur.hint);
                cur.hint = q.segment;
                if (!q.inside) {
                    off = true;
                    break;
                }
                if (cur.hold_left <= 0.0) {
                    cur.v_target = prof.v_min + (prof.v_max - prof.v_min) * uni(rng);
                    cur.hold_left = prof.hold_min + (prof.hold_max - prof.hold_min) * uni(rng);
                }
                cur.hold_left -= cfg.dt;
                const double v_cmd = std::min(cur.v_target, detail::curvature_speed_cap(track, q.segment, s.vx, prof));
                const double tt = cur.t;
                const double dither_s = prof.steer_dither * (std::sin(1.3 * tt + cur.phase[0]) +
                                                             0.5 * std::sin(3.1 * tt + cur.phase[1]));
                const double dither_a = prof.accel_dither * std::sin(0.9 * tt + cur.phase[2]);
                const double lookahead = std::max(6.0, 0.6 * s.vx);
                const double wanted =
                    std::max(prof.speed_gain * (v_cmd - s.vx), -prof.brake_limit_factor * prof.brake_decel) + dither_a;
                const double max_change = prof.jerk_limit * cfg.dt;
                cur.accel += std::clamp(wanted - cur.accel, -max_change, max_change);
                ControlInput u{cur.accel, pure_pursuit_steer(track, s, q, wheelbase, lookahead) + dither_s};
                u = plant.limits.clamp(u);
                cur.accel = u.accel;
                chunk.push_back({cur.t, s, u});
                cur.plant = plant_step(cur.plant, u, plant, cfg.dt);
                cur.t += cfg.dt;
            }
            if (!off) {
                accepted = true;
                accepted_chunks.push_back({st, res.raw_log.size()});
                res.raw_log.insert(res.raw_log.end(), chunk.begin(), chunk.end());
                st = cur;
                done += n;
            } else {
                ++res.discarded_chunks;
            }
        }
        if (!accepted) {
            if (accepted_chunks.empty() || ++backtracks > cfg.max_backtracks) {
                throw std::runtime_error("gen_data: driver cannot stay on the track (chunk " +
                                         std::to_string(chunk_index) + ")");
            }
            const auto last = accepted_chunks.back();
            accepted_chunks.pop_back();
            done -= static_cast<long long>(res.raw_log.size() - last.log_size);
            res.raw_log.resize(last.log_size);
            st = last.start;
        }
    }
    // closing entry so the last logged control still gets a target
    res.raw_log.push_back({st.t, st.plant.vehicle, res.raw_log.back().control});
    const auto smoothed = smooth_log(res.raw_log, cfg.smooth_window, cfg.smooth_order);
    res.dataset = compute_targets(smoothed);
    return res;
}

} // namespace racelearn

#endif // RACELEARN_DATAGEN_HPP
