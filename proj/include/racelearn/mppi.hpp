#ifndef RACELEARN_MPPI_HPP
#define RACELEARN_MPPI_HPP

#include "racelearn/core.hpp"
#include "racelearn/learner.hpp"
#include "racelearn/semiparam.hpp"
#include "racelearn/track.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace racelearn {

struct MppiConfig {
    int horizon{75};
    int samples{512};
    double temperature{1.0};
    double sigma_accel{1.5};  ///< m/s^2
    double sigma_steer{0.05}; ///< rad
    /// AR(1) coefficient of the perturbations along the horizon; the per-step
    /// marginal standard deviation stays sigma. 0 gives white noise.
    double noise_correlation{0.9};
    /// Share of the samples perturbed around zero control instead of the
    /// nominal sequence, so that a plan stuck on a bad manoeuvre can still
    /// switch to straightening out.
    double exploration_fraction{0.1};
    double dt{0.02};
    std::uint64_t seed{0};
    ControlLimits limits{};

    [[nodiscard]] bool valid() const
    {
        return horizon >= 1 && samples >= 1 && temperature > 0.0 && sigma_accel > 0.0 && sigma_steer > 0.0 &&
               noise_correlation >= 0.0 && noise_correlation < 1.0 && exploration_fraction >= 0.0 &&
               exploration_fraction <= 1.0 && dt > 0.0;
    }
};

/// Per-step running cost weights. All terms are evaluated on the state reached
/// after each model step.
struct CostWeights {
    double off_track{1e4};       ///< charged on every step from the first exit on
    double progress{10.0};       ///< reward per metre of centreline progress
    double speed_target{18.0};   ///< m/s
    double speed{0.5};           ///< weight on (vx - speed_target)^2
    double accel_effort{0.001};  ///< weight on accel^2
    double steer_effort{0.1};    ///< weight on steer^2
    double steer_rate{0.0};      ///< weight on (steer change per step)^2
    double slip_limit{0.08};     ///< rad, body slip angle allowed before the soft cost starts
    double slip{5000.0};         ///< weight on the squared excess body slip
    double boundary_margin{1.5}; ///< m kept clear of both edges
    double boundary{200.0};      ///< weight on the squared margin violation

    [[nodiscard]] bool valid() const
    {
        for (double v : {off_track, progress, speed, accel_effort, steer_effort, steer_rate, slip_limit, slip,
                         boundary_margin, boundary}) {
            if (!(v >= 0.0)) {
                return false;
            }
        }
        return speed_target >= 0.0;
    }

    /// Keeps well inside the grip and track limits.
    static CostWeights conservative() { return {}; }

    /// Higher speed target, more body slip and a thinner margin; used to push
    /// the vehicle towards its limits (GG experiments).
    static CostWeights aggressive()
    {
        CostWeights w;
        w.speed_target = 26.0;
        w.progress = 15.0;
        w.slip_limit = 0.12;
        w.slip = 2000.0;
        w.boundary_margin = 0.75;
        return w;
    }
};

/// Body slip angle, zero below the low-speed guard.
inline double body_slip(const VehicleState& s)
{
    return s.vx < low_speed_guard ? 0.0 : std::atan(s.vy / s.vx);
}

namespace detail {

/// Search window (segments either side) for the per-step projection of a
/// rollout; one step never moves more than a couple of segments.
inline constexpr std::size_t rollout_window = 4;

/// Running cost of one state, excluding the off-track and progress terms.
inline double state_cost(const VehicleState& s, const ControlInput& u, const TrackQuery& q, const TrackPoint& at,
                         const CostWeights& w)
{
    double c = w.speed * (s.vx - w.speed_target) * (s.vx - w.speed_target);
    c += w.accel_effort * u.accel * u.accel + w.steer_effort * u.steer * u.steer;
    const double excess = std::abs(body_slip(s)) - w.slip_limit;
    if (excess > 0.0) {
        c += w.slip * excess * excess;
    }
    const double clearance = std::min(at.w_left - q.offset, at.w_right + q.offset);
    if (clearance < w.boundary_margin) {
        const double v = w.boundary_margin - clearance;
        c += w.boundary * v * v;
    }
    return c;
}

/// Forward-Euler step used by the controller's rollouts.
inline VehicleState rollout_step(const VehicleState& s, const StateDerivative& d, double dt)
{
    return {s.x + d.dx * dt,
            s.y + d.dy * dt,
            wrap_angle(s.psi + d.dpsi * dt),
            s.vx + d.dvx * dt,
            s.vy + d.dvy * dt,
            s.yaw_rate + d.dyaw_rate * dt};
}

/// Accumulates the cost of many rollouts advancing in lockstep.
struct RolloutBatch {
    std::vector<VehicleState> states;
    std::vector<ControlInput> controls;
    std::vector<ControlInput> previous;
    std::vector<StateDerivative> derivs;
    std::vector<std::size_t> hints;
    std::vector<double> s_prev;
    std::vector<double> cost;
    std::vector<char> off;
    bool sticky{true};  ///< off-track cost persists once incurred; off when starting outside

    void reset(std::size_t n, const VehicleState& start, const TrackQuery& q0, const ControlInput& last = {})
    {
        states.assign(n, start);
        controls.assign(n, {});
        previous.assign(n, last);
        derivs.assign(n, {});
        hints.assign(n, q0.segment);
        s_prev.assign(n, q0.s);
        cost.assign(n, 0.0);
        off.assign(n, 0);
        sticky = q0.inside;
    }

    /// Advances every live rollout one step with `controls` and adds the running cost.
    void step(const DynamicsModel& model, const Track& track, const CostWeights& w, double dt)
    {
        model.predict_batch(states, controls, derivs);
        const auto& pts = track.points();
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (!std::isfinite(cost[i])) {
                continue;
            }
            if (!derivs[i].finite()) {
                cost[i] = std::numeric_limits<double>::infinity();
                continue;
            }
            states[i] = rollout_step(states[i], derivs[i], dt);
            const auto& s = states[i];
            if (!s.finite()) {
                cost[i] = std::numeric_limits<double>::infinity();
                continue;
            }
            const auto q = track.query_near(s.x, s.y, hints[i], rollout_window);
            hints[i] = q.segment;
            if (!q.inside) {
                off[i] = 1;
            } else if (!sticky) {
                off[i] = 0;
            }
            if (off[i] != 0) {
                cost[i] += w.off_track;
            }
            cost[i] -= w.progress * track.s_delta(s_prev[i], q.s);
            s_prev[i] = q.s;
            cost[i] += state_cost(s, controls[i], q, pts[q.segment], w);
            const double ds = controls[i].steer - previous[i].steer;
            cost[i] += w.steer_rate * ds * ds;
            previous[i] = controls[i];
        }
    }
};

/// Small counter-based generator (splitmix64) so each sample owns an
/// independent, cheap stream.
class SplitMix64 {
public:
    using result_type = std::uint64_t;
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()()
    {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

} // namespace detail

/// Total cost of driving `controls` (one entry per horizon step) from `start`.
/// Returns +inf when the rollout produces a non-finite state.
/// `previous` is the control applied just before the sequence starts (only the
/// steering-rate term uses it).
inline double rollout_cost(const DynamicsModel& model, const Track& track, const VehicleState& start,
                           std::span<const ControlInput> controls, const CostWeights& weights, double dt = 0.02,
                           const ControlInput& previous = {})
{
    detail::require(!controls.empty(), "rollout_cost: empty control sequence");
    detail::require(start.finite(), "rollout_cost: non-finite start state");
    detail::RolloutBatch b;
    b.reset(1, start, track.query(start.x, start.y), previous);
    for (const auto& u : controls) {
        b.controls[0] = u;
        b.step(model, track, weights, dt);
        if (!std::isfinite(b.cost[0])) {
            break;
        }
    }
    return b.cost[0];
}

/// Warm-start sequence and bookkeeping carried between controller calls.
struct ControllerState {
    std::vector<ControlInput> nominal;
    ControlInput last{};  ///< control returned by the previous call
    std::uint64_t calls{0};
    std::size_t hint{0};
    bool hint_valid{false};
};

struct ControlResult {
    ControlInput u;
    std::vector<ControlInput> plan;  ///< updated nominal sequence before the shift
    bool fallback{false};            ///< every rollout failed; braking returned
    double min_cost{};
    double effective_samples{};      ///< 1 / sum(w_i^2)
};

/// One MPPI iteration: perturb the nominal sequence, roll every sample out
/// through `model`, and replace the nominal by the cost-weighted average of
/// the (clamped) samples. The state's nominal is left shifted by one step.
inline ControlResult compute_control(ControllerState& st, const DynamicsModel& model, const Track& track,
                                     const VehicleState& s0, const MppiConfig& cfg, const CostWeights& weights)
{
    detail::require(cfg.valid(), "compute_control: invalid configuration");
    detail::require(weights.valid(), "compute_control: cost weights must be non-negative");
    detail::require(s0.finite(), "compute_control: non-finite state");
    const auto H = static_cast<std::size_t>(cfg.horizon);
    const auto N = static_cast<std::size_t>(cfg.samples);
    if (st.nominal.size() != H) {
        st.nominal.assign(H, ControlInput{});
    }
    const auto q0 = st.hint_valid ? track.query_near(s0.x, s0.y, st.hint) : track.query(s0.x, s0.y);
    st.hint = q0.segment;
    st.hint_valid = true;

    // Sample sequences, stored step-major: seq[j * N + i].
    std::vector<ControlInput> seq(H * N);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double rho = cfg.noise_correlation;
    const double innovation = std::sqrt(1.0 - rho * rho);
    const auto explore = static_cast<std::size_t>(std::floor(cfg.exploration_fraction * static_cast<double>(N)));
    for (std::size_t i = 0; i < N; ++i) {
        const bool around_zero = i >= N - explore;
        detail::SplitMix64 rng(mix_seed(cfg.seed, st.calls, i));
        double ea = cfg.sigma_accel * gauss(rng);
        double es = cfg.sigma_steer * gauss(rng);
        for (std::size_t j = 0; j < H; ++j) {
            if (j > 0) {
                ea = rho * ea + innovation * cfg.sigma_accel * gauss(rng);
                es = rho * es + innovation * cfg.sigma_steer * gauss(rng);
            }
            const ControlInput base = around_zero ? ControlInput{} : st.nominal[j];
            seq[j * N + i] = cfg.limits.clamp({base.accel + ea, base.steer + es});
        }
        gauss.reset();
    }
    ++st.calls;

    detail::RolloutBatch batch;
    batch.reset(N, s0, q0, st.last);
    for (std::size_t j = 0; j < H; ++j) {
        std::copy(seq.begin() + static_cast<std::ptrdiff_t>(j * N),
                  seq.begin() + static_cast<std::ptrdiff_t>((j + 1) * N), batch.controls.begin());
        batch.step(model, track, weights, cfg.dt);
    }

    ControlResult res;
    const double cmin = *std::min_element(batch.cost.begin(), batch.cost.end());
    res.min_cost = cmin;
    if (!std::isfinite(cmin)) {
        res.fallback = true;
        res.u = cfg.limits.clamp({cfg.limits.accel_min, 0.0});
        st.nominal.assign(H, ControlInput{});
        st.last = res.u;
        res.plan = st.nominal;
        return res;
    }
    std::vector<double> w(N);
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        w[i] = std::isfinite(batch.cost[i]) ? std::exp(-(batch.cost[i] - cmin) / cfg.temperature) : 0.0;
        total += w[i];
    }
    double sq = 0.0;
    for (auto& wi : w) {
        wi /= total;
        sq += wi * wi;
    }
    res.effective_samples = 1.0 / sq;

    for (std::size_t j = 0; j < H; ++j) {
        ControlInput avg{};
        for (std::size_t i = 0; i < N; ++i) {
            avg.accel += w[i] * seq[j * N + i].accel;
            avg.steer += w[i] * seq[j * N + i].steer;
        }
        st.nominal[j] = cfg.limits.clamp(avg);
    }
    res.plan = st.nominal;
    res.u = st.nominal.front();
    st.last = res.u;
    std::rotate(st.nominal.begin(), st.nominal.begin() + 1, st.nominal.end());
    st.nominal.back() = st.nominal[H >= 2 ? H - 2 : 0];
    return res;
}

} // namespace racelearn

#endif // RACELEARN_MPPI_HPP
