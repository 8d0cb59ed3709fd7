#ifndef RACELEARN_LEARNER_HPP
#define RACELEARN_LEARNER_HPP

#include "racelearn/core.hpp"
#include "racelearn/gmm.hpp"
#include "racelearn/neuralnet.hpp"
#include "racelearn/semiparam.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace racelearn {

/// Deterministic 64-bit seed mixing (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0)
{
    auto fin = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return fin(fin(fin(a) ^ b) ^ c);
}

/// Fixed-capacity ring of normalized (network input, residual target) pairs
/// collected from the current operating regime.
class LocalBuffer {
public:
    explicit LocalBuffer(std::size_t capacity = 500)
        : capacity_(capacity), inputs_(static_cast<Eigen::Index>(capacity), semiparam_inputs),
          targets_(static_cast<Eigen::Index>(capacity), semiparam_outputs)
    {
        detail::require(capacity > 0, "LocalBuffer: capacity must be positive");
    }

    [[nodiscard]] std::size_t capacity() const { return capacity_; }
    [[nodiscard]] std::size_t size() const { return count_; }
    [[nodiscard]] bool full() const { return count_ == capacity_; }
    [[nodiscard]] bool empty() const { return count_ == 0; }
    [[nodiscard]] std::size_t dropped() const { return dropped_; }

    /// Appends a pair; overwrites the oldest entry once full.
    void push(const Eigen::RowVectorXd& input, const Eigen::RowVectorXd& target)
    {
        const auto slot = static_cast<Eigen::Index>((head_ + count_) % capacity_);
        if (full()) {
            inputs_.row(static_cast<Eigen::Index>(head_)) = input;
            targets_.row(static_cast<Eigen::Index>(head_)) = target;
            head_ = (head_ + 1) % capacity_;
            return;
        }
        inputs_.row(slot) = input;
        targets_.row(slot) = target;
        ++count_;
    }

    void note_dropped() { ++dropped_; }

    void clear()
    {
        head_ = 0;
        count_ = 0;
    }

    /// Stored inputs in arrival order.
    [[nodiscard]] Eigen::MatrixXd inputs() const { return ordered(inputs_); }
    [[nodiscard]] Eigen::MatrixXd targets() const { return ordered(targets_); }

private:
    [[nodiscard]] Eigen::MatrixXd ordered(const Eigen::MatrixXd& m) const
    {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(count_), m.cols());
        for (std::size_t i = 0; i < count_; ++i) {
            out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>((head_ + i) % capacity_));
        }
        return out;
    }

    std::size_t capacity_;
    std::size_t head_{0};
    std::size_t count_{0};
    std::size_t dropped_{0};
    Eigen::MatrixXd inputs_;
    Eigen::MatrixXd targets_;
};

struct PushStatus {
    bool accepted{};
    bool full{};
};

/// Converts a measured sample into a normalized (input, residual) pair against
/// the model snapshot and stores it. Non-finite samples are dropped and counted.
inline PushStatus push_sample(LocalBuffer& buf, const VehicleState& s, const ControlInput& u,
                              const StateDerivative& target, const SemiParamModel& model)
{
    if (!s.finite() || !u.finite() || !target.finite()) {
        buf.note_dropped();
        return {false, buf.full()};
    }
    const auto prior = parametric_derivative(s, u, model.vehicle);
    Eigen::MatrixXd residual(1, semiparam_outputs);
    residual << target.dvx - prior.dvx, target.dvy - prior.dvy, target.dyaw_rate - prior.dyaw_rate;
    buf.push(model.norm.apply_inputs(semiparam_features(s, u, prior)).row(0), model.norm.apply_outputs(residual).row(0));
    return {true, buf.full()};
}

enum class UpdateRule {
    constrained,  ///< rehearsal gradient plus alpha-scaled local gradient
    plain_sgd,    ///< local gradient only (ablation)
};

struct LearnerConfig {
    std::size_t buffer_capacity{500};
    int minibatch_size{100};
    int session_epochs{3};
    int rehearsal_batch{100};
    double learning_rate{1e-3};
    double weight_decay{1e-3};
    AdamConfig adam{};
    IncrementalConfig gmm_update{};
    UpdateRule rule{UpdateRule::constrained};
    std::uint64_t seed{0};
};

/// Largest a in [0, 1] with <a g_local + g_id, g_id> >= 0.
inline double constrained_alpha(const Eigen::VectorXd& g_local, const Eigen::VectorXd& g_id)
{
    detail::require(g_local.size() == g_id.size(), "constrained_alpha: gradient sizes differ");
    const double id2 = g_id.squaredNorm();
    const double dot = g_local.dot(g_id);
    if (id2 == 0.0 || dot >= 0.0) {
        return 1.0;
    }
    return std::min(1.0, id2 / -dot);
}

struct ConstrainedStepResult {
    double alpha{1.0};
    Eigen::VectorXd combined;
    double dot_local_id{};
    double norm_local{};
    double norm_id{};
    double local_loss{};
    double rehearsal_loss{};
    bool finite{true};
};

/// Computes both gradients, mixes them and applies the result through Adam.
/// Parameters and optimizer state are left untouched when a gradient is non-finite.
inline ConstrainedStepResult constrained_step(NetParams& net, AdamState& opt, const Eigen::MatrixXd& local_x,
                                              const Eigen::MatrixXd& local_t, const Eigen::MatrixXd& rehearsal_x,
                                              const Eigen::MatrixXd& rehearsal_t, const LearnerConfig& cfg)
{
    detail::require(local_x.rows() > 0, "constrained_step: empty local batch");
    ConstrainedStepResult r;
    const auto gl = loss_and_gradient(net, local_x, local_t, cfg.weight_decay);
    r.local_loss = gl.loss;
    r.norm_local = gl.grad.norm();
    if (cfg.rule == UpdateRule::plain_sgd) {
        r.combined = gl.grad;
    } else {
        detail::require(rehearsal_x.rows() > 0, "constrained_step: empty rehearsal batch");
        const auto gid = loss_and_gradient(net, rehearsal_x, rehearsal_t, cfg.weight_decay);
        r.rehearsal_loss = gid.loss;
        r.norm_id = gid.grad.norm();
        r.dot_local_id = gl.grad.dot(gid.grad);
        r.alpha = constrained_alpha(gl.grad, gid.grad);
        r.combined = r.alpha * gl.grad + gid.grad;
    }
    if (!r.combined.allFinite()) {
        r.finite = false;
        return r;
    }
    adam_step(opt, net.flat(), r.combined, cfg.learning_rate, cfg.adam);
    return r;
}

struct RehearsalBatch {
    Eigen::MatrixXd inputs;
    Eigen::MatrixXd targets;
};

/// Pseudo-rehearsal data: inputs from the mixture, targets from a frozen network.
inline RehearsalBatch generate_rehearsal_batch(const GmmModel& gmm, const NetParams& snapshot, Eigen::Index n,
                                               std::uint64_t seed)
{
    RehearsalBatch b;
    b.inputs = sample(gmm, n, seed);
    b.targets = forward(snapshot, b.inputs);
    return b;
}

struct StepRecord {
    int step{};
    double alpha{};
    double norm_local{};
    double norm_id{};
    double dot_local_id{};
    double local_loss{};
    double rehearsal_loss{};
};

struct SessionResult {
    SemiParamModel model;
    GmmModel gmm;
    bool aborted{false};
    std::string abort_reason;
    std::vector<StepRecord> steps;
    double local_mse_before{};
    double local_mse_after{};
    double gmm_log_likelihood{};  ///< mean log-likelihood of the buffer inputs under the updated mixture
};

/// One learning session over a full buffer: session_epochs passes of shuffled
/// minibatches, each paired with a fresh rehearsal batch whose targets come from
/// the network as it was when the session started. The mixture is then updated
/// with the buffer inputs. On failure the inputs are returned unchanged.
inline SessionResult training_session(const SemiParamModel& model, const LocalBuffer& buffer, const GmmModel& gmm,
                                      AdamState& opt, const LearnerConfig& cfg, std::uint64_t session_index)
{
    detail::require(!buffer.empty(), "training_session: empty buffer");
    SessionResult res;
    res.model = model;
    res.gmm = gmm;
    const Eigen::MatrixXd x = buffer.inputs();
    const Eigen::MatrixXd t = buffer.targets();
    const NetParams snapshot = model.net;
    const AdamState opt_before = opt;
    res.local_mse_before = mse_loss(snapshot, x, t);

    const auto n = x.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(mix_seed(cfg.seed, session_index, 1));
    NetParams net = model.net;
    Eigen::MatrixXd bx;
    Eigen::MatrixXd bt;
    int step = 0;
    for (int epoch = 0; epoch < cfg.session_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index start = 0; start < n; start += cfg.minibatch_size) {
            const Eigen::Index len = std::min<Eigen::Index>(cfg.minibatch_size, n - start);
            bx.resize(len, x.cols());
            bt.resize(len, t.cols());
            for (Eigen::Index r = 0; r < len; ++r) {
                bx.row(r) = x.row(order[static_cast<std::size_t>(start + r)]);
                bt.row(r) = t.row(order[static_cast<std::size_t>(start + r)]);
            }
            RehearsalBatch rb;
            if (cfg.rule == UpdateRule::constrained) {
                rb = generate_rehearsal_batch(gmm, snapshot, cfg.rehearsal_batch,
                                              mix_seed(cfg.seed, session_index, 1000 + static_cast<std::uint64_t>(step)));
            }
            const auto r = constrained_step(net, opt, bx, bt, rb.inputs, rb.targets, cfg);
            if (!r.finite || !net.flat().allFinite()) {
                opt = opt_before;
                res.model = model;
                res.gmm = gmm;
                res.aborted = true;
                res.abort_reason = "non-finite gradient at step " + std::to_string(step);
                return res;
            }
            res.steps.push_back({step, r.alpha, r.norm_local, r.norm_id, r.dot_local_id, r.local_loss, r.rehearsal_loss});
            ++step;
        }
    }
    try {
        res.gmm = incremental_update(gmm, x, cfg.gmm_update);
    } catch (const std::exception& e) {
        opt = opt_before;
        res.model = model;
        res.gmm = gmm;
        res.aborted = true;
        res.abort_reason = std::string("mixture update failed: ") + e.what();
        return res;
    }
    res.model.net = std::move(net);
    res.local_mse_after = mse_loss(res.model.net, x, t);
    res.gmm_log_likelihood = log_likelihood(res.gmm, x) / static_cast<double>(n);
    return res;
}

/// Owns the buffer, mixture and optimizer state, and publishes immutable model
/// snapshots. A single writer (the thread calling push/run_session) is assumed;
/// snapshot() may be called from any thread.
class OnlineLearner {
public:
    OnlineLearner(SemiParamModel model, GmmModel gmm, LearnerConfig cfg)
        : cfg_(cfg), buffer_(cfg.buffer_capacity), gmm_(std::move(gmm)),
          snapshot_(std::make_shared<const SemiParamModel>(std::move(model)))
    {
        opt_ = AdamState::zeros(snapshot_->net.flat().size());
    }

    /// Stores a sample; runs a session when the buffer fills. Returns true if a
    /// new snapshot was published.
    bool observe(const VehicleState& s, const ControlInput& u, const StateDerivative& target)
    {
        const auto model = snapshot();
        const auto st = push_sample(buffer_, s, u, target, *model);
        if (!st.full) {
            return false;
        }
        return run_session();
    }

    bool run_session()
    {
        const auto model = snapshot();
        auto res = training_session(*model, buffer_, gmm_, opt_, cfg_, sessions_);
        ++sessions_;
        buffer_.clear();
        nlohmann::json rec{{"session", sessions_ - 1},
                           {"aborted", res.aborted},
                           {"local_mse_before", res.local_mse_before},
                           {"local_mse_after", res.local_mse_after},
                           {"gmm_mean_log_likelihood", res.gmm_log_likelihood}};
        if (res.aborted) {
            rec["abort_reason"] = res.abort_reason;
            ++aborted_;
        }
        nlohmann::json steps = nlohmann::json::array();
        for (const auto& s : res.steps) {
            steps.push_back({{"step", s.step},
                             {"alpha", s.alpha},
                             {"norm_local", s.norm_local},
                             {"norm_id", s.norm_id},
                             {"dot", s.dot_local_id},
                             {"local_loss", s.local_loss},
                             {"rehearsal_loss", s.rehearsal_loss}});
        }
        rec["steps"] = std::move(steps);
        log_.push_back(std::move(rec));
        if (res.aborted) {
            return false;
        }
        gmm_ = std::move(res.gmm);
        publish(std::make_shared<const SemiParamModel>(std::move(res.model)));
        return true;
    }

    [[nodiscard]] std::shared_ptr<const SemiParamModel> snapshot() const
    {
        std::lock_guard lock(mutex_);
        return snapshot_;
    }

    [[nodiscard]] const LocalBuffer& buffer() const { return buffer_; }
    [[nodiscard]] const GmmModel& gmm() const { return gmm_; }
    [[nodiscard]] const LearnerConfig& config() const { return cfg_; }
    [[nodiscard]] std::uint64_t sessions() const { return sessions_; }
    [[nodiscard]] std::uint64_t aborted_sessions() const { return aborted_; }
    /// One JSON object per session (JSON-lines when dumped one per line).
    [[nodiscard]] const std::vector<nlohmann::json>& session_log() const { return log_; }

private:
    void publish(std::shared_ptr<const SemiParamModel> m)
    {
        std::lock_guard lock(mutex_);
        snapshot_ = std::move(m);
    }

    LearnerConfig cfg_;
    LocalBuffer buffer_;
    GmmModel gmm_;
    AdamState opt_;
    std::uint64_t sessions_{0};
    std::uint64_t aborted_{0};
    std::vector<nlohmann::json> log_;
    mutable std::mutex mutex_;
    std::shared_ptr<const SemiParamModel> snapshot_;
};

} // namespace racelearn

#endif // RACELEARN_LEARNER_HPP
