#ifndef RACELEARN_NEURALNET_HPP
#define RACELEARN_NEURALNET_HPP

#include "racelearn/core.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace racelearn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Layer sizes of a two-hidden-layer perceptron.
struct MlpShape {
    int in{8};
    int h1{20};
    int h2{20};
    int out{3};

    [[nodiscard]] std::size_t param_count() const
    {
        return static_cast<std::size_t>(h1 * in + h1 + h2 * h1 + h2 + out * h2 + out);
    }
    bool operator==(const MlpShape&) const = default;
};

/// Flat parameter vector, laid out as W1 (h1 x in, row-major), b1, W2, b2, W3, b3.
class NetParams {
public:
    NetParams() : NetParams(MlpShape{}) {}
    explicit NetParams(MlpShape shape) : shape_(shape), theta_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape.param_count()))) {}
    NetParams(MlpShape shape, Eigen::VectorXd theta) : shape_(shape), theta_(std::move(theta))
    {
        detail::require(static_cast<std::size_t>(theta_.size()) == shape_.param_count(),
                        "NetParams: parameter vector does not match layer sizes");
    }

    [[nodiscard]] const MlpShape& shape() const { return shape_; }
    [[nodiscard]] const Eigen::VectorXd& flat() const { return theta_; }
    Eigen::VectorXd& flat() { return theta_; }

    [[nodiscard]] Eigen::Index w1_offset() const { return 0; }
    [[nodiscard]] Eigen::Index b1_offset() const { return w1_offset() + shape_.h1 * shape_.in; }
    [[nodiscard]] Eigen::Index w2_offset() const { return b1_offset() + shape_.h1; }
    [[nodiscard]] Eigen::Index b2_offset() const { return w2_offset() + shape_.h2 * shape_.h1; }
    [[nodiscard]] Eigen::Index w3_offset() const { return b2_offset() + shape_.h2; }
    [[nodiscard]] Eigen::Index b3_offset() const { return w3_offset() + shape_.out * shape_.h2; }

    [[nodiscard]] Eigen::Map<const RowMatrix> w1() const { return {theta_.data() + w1_offset(), shape_.h1, shape_.in}; }
    [[nodiscard]] Eigen::Map<const RowMatrix> w2() const { return {theta_.data() + w2_offset(), shape_.h2, shape_.h1}; }
    [[nodiscard]] Eigen::Map<const RowMatrix> w3() const { return {theta_.data() + w3_offset(), shape_.out, shape_.h2}; }
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b1() const { return {theta_.data() + b1_offset(), shape_.h1}; }
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b2() const { return {theta_.data() + b2_offset(), shape_.h2}; }
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b3() const { return {theta_.data() + b3_offset(), shape_.out}; }
    Eigen::Map<Eigen::VectorXd> b3() { return {theta_.data() + b3_offset(), shape_.out}; }

    /// 1 for weight entries, 0 for biases (weight decay mask).
    [[nodiscard]] Eigen::VectorXd weight_mask() const
    {
        Eigen::VectorXd mask = Eigen::VectorXd::Zero(theta_.size());
        mask.segment(w1_offset(), shape_.h1 * shape_.in).setOnes();
        mask.segment(w2_offset(), shape_.h2 * shape_.h1).setOnes();
        mask.segment(w3_offset(), shape_.out * shape_.h2).setOnes();
        return mask;
    }

    bool operator==(const NetParams& o) const { return shape_ == o.shape_ && theta_ == o.theta_; }

private:
    MlpShape shape_;
    Eigen::VectorXd theta_;
};

/// Glorot-uniform weights, zero biases.
inline NetParams init_params(MlpShape shape, std::uint64_t seed)
{
    NetParams p(shape);
    std::mt19937_64 rng(seed);
    auto fill = [&](Eigen::Index offset, int rows, int cols) {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows) * cols; ++i) {
            p.flat()(offset + i) = dist(rng);
        }
    };
    fill(p.w1_offset(), shape.h1, shape.in);
    fill(p.w2_offset(), shape.h2, shape.h1);
    fill(p.w3_offset(), shape.out, shape.h2);
    return p;
}

/// Batched forward pass; one sample per row.
inline Eigen::MatrixXd forward(const NetParams& p, const Eigen::MatrixXd& x)
{
    detail::require(x.cols() == p.shape().in, "forward: input dimension mismatch");
    Eigen::MatrixXd h1 = ((x * p.w1().transpose()).rowwise() + p.b1().transpose()).array().tanh().matrix();
    Eigen::MatrixXd h2 = ((h1 * p.w2().transpose()).rowwise() + p.b2().transpose()).array().tanh().matrix();
    return (h2 * p.w3().transpose()).rowwise() + p.b3().transpose();
}

inline Eigen::VectorXd forward(const NetParams& p, const Eigen::VectorXd& x)
{
    detail::require(x.size() == p.shape().in, "forward: input dimension mismatch");
    const Eigen::VectorXd h1 = (p.w1() * x + p.b1()).array().tanh().matrix();
    const Eigen::VectorXd h2 = (p.w2() * h1 + p.b2()).array().tanh().matrix();
    return p.w3() * h2 + p.b3();
}

/// Mean of squared errors over all batch entries and outputs.
inline double mse_loss(const NetParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& t)
{
    const Eigen::MatrixXd e = forward(p, x) - t;
    return e.squaredNorm() / static_cast<double>(e.size());
}

struct LossAndGradient {
    double loss{};  ///< data term only
    Eigen::VectorXd grad;
};

/// Gradient of mean-squared error plus (weight_decay / 2) * |W|^2 over the
/// weight matrices; biases are not decayed.
inline LossAndGradient loss_and_gradient(const NetParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& t,
                                         double weight_decay)
{
    const auto& sh = p.shape();
    detail::require(x.rows() > 0, "gradient: empty batch");
    detail::require(x.rows() == t.rows() && x.cols() == sh.in && t.cols() == sh.out, "gradient: batch shape mismatch");

    const Eigen::MatrixXd h1 = ((x * p.w1().transpose()).rowwise() + p.b1().transpose()).array().tanh().matrix();
    const Eigen::MatrixXd h2 = ((h1 * p.w2().transpose()).rowwise() + p.b2().transpose()).array().tanh().matrix();
    const Eigen::MatrixXd err = ((h2 * p.w3().transpose()).rowwise() + p.b3().transpose()) - t;

    LossAndGradient out;
    out.loss = err.squaredNorm() / static_cast<double>(err.size());
    out.grad = Eigen::VectorXd::Zero(p.flat().size());

    const Eigen::MatrixXd dy = err * (2.0 / static_cast<double>(err.size()));
    const Eigen::MatrixXd dz2 = ((dy * p.w3()).array() * (1.0 - h2.array().square())).matrix();
    const Eigen::MatrixXd dz1 = ((dz2 * p.w2()).array() * (1.0 - h1.array().square())).matrix();

    Eigen::Map<RowMatrix>(out.grad.data() + p.w3_offset(), sh.out, sh.h2) = dy.transpose() * h2;
    out.grad.segment(p.b3_offset(), sh.out) = dy.colwise().sum().transpose();
    Eigen::Map<RowMatrix>(out.grad.data() + p.w2_offset(), sh.h2, sh.h1) = dz2.transpose() * h1;
    out.grad.segment(p.b2_offset(), sh.h2) = dz2.colwise().sum().transpose();
    Eigen::Map<RowMatrix>(out.grad.data() + p.w1_offset(), sh.h1, sh.in) = dz1.transpose() * x;
    out.grad.segment(p.b1_offset(), sh.h1) = dz1.colwise().sum().transpose();

    if (weight_decay != 0.0) {
        out.grad += weight_decay * p.weight_mask().cwiseProduct(p.flat());
    }
    return out;
}

inline Eigen::VectorXd gradient(const NetParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& t,
                                double weight_decay)
{
    return loss_and_gradient(p, x, t, weight_decay).grad;
}

struct AdamConfig {
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
};

struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long long step{0};

    static AdamState zeros(Eigen::Index n) { return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0}; }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& st, Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr,
                      const AdamConfig& cfg = {})
{
    detail::require(theta.size() == grad.size(), "adam_step: gradient size mismatch");
    if (st.m.size() != theta.size()) {
        st = AdamState::zeros(theta.size());
    }
    ++st.step;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    theta.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.eps);
}

/// Frozen z-score statistics for network inputs and outputs.
struct Normalizer {
    static constexpr double min_std = 1e-8;

    Eigen::VectorXd in_mean;
    Eigen::VectorXd in_std;
    Eigen::VectorXd out_mean;
    Eigen::VectorXd out_std;

    [[nodiscard]] Eigen::MatrixXd apply_inputs(const Eigen::MatrixXd& x) const
    {
        return ((x.rowwise() - in_mean.transpose()).array().rowwise() / in_std.transpose().array()).matrix();
    }
    [[nodiscard]] Eigen::MatrixXd invert_inputs(const Eigen::MatrixXd& z) const
    {
        return ((z.array().rowwise() * in_std.transpose().array()).matrix().rowwise() + in_mean.transpose());
    }
    [[nodiscard]] Eigen::MatrixXd apply_outputs(const Eigen::MatrixXd& y) const
    {
        return ((y.rowwise() - out_mean.transpose()).array().rowwise() / out_std.transpose().array()).matrix();
    }
    [[nodiscard]] Eigen::MatrixXd invert_outputs(const Eigen::MatrixXd& z) const
    {
        return ((z.array().rowwise() * out_std.transpose().array()).matrix().rowwise() + out_mean.transpose());
    }

    static Normalizer identity(int in, int out)
    {
        return {Eigen::VectorXd::Zero(in), Eigen::VectorXd::Ones(in), Eigen::VectorXd::Zero(out),
                Eigen::VectorXd::Ones(out)};
    }
};

namespace detail {

inline void column_stats(const Eigen::MatrixXd& x, bool center, Eigen::VectorXd& mean, Eigen::VectorXd& stddev)
{
    const auto n = static_cast<double>(x.rows());
    mean = center ? Eigen::VectorXd(x.colwise().mean().transpose()) : Eigen::VectorXd::Zero(x.cols());
    stddev.resize(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double var = (x.col(c).array() - mean(c)).square().sum() / n;
        stddev(c) = std::max(std::sqrt(var), Normalizer::min_std);
    }
}

} // namespace detail

/// Per-feature z-score statistics. With `center_outputs == false` the output
/// means are fixed at zero, so a zero network output maps to a zero physical
/// output.
inline Normalizer fit_normalizer(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                                 bool center_outputs = true)
{
    detail::require(inputs.rows() > 0 && inputs.rows() == targets.rows(), "fit_normalizer: empty or mismatched data");
    Normalizer n;
    detail::column_stats(inputs, true, n.in_mean, n.in_std);
    detail::column_stats(targets, center_outputs, n.out_mean, n.out_std);
    return n;
}

struct TrainConfig {
    double learning_rate{1e-3};
    double weight_decay{1e-3};
    int batch_size{100};
    int epochs{1000};
    AdamConfig adam{};
    std::uint64_t seed{0};
};

struct TrainResult {
    NetParams params;
    std::vector<double> loss_history;  ///< mean minibatch data loss per epoch (normalized units)
};

/// Called after each epoch with (epoch index, current params).
using EpochCallback = std::function<void(int, const NetParams&)>;

/// Minibatch Adam on physical-unit data, normalized with `norm` internally.
/// The epoch order is reshuffled every epoch from `cfg.seed`.
inline TrainResult train(NetParams params, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                         const Normalizer& norm, const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    detail::require(inputs.rows() > 0, "train: empty dataset");
    detail::require(inputs.rows() == targets.rows(), "train: inputs and targets differ in length");
    detail::require(cfg.batch_size >= 1 && cfg.epochs >= 0 && cfg.learning_rate > 0.0 && cfg.weight_decay >= 0.0,
                    "train: invalid configuration");
    const Eigen::MatrixXd x = norm.apply_inputs(inputs);
    const Eigen::MatrixXd t = norm.apply_outputs(targets);
    const auto n = static_cast<Eigen::Index>(x.rows());

    std::mt19937_64 rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    auto opt = AdamState::zeros(params.flat().size());

    TrainResult res;
    res.loss_history.reserve(static_cast<std::size_t>(cfg.epochs));
    Eigen::MatrixXd bx;
    Eigen::MatrixXd bt;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        int batches = 0;
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, n - start);
            bx.resize(len, x.cols());
            bt.resize(len, t.cols());
            for (Eigen::Index r = 0; r < len; ++r) {
                bx.row(r) = x.row(order[static_cast<std::size_t>(start + r)]);
                bt.row(r) = t.row(order[static_cast<std::size_t>(start + r)]);
            }
            const auto lg = loss_and_gradient(params, bx, bt, cfg.weight_decay);
            if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batches));
            }
            adam_step(opt, params.flat(), lg.grad, cfg.learning_rate, cfg.adam);
            sum += lg.loss;
            ++batches;
        }
        res.loss_history.push_back(sum / batches);
        if (on_epoch) {
            on_epoch(epoch, params);
        }
    }
    res.params = std::move(params);
    return res;
}

// JSON document: {"format_version", "dims": [in,h1,h2,out], "params": [...], "normalizer": {...}}

inline constexpr int net_format_version = 1;

namespace detail {

inline nlohmann::json to_json_vec(const Eigen::VectorXd& v)
{
    return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd from_json_vec(const nlohmann::json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace detail

inline nlohmann::json net_to_json(const NetParams& p, const Normalizer& norm)
{
    const auto& sh = p.shape();
    return {{"format_version", net_format_version},
            {"dims", {sh.in, sh.h1, sh.h2, sh.out}},
            {"params", detail::to_json_vec(p.flat())},
            {"normalizer",
             {{"in_mean", detail::to_json_vec(norm.in_mean)},
              {"in_std", detail::to_json_vec(norm.in_std)},
              {"out_mean", detail::to_json_vec(norm.out_mean)},
              {"out_std", detail::to_json_vec(norm.out_std)}}}};
}

inline std::pair<NetParams, Normalizer> net_from_json(const nlohmann::json& j)
{
    if (j.at("format_version").get<int>() != net_format_version) {
        throw std::runtime_error("network json: unsupported format version");
    }
    const auto dims = j.at("dims").get<std::vector<int>>();
    if (dims.size() != 4) {
        throw std::runtime_error("network json: dims must have four entries");
    }
    const MlpShape shape{dims[0], dims[1], dims[2], dims[3]};
    NetParams p(shape, detail::from_json_vec(j.at("params")));
    const auto& jn = j.at("normalizer");
    Normalizer n{detail::from_json_vec(jn.at("in_mean")), detail::from_json_vec(jn.at("in_std")),
                 detail::from_json_vec(jn.at("out_mean")), detail::from_json_vec(jn.at("out_std"))};
    if (n.in_mean.size() != shape.in || n.in_std.size() != shape.in || n.out_mean.size() != shape.out ||
        n.out_std.size() != shape.out) {
        throw std::runtime_error("network json: normalizer does not match layer sizes");
    }
    return {std::move(p), std::move(n)};
}

} // namespace racelearn

#endif // RACELEARN_NEURALNET_HPP
