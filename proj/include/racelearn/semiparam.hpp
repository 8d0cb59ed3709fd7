#ifndef RACELEARN_SEMIPARAM_HPP
#define RACELEARN_SEMIPARAM_HPP

#include "racelearn/core.hpp"
#include "racelearn/dataset_io.hpp"
#include "racelearn/hashing.hpp"
#include "racelearn/neuralnet.hpp"
#include "racelearn/parametric.hpp"
#include "racelearn/plant.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace racelearn {

/// Number of network input features:
/// [vx, vy, yaw_rate, f.dvx, f.dvy, f.dyaw_rate, accel, steer].
inline constexpr int semiparam_inputs = 8;
/// Residual head: (dvx, dvy, dyaw_rate).
inline constexpr int semiparam_outputs = 3;

/// Anything that predicts state derivatives. Batched prediction is the hot
/// path of the sampling controller.
class DynamicsModel {
public:
    virtual ~DynamicsModel() = default;
    [[nodiscard]] virtual StateDerivative predict(const VehicleState& s, const ControlInput& u) const = 0;
    virtual void predict_batch(std::span<const VehicleState> s, std::span<const ControlInput> u,
                               std::span<StateDerivative> out) const
    {
        for (std::size_t i = 0; i < s.size(); ++i) {
            out[i] = predict(s[i], u[i]);
        }
    }
};

/// Bicycle model alone.
class ParametricModel final : public DynamicsModel {
public:
    explicit ParametricModel(VehicleParams p) : p_(p) {}
    [[nodiscard]] StateDerivative predict(const VehicleState& s, const ControlInput& u) const override
    {
        return parametric_derivative(s, u, p_);
    }
    [[nodiscard]] const VehicleParams& params() const { return p_; }

private:
    VehicleParams p_;
};

/// The simulator's own dynamics, with the actuator assumed to track the
/// command instantly. Used as an oracle model for the controller.
class PlantModel final : public DynamicsModel {
public:
    explicit PlantModel(PlantParams p) : p_(p) {}
    [[nodiscard]] StateDerivative predict(const VehicleState& s, const ControlInput& u) const override
    {
        return plant_derivative({s, u.steer}, u, p_);
    }

private:
    PlantParams p_;
};

/// Parametric prediction corrected by a learned residual on the velocity rows.
struct SemiParamModel {
    VehicleParams vehicle;
    NetParams net{MlpShape{semiparam_inputs, 20, 20, semiparam_outputs}};
    Normalizer norm = Normalizer::identity(semiparam_inputs, semiparam_outputs);
};

inline Eigen::Matrix<double, 1, semiparam_inputs> semiparam_features(const VehicleState& s, const ControlInput& u,
                                                                     const StateDerivative& prior)
{
    Eigen::Matrix<double, 1, semiparam_inputs> f;
    f << s.vx, s.vy, s.yaw_rate, prior.dvx, prior.dvy, prior.dyaw_rate, u.accel, u.steer;
    return f;
}

/// Unnormalized network inputs for every sample of a dataset.
inline Eigen::MatrixXd semiparam_feature_matrix(const Dataset& ds, const VehicleParams& vp)
{
    Eigen::MatrixXd x(static_cast<Eigen::Index>(ds.size()), semiparam_inputs);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& s = ds[i];
        x.row(static_cast<Eigen::Index>(i)) = semiparam_features(s.state, s.control, parametric_derivative(s.state, s.control, vp));
    }
    return x;
}

/// Velocity-row targets minus the parametric prediction.
inline Eigen::MatrixXd residual_matrix(const Dataset& ds, const VehicleParams& vp)
{
    Eigen::MatrixXd r(static_cast<Eigen::Index>(ds.size()), semiparam_outputs);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& s = ds[i];
        const auto f = parametric_derivative(s.state, s.control, vp);
        r.row(static_cast<Eigen::Index>(i)) << s.target.dvx - f.dvx, s.target.dvy - f.dvy,
            s.target.dyaw_rate - f.dyaw_rate;
    }
    return r;
}

inline Eigen::MatrixXd velocity_target_matrix(const Dataset& ds)
{
    Eigen::MatrixXd y(static_cast<Eigen::Index>(ds.size()), 3);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        y.row(static_cast<Eigen::Index>(i)) << ds[i].target.dvx, ds[i].target.dvy, ds[i].target.dyaw_rate;
    }
    return y;
}

inline StateDerivative predict_derivative(const SemiParamModel& m, const VehicleState& s, const ControlInput& u)
{
    StateDerivative d = parametric_derivative(s, u, m.vehicle);
    const Eigen::MatrixXd z = m.norm.apply_inputs(semiparam_features(s, u, d));
    const Eigen::MatrixXd r = m.norm.invert_outputs(forward(m.net, z));
    d.dvx += r(0, 0);
    d.dvy += r(0, 1);
    d.dyaw_rate += r(0, 2);
    return d;
}

/// Shared-snapshot adapter for the controller.
class SemiParamDynamics final : public DynamicsModel {
public:
    explicit SemiParamDynamics(std::shared_ptr<const SemiParamModel> m) : m_(std::move(m)) {}

    [[nodiscard]] StateDerivative predict(const VehicleState& s, const ControlInput& u) const override
    {
        return predict_derivative(*m_, s, u);
    }

    void predict_batch(std::span<const VehicleState> s, std::span<const ControlInput> u,
                       std::span<StateDerivative> out) const override
    {
        const auto n = static_cast<Eigen::Index>(s.size());
        Eigen::MatrixXd x(n, semiparam_inputs);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            out[k] = parametric_derivative(s[k], u[k], m_->vehicle);
            x.row(i) = semiparam_features(s[k], u[k], out[k]);
        }
        const Eigen::MatrixXd r = m_->norm.invert_outputs(forward(m_->net, m_->norm.apply_inputs(x)));
        for (Eigen::Index i = 0; i < n; ++i) {
            auto& d = out[static_cast<std::size_t>(i)];
            d.dvx += r(i, 0);
            d.dvy += r(i, 1);
            d.dyaw_rate += r(i, 2);
        }
    }

    [[nodiscard]] const SemiParamModel& model() const { return *m_; }

private:
    std::shared_ptr<const SemiParamModel> m_;
};

/// Purely learned model: [vx, vy, yaw_rate, accel, steer] -> velocity rows;
/// pose rows are the kinematic rotation of the current velocities.
struct NonParamModel {
    NetParams net{MlpShape{5, 32, 32, 3}};
    Normalizer norm = Normalizer::identity(5, 3);
};

inline Eigen::MatrixXd nonparam_feature_matrix(const Dataset& ds)
{
    Eigen::MatrixXd x(static_cast<Eigen::Index>(ds.size()), 5);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& s = ds[i];
        x.row(static_cast<Eigen::Index>(i)) << s.state.vx, s.state.vy, s.state.yaw_rate, s.control.accel,
            s.control.steer;
    }
    return x;
}

struct MseReport {
    double dvx{};
    double dvy{};
    double dyaw_rate{};
    double aggregate{};  ///< mean over the three channels
};

namespace detail {

inline MseReport mse_from_errors(const Eigen::MatrixXd& err)
{
    const auto n = static_cast<double>(err.rows());
    MseReport r;
    r.dvx = err.col(0).squaredNorm() / n;
    r.dvy = err.col(1).squaredNorm() / n;
    r.dyaw_rate = err.col(2).squaredNorm() / n;
    r.aggregate = (r.dvx + r.dvy + r.dyaw_rate) / 3.0;
    return r;
}

} // namespace detail

/// Velocity-row predictions of the semi-parametric model for a whole dataset.
inline Eigen::MatrixXd predict_velocity_rows(const SemiParamModel& m, const Dataset& ds)
{
    const Eigen::MatrixXd x = semiparam_feature_matrix(ds, m.vehicle);
    const Eigen::MatrixXd r = m.norm.invert_outputs(forward(m.net, m.norm.apply_inputs(x)));
    return x.middleCols(3, 3) + r;
}

/// Per-channel MSE over (dvx, dvy, dyaw_rate) in physical units.
inline MseReport evaluate_mse(const SemiParamModel& m, const Dataset& ds)
{
    detail::require(!ds.empty(), "evaluate_mse: empty dataset");
    return detail::mse_from_errors(predict_velocity_rows(m, ds) - velocity_target_matrix(ds));
}

inline MseReport evaluate_mse(const VehicleParams& vp, const Dataset& ds)
{
    detail::require(!ds.empty(), "evaluate_mse: empty dataset");
    return detail::mse_from_errors(semiparam_feature_matrix(ds, vp).middleCols(3, 3) - velocity_target_matrix(ds));
}

inline MseReport evaluate_mse(const NonParamModel& m, const Dataset& ds)
{
    detail::require(!ds.empty(), "evaluate_mse: empty dataset");
    const Eigen::MatrixXd y = m.norm.invert_outputs(forward(m.net, m.norm.apply_inputs(nonparam_feature_matrix(ds))));
    return detail::mse_from_errors(y - velocity_target_matrix(ds));
}

struct BootstrapOptions {
    TrainConfig train{};
    FitConfig fit{};
    int hidden1{20};
    int hidden2{20};
    EpochCallback on_epoch{};
};

struct BootstrapResult {
    SemiParamModel model;
    FitResult fit;
    std::vector<double> loss_history;
};

/// Fits the parametric part, then trains the network on its residuals.
inline BootstrapResult bootstrap(const Dataset& ds, const VehicleParams& init, const BootstrapOptions& opt = {})
{
    detail::require(!ds.empty(), "bootstrap: empty dataset");
    BootstrapResult res;
    res.fit = fit_parameters(ds, init, opt.fit);
    res.model.vehicle = res.fit.params;

    const Eigen::MatrixXd x = semiparam_feature_matrix(ds, res.model.vehicle);
    const Eigen::MatrixXd r = residual_matrix(ds, res.model.vehicle);
    res.model.norm = fit_normalizer(x, r, /*center_outputs=*/false);
    const MlpShape shape{semiparam_inputs, opt.hidden1, opt.hidden2, semiparam_outputs};
    auto trained = train(init_params(shape, opt.train.seed), x, r, res.model.norm, opt.train, opt.on_epoch);
    res.model.net = std::move(trained.params);
    res.loss_history = std::move(trained.loss_history);
    return res;
}

// Model bundle directory: vehicle.cfg, network.json, metadata.json.

struct BundleMetadata {
    std::string bootstrap_dataset_hash;
    std::string created;
};

inline void save_bundle(const std::string& dir, const SemiParamModel& m, const BundleMetadata& meta)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_vehicle_params((fs::path(dir) / "vehicle.cfg").string(), m.vehicle);
    {
        std::ofstream out(fs::path(dir) / "network.json");
        out << net_to_json(m.net, m.norm).dump(1) << '\n';
    }
    std::ofstream out(fs::path(dir) / "metadata.json");
    out << nlohmann::json{{"bootstrap_dataset_hash", meta.bootstrap_dataset_hash},
                          {"created", meta.created},
                          {"network_inputs", "vx,vy,yaw_rate,f_dvx,f_dvy,f_dyaw_rate,accel,steer"},
                          {"network_outputs", "residual dvx,dvy,dyaw_rate"}}
               .dump(1)
        << '\n';
}

inline SemiParamModel load_bundle(const std::string& dir, BundleMetadata* meta = nullptr)
{
    namespace fs = std::filesystem;
    SemiParamModel m;
    m.vehicle = load_vehicle_params((fs::path(dir) / "vehicle.cfg").string());
    std::ifstream in(fs::path(dir) / "network.json");
    if (!in) {
        throw std::runtime_error("cannot read " + (fs::path(dir) / "network.json").string());
    }
    auto [net, norm] = net_from_json(nlohmann::json::parse(in));
    if (net.shape().in != semiparam_inputs || net.shape().out != semiparam_outputs) {
        throw std::runtime_error("model bundle: network must map 8 inputs to 3 outputs");
    }
    m.net = std::move(net);
    m.norm = std::move(norm);
    if (meta != nullptr) {
        std::ifstream mi(fs::path(dir) / "metadata.json");
        if (mi) {
            const auto j = nlohmann::json::parse(mi);
            meta->bootstrap_dataset_hash = j.value("bootstrap_dataset_hash", "");
            meta->created = j.value("created", "");
        }
    }
    return m;
}

inline std::string utc_timestamp()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Content hash of a dataset in its canonical CSV form.
inline std::string dataset_hash(const Dataset& ds)
{
    std::ostringstream out;
    write_dataset_csv(out, ds);
    return git_blob_hash(out.str());
}

} // namespace racelearn

#endif // RACELEARN_SEMIPARAM_HPP
