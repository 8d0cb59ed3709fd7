#ifndef RACELEARN_GMM_HPP
#define RACELEARN_GMM_HPP

#include "racelearn/core.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace racelearn {

/// Full-covariance Gaussian mixture with the sufficient statistics needed for
/// stepwise (incremental) EM.
struct GmmModel {
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;

    // Running averages of responsibility-weighted statistics: E[g], E[g x], E[g x x^T].
    std::vector<double> stat_weight;
    std::vector<Eigen::VectorXd> stat_mean;
    std::vector<Eigen::MatrixXd> stat_second;
    long long incremental_batches{0};
    long long sample_count{0};

    [[nodiscard]] int components() const { return static_cast<int>(weights.size()); }
    [[nodiscard]] int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
};

struct GmmFitConfig {
    int components{8};
    int max_iters{200};
    double tol{1e-6};  ///< stop when the per-sample log-likelihood improves by less than this
    double jitter{1e-6};
    std::uint64_t seed{0};
};

struct GmmFitResult {
    GmmModel model;
    std::vector<double> log_likelihood;  ///< total log-likelihood before each M-step
    std::vector<std::string> warnings;
};

struct IncrementalConfig {
    double kappa{0.7};
    double t0{10.0};
};

namespace detail {

struct GaussianCache {
    std::vector<Eigen::MatrixXd> chol;  // lower factors
    std::vector<double> log_norm;       // log of the normalizing constant
};

inline bool cholesky(const Eigen::MatrixXd& cov, Eigen::MatrixXd& lower)
{
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
        return false;
    }
    lower = llt.matrixL();
    return lower.diagonal().minCoeff() > 0.0 && lower.allFinite();
}

inline GaussianCache make_cache(const GmmModel& m)
{
    GaussianCache c;
    const double d = m.dim();
    for (int k = 0; k < m.components(); ++k) {
        Eigen::MatrixXd l;
        if (!cholesky(m.covariances[static_cast<std::size_t>(k)], l)) {
            throw std::runtime_error("gmm: covariance of component " + std::to_string(k) + " is not SPD");
        }
        c.log_norm.push_back(-0.5 * d * std::log(2.0 * std::numbers::pi) - l.diagonal().array().log().sum());
        c.chol.push_back(std::move(l));
    }
    return c;
}

/// log(w_k N(x_i | k)), one row per sample.
inline Eigen::MatrixXd weighted_log_densities(const GmmModel& m, const GaussianCache& c, const Eigen::MatrixXd& x)
{
    const auto n = x.rows();
    const int kk = m.components();
    Eigen::MatrixXd out(n, kk);
    for (int k = 0; k < kk; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        Eigen::MatrixXd centred = (x.rowwise() - m.means[ks].transpose()).transpose();
        c.chol[ks].triangularView<Eigen::Lower>().solveInPlace(centred);
        const double lw = m.weights[ks] > 0.0 ? std::log(m.weights[ks]) : -std::numeric_limits<double>::infinity();
        out.col(k) = (lw + c.log_norm[ks] - 0.5 * centred.colwise().squaredNorm().array()).matrix().transpose();
    }
    return out;
}

/// Row-wise log-sum-exp; also turns `logp` into log-responsibilities.
inline Eigen::VectorXd normalize_rows(Eigen::MatrixXd& logp)
{
    Eigen::VectorXd lse(logp.rows());
    for (Eigen::Index i = 0; i < logp.rows(); ++i) {
        const double mx = logp.row(i).maxCoeff();
        const double s = mx + std::log((logp.row(i).array() - mx).exp().sum());
        lse(i) = s;
        logp.row(i).array() -= s;
    }
    return lse;
}

inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x)
{
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    return (c.transpose() * c) / static_cast<double>(x.rows());
}

/// Rebuilds weights, means and covariances from the sufficient statistics.
/// Escalates the diagonal jitter until every covariance factorizes.
inline void m_step_from_stats(GmmModel& m, double jitter)
{
    const int kk = m.components();
    const int d = m.dim();
    double total = 0.0;
    for (double s : m.stat_weight) {
        total += s;
    }
    for (int k = 0; k < kk; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        m.weights[ks] = m.stat_weight[ks] / total;
        if (m.stat_weight[ks] <= 1e-300) {
            continue;  // keep previous mean and covariance for an empty component
        }
        m.means[ks] = m.stat_mean[ks] / m.stat_weight[ks];
        Eigen::MatrixXd cov = m.stat_second[ks] / m.stat_weight[ks] - m.means[ks] * m.means[ks].transpose();
        cov = 0.5 * (cov + cov.transpose());
        bool ok = false;
        for (double j = jitter; j <= 1e-4 * (1.0 + 1e-9); j *= 10.0) {
            Eigen::MatrixXd trial = cov + j * Eigen::MatrixXd::Identity(d, d);
            Eigen::MatrixXd l;
            if (cholesky(trial, l)) {
                m.covariances[ks] = std::move(trial);
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw std::runtime_error("gmm: covariance of component " + std::to_string(k) +
                                     " is not SPD after jitter escalation");
        }
    }
}

/// Responsibility-weighted averages over a batch.
inline void batch_stats(const GmmModel& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& resp,
                        std::vector<double>& s0, std::vector<Eigen::VectorXd>& s1, std::vector<Eigen::MatrixXd>& s2)
{
    const auto n = static_cast<double>(x.rows());
    const int kk = m.components();
    s0.assign(static_cast<std::size_t>(kk), 0.0);
    s1.assign(static_cast<std::size_t>(kk), Eigen::VectorXd::Zero(m.dim()));
    s2.assign(static_cast<std::size_t>(kk), Eigen::MatrixXd::Zero(m.dim(), m.dim()));
    for (int k = 0; k < kk; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Eigen::VectorXd g = resp.col(k);
        s0[ks] = g.sum() / n;
        s1[ks] = x.transpose() * g / n;
        s2[ks] = x.transpose() * g.asDiagonal() * x / n;
    }
}

} // namespace detail

/// Total log-likelihood of the rows of `x`; zero for an empty matrix.
inline double log_likelihood(const GmmModel& m, const Eigen::MatrixXd& x)
{
    if (x.rows() == 0) {
        return 0.0;
    }
    detail::require(x.cols() == m.dim(), "log_likelihood: dimension mismatch");
    const auto cache = detail::make_cache(m);
    Eigen::MatrixXd lp = detail::weighted_log_densities(m, cache, x);
    return detail::normalize_rows(lp).sum();
}

/// Posterior component probabilities, one row per sample.
inline Eigen::MatrixXd responsibilities(const GmmModel& m, const Eigen::MatrixXd& x)
{
    const auto cache = detail::make_cache(m);
    Eigen::MatrixXd lp = detail::weighted_log_densities(m, cache, x);
    detail::normalize_rows(lp);
    return lp.array().exp().matrix();
}

/// EM from k-means++ seeds. Covariances get `jitter` on the diagonal every M-step.
inline GmmFitResult fit_em(const Eigen::MatrixXd& x, const GmmFitConfig& cfg = {})
{
    const auto n = x.rows();
    const int kk = cfg.components;
    const auto d = static_cast<int>(x.cols());
    detail::require(kk >= 1, "fit_em: need at least one component");
    detail::require(n >= kk, "fit_em: fewer samples than components");
    detail::require(x.allFinite(), "fit_em: non-finite data");

    std::mt19937_64 rng(cfg.seed);
    GmmFitResult res;
    GmmModel& m = res.model;
    const Eigen::MatrixXd global_cov = detail::sample_covariance(x) + cfg.jitter * Eigen::MatrixXd::Identity(d, d);

    // k-means++ seeding
    {
        std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
        m.means.push_back(x.row(pick(rng)).transpose());
        Eigen::VectorXd dist2 = (x.rowwise() - m.means.back().transpose()).rowwise().squaredNorm();
        while (static_cast<int>(m.means.size()) < kk) {
            Eigen::Index next = 0;
            const double total = dist2.sum();
            if (total > 0.0) {
                std::uniform_real_distribution<double> u(0.0, total);
                double r = u(rng);
                for (next = 0; next < n - 1; ++next) {
                    r -= dist2(next);
                    if (r <= 0.0) {
                        break;
                    }
                }
            } else {
                next = pick(rng);
            }
            m.means.push_back(x.row(next).transpose());
            dist2 = dist2.cwiseMin((x.rowwise() - m.means.back().transpose()).rowwise().squaredNorm());
        }
    }
    m.weights.assign(static_cast<std::size_t>(kk), 1.0 / kk);
    m.covariances.assign(static_cast<std::size_t>(kk), global_cov);

    Eigen::MatrixXd resp;
    double prev = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.max_iters; ++it) {
        const auto cache = detail::make_cache(m);
        resp = detail::weighted_log_densities(m, cache, x);
        const double ll = detail::normalize_rows(resp).sum();
        res.log_likelihood.push_back(ll);
        resp = resp.array().exp().matrix();
        if (it > 0 && (ll - prev) / static_cast<double>(n) < cfg.tol) {
            break;
        }
        prev = ll;

        for (int k = 0; k < kk; ++k) {
            const auto ks = static_cast<std::size_t>(k);
            const Eigen::VectorXd g = resp.col(k);
            const double nk = g.sum();
            if (nk / static_cast<double>(n) < 1e-8) {
                std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
                m.means[ks] = x.row(pick(rng)).transpose();
                m.covariances[ks] = global_cov;
                m.weights[ks] = 1.0 / kk;
                res.warnings.push_back("fit_em: component " + std::to_string(k) + " collapsed at iteration " +
                                       std::to_string(it) + "; reinitialized from a data point");
                continue;
            }
            m.weights[ks] = nk / static_cast<double>(n);
            m.means[ks] = x.transpose() * g / nk;
            const Eigen::MatrixXd c = x.rowwise() - m.means[ks].transpose();
            m.covariances[ks] = c.transpose() * g.asDiagonal() * c / nk + cfg.jitter * Eigen::MatrixXd::Identity(d, d);
        }
        double wsum = 0.0;
        for (double w : m.weights) {
            wsum += w;
        }
        for (double& w : m.weights) {
            w /= wsum;
        }
    }

    resp = responsibilities(m, x);
    detail::batch_stats(m, x, resp, m.stat_weight, m.stat_mean, m.stat_second);
    m.sample_count = n;
    m.incremental_batches = 0;
    return res;
}

/// Step size of the next incremental update.
inline double incremental_step_size(const GmmModel& m, const IncrementalConfig& cfg = {})
{
    return std::pow(cfg.t0 + static_cast<double>(m.incremental_batches), -cfg.kappa);
}

/// Stepwise EM: one E-step over `x`, blended into the running statistics with
/// step size (t0 + t)^-kappa, then an M-step.
inline GmmModel incremental_update(const GmmModel& model, const Eigen::MatrixXd& x, const IncrementalConfig& cfg = {},
                                   double jitter = 1e-6)
{
    detail::require(model.components() > 0 && model.stat_weight.size() == model.weights.size(),
                    "incremental_update: model has not been fitted");
    if (x.rows() == 0) {
        return model;
    }
    detail::require(x.cols() == model.dim(), "incremental_update: dimension mismatch");
    detail::require(x.allFinite(), "incremental_update: non-finite data");

    GmmModel m = model;
    const Eigen::MatrixXd resp = responsibilities(m, x);
    std::vector<double> s0;
    std::vector<Eigen::VectorXd> s1;
    std::vector<Eigen::MatrixXd> s2;
    detail::batch_stats(m, x, resp, s0, s1, s2);

    const double eta = incremental_step_size(m, cfg);
    for (std::size_t k = 0; k < s0.size(); ++k) {
        m.stat_weight[k] = (1.0 - eta) * m.stat_weight[k] + eta * s0[k];
        m.stat_mean[k] = (1.0 - eta) * m.stat_mean[k] + eta * s1[k];
        m.stat_second[k] = (1.0 - eta) * m.stat_second[k] + eta * s2[k];
    }
    detail::m_step_from_stats(m, jitter);
    ++m.incremental_batches;
    m.sample_count += x.rows();
    return m;
}

/// Draws `n` samples: component by weight, then mean + L z.
inline Eigen::MatrixXd sample(const GmmModel& m, Eigen::Index n, std::uint64_t seed)
{
    const auto cache = detail::make_cache(m);
    std::mt19937_64 rng(seed);
    std::discrete_distribution<int> pick(m.weights.begin(), m.weights.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd out(n, m.dim());
    Eigen::VectorXd z(m.dim());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(pick(rng));
        for (Eigen::Index j = 0; j < z.size(); ++j) {
            z(j) = normal(rng);
        }
        out.row(i) = (m.means[k] + cache.chol[k] * z).transpose();
    }
    return out;
}

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& a)
{
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(a.size()));
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) {
            flat.push_back(a(r, c));
        }
    }
    return flat;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, int d)
{
    const auto flat = j.get<std::vector<double>>();
    if (flat.size() != static_cast<std::size_t>(d * d)) {
        throw std::runtime_error("gmm json: covariance has wrong size");
    }
    Eigen::MatrixXd a(d, d);
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) {
            a(r, c) = flat[static_cast<std::size_t>(r * d + c)];
        }
    }
    return a;
}

} // namespace detail

inline nlohmann::json gmm_to_json(const GmmModel& m)
{
    nlohmann::json comps = nlohmann::json::array();
    for (int k = 0; k < m.components(); ++k) {
        const auto ks = static_cast<std::size_t>(k);
        comps.push_back({{"weight", m.weights[ks]},
                         {"mean", std::vector<double>(m.means[ks].data(), m.means[ks].data() + m.dim())},
                         {"covariance", detail::matrix_to_json(m.covariances[ks])},
                         {"stat_weight", m.stat_weight[ks]},
                         {"stat_mean", std::vector<double>(m.stat_mean[ks].data(), m.stat_mean[ks].data() + m.dim())},
                         {"stat_second", detail::matrix_to_json(m.stat_second[ks])}});
    }
    return {{"format_version", 1},
            {"dim", m.dim()},
            {"components", comps},
            {"incremental_batches", m.incremental_batches},
            {"sample_count", m.sample_count}};
}

inline GmmModel gmm_from_json(const nlohmann::json& j)
{
    GmmModel m;
    const int d = j.at("dim").get<int>();
    auto vec = [&](const nlohmann::json& v) {
        const auto a = v.get<std::vector<double>>();
        if (a.size() != static_cast<std::size_t>(d)) {
            throw std::runtime_error("gmm json: vector has wrong size");
        }
        return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(a.data(), d));
    };
    for (const auto& c : j.at("components")) {
        m.weights.push_back(c.at("weight").get<double>());
        m.means.push_back(vec(c.at("mean")));
        m.covariances.push_back(detail::matrix_from_json(c.at("covariance"), d));
        m.stat_weight.push_back(c.at("stat_weight").get<double>());
        m.stat_mean.push_back(vec(c.at("stat_mean")));
        m.stat_second.push_back(detail::matrix_from_json(c.at("stat_second"), d));
    }
    m.incremental_batches = j.at("incremental_batches").get<long long>();
    m.sample_count = j.at("sample_count").get<long long>();
    return m;
}

} // namespace racelearn

#endif // RACELEARN_GMM_HPP
