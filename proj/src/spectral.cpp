#include "kernreg/spectral.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace kernreg {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.shape[0], t.shape[1]);
    for (std::int64_t i = 0; i < t.shape[0]; ++i)
        for (std::int64_t j = 0; j < t.shape[1]; ++j) m(i, j) = t.data[i * t.shape[1] + j];
    return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
    Tensor t({m.rows(), m.cols()});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) t.data[i * m.cols() + j] = m(i, j);
    return t;
}

Tensor column_tensor(const Eigen::VectorXd& v) {
    Tensor t({static_cast<std::int64_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data[static_cast<std::size_t>(i)] = v(i);
    return t;
}

}  // namespace

Tensor filter_matrix(const Tensor& param) {
    if (param.rank() == 2) return param;
    check(param.rank() == 4, Error::Kind::shape,
          "filter_matrix: expected rank 2 or 4, got shape " + shape_str(param.shape));
    return param.reshaped({param.shape[0], param.shape[1] * param.shape[2] * param.shape[3]});
}

Tensor unflatten_filter(const Tensor& matrix, const Shape& original) {
    return matrix.reshaped(original);
}

SpectralEstimate spectral_norm_svd(const Tensor& w) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(w), Eigen::ComputeThinU | Eigen::ComputeThinV);
    SpectralEstimate est;
    est.method = SpectralEstimate::Method::svd;
    est.sigma = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    est.u = column_tensor(svd.matrixU().col(0));
    est.v = column_tensor(svd.matrixV().col(0));
    return est;
}

SpectralEstimate spectral_norm_power(const Tensor& w, int iterations, Tensor* warm) {
    check(iterations >= 1, Error::Kind::shape, "power method needs at least one iteration");
    std::int64_t rows = w.shape[0], cols = w.shape[1];
    Eigen::MatrixXd M = to_eigen(w);

    Eigen::VectorXd v(cols);
    if (warm && warm->size() == cols && l2_norm(*warm) > 0) {
        for (std::int64_t i = 0; i < cols; ++i) v(i) = warm->data[static_cast<std::size_t>(i)];
    } else {
        // fixed deterministic start with mixed signs and uneven weights
        for (std::int64_t i = 0; i < cols; ++i) v(i) = 1.0 + 0.01 * static_cast<double>(i % 7) - 0.003 * static_cast<double>(i % 3);
    }
    v.normalize();

    SpectralEstimate est;
    est.method = SpectralEstimate::Method::power;
    est.iterations = iterations;

    Eigen::VectorXd u(rows);
    for (int it = 0; it < iterations; ++it) {
        u = M * v;
        double un = u.norm();
        if (un == 0.0) {
            est.degenerate = true;
            est.sigma = 0.0;
            est.u = Tensor({rows});
            est.v = Tensor({cols});
            est.u.data[0] = 1.0;
            est.v.data[0] = 1.0;
            if (warm) *warm = est.v;
            return est;
        }
        v = M.transpose() * u;
        v.normalize();
    }
    u = M * v;
    est.sigma = u.norm();
    if (est.sigma > 0) u /= est.sigma;
    est.u = column_tensor(u);
    est.v = column_tensor(v);
    if (warm) *warm = est.v;
    return est;
}

std::pair<double, std::vector<Tensor>> sn_penalty_term(const ParamSet& params, double lambda, SnMethod method,
                                                       SpectralState* state) {
    check(lambda >= 0, Error::Kind::config, "sn_penalty: lambda must be nonnegative");
    double value = 0;
    std::vector<Tensor> grads;
    grads.reserve(params.count());
    if (state && state->warm.size() != params.count()) state->warm.assign(params.count(), Tensor());
    for (std::size_t l = 0; l < params.count(); ++l) {
        const Tensor& p = params.tensors[l];
        Tensor w = filter_matrix(p);
        if (lambda == 0) {
            grads.push_back(Tensor::zeros(p.shape));
            continue;
        }
        SpectralEstimate est = method.kind == SnMethod::Kind::svd
                                   ? spectral_norm_svd(w)
                                   : spectral_norm_power(w, method.iterations, state ? &state->warm[l] : nullptr);
        value += lambda * est.sigma * est.sigma;
        Tensor g({w.shape[0], w.shape[1]});
        double c = 2.0 * lambda * est.sigma;
        for (std::int64_t i = 0; i < w.shape[0]; ++i)
            for (std::int64_t j = 0; j < w.shape[1]; ++j)
                g.data[i * w.shape[1] + j] = c * est.u.data[static_cast<std::size_t>(i)] * est.v.data[static_cast<std::size_t>(j)];
        grads.push_back(unflatten_filter(g, p.shape));
    }
    return {value, std::move(grads)};
}

Tensor project_spectral(const Tensor& w, double tau) {
    check(tau > 0, Error::Kind::config, "project_spectral: tau must be positive");
    Eigen::MatrixXd M = to_eigen(w);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::VectorXd s = svd.singularValues();
    if (s.size() == 0 || s(0) <= tau) return w;  // already inside the ball
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = std::min(s(i), tau);
    return from_eigen(svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose());
}

void project_params(ParamSet& params, double tau) {
    for (auto& p : params.tensors) {
        Tensor w = filter_matrix(p);
        Tensor proj = project_spectral(w, tau);
        p = unflatten_filter(proj, p.shape);
    }
}

double continuation_tau(std::int64_t t, const ContinuationConfig& cfg) {
    check(cfg.tau0 > 0 && cfg.kappa > 0 && cfg.steps_per_epoch > 0, Error::Kind::config,
          "continuation: tau0, kappa and steps-per-epoch must be positive");
    double kappa_steps = cfg.kappa * cfg.steps_per_epoch;
    return cfg.tau0 * (1.0 + std::exp(-static_cast<double>(t) / kappa_steps));
}

std::vector<double> layer_spectral_norms(const ParamSet& params) {
    std::vector<double> out;
    out.reserve(params.count());
    for (const auto& p : params.tensors) out.push_back(spectral_norm_svd(filter_matrix(p)).sigma);
    return out;
}

double spectral_norm_product(const ParamSet& params) {
    double prod = 1;
    for (double s : layer_spectral_norms(params)) prod *= s;
    return prod;
}

}  // namespace kernreg
