#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

#include "boxcox.hpp"
#include "covariance.hpp"
#include "grid.hpp"

namespace fastkf {

/// Dense baseline filter state for the random-walk forecast model.
struct DenseFilterState {
    Vector mean;
    Matrix cov;
    int step = 0;
};

inline DenseFilterState dense_kf_init(Index n) {
    return {Vector::Zero(n), Matrix::Zero(n, n), 0};
}

namespace detail {

inline Eigen::LLT<Matrix> factor_innovation(Matrix& s) {
    s = 0.5 * (s + s.transpose()).eval();
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("dense filter: innovation covariance is singular");
    return llt;
}

}  // namespace detail

/// One predict+update cycle of the standard Kalman filter with F = I:
/// Σ_pred = Σ + Γ, K = Σ_pred Hᵀ S⁻¹, covariance via the symmetrized
/// Σ_pred − K H Σ_pred form.
inline DenseFilterState dense_kf_step(const DenseFilterState& state,
                                      const SparseRowMatrix& h, const Vector& y,
                                      const CovarianceOperator& cov, double sigma2) {
    const Index n = state.mean.size();
    if (h.cols() != n || y.size() != h.rows())
        throw std::invalid_argument("dense_kf_step: dimension mismatch");
    if (sigma2 < 0.0)
        throw std::invalid_argument("dense_kf_step: sigma2 must be nonnegative");

    Matrix sigma_pred = state.cov + cov.dense_matrix();
    const Matrix hp = h * sigma_pred;  // H Σ_pred
    Matrix s = hp * h.transpose();
    s.diagonal().array() += sigma2;
    const auto llt = detail::factor_innovation(s);

    DenseFilterState next;
    next.mean = state.mean + hp.transpose() * llt.solve(y - h * state.mean);
    next.cov = sigma_pred - hp.transpose() * llt.solve(hp);
    next.cov = 0.5 * (next.cov + next.cov.transpose()).eval();
    next.step = state.step + 1;
    return next;
}

/// Dense extended Kalman filter step in the Box-Cox transform domain.
/// Relinearization (> 1) uses the iterated-EKF mean recursion with a
/// relative-mean-change stop at 1e-6; the covariance update uses the last
/// linearization performed.
inline DenseFilterState dense_ekf_step(const DenseFilterState& state,
                                       const SparseRowMatrix& h, const Vector& y,
                                       const CovarianceOperator& cov, double sigma2,
                                       const BoxCox& transform,
                                       int relinearizations = 1) {
    const Index n = state.mean.size();
    if (h.cols() != n || y.size() != h.rows())
        throw std::invalid_argument("dense_ekf_step: dimension mismatch");
    if (relinearizations < 1 || relinearizations > 5)
        throw std::invalid_argument("dense_ekf_step: relinearizations must lie in [1, 5]");

    Matrix sigma_pred = state.cov + cov.dense_matrix();

    Vector eta = state.mean;
    Matrix hp;
    Eigen::LLT<Matrix> llt;
    for (int it = 0; it < relinearizations; ++it) {
        auto [h_k, h_eta] = ekf_linearize(h, eta, transform);
        hp = h_k * sigma_pred;
        Matrix s = hp * h_k.transpose();
        s.diagonal().array() += sigma2;
        s = 0.5 * (s + s.transpose()).eval();
        llt.compute(s);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("dense_ekf_step: innovation covariance is singular");
        const Vector resid = y - h_eta - h_k * (state.mean - eta);
        Vector eta_next = state.mean + hp.transpose() * llt.solve(resid);
        const double change = (eta_next - eta).norm();
        eta = std::move(eta_next);
        if (change <= 1e-6 * eta.norm()) break;
    }

    DenseFilterState next;
    next.mean = std::move(eta);
    next.cov = sigma_pred - hp.transpose() * llt.solve(hp);
    next.cov = 0.5 * (next.cov + next.cov.transpose()).eval();
    next.step = state.step + 1;
    return next;
}

}  // namespace fastkf
