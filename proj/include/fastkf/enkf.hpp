#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "covariance.hpp"
#include "grid.hpp"
#include "rng.hpp"

namespace fastkf {

struct Ensemble {
    Matrix members;  ///< n_s × N

    Index size() const { return members.cols(); }

    Vector mean() const { return members.rowwise().mean(); }

    Matrix covariance() const {
        const Matrix dev = members.colwise() - mean();
        return dev * dev.transpose() / double(members.cols() - 1);
    }
};

/// All members start at the deterministic zero state (Σ_{0|0} = 0).
inline Ensemble enkf_init(Index n, Index n_members) {
    if (n_members < 2)
        throw std::invalid_argument("enkf_init: ensemble size must be at least 2");
    return {Matrix::Zero(n, n_members)};
}

/// Perturbed-observation EnKF cycle for the random-walk model.
///
/// Forecast: each member gains an independent N(0, Γ) increment (circulant
/// sampling in fft mode, matrix square root in dense mode).  Analysis: the
/// Kalman gain is assembled from sample covariances with Γ_noise = σ²I
/// always added to the innovation block, and every member assimilates its
/// own perturbed observation y + v_i.  Deterministic per seed.
inline Ensemble enkf_step(const Ensemble& ensemble, const SparseRowMatrix& h,
                          const Vector& y, const CovarianceOperator& cov, double sigma2,
                          std::uint64_t seed) {
    const Index n = ensemble.members.rows();
    const Index n_members = ensemble.size();
    if (n_members < 2)
        throw std::invalid_argument("enkf_step: ensemble size must be at least 2");
    if (h.cols() != n || y.size() != h.rows())
        throw std::invalid_argument("enkf_step: dimension mismatch");
    if (sigma2 < 0.0)
        throw std::invalid_argument("enkf_step: sigma2 must be nonnegative");

    const std::uint64_t seed_forecast = derive_seed(seed, 1);
    const std::uint64_t seed_perturb = derive_seed(seed, 2);

    Matrix members = ensemble.members;
    for (Index j = 0; j < n_members; j += 2) {
        const auto [a, b] = cov.sample_pair(seed_forecast,
                                            static_cast<std::uint64_t>(j / 2));
        members.col(j) += a;
        if (j + 1 < n_members) members.col(j + 1) += b;
    }

    const Matrix hm = h * members;
    const Vector member_mean = members.rowwise().mean();
    const Vector hm_mean = hm.rowwise().mean();
    const Matrix dev = members.colwise() - member_mean;
    const Matrix hdev = hm.colwise() - hm_mean;

    Matrix c_yy = hdev * hdev.transpose() / double(n_members - 1);
    c_yy.diagonal().array() += sigma2;
    c_yy = 0.5 * (c_yy + c_yy.transpose()).eval();
    Eigen::LLT<Matrix> llt(c_yy);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error(
            "enkf_step: sample innovation covariance is singular even with "
            "observation noise added");

    const Matrix c_sy = dev * hdev.transpose() / double(n_members - 1);

    const double sigma = std::sqrt(sigma2);
    Matrix innovations(y.size(), n_members);
    for (Index j = 0; j < n_members; ++j) {
        Vector perturbed = y;
        if (sigma2 > 0.0)
            perturbed += sigma * gaussian_vector(y.size(), seed_perturb,
                                                 static_cast<std::uint64_t>(j));
        innovations.col(j) = perturbed - hm.col(j);
    }
    members.noalias() += c_sy * llt.solve(innovations);
    return {std::move(members)};
}

}  // namespace fastkf
