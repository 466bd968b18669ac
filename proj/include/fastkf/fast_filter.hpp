#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "boxcox.hpp"
#include "covariance.hpp"
#include "grid.hpp"
#include "lowrank.hpp"

namespace fastkf {

/// Low-rank filter state: the covariance is represented exactly as
/// Σ_{k|k} = α_k Γ − W D Wᵀ with WᵀΓ⁻¹W = I and 0 ≤ D_i < α_k.
/// The zero-information start Σ_{0|0} = 0 is α = 0 with empty W.
struct LowRankState {
    double alpha = 0.0;
    Vector d;
    Matrix w;
    Vector mean;
    int step = 0;

    Index rank() const { return d.size(); }

    static LowRankState zero_start(Index n) {
        LowRankState s;
        s.mean = Vector::Zero(n);
        s.d = Vector(0);
        s.w = Matrix(n, 0);
        return s;
    }
};

/// Offline precomputation for the constant-H fast filter: the generalized
/// eigendecomposition of HᵀΓ_noise⁻¹H against Γ⁻¹, the cross covariance
/// ΓHᵀ, and the measurement-space products reused every step.
struct FkfContext {
    GepResult gep;
    Matrix gamma_ht;    ///< ΓHᵀ, n_s × n_m
    Matrix h_gamma_ht;  ///< HΓHᵀ, n_m × n_m
    Matrix h_u;         ///< HU, n_m × k
    SparseRowMatrix h;
    double sigma2 = 0.0;
};

inline FkfContext fkf_init(const CovarianceOperator& cov, const SparseRowMatrix& h,
                           double sigma2, Index k_rank, Index p_oversample,
                           std::uint64_t seed, GhepMode mode = GhepMode::two_pass) {
    if (h.cols() != cov.size())
        throw std::invalid_argument("fkf_init: H columns do not match state dimension");
    if (!(sigma2 > 0.0))
        throw std::invalid_argument("fkf_init: sigma2 must be positive");

    FkfContext ctx;
    ctx.h = h;
    ctx.sigma2 = sigma2;

    const LinOp a_apply = [&h, sigma2](const Vector& v) {
        return Vector((h.transpose() * (h * v)) / sigma2);
    };
    ctx.gep = randomized_ghep(a_apply, cov, k_rank, p_oversample, seed, mode);

    ctx.gamma_ht.resize(cov.size(), h.rows());
    for (Index i = 0; i < h.rows(); ++i)
        ctx.gamma_ht.col(i) = cov.apply(Vector(h.row(i).transpose()));
    ctx.h_gamma_ht = h * ctx.gamma_ht;
    ctx.h_gamma_ht = 0.5 * (ctx.h_gamma_ht + ctx.h_gamma_ht.transpose()).eval();
    ctx.h_u = h * ctx.gep.u;
    return ctx;
}

/// One fast-filter cycle for the random-walk model with constant H.
///
/// Predict: α ← α + 1 (D, W unchanged).  Update: the mean moves by
/// F S⁻¹(y − H ŝ) with F = α ΓHᵀ − W D (HW)ᵀ applied as matvecs, and the
/// diagonal moves per mode by the Sherman-Morrison-Woodbury closed form
/// d' = (d + αλ(α − d)) / (1 + λ(α − d)), all at O(r) state-space cost
/// beyond the fixed measurement-space factorization.
inline LowRankState fkf_step(const LowRankState& state, const FkfContext& ctx,
                             const Vector& y) {
    const Index r = ctx.gep.rank();
    const Index n_m = ctx.h.rows();
    if (y.size() != n_m)
        throw std::invalid_argument("fkf_step: observation length " +
                                    std::to_string(y.size()) + " does not match " +
                                    std::to_string(n_m) + " measurements");
    if (state.rank() != 0 && state.rank() != r)
        throw std::invalid_argument(
            "fkf_step: state rank does not match the eigendecomposition "
            "(constant-H regime requires W = U)");

    const double alpha = state.alpha + 1.0;
    const Vector d_prev = state.rank() ? state.d : Vector(Vector::Zero(r));

    Matrix s = alpha * ctx.h_gamma_ht;
    if (r > 0) s.noalias() -= ctx.h_u * d_prev.asDiagonal() * ctx.h_u.transpose();
    s.diagonal().array() += ctx.sigma2;
    s = 0.5 * (s + s.transpose()).eval();
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("fkf_step: innovation system is singular");

    const Vector z = llt.solve(y - ctx.h * state.mean);

    LowRankState next;
    next.alpha = alpha;
    next.step = state.step + 1;
    next.w = ctx.gep.u;
    next.mean = state.mean + alpha * (ctx.gamma_ht * z);
    if (r > 0)
        next.mean.noalias() -= ctx.gep.u * (d_prev.cwiseProduct(ctx.h_u.transpose() * z));

    next.d.resize(r);
    for (Index i = 0; i < r; ++i) {
        const double c = alpha - d_prev[i];
        const double lam = ctx.gep.lambda[i];
        next.d[i] = (d_prev[i] + alpha * lam * c) / (1.0 + lam * c);
    }
    return next;
}

struct FekfOptions {
    Index k_rank = -1;  ///< GHEP target rank per step; -1 means n_m
    Index oversampling = 20;
    double trunc_tol = 1e-5;
    int relinearizations = 1;
    GhepMode mode = GhepMode::two_pass;
    std::uint64_t seed = 0;
};

/// One fast extended-filter cycle for time-varying (linearized) H.
///
/// The prior factor is rewritten with D̄ = α⁻¹(αI − D)⁻¹D so that
/// Σ_pred⁻¹ = α⁻¹Γ⁻¹ + Γ⁻¹W D̄ WᵀΓ⁻¹; the per-step eigendecomposition of
/// H_kᵀΓ_noise⁻¹H_k is merged in by add_low_rank under the Γ⁻¹ metric,
/// and the posterior diagonal returns via D = α²D̂(I + αD̂)⁻¹.
inline LowRankState fekf_step(const LowRankState& state, const CovarianceOperator& cov,
                              const SparseRowMatrix& h, const Vector& y, double sigma2,
                              const BoxCox& transform, const FekfOptions& opts) {
    const Index n = cov.size();
    if (h.cols() != n || state.mean.size() != n || y.size() != h.rows())
        throw std::invalid_argument("fekf_step: dimension mismatch");
    if (!(sigma2 > 0.0))
        throw std::invalid_argument("fekf_step: sigma2 must be positive");
    if (opts.relinearizations < 1 || opts.relinearizations > 5)
        throw std::invalid_argument("fekf_step: relinearizations must lie in [1, 5]");

    const double alpha = state.alpha + 1.0;
    const Index r = state.rank();

    Vector d_bar(r);
    for (Index i = 0; i < r; ++i) {
        if (!(state.d[i] < alpha))
            throw std::runtime_error("fekf_step: state diagonal exceeds alpha");
        d_bar[i] = state.d[i] / (alpha * (alpha - state.d[i]));
    }

    // Iterated mean update; the last linearization also drives the
    // covariance update below.
    Vector eta = state.mean;
    SparseRowMatrix h_last;
    for (int it = 0; it < opts.relinearizations; ++it) {
        auto [h_k, h_eta] = ekf_linearize(h, eta, transform);
        Matrix gamma_hkt(n, h.rows());
        for (Index i = 0; i < h.rows(); ++i)
            gamma_hkt.col(i) = cov.apply(Vector(h_k.row(i).transpose()));
        const Matrix h_w = h_k * state.w;

        Matrix s = alpha * (h_k * gamma_hkt);
        if (r > 0) s.noalias() -= h_w * state.d.asDiagonal() * h_w.transpose();
        s.diagonal().array() += sigma2;
        s = 0.5 * (s + s.transpose()).eval();
        Eigen::LLT<Matrix> llt(s);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("fekf_step: innovation system is singular");

        const Vector resid = y - h_eta - h_k * (state.mean - eta);
        const Vector z = llt.solve(resid);
        Vector eta_next = state.mean + alpha * (gamma_hkt * z);
        if (r > 0)
            eta_next.noalias() -= state.w * (state.d.cwiseProduct(h_w.transpose() * z));

        const double change = (eta_next - eta).norm();
        h_last = std::move(h_k);
        eta = std::move(eta_next);
        if (change <= 1e-6 * eta.norm()) break;
    }

    const Index n_m = h.rows();
    const Index k_rank = opts.k_rank < 0 ? n_m : opts.k_rank;
    const LinOp a_apply = [&h_last, sigma2](const Vector& v) {
        return Vector((h_last.transpose() * (h_last * v)) / sigma2);
    };
    const GepResult gep = randomized_ghep(a_apply, cov, k_rank, opts.oversampling,
                                          opts.seed, opts.mode);

    const LinOp b_apply = [&cov](const Vector& x) { return cov.inverse_apply(x); };
    const LowRankSym sum = add_low_rank(state.w, d_bar, gep.u, gep.lambda, b_apply,
                                        opts.trunc_tol);

    // Drop numerically-zero modes of D̂ before the inversion-form map back
    // to D; both inputs are PSD, so anything at or below roundoff is noise.
    std::vector<Index> keep;
    for (Index i = 0; i < sum.rank(); ++i)
        if (sum.d[i] > 1e-14) keep.push_back(i);

    LowRankState next;
    next.alpha = alpha;
    next.step = state.step + 1;
    next.mean = std::move(eta);
    next.d.resize(static_cast<Index>(keep.size()));
    next.w.resize(n, static_cast<Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
        const double dhat = sum.d[keep[i]];
        next.d[static_cast<Index>(i)] = alpha * alpha * dhat / (1.0 + alpha * dhat);
        next.w.col(static_cast<Index>(i)) = sum.w.col(keep[i]);
    }
    return next;
}

}  // namespace fastkf
