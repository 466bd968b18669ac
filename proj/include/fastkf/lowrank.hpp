#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "covariance.hpp"
#include "grid.hpp"
#include "rng.hpp"

namespace fastkf {

using LinOp = std::function<Vector(const Vector&)>;

/// Eigenpairs of the generalized problem A x = λ Γ⁻¹ x.
/// Columns of u are Γ⁻¹-orthonormal: uᵀΓ⁻¹u = I.
struct GepResult {
    Matrix u;       ///< n × k basis
    Vector lambda;  ///< nonincreasing, nonnegative

    Index rank() const { return lambda.size(); }
};

/// Symmetric low-rank factorization W D Wᵀ with WᵀBW = I.
struct LowRankSym {
    Matrix w;
    Vector d;

    Index rank() const { return d.size(); }
};

struct BOrthoResult {
    Matrix q;                    ///< B-orthonormal basis
    Matrix bq;                   ///< B·q, cached for inner products
    Matrix coeff;                ///< q.cols() × v.cols() expansion coefficients
    std::vector<Index> dropped;  ///< input columns lost to rank deficiency
};

/// Modified Gram-Schmidt in the B inner product ⟨u, v⟩ = uᵀ(Bv), with one
/// full re-orthogonalization sweep (twice is enough).  Columns whose
/// post-projection B-norm falls below 1e-12 of their pre-projection B-norm
/// are dropped and reported.  When `against` is supplied the result is also
/// B-orthogonal to it; pass `b_against` to reuse cached B·against columns.
inline BOrthoResult b_orthonormalize(const Matrix& v, const LinOp& b_apply,
                                     const Matrix* against = nullptr,
                                     const Matrix* b_against = nullptr) {
    const Index n = v.rows();
    const Index m = v.cols();

    Matrix b_ag;
    if (against && !b_against) {
        b_ag.resize(n, against->cols());
        for (Index j = 0; j < against->cols(); ++j) b_ag.col(j) = b_apply(against->col(j));
        b_against = &b_ag;
    }

    BOrthoResult out;
    out.q.resize(n, m);
    out.bq.resize(n, m);
    out.coeff = Matrix::Zero(m, m);
    Index kept = 0;

    for (Index j = 0; j < m; ++j) {
        Vector w = v.col(j);
        if (!w.allFinite())
            throw std::invalid_argument("b_orthonormalize: column " + std::to_string(j) +
                                        " contains non-finite entries");
        const double pre_norm = std::sqrt(std::max(w.dot(b_apply(w)), 0.0));
        double norm = 0.0;
        Vector bw;
        for (int sweep = 0; sweep < 2; ++sweep) {
            if (against)
                for (Index i = 0; i < against->cols(); ++i)
                    w -= against->col(i) * b_against->col(i).dot(w);
            for (Index i = 0; i < kept; ++i) {
                const double c = out.bq.col(i).dot(w);
                w -= out.q.col(i) * c;
                out.coeff(i, j) += c;
            }
            bw = b_apply(w);
            norm = std::sqrt(std::max(w.dot(bw), 0.0));
        }
        if (norm <= 1e-12 * pre_norm || norm == 0.0) {
            out.dropped.push_back(j);
            continue;
        }
        out.q.col(kept) = w / norm;
        out.bq.col(kept) = bw / norm;
        out.coeff(kept, j) = norm;
        ++kept;
    }

    out.q.conservativeResize(n, kept);
    out.bq.conservativeResize(n, kept);
    out.coeff.conservativeResize(kept, m);
    return out;
}

namespace detail {

/// Single-pass core matrix T ≈ (ΩᵀQ̄)⁺ (ΩᵀȲ) (Q̄ᵀΩ)⁺ via least squares.
/// Returns nothing when ΩᵀQ̄ is numerically rank deficient, signalling the
/// caller to fall back to the two-pass formula.
inline std::optional<Matrix> single_pass_core(const Matrix& omega, const Matrix& ybar,
                                              const Matrix& qbar) {
    const Matrix g1 = omega.transpose() * qbar;   // (k+p) × kept
    Matrix g2 = omega.transpose() * ybar;         // (k+p) × (k+p), symmetric in theory
    g2 = 0.5 * (g2 + g2.transpose()).eval();

    Eigen::JacobiSVD<Matrix> svd(g1);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);
    if (!(smax > 0.0) || smin < 1e-12 * smax) return std::nullopt;

    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(g1);
    const Matrix left = cod.solve(g2);                      // (ΩᵀQ̄)⁺ G2
    Matrix t = cod.solve(left.transpose()).transpose();     // … (Q̄ᵀΩ)⁺
    return 0.5 * (t + t.transpose()).eval();
}

}  // namespace detail

enum class GhepMode { two_pass, single_pass };

/// Randomized solver for the generalized eigenproblem A x = λ Γ⁻¹ x with
/// A symmetric PSD, given through matvecs.  Sketches k + p Gaussian
/// columns, orthonormalizes A·Ω in the Γ inner product (so the metric work
/// is all fast covariance matvecs, no solves), and eigensolves the small
/// core matrix.  Two-pass forms T = QᵀAQ exactly; single-pass reuses the
/// sketch products and falls back to two-pass (with a warning) when the
/// core system is ill-conditioned.
inline GepResult randomized_ghep(const LinOp& a_apply, const LinOp& gamma_apply,
                                 Index n, Index k, Index p_oversample,
                                 std::uint64_t seed,
                                 GhepMode mode = GhepMode::two_pass) {
    if (k < 0 || p_oversample < 0)
        throw std::invalid_argument("randomized_ghep: k and oversampling must be nonnegative");
    const Index l = k + p_oversample;
    if (l > n)
        throw std::invalid_argument("randomized_ghep: k + oversampling = " +
                                    std::to_string(l) + " exceeds problem size " +
                                    std::to_string(n));
    GepResult out;
    out.u.resize(n, 0);
    out.lambda.resize(0);
    if (k == 0) return out;

    const Matrix omega = gaussian_matrix(n, l, seed);
    Matrix ybar(n, l);
    for (Index j = 0; j < l; ++j) ybar.col(j) = a_apply(omega.col(j));

    if (ybar.norm() == 0.0) return out;  // A = 0: empty spectrum

    BOrthoResult orth = b_orthonormalize(ybar, gamma_apply);
    if (orth.q.cols() == 0)
        throw std::runtime_error(
            "randomized_ghep: rank collapse — every sketch column was dropped "
            "during orthonormalization");

    // Q = Γ Q̄ is the B-orthonormal range basis for B = Γ⁻¹; it is exactly
    // the cached metric products of the orthonormalization.
    const Matrix& qbar = orth.q;
    const Matrix& q = orth.bq;

    Matrix t;
    bool use_two_pass = (mode == GhepMode::two_pass);
    if (!use_two_pass) {
        std::optional<Matrix> core = detail::single_pass_core(omega, ybar, qbar);
        if (core) {
            t = std::move(*core);
        } else {
            std::cerr << "randomized_ghep: single-pass core matrix is "
                         "ill-conditioned; falling back to two-pass\n";
            use_two_pass = true;
        }
    }
    if (use_two_pass) {
        Matrix aq(n, q.cols());
        for (Index j = 0; j < q.cols(); ++j) aq.col(j) = a_apply(q.col(j));
        t = q.transpose() * aq;
        t = 0.5 * (t + t.transpose()).eval();
    }

    Eigen::SelfAdjointEigenSolver<Matrix> es(t);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("randomized_ghep: core eigendecomposition failed");

    const Index kept = std::min<Index>(k, t.rows());
    out.lambda.resize(kept);
    out.u.resize(n, kept);
    for (Index i = 0; i < kept; ++i) {
        const Index src = t.rows() - 1 - i;  // descending order
        out.lambda[i] = std::max(es.eigenvalues()(src), 0.0);
        out.u.col(i) = q * es.eigenvectors().col(src);
    }
    return out;
}

inline GepResult randomized_ghep(const LinOp& a_apply, const CovarianceOperator& cov,
                                 Index k, Index p_oversample, std::uint64_t seed,
                                 GhepMode mode = GhepMode::two_pass) {
    return randomized_ghep(a_apply, [&cov](const Vector& x) { return cov.apply(x); },
                           cov.size(), k, p_oversample, seed, mode);
}

/// Per-pair residuals ‖A uᵢ − λᵢ Γ⁻¹uᵢ‖ / max(λᵢ‖Γ⁻¹uᵢ‖, ε).
inline Vector ghep_residual(const GepResult& result, const LinOp& a_apply,
                            const LinOp& gamma_inv_apply) {
    Vector res(result.rank());
    for (Index i = 0; i < result.rank(); ++i) {
        const Vector binv_u = gamma_inv_apply(result.u.col(i));
        const double scale = std::max(result.lambda[i] * binv_u.norm(),
                                      std::numeric_limits<double>::epsilon());
        res[i] = (a_apply(result.u.col(i)) - result.lambda[i] * binv_u).norm() / scale;
    }
    return res;
}

inline Vector ghep_residual(const GepResult& result, const LinOp& a_apply,
                            const CovarianceOperator& cov) {
    return ghep_residual(result, a_apply,
                         [&cov](const Vector& x) { return cov.inverse_apply(x); });
}

/// Adds two B-orthonormal symmetric low-rank factorizations,
/// U D_U Uᵀ + V D_V Vᵀ, returning a single B-orthonormal factorization.
/// Eigenvalues of the combined core matrix with |λ| < tol·max|λ| are
/// truncated; negative eigenvalues are legitimate and kept.
inline LowRankSym add_low_rank(const Matrix& u, const Vector& d_u, const Matrix& v,
                               const Vector& d_v, const LinOp& b_apply, double tol) {
    if (u.cols() != d_u.size() || v.cols() != d_v.size())
        throw std::invalid_argument("add_low_rank: basis/diagonal size mismatch");
    if (tol < 0.0)
        throw std::invalid_argument("add_low_rank: tol must be nonnegative");
    if (v.cols() == 0) return {u, d_u};
    if (u.cols() == 0) return {v, d_v};
    if (u.rows() != v.rows())
        throw std::invalid_argument("add_low_rank: row count mismatch");

    const Index ru = u.cols();
    Matrix bu(u.rows(), ru);
    for (Index j = 0; j < ru; ++j) bu.col(j) = b_apply(u.col(j));

    BOrthoResult orth = b_orthonormalize(v, b_apply, &u, &bu);
    const Matrix& vhat = orth.q;
    const Index rv_hat = vhat.cols();

    // V = U·C + V̂·R̂ in the B metric.
    const Matrix c = bu.transpose() * v;
    const Matrix r_hat = orth.bq.transpose() * v;

    Matrix m = Matrix::Zero(ru + rv_hat, ru + rv_hat);
    m.topLeftCorner(ru, ru) = Matrix(d_u.asDiagonal()) + c * d_v.asDiagonal() * c.transpose();
    m.topRightCorner(ru, rv_hat) = c * d_v.asDiagonal() * r_hat.transpose();
    m.bottomLeftCorner(rv_hat, ru) = m.topRightCorner(ru, rv_hat).transpose();
    m.bottomRightCorner(rv_hat, rv_hat) = r_hat * d_v.asDiagonal() * r_hat.transpose();
    m = 0.5 * (m + m.transpose()).eval();

    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("add_low_rank: core eigendecomposition failed");

    const double max_abs = es.eigenvalues().cwiseAbs().maxCoeff();
    std::vector<Index> keep;
    for (Index i = 0; i < es.eigenvalues().size(); ++i)
        if (std::abs(es.eigenvalues()(i)) >= tol * max_abs && es.eigenvalues()(i) != 0.0)
            keep.push_back(i);
    // Largest magnitude first, for a stable, informative ordering.
    std::sort(keep.begin(), keep.end(), [&es](Index a, Index b) {
        return std::abs(es.eigenvalues()(a)) > std::abs(es.eigenvalues()(b));
    });

    Matrix basis(u.rows(), ru + rv_hat);
    basis.leftCols(ru) = u;
    basis.rightCols(rv_hat) = vhat;

    LowRankSym out;
    out.w.resize(u.rows(), static_cast<Index>(keep.size()));
    out.d.resize(static_cast<Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.d[static_cast<Index>(i)] = es.eigenvalues()(keep[i]);
        out.w.col(static_cast<Index>(i)) = basis * es.eigenvectors().col(keep[i]);
    }
    return out;
}

}  // namespace fastkf
