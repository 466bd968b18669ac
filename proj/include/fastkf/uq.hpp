#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

#include "covariance.hpp"
#include "fast_filter.hpp"
#include "grid.hpp"

namespace fastkf {

/// Pointwise posterior variance diag(Σ) = α·diag(Γ) − Σ_j D_j W[:,j]²,
/// at O(r·n_s) without touching the full covariance.
inline Vector variance(const LowRankState& state, const CovarianceOperator& cov) {
    if (state.mean.size() != cov.size())
        throw std::invalid_argument("variance: state does not match operator size");
    Vector out = state.alpha * cov.diagonal();
    if (state.rank() > 0)
        out.noalias() -= state.w.array().square().matrix() * state.d;
    return out;
}

/// A-optimality criterion with A = I: φ = α·tr(Γ) − Σ_j D_j‖W[:,j]‖².
/// Euclidean column norms — Γ⁻¹-orthonormality does not normalize them.
inline double trace_criterion(const LowRankState& state, const CovarianceOperator& cov) {
    if (state.mean.size() != cov.size())
        throw std::invalid_argument("trace_criterion: state does not match operator size");
    double out = state.alpha * cov.trace();
    for (Index j = 0; j < state.rank(); ++j)
        out -= state.d[j] * state.w.col(j).squaredNorm();
    return out;
}

/// Relative entropy between the filtered state and the system-noise prior,
/// ½(log det Σ − log det Γ).  With Σ = αΓ − WDWᵀ and WᵀΓ⁻¹W = I, Sylvester's
/// identity collapses it to ½[(n_s − r)·ln α + Σ_i ln(α − D_i)].
inline double relative_entropy(const LowRankState& state) {
    if (!(state.alpha > 0.0))
        throw std::invalid_argument("relative_entropy: requires alpha > 0");
    const Index n = state.mean.size();
    double sum = (double(n) - double(state.rank())) * std::log(state.alpha);
    for (Index i = 0; i < state.rank(); ++i) {
        const double gap = state.alpha - state.d[i];
        if (!(gap > 0.0))
            throw std::runtime_error("relative_entropy: D_" + std::to_string(i) +
                                     " = " + std::to_string(state.d[i]) +
                                     " is not below alpha = " + std::to_string(state.alpha));
        sum += std::log(gap);
    }
    return 0.5 * sum;
}

namespace detail {

/// Σ₋ = I − (I − α⁻¹D)^{1/2}, the square-root branch that keeps
/// I − WΣ₋Wᵀ positive semidefinite.
inline Vector sigma_minus(const LowRankState& state) {
    Vector s(state.rank());
    for (Index i = 0; i < state.rank(); ++i)
        s[i] = 1.0 - std::sqrt(std::max(1.0 - state.d[i] / state.alpha, 0.0));
    return s;
}

}  // namespace detail

/// Draws ŝ + L s_u with L = √α(Γ^{1/2} − U Σ₋ UᵀΓ^{−1/2}), an exact square
/// root of Σ = αΓ − WDWᵀ.  Requires a dense-mode operator for the roots.
inline Vector conditional_sample(const LowRankState& state, const CovarianceOperator& cov,
                                 const Vector& s_u) {
    if (s_u.size() != state.mean.size())
        throw std::invalid_argument("conditional_sample: s_u length mismatch");
    if (state.alpha == 0.0) return state.mean;  // Σ = 0: degenerate start

    const double root_alpha = std::sqrt(state.alpha);
    Vector draw = root_alpha * cov.root_apply(s_u, RootSign::plus_half);
    if (state.rank() > 0) {
        const Vector z2 = cov.root_apply(s_u, RootSign::minus_half);
        const Vector proj = detail::sigma_minus(state).cwiseProduct(state.w.transpose() * z2);
        draw.noalias() -= root_alpha * (state.w * proj);
    }
    return state.mean + draw;
}

/// Pushes one fixed standard-normal draw s_u through a whole sequence of
/// filter states: the two root applications Γ^{±1/2}s_u happen once here,
/// and each state costs only O(r·n_s) afterwards.
class RealizationPropagator {
public:
    RealizationPropagator(const CovarianceOperator& cov, Vector s_u)
        : z1_(cov.root_apply(s_u, RootSign::plus_half)),
          z2_(cov.root_apply(s_u, RootSign::minus_half)) {}

    Vector at(const LowRankState& state) const {
        if (state.mean.size() != z1_.size())
            throw std::invalid_argument("propagate_realization: state size mismatch");
        if (state.alpha == 0.0) return state.mean;
        const double root_alpha = std::sqrt(state.alpha);
        Vector draw = root_alpha * z1_;
        if (state.rank() > 0) {
            const Vector proj =
                detail::sigma_minus(state).cwiseProduct(state.w.transpose() * z2_);
            draw.noalias() -= root_alpha * (state.w * proj);
        }
        return state.mean + draw;
    }

private:
    Vector z1_;  ///< Γ^{1/2} s_u
    Vector z2_;  ///< Γ^{−1/2} s_u
};

}  // namespace fastkf
