#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "grid.hpp"

namespace fastkf {

/// Box-Cox power transform ŝ = α(s^{1/α} − 1), used to enforce positivity
/// of the physical state: the filter runs on ŝ while s = ((ŝ+α)/α)^α stays
/// positive.  α = 1 is the shifted identity; α → ∞ approaches log(s).
struct BoxCox {
    double alpha = 1.0;

    void validate() const {
        if (!(alpha > 0.0))
            throw std::invalid_argument("boxcox: alpha must be positive, got " +
                                        std::to_string(alpha));
    }

    double forward(double s) const {
        validate();
        if (alpha == 1.0) return s - 1.0;  // shifted identity, defined on all of R
        if (s < 0.0)
            throw std::domain_error("boxcox: forward transform requires s >= 0");
        return alpha * (std::pow(s, 1.0 / alpha) - 1.0);
    }

    double inverse(double shat) const {
        validate();
        if (alpha == 1.0) return shat + 1.0;
        const double base = (shat + alpha) / alpha;
        if (base < 0.0)
            throw std::domain_error("boxcox: inverse transform requires (shat + alpha)/alpha >= 0");
        return std::pow(base, alpha);
    }

    /// ∂s/∂ŝ = ((ŝ + α)/α)^{α−1}.
    double derivative(double shat) const {
        validate();
        if (alpha == 1.0) return 1.0;
        const double base = (shat + alpha) / alpha;
        if (base < 0.0)
            throw std::domain_error("boxcox: derivative requires (shat + alpha)/alpha >= 0");
        return std::pow(base, alpha - 1.0);
    }

    Vector forward(const Vector& s) const { return map(s, &BoxCox::forward, "forward"); }
    Vector inverse(const Vector& shat) const { return map(shat, &BoxCox::inverse, "inverse"); }
    Vector derivative(const Vector& shat) const {
        return map(shat, &BoxCox::derivative, "derivative");
    }

private:
    Vector map(const Vector& x, double (BoxCox::*fn)(double) const,
               const char* what) const {
        Vector out(x.size());
        for (Index i = 0; i < x.size(); ++i) {
            try {
                out[i] = (this->*fn)(x[i]);
            } catch (const std::domain_error&) {
                throw std::domain_error("boxcox: " + std::string(what) +
                                        " domain violation at index " + std::to_string(i) +
                                        " (value " + std::to_string(x[i]) + ")");
            }
            if (!std::isfinite(out[i]))
                throw std::domain_error("boxcox: " + std::string(what) +
                                        " produced a non-finite value at index " +
                                        std::to_string(i));
        }
        return out;
    }
};

/// Linearizes the travel-time observation about the transform-domain mean:
/// H_k = H·diag(∂s/∂ŝ) and the predicted observation h(ŝ) = H·s(ŝ).
/// The sparsity pattern of H is preserved.
inline std::pair<SparseRowMatrix, Vector> ekf_linearize(const SparseRowMatrix& h,
                                                        const Vector& mean,
                                                        const BoxCox& transform) {
    if (h.cols() != mean.size())
        throw std::invalid_argument("ekf_linearize: mean length does not match H columns");
    const Vector jac = transform.derivative(mean);
    SparseRowMatrix h_k = h * jac.asDiagonal();
    Vector h_of_mean = h * transform.inverse(mean);
    return {std::move(h_k), std::move(h_of_mean)};
}

}  // namespace fastkf
