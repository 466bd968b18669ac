#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fastkf {

enum class KernelFamily { powered_exponential, matern };

/// Isotropic covariance kernel spec.
///
/// powered_exponential:  k(r) = theta * exp(-(r/length)^power)
/// matern:               k(r) = theta * 2^(1-nu)/Gamma(nu) * (s*r)^nu * K_nu(s*r)
/// with s = sqrt(2*nu) * alpha_scale.  alpha_scale <= 0 selects the
/// default 1/length.  At nu = 1/2 the Matern kernel reduces to
/// theta * exp(-alpha_scale * r).
struct KernelSpec {
    KernelFamily family = KernelFamily::powered_exponential;
    double theta = 1.0;     ///< sill (variance at lag zero)
    double length = 0.2;    ///< correlation length
    double power = 1.0;     ///< exponent p in (0, 2] (powered-exponential only)
    double nu = 0.5;        ///< smoothness (Matern only)
    double alpha_scale = 0; ///< inverse-scale a (Matern only); <= 0 means 1/length

    void validate() const {
        if (!(theta > 0.0))
            throw std::invalid_argument("kernel: theta must be positive, got " +
                                        std::to_string(theta));
        if (!(length > 0.0))
            throw std::invalid_argument("kernel: length must be positive, got " +
                                        std::to_string(length));
        if (family == KernelFamily::powered_exponential) {
            if (!(power > 0.0) || power > 2.0)
                throw std::invalid_argument("kernel: power must lie in (0, 2], got " +
                                            std::to_string(power));
        } else {
            if (!(nu > 0.0))
                throw std::invalid_argument("kernel: nu must be positive, got " +
                                            std::to_string(nu));
        }
    }

    double scale() const {
        return alpha_scale > 0.0 ? alpha_scale : 1.0 / length;
    }
};

/// Evaluates the kernel at separation distance r >= 0.
inline double kernel_eval(const KernelSpec& spec, double r) {
    spec.validate();
    if (r < 0.0) throw std::invalid_argument("kernel: distance must be nonnegative");
    if (r == 0.0) return spec.theta;

    if (spec.family == KernelFamily::powered_exponential)
        return spec.theta * std::exp(-std::pow(r / spec.length, spec.power));

    const double arg = std::sqrt(2.0 * spec.nu) * spec.scale() * r;
    if (arg > 700.0) return 0.0;  // K_nu underflows
    const double pref = std::exp((1.0 - spec.nu) * std::numbers::ln2 - std::lgamma(spec.nu));
    return spec.theta * pref * std::pow(arg, spec.nu) * std::cyl_bessel_k(spec.nu, arg);
}

}  // namespace fastkf
