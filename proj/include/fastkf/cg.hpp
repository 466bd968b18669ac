#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>

namespace fastkf {

struct CgResult {
    Eigen::VectorXd x;
    int iterations = 0;
    double residual = 0.0;  ///< final relative residual ||b - A x|| / ||b||
    bool converged = false;
};

/// Conjugate gradients for a symmetric positive definite operator given
/// only through its matvec.  Stops when the relative residual drops
/// below `tol` or after `max_iter` iterations.
template <class ApplyFn>
CgResult conjugate_gradient(ApplyFn&& apply, const Eigen::VectorXd& b,
                            double tol, int max_iter) {
    CgResult out;
    const double bnorm = b.norm();
    out.x = Eigen::VectorXd::Zero(b.size());
    if (bnorm == 0.0) {
        out.converged = true;
        return out;
    }

    Eigen::VectorXd r = b;
    Eigen::VectorXd p = r;
    double rs = r.squaredNorm();

    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd ap = apply(p);
        const double alpha = rs / p.dot(ap);
        out.x += alpha * p;
        r -= alpha * ap;
        const double rs_next = r.squaredNorm();
        out.iterations = it + 1;
        if (std::sqrt(rs_next) <= tol * bnorm) {
            out.residual = std::sqrt(rs_next) / bnorm;
            out.converged = true;
            return out;
        }
        p = r + (rs_next / rs) * p;
        rs = rs_next;
    }
    out.residual = std::sqrt(rs) / bnorm;
    out.converged = out.residual <= tol;
    return out;
}

}  // namespace fastkf
