#pragma once

#include <fftw3.h>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <atomic>
#include <cmath>
#include <complex>
#include <cstdint>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cg.hpp"
#include "grid.hpp"
#include "kernel.hpp"
#include "rng.hpp"

namespace fastkf {

enum class CovMode { fft, dense };
enum class RootSign { plus_half, minus_half };

namespace detail {

/// Smallest integer >= n whose prime factors are all in {2, 3, 5, 7}
/// (sizes FFTW handles at full speed).
inline int next_smooth(int n) {
    if (n <= 1) return 1;
    for (int m = n;; ++m) {
        int v = m;
        for (int f : {2, 3, 5, 7})
            while (v % f == 0) v /= f;
        if (v == 1) return m;
    }
}

struct FftwBuffer {
    fftw_complex* data = nullptr;
    explicit FftwBuffer(std::size_t n)
        : data(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n))) {
        if (!data) throw std::bad_alloc();
    }
    ~FftwBuffer() { fftw_free(data); }
    FftwBuffer(const FftwBuffer&) = delete;
    FftwBuffer& operator=(const FftwBuffer&) = delete;
};

}  // namespace detail

/// Stationary covariance operator Γ on a regular grid.
///
/// fft mode embeds the block-Toeplitz matrix into a block-circulant one on
/// a padded torus and applies it with FFTs in O(n_s log n_s); dense mode
/// materializes the full matrix (desk scale).  Square-root applications
/// and direct inverse applications are dense-mode features backed by a
/// lazily computed symmetric eigendecomposition / Cholesky factorization.
///
/// Immutable after construction and safe for concurrent use; FFT work
/// buffers are allocated per call.  Construction itself (FFTW planning)
/// is not thread-safe against other concurrent planning.
class CovarianceOperator {
public:
    CovarianceOperator(const Grid& grid, const KernelSpec& spec, CovMode mode)
        : grid_(grid), spec_(spec), mode_(mode) {
        grid_.validate();
        spec_.validate();
        if (mode_ == CovMode::fft)
            build_fft();
        else
            build_dense();
    }

    ~CovarianceOperator() {
        if (plan_fwd_) fftw_destroy_plan(plan_fwd_);
        if (plan_bwd_) fftw_destroy_plan(plan_bwd_);
    }

    // Pinned: lazily cached factorizations guard themselves with
    // std::once_flag, which cannot move.  Factory returns still work via
    // guaranteed copy elision; hold operators in std::optional or
    // std::unique_ptr when a movable handle is needed.
    CovarianceOperator(const CovarianceOperator&) = delete;
    CovarianceOperator& operator=(const CovarianceOperator&) = delete;
    CovarianceOperator(CovarianceOperator&&) = delete;
    CovarianceOperator& operator=(CovarianceOperator&&) = delete;

    const Grid& grid() const { return grid_; }
    const KernelSpec& spec() const { return spec_; }
    CovMode mode() const { return mode_; }
    Index size() const { return grid_.size(); }

    /// y = Γ x.
    Vector apply(const Vector& x) const {
        if (x.size() != size())
            throw std::invalid_argument("cov_apply: expected vector of length " +
                                        std::to_string(size()) + ", got " +
                                        std::to_string(x.size()));
        ++applies_;
        return mode_ == CovMode::fft ? apply_fft(x) : Vector(dense_ * x);
    }

    /// Column-wise apply.
    Matrix apply_matrix(const Matrix& xs) const {
        Matrix out(xs.rows(), xs.cols());
        for (Index j = 0; j < xs.cols(); ++j) out.col(j) = apply(xs.col(j));
        return out;
    }

    /// Solves Γ y = b by conjugate gradients on the fast matvec.
    /// Stops at relative residual `tol`; max iterations 10·√n_s.
    CgResult solve_info(const Vector& b, double tol = 1e-10) const {
        if (b.size() != size())
            throw std::invalid_argument("cov_solve: dimension mismatch");
        if (!(tol > 0.0) || tol >= 1.0)
            throw std::invalid_argument("cov_solve: tol must lie in (0, 1)");
        ++solves_;
        const int max_iter = static_cast<int>(10.0 * std::sqrt(double(size()))) + 10;
        return conjugate_gradient([this](const Vector& v) { return apply(v); }, b,
                                  tol, max_iter);
    }

    Vector solve(const Vector& b, double tol = 1e-10) const {
        CgResult res = solve_info(b, tol);
        if (!res.converged) {
            std::ostringstream msg;
            msg << "cov_solve: CG did not converge within " << res.iterations
                << " iterations; achieved relative residual " << res.residual
                << " (requested " << tol << ")";
            throw std::runtime_error(msg.str());
        }
        return std::move(res.x);
    }

    /// Direct Γ⁻¹ x.  Dense mode uses a cached Cholesky factorization;
    /// fft mode falls back to a tight CG solve.  Intended as the exact
    /// metric hook for B = Γ⁻¹ consumers.
    Vector inverse_apply(const Vector& x) const {
        if (mode_ == CovMode::dense) {
            ensure_llt();
            ++solves_;
            return llt_.solve(x);
        }
        return solve(x, 1e-12);
    }

    /// Γ^{±1/2} x via the symmetric eigendecomposition (dense mode only).
    Vector root_apply(const Vector& x, RootSign sign) const {
        if (mode_ != CovMode::dense)
            throw std::runtime_error(
                "cov_root_apply: square roots are unsupported in circulant-fft mode; "
                "build the operator in dense mode");
        if (x.size() != size())
            throw std::invalid_argument("cov_root_apply: dimension mismatch");
        ensure_eig();
        ++root_applies_;
        if (sign == RootSign::minus_half &&
            min_eig_ < 1e-14 * eig_values_.maxCoeff())
            throw std::runtime_error(
                "cov_root_apply: matrix too ill-conditioned for an inverse root "
                "(min/max eigenvalue ratio below 1e-14)");
        Vector proj = eig_vectors_.transpose() * x;
        if (sign == RootSign::plus_half)
            proj.array() *= eig_values_.array().sqrt();
        else
            proj.array() /= eig_values_.array().sqrt();
        return eig_vectors_ * proj;
    }

    /// Stationary kernels: diagonal is the constant κ(0) = θ.
    Vector diagonal() const { return Vector::Constant(size(), spec_.theta); }

    double trace() const { return double(size()) * spec_.theta; }

    /// One N(0, Γ) draw.  Deterministic in (seed, stream).
    Vector sample(std::uint64_t seed, std::uint64_t stream = 0) const {
        return sample_pair(seed, stream).first;
    }

    /// Two independent N(0, Γ) draws for the price of one FFT pass:
    /// real and imaginary parts of a circulant-embedding draw are
    /// independent samples.  Dense mode draws via the matrix square root.
    std::pair<Vector, Vector> sample_pair(std::uint64_t seed, std::uint64_t stream = 0) const {
        if (mode_ == CovMode::dense) {
            Vector a = root_apply(gaussian_vector(size(), seed, 2 * stream), RootSign::plus_half);
            Vector b = root_apply(gaussian_vector(size(), seed, 2 * stream + 1), RootSign::plus_half);
            return {std::move(a), std::move(b)};
        }
        return sample_pair_fft(seed, stream);
    }

    /// Full matrix (dense mode only).
    const Matrix& dense_matrix() const {
        if (mode_ != CovMode::dense)
            throw std::runtime_error("dense_matrix: operator built in circulant-fft mode");
        return dense_;
    }

    /// Embedding spectrum (fft mode only); exposed for diagnostics.
    const Vector& spectrum() const {
        if (mode_ != CovMode::fft)
            throw std::runtime_error("spectrum: operator built in dense mode");
        return spectrum_;
    }

    long apply_count() const { return applies_.load(); }
    long solve_count() const { return solves_.load(); }
    long root_apply_count() const { return root_applies_.load(); }

private:
    void build_dense() {
        const Index n = size();
        if (n > 5000)
            std::cerr << "covariance: dense mode with n_s = " << n
                      << " (> 5000); expect large memory and slow factorizations\n";
        dense_.resize(n, n);
        std::vector<Point> centers(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) centers[static_cast<std::size_t>(i)] = grid_.center(i);
        for (Index i = 0; i < n; ++i) {
            dense_(i, i) = spec_.theta;
            for (Index j = 0; j < i; ++j) {
                const double v = kernel_eval(
                    spec_, (centers[static_cast<std::size_t>(i)] -
                            centers[static_cast<std::size_t>(j)]).norm());
                dense_(i, j) = v;
                dense_(j, i) = v;
            }
        }
    }

    void build_fft() {
        const int base_x = std::max(2 * grid_.nx - 1, 1);
        const int base_y = std::max(2 * grid_.ny - 1, 1);
        double worst_ratio = 0.0;
        for (int pad = 1; pad <= 8; pad *= 2) {
            mx_ = detail::next_smooth(base_x * pad);
            my_ = detail::next_smooth(base_y * pad);
            if (try_spectrum(worst_ratio)) return;
        }
        std::ostringstream msg;
        msg << "covariance: circulant embedding is not nonnegative definite for kernel "
            << (spec_.family == KernelFamily::powered_exponential ? "powered-exponential"
                                                                  : "matern")
            << " (theta=" << spec_.theta << ", length=" << spec_.length;
        if (spec_.family == KernelFamily::powered_exponential)
            msg << ", power=" << spec_.power;
        else
            msg << ", nu=" << spec_.nu;
        msg << ") on grid " << grid_.nx << "x" << grid_.ny
            << " even after 8x padding (worst negative/max spectrum ratio "
            << worst_ratio << "); use dense mode or a shorter correlation length";
        throw std::runtime_error(msg.str());
    }

    /// Evaluates the padded circulant symbol, takes its FFT, and accepts it as
    /// a valid spectrum when negative values stay within roundoff of zero.
    bool try_spectrum(double& worst_ratio) {
        const std::size_t m = std::size_t(mx_) * std::size_t(my_);
        detail::FftwBuffer buf(m);
        const double dx = grid_.dx();
        const double dy = grid_.dy();
        for (int i = 0; i < mx_; ++i) {
            const double rx = std::min(i, mx_ - i) * dx;
            for (int j = 0; j < my_; ++j) {
                const double ry = std::min(j, my_ - j) * dy;
                const std::size_t idx = std::size_t(i) * my_ + j;
                buf.data[idx][0] = kernel_eval(spec_, std::hypot(rx, ry));
                buf.data[idx][1] = 0.0;
            }
        }
        fftw_plan plan = fftw_plan_dft_2d(mx_, my_, buf.data, buf.data,
                                          FFTW_FORWARD, FFTW_ESTIMATE);
        fftw_execute(plan);
        fftw_destroy_plan(plan);

        Vector spec(static_cast<Index>(m));
        double max_val = 0.0;
        double min_val = 0.0;
        for (std::size_t idx = 0; idx < m; ++idx) {
            spec[static_cast<Index>(idx)] = buf.data[idx][0];
            max_val = std::max(max_val, buf.data[idx][0]);
            min_val = std::min(min_val, buf.data[idx][0]);
        }
        if (max_val <= 0.0) return false;
        worst_ratio = std::max(worst_ratio, -min_val / max_val);
        if (min_val < -1e-10 * max_val) return false;

        spectrum_ = spec.cwiseMax(0.0);
        make_plans();
        return true;
    }

    void make_plans() {
        const std::size_t m = std::size_t(mx_) * std::size_t(my_);
        detail::FftwBuffer buf(m);
        plan_fwd_ = fftw_plan_dft_2d(mx_, my_, buf.data, buf.data,
                                     FFTW_FORWARD, FFTW_ESTIMATE);
        plan_bwd_ = fftw_plan_dft_2d(mx_, my_, buf.data, buf.data,
                                     FFTW_BACKWARD, FFTW_ESTIMATE);
    }

    Vector apply_fft(const Vector& x) const {
        const std::size_t m = std::size_t(mx_) * std::size_t(my_);
        detail::FftwBuffer buf(m);
        std::fill_n(&buf.data[0][0], 2 * m, 0.0);
        for (int i = 0; i < grid_.nx; ++i)
            for (int j = 0; j < grid_.ny; ++j)
                buf.data[std::size_t(i) * my_ + j][0] = x[grid_.index(i, j)];

        fftw_execute_dft(plan_fwd_, buf.data, buf.data);
        for (std::size_t idx = 0; idx < m; ++idx) {
            buf.data[idx][0] *= spectrum_[static_cast<Index>(idx)];
            buf.data[idx][1] *= spectrum_[static_cast<Index>(idx)];
        }
        fftw_execute_dft(plan_bwd_, buf.data, buf.data);

        Vector out(size());
        const double scale = 1.0 / double(m);
        for (int i = 0; i < grid_.nx; ++i)
            for (int j = 0; j < grid_.ny; ++j)
                out[grid_.index(i, j)] = buf.data[std::size_t(i) * my_ + j][0] * scale;
        return out;
    }

    std::pair<Vector, Vector> sample_pair_fft(std::uint64_t seed, std::uint64_t stream) const {
        const std::size_t m = std::size_t(mx_) * std::size_t(my_);
        detail::FftwBuffer buf(m);
        Rng rng_re(seed, 2 * stream);
        Rng rng_im(seed, 2 * stream + 1);
        const double scale = 1.0 / std::sqrt(double(m));
        for (std::size_t idx = 0; idx < m; ++idx) {
            const double amp = std::sqrt(spectrum_[static_cast<Index>(idx)]);
            buf.data[idx][0] = amp * rng_re.normal();
            buf.data[idx][1] = amp * rng_im.normal();
        }
        fftw_execute_dft(plan_bwd_, buf.data, buf.data);
        Vector a(size());
        Vector b(size());
        for (int i = 0; i < grid_.nx; ++i)
            for (int j = 0; j < grid_.ny; ++j) {
                const std::size_t idx = std::size_t(i) * my_ + j;
                a[grid_.index(i, j)] = buf.data[idx][0] * scale;
                b[grid_.index(i, j)] = buf.data[idx][1] * scale;
            }
        return {std::move(a), std::move(b)};
    }

    void ensure_eig() const {
        std::call_once(eig_once_, [this] {
            Eigen::SelfAdjointEigenSolver<Matrix> es(dense_);
            if (es.info() != Eigen::Success)
                throw std::runtime_error("covariance: eigendecomposition failed");
            eig_values_ = es.eigenvalues();
            eig_vectors_ = es.eigenvectors();
            const double max_ev = eig_values_.maxCoeff();
            min_eig_ = eig_values_.minCoeff();
            if (min_eig_ < -1e-10 * max_ev)
                throw std::runtime_error(
                    "covariance: dense matrix is not positive semidefinite "
                    "(min eigenvalue " + std::to_string(min_eig_) + ")");
            eig_values_ = eig_values_.cwiseMax(1e-300 * max_ev);
        });
    }

    void ensure_llt() const {
        std::call_once(llt_once_, [this] {
            llt_.compute(dense_);
            if (llt_.info() != Eigen::Success)
                throw std::runtime_error("covariance: Cholesky factorization failed");
        });
    }

    Grid grid_;
    KernelSpec spec_;
    CovMode mode_;

    // fft mode
    int mx_ = 0;
    int my_ = 0;
    Vector spectrum_;
    fftw_plan plan_fwd_ = nullptr;
    fftw_plan plan_bwd_ = nullptr;

    // dense mode
    Matrix dense_;
    mutable Matrix eig_vectors_;
    mutable Vector eig_values_;
    mutable double min_eig_ = 0.0;
    mutable Eigen::LLT<Matrix> llt_;
    mutable std::once_flag eig_once_;
    mutable std::once_flag llt_once_;

    mutable std::atomic<long> applies_{0};
    mutable std::atomic<long> solves_{0};
    mutable std::atomic<long> root_applies_{0};
};

/// Builds a covariance operator; thin named constructor mirroring the
/// (grid, kernel, mode) configuration surface.
inline CovarianceOperator build_operator(const Grid& grid, const KernelSpec& spec,
                                         CovMode mode) {
    return CovarianceOperator(grid, spec, mode);
}

}  // namespace fastkf
