#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <fastkf/boxcox.hpp>
#include <fastkf/covariance.hpp>
#include <fastkf/dense_filter.hpp>
#include <fastkf/fast_filter.hpp>
#include <fastkf/rng.hpp>
#include <fastkf/tomography.hpp>

#include "oracles.hpp"

using namespace fastkf;

namespace {

KernelSpec experiment_kernel(double theta = 1e-4, double power = 0.5) {
    KernelSpec spec;
    spec.theta = theta;
    spec.length = 0.2;
    spec.power = power;
    return spec;
}

struct Problem {
    Grid grid;
    SparseRowMatrix h;
    CovarianceOperator cov;
    CovarianceOperator cov_dense;
    Matrix gamma;
    std::vector<Vector> obs;
    double sigma2;

    Problem(int nx, int ny, int n_sou, int n_rec, int n_steps, double sigma2_in,
            const KernelSpec& kernel = experiment_kernel())
        : grid(nx, ny),
          h(build_H(grid, SourceReceiverLayout::cross_well(grid, n_sou, n_rec))),
          cov(grid, kernel, CovMode::fft),
          cov_dense(grid, kernel, CovMode::dense),
          gamma(oracle::kernel_matrix(grid, kernel)),
          sigma2(sigma2_in) {
        PlumeModel plume;
        for (int k = 1; k <= n_steps; ++k)
            obs.push_back(simulate_observations(h, plume.field(grid, 3.0 * k), sigma2,
                                                derive_seed(77, k)));
    }
};

}  // namespace

TEST_CASE("dense filter matches the hand-written scalar recursion", "[dense]") {
    const Grid grid(1, 1);
    KernelSpec spec;
    spec.theta = 0.3;
    spec.length = 0.2;
    spec.power = 1.0;
    const CovarianceOperator cov(grid, spec, CovMode::dense);

    SparseRowMatrix h(1, 1);
    h.insert(0, 0) = 1.7;
    h.makeCompressed();
    const double r = 0.05;

    DenseFilterState state = dense_kf_init(1);
    double mean = 0.0, var = 0.0;
    Rng rng(123, 0);
    for (int k = 0; k < 6; ++k) {
        Vector y(1);
        y << rng.normal();
        state = dense_kf_step(state, h, y, cov, r);

        const double var_pred = var + 0.3;
        const double s = 1.7 * var_pred * 1.7 + r;
        const double gain = var_pred * 1.7 / s;
        mean += gain * (y[0] - 1.7 * mean);
        var = var_pred - gain * 1.7 * var_pred;

        CHECK(std::abs(state.mean[0] - mean) <= 1e-14 * std::max(1.0, std::abs(mean)));
        CHECK(std::abs(state.cov(0, 0) - var) <= 1e-14);
    }
}

TEST_CASE("dense filter ignores infinitely noisy data", "[dense]") {
    Problem p(8, 8, 2, 4, 1, 2e-4);
    DenseFilterState state = dense_kf_init(p.grid.size());
    state.mean = gaussian_vector(p.grid.size(), 3);
    state.cov = p.gamma;  // pretend one step has passed

    const double huge = 1e12 * (Matrix(p.h * p.gamma * p.h.transpose())).norm();
    const DenseFilterState next = dense_kf_step(state, p.h, p.obs[0], p.cov_dense, huge);
    CHECK(oracle::rel_err(next.mean, state.mean) < 1e-9);
    CHECK(oracle::rel_err(next.cov, Matrix(state.cov + p.gamma)) < 1e-9);
}

TEST_CASE("first dense step from a zero state uses the system covariance",
          "[dense]") {
    Problem p(8, 8, 2, 4, 1, 2e-4);
    const DenseFilterState next =
        dense_kf_step(dense_kf_init(p.grid.size()), p.h, p.obs[0], p.cov_dense, p.sigma2);

    const Matrix hp = p.h * p.gamma;
    const Matrix s = hp * p.h.transpose() +
                     p.sigma2 * Matrix::Identity(p.h.rows(), p.h.rows());
    const Eigen::LLT<Matrix> llt(s);
    const Matrix want_cov = p.gamma - hp.transpose() * llt.solve(hp);
    const Vector want_mean = hp.transpose() * llt.solve(p.obs[0]);

    CHECK(oracle::rel_err(next.cov, want_cov) < 1e-12);
    CHECK(oracle::rel_err(next.mean, want_mean) < 1e-12);
    CHECK(next.step == 1);
}

TEST_CASE("offline stage reconstructs the information operator", "[fkf]") {
    Problem p(20, 20, 4, 6, 1, 2e-4);
    const FkfContext ctx = fkf_init(p.cov, p.h, p.sigma2, 24, 20, 5);
    REQUIRE(ctx.gep.rank() == 24);

    const Matrix a = Matrix(p.h.transpose() * p.h) / p.sigma2;
    const Eigen::LDLT<Matrix> gamma_ldlt(p.gamma);
    const Matrix ginv_u = gamma_ldlt.solve(ctx.gep.u);
    const Matrix recon = ginv_u * ctx.gep.lambda.asDiagonal() * ginv_u.transpose();
    CHECK((recon - a).norm() <= 1e-8 * a.norm());

    // cross covariance formed by fast matvecs
    CHECK(oracle::rel_err(ctx.gamma_ht, Matrix(p.gamma * p.h.transpose())) < 1e-11);
}

TEST_CASE("a zero measurement operator produces a zero-rank decomposition",
          "[fkf]") {
    const Grid grid(6, 6);
    const CovarianceOperator cov(grid, experiment_kernel(), CovMode::fft);
    SparseRowMatrix h(4, grid.size());
    h.makeCompressed();  // stays empty

    const FkfContext ctx = fkf_init(cov, h, 2e-4, 4, 10, 7);
    CHECK(ctx.gep.rank() == 0);

    LowRankState state = LowRankState::zero_start(grid.size());
    state = fkf_step(state, ctx, Vector::Zero(4));
    CHECK(state.alpha == 1.0);
    CHECK(state.rank() == 0);
    CHECK(state.mean.norm() == 0.0);
}

TEST_CASE("first-step diagonal matches the eigenbasis closed form", "[fkf]") {
    Problem p(10, 10, 2, 4, 1, 2e-4);
    const FkfContext ctx = fkf_init(p.cov, p.h, p.sigma2, 8, 20, 9);
    REQUIRE(ctx.gep.rank() == 8);

    const LowRankState s1 =
        fkf_step(LowRankState::zero_start(p.grid.size()), ctx, p.obs[0]);

    // d_0 = 0, alpha_1 = 1: the update must give lambda/(1+lambda) per mode.
    for (Index i = 0; i < 8; ++i) {
        const double lambda = ctx.gep.lambda[i];
        CHECK(oracle::rel_err(s1.d[i], lambda / (1.0 + lambda)) < 1e-12);
    }
}

TEST_CASE("full-rank fast filter tracks the dense filter exactly", "[fkf]") {
    Problem p(12, 12, 3, 8, 10, 2e-4);
    const Index n_m = p.h.rows();
    const FkfContext ctx = fkf_init(p.cov, p.h, p.sigma2, n_m, 20, 11);
    REQUIRE(ctx.gep.rank() == n_m);

    LowRankState fast = LowRankState::zero_start(p.grid.size());
    DenseFilterState dense = dense_kf_init(p.grid.size());
    const Eigen::LDLT<Matrix> gamma_ldlt(p.gamma);

    Vector d_prev = Vector::Zero(n_m);
    for (std::size_t k = 0; k < p.obs.size(); ++k) {
        fast = fkf_step(fast, ctx, p.obs[k]);
        dense = dense_kf_step(dense, p.h, p.obs[k], p.cov_dense, p.sigma2);

        CHECK(oracle::rel_err(fast.mean, dense.mean) < 1e-8);
        CHECK(oracle::rel_err(oracle::low_rank_cov(fast, p.gamma), dense.cov) < 1e-8);

        // representation invariants
        CHECK(fast.alpha == double(k + 1));
        CHECK(fast.d.minCoeff() >= 0.0);
        CHECK(fast.d.maxCoeff() < fast.alpha);
        const Matrix gram = fast.w.transpose() * gamma_ldlt.solve(fast.w);
        CHECK((gram - Matrix::Identity(n_m, n_m)).norm() < 1e-10);

        // information accumulates mode-wise
        for (Index i = 0; i < n_m; ++i) CHECK(fast.d[i] >= d_prev[i] - 1e-14);
        d_prev = fast.d;
    }
}

TEST_CASE("fast filter rejects mismatched state bases", "[fkf]") {
    Problem p(6, 6, 2, 3, 1, 2e-4);
    const FkfContext ctx = fkf_init(p.cov, p.h, p.sigma2, 6, 10, 13);
    LowRankState state = LowRankState::zero_start(p.grid.size());
    state.alpha = 1.0;
    state.d = Vector::Ones(2) * 0.1;  // wrong rank for this context
    state.w = Matrix::Zero(p.grid.size(), 2);
    CHECK_THROWS_AS(fkf_step(state, ctx, p.obs[0]), std::invalid_argument);
}

TEST_CASE("box-cox transform pair and derivative", "[boxcox]") {
    const BoxCox t{2.5};
    const Vector s = Vector::LinSpaced(9, 0.1, 4.0);
    CHECK(oracle::rel_err(t.inverse(t.forward(s)), s) < 1e-12);
    CHECK(t.forward(1.0) == 0.0);

    // alpha -> infinity approaches log
    const BoxCox big{1e6};
    CHECK(std::abs(big.forward(std::exp(1.0)) - 1.0) < 1e-5);

    // derivative against central differences
    const double eps = 1e-6;
    for (double x : {-0.5, 0.0, 0.8, 3.0}) {
        const double numeric = (t.inverse(x + eps) - t.inverse(x - eps)) / (2.0 * eps);
        CHECK(oracle::rel_err(t.derivative(x), numeric) < 1e-7);
    }

    // identity case is exact
    const BoxCox one{1.0};
    CHECK(one.forward(0.37) == 0.37 - 1.0);
    CHECK(one.inverse(0.37) == 0.37 + 1.0);
    CHECK(one.derivative(-0.2) == 1.0);
}

TEST_CASE("box-cox domain violations carry the component index", "[boxcox]") {
    const BoxCox t{2.0};
    Vector bad(3);
    bad << 0.0, -5.0, 1.0;  // (x + alpha)/alpha < 0 at index 1
    try {
        t.inverse(bad);
        FAIL("expected domain violation");
    } catch (const std::domain_error& e) {
        CHECK(std::string(e.what()).find('1') != std::string::npos);
    }
    CHECK_THROWS_AS(BoxCox{0.0}.validate(), std::invalid_argument);
}

TEST_CASE("linearization reduces to H in the linear case and is first-order accurate",
          "[boxcox]") {
    const Grid grid(8, 8);
    const SparseRowMatrix h = build_H(grid, SourceReceiverLayout::cross_well(grid, 2, 4));
    const Vector mean = Vector::Constant(grid.size(), 0.2);

    const auto [h1, y1] = ekf_linearize(h, mean, BoxCox{1.0});
    CHECK((Matrix(h1) - Matrix(h)).norm() == 0.0);
    CHECK(oracle::rel_err(y1, Vector(h * BoxCox{1.0}.inverse(mean))) < 1e-14);

    const BoxCox t{3.0};
    const auto [hk, y0] = ekf_linearize(h, mean, t);
    const Vector v = gaussian_vector(grid.size(), 15);
    const auto remainder = [&](double eps) {
        const Vector shifted = mean + eps * v;
        return (Vector(h * t.inverse(shifted)) - y0 - eps * (hk * v)).norm();
    };
    const double r1 = remainder(1e-2), r2 = remainder(1e-3);
    CHECK(r1 / r2 > 50.0);  // quadratic remainder: ratio would be ~100
    CHECK(r1 / r2 < 200.0);
}

TEST_CASE("extended fast filter reduces to the linear fast filter", "[fekf]") {
    Problem p(10, 10, 2, 4, 8, 2e-4);
    const Index n_m = p.h.rows();
    const FkfContext ctx = fkf_init(p.cov, p.h, p.sigma2, n_m, 20, 17);

    FekfOptions opts;
    opts.k_rank = n_m;
    opts.oversampling = 20;
    opts.trunc_tol = 0.0;
    const BoxCox identity{1.0};

    LowRankState fast = LowRankState::zero_start(p.grid.size());
    LowRankState ext = LowRankState::zero_start(p.grid.size());
    ext.mean = Vector::Constant(p.grid.size(), identity.forward(0.0));

    for (std::size_t k = 0; k < p.obs.size(); ++k) {
        opts.seed = derive_seed(900, k);
        fast = fkf_step(fast, ctx, p.obs[k]);
        ext = fekf_step(ext, p.cov, p.h, p.obs[k], p.sigma2, identity, opts);

        CHECK(oracle::rel_err(identity.inverse(ext.mean), fast.mean) < 1e-8);
        CHECK(oracle::rel_err(oracle::low_rank_cov(ext, p.gamma),
                              oracle::low_rank_cov(fast, p.gamma)) < 1e-8);
    }
}

TEST_CASE("extended fast filter matches the dense extended filter", "[fekf]") {
    const double theta = 1e-4;
    Problem p(8, 8, 2, 4, 5, 2e-4, experiment_kernel(theta));
    const BoxCox t{2.0};
    const double init_slowness = 1e-4;

    FekfOptions opts;
    opts.k_rank = p.h.rows();
    opts.oversampling = 20;
    opts.trunc_tol = 0.0;

    LowRankState fast = LowRankState::zero_start(p.grid.size());
    fast.mean = Vector::Constant(p.grid.size(), t.forward(init_slowness));
    DenseFilterState dense = dense_kf_init(p.grid.size());
    dense.mean = fast.mean;

    for (std::size_t k = 0; k < p.obs.size(); ++k) {
        opts.seed = derive_seed(901, k);
        fast = fekf_step(fast, p.cov, p.h, p.obs[k], p.sigma2, t, opts);
        dense = dense_ekf_step(dense, p.h, p.obs[k], p.cov_dense, p.sigma2, t, 1);

        CHECK(oracle::rel_err(fast.mean, dense.mean) < 1e-6);
        CHECK(oracle::rel_err(oracle::low_rank_cov(fast, p.gamma), dense.cov) < 1e-6);
        CHECK(fast.d.minCoeff() >= 0.0);
        CHECK(fast.d.maxCoeff() < fast.alpha);
    }
}

TEST_CASE("relinearization sweeps agree between fast and dense variants",
          "[fekf]") {
    Problem p(8, 8, 2, 4, 3, 2e-4);
    const BoxCox t{4.0};

    FekfOptions opts;
    opts.k_rank = p.h.rows();
    opts.oversampling = 20;
    opts.trunc_tol = 0.0;
    opts.relinearizations = 3;

    LowRankState fast = LowRankState::zero_start(p.grid.size());
    fast.mean = Vector::Constant(p.grid.size(), t.forward(1e-4));
    DenseFilterState dense = dense_kf_init(p.grid.size());
    dense.mean = fast.mean;

    for (std::size_t k = 0; k < p.obs.size(); ++k) {
        opts.seed = derive_seed(902, k);
        fast = fekf_step(fast, p.cov, p.h, p.obs[k], p.sigma2, t, opts);
        dense = dense_ekf_step(dense, p.h, p.obs[k], p.cov_dense, p.sigma2, t, 3);
        CHECK(oracle::rel_err(fast.mean, dense.mean) < 1e-6);
    }
    CHECK_THROWS_AS(dense_ekf_step(dense, p.h, p.obs[0], p.cov_dense, p.sigma2, t, 9),
                    std::invalid_argument);
}

TEST_CASE("truncation keeps the extended filter's rank bounded", "[fekf]") {
    Problem p(12, 12, 3, 8, 6, 2e-4, experiment_kernel(1e-5, 1.0));
    FekfOptions opts;
    opts.k_rank = p.h.rows();
    opts.trunc_tol = 1e-5;

    LowRankState state = LowRankState::zero_start(p.grid.size());
    state.mean = Vector::Constant(p.grid.size(), BoxCox{2.0}.forward(1e-4));
    Index prev_rank = 0;
    for (std::size_t k = 0; k < p.obs.size(); ++k) {
        opts.seed = derive_seed(903, k);
        state = fekf_step(state, p.cov, p.h, p.obs[k], p.sigma2, BoxCox{2.0}, opts);
        CHECK(state.rank() <= prev_rank + p.h.rows());
        CHECK(state.rank() <= p.grid.size());
        prev_rank = state.rank();
    }
    // with tol 1e-5 the rank must sit well below the no-truncation count
    CHECK(prev_rank < Index(p.obs.size()) * p.h.rows());
}
