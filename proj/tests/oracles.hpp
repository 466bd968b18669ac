#pragma once

// Shared oracle computations for the test suite.  Everything here is built
// independently of the library's fast paths (dense matrices, closed forms,
// Eigen factorizations) so the fast implementations have something honest to
// be checked against.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include <fastkf/covariance.hpp>
#include <fastkf/fast_filter.hpp>
#include <fastkf/grid.hpp>
#include <fastkf/kernel.hpp>
#include <fastkf/lowrank.hpp>

namespace oracle {

using fastkf::Grid;
using fastkf::Index;
using fastkf::Matrix;
using fastkf::Vector;

/// Dense kernel matrix assembled directly from pairwise distances, bypassing
/// CovarianceOperator entirely.
inline Matrix kernel_matrix(const Grid& grid, const fastkf::KernelSpec& spec) {
    const Index n = grid.size();
    Matrix gamma(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j <= i; ++j) {
            const double r = (grid.center(i) - grid.center(j)).norm();
            gamma(i, j) = gamma(j, i) = fastkf::kernel_eval(spec, r);
        }
    return gamma;
}

/// Symmetric PSD square root via eigendecomposition.
inline Matrix sym_sqrt(const Matrix& a) {
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
    return eig.eigenvectors() *
           eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           eig.eigenvectors().transpose();
}

struct DenseGhep {
    Matrix u;       // B-orthonormal eigenvectors for B = Γ⁻¹ (uᵀΓ⁻¹u = I)
    Vector lambda;  // descending
};

/// Solves A u = λ Γ⁻¹ u densely: substitute u = Γ^{1/2} w, eigensolve
/// Γ^{1/2} A Γ^{1/2}.
inline DenseGhep dense_ghep(const Matrix& a, const Matrix& gamma) {
    const Matrix root = sym_sqrt(gamma);
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(root * a * root);
    const Index n = a.rows();
    DenseGhep out;
    out.u.resize(n, n);
    out.lambda.resize(n);
    for (Index i = 0; i < n; ++i) {
        out.lambda[i] = eig.eigenvalues()[n - 1 - i];
        out.u.col(i) = root * eig.eigenvectors().col(n - 1 - i);
    }
    return out;
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

inline double rel_err(const Vector& got, const Vector& want) {
    return (got - want).norm() / std::max(want.norm(), 1e-300);
}

inline double rel_err(const Matrix& got, const Matrix& want) {
    return (got - want).norm() / std::max(want.norm(), 1e-300);
}

/// Materializes the covariance implied by a low-rank state: αΓ − W D Wᵀ.
inline Matrix low_rank_cov(const fastkf::LowRankState& state, const Matrix& gamma) {
    Matrix sigma = state.alpha * gamma;
    if (state.rank() > 0)
        sigma -= state.w * state.d.asDiagonal() * state.w.transpose();
    return sigma;
}

/// Largest magnitude eigenvalue-style norm estimate by power iteration on a
/// symmetric operator (spec'd symmetry tolerance is scaled by this).
template <class Apply>
double power_norm(const Apply& apply, Index n, int iters = 50) {
    Vector v = Vector::Ones(n).normalized();
    double lambda = 0.0;
    for (int i = 0; i < iters; ++i) {
        Vector w = apply(v);
        lambda = w.norm();
        if (lambda == 0.0) return 0.0;
        v = w / lambda;
    }
    return lambda;
}

/// CSV loader: returns header names and rows of doubles ("nan" parses to NaN).
struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    Index col(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw std::runtime_error("csv column missing: " + name);
        return static_cast<Index>(it - header.begin());
    }
};

inline Csv read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv: " + path.string());
    Csv csv;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty csv: " + path.string());
    std::istringstream head(line);
    std::string tok;
    while (std::getline(head, tok, ',')) csv.header.push_back(tok);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::vector<double> values;
        while (std::getline(row, tok, ',')) {
            double v = std::numeric_limits<double>::quiet_NaN();
            try {
                std::size_t used = 0;
                const double parsed = std::stod(tok, &used);
                if (used == tok.size()) v = parsed;
            } catch (const std::exception&) {
                // non-numeric cell (filter kind, grid label): keep NaN
            }
            values.push_back(v);
        }
        csv.rows.push_back(std::move(values));
    }
    return csv;
}

inline std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

}  // namespace oracle
