#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <stdexcept>
#include <string>

namespace fastkf {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Point = Eigen::Vector2d;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Uniform rectangular grid of cells covering [0, lx] x [0, ly].
///
/// Cell (ix, iy) spans [ix*dx, (ix+1)*dx] x [iy*dy, (iy+1)*dy] and is
/// represented by its center.  Fields are stored as flat vectors with
/// linear index ix*ny + iy (x-major, y contiguous).
struct Grid {
    int nx = 0;
    int ny = 0;
    double lx = 1.0;
    double ly = 1.0;

    Grid() = default;

    Grid(int nx_, int ny_, double lx_ = 1.0, double ly_ = 1.0)
        : nx(nx_), ny(ny_), lx(lx_), ly(ly_) {
        validate();
    }

    void validate() const {
        if (nx < 1 || ny < 1)
            throw std::invalid_argument("grid: nx and ny must be positive, got " +
                                        std::to_string(nx) + "x" + std::to_string(ny));
        if (!(lx > 0.0) || !(ly > 0.0))
            throw std::invalid_argument("grid: domain lengths must be positive");
    }

    Index size() const { return static_cast<Index>(nx) * ny; }

    double dx() const { return lx / nx; }
    double dy() const { return ly / ny; }

    Index index(int ix, int iy) const { return static_cast<Index>(ix) * ny + iy; }

    Point center(int ix, int iy) const {
        return {(ix + 0.5) * dx(), (iy + 0.5) * dy()};
    }

    Point center(Index linear) const {
        const int ix = static_cast<int>(linear / ny);
        const int iy = static_cast<int>(linear % ny);
        return center(ix, iy);
    }

    bool operator==(const Grid& other) const {
        return nx == other.nx && ny == other.ny && lx == other.lx && ly == other.ly;
    }
};

}  // namespace fastkf
