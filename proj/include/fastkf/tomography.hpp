#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"
#include "rng.hpp"

namespace fastkf {

struct RaySegment {
    Index cell;
    double length;
};

/// Straight-ray cell intersections from src to rec.
///
/// Collects the ray parameters of every grid-line crossing, deduplicates
/// parameters that coincide to relative 1e-12 (corner hits), and assigns
/// each remaining interval to the cell containing its midpoint.  Cells are
/// returned in traversal order and the lengths sum to the chord length.
inline std::vector<RaySegment> trace_ray(const Grid& grid, const Point& src,
                                         const Point& rec) {
    const double tol_x = 1e-12 * grid.lx;
    const double tol_y = 1e-12 * grid.ly;
    for (const Point* p : {&src, &rec}) {
        if ((*p)[0] < -tol_x || (*p)[0] > grid.lx + tol_x ||
            (*p)[1] < -tol_y || (*p)[1] > grid.ly + tol_y)
            throw std::invalid_argument("trace_ray: endpoint (" +
                                        std::to_string((*p)[0]) + ", " +
                                        std::to_string((*p)[1]) +
                                        ") lies outside the domain");
    }
    const Point dir = rec - src;
    const double len = dir.norm();
    if (len == 0.0)
        throw std::invalid_argument("trace_ray: degenerate zero-length ray");

    std::vector<double> ts;
    ts.reserve(static_cast<std::size_t>(grid.nx + grid.ny + 2));
    ts.push_back(0.0);
    ts.push_back(1.0);
    if (dir[0] != 0.0) {
        for (int i = 1; i < grid.nx; ++i) {
            const double t = (i * grid.dx() - src[0]) / dir[0];
            if (t > 0.0 && t < 1.0) ts.push_back(t);
        }
    }
    if (dir[1] != 0.0) {
        for (int j = 1; j < grid.ny; ++j) {
            const double t = (j * grid.dy() - src[1]) / dir[1];
            if (t > 0.0 && t < 1.0) ts.push_back(t);
        }
    }
    std::sort(ts.begin(), ts.end());

    std::vector<RaySegment> segments;
    segments.reserve(ts.size());
    double t_prev = ts.front();
    for (std::size_t i = 1; i < ts.size(); ++i) {
        const double t = ts[i];
        // Corner or duplicate crossing: fold the sliver into the next
        // interval instead of emitting a spurious cell.
        if (t - t_prev <= 1e-12) continue;
        const Point mid = src + (0.5 * (t_prev + t)) * dir;
        const int ix = std::clamp(static_cast<int>(std::floor(mid[0] / grid.dx())),
                                  0, grid.nx - 1);
        const int iy = std::clamp(static_cast<int>(std::floor(mid[1] / grid.dy())),
                                  0, grid.ny - 1);
        const Index cell = grid.index(ix, iy);
        const double seg_len = (t - t_prev) * len;
        if (!segments.empty() && segments.back().cell == cell)
            segments.back().length += seg_len;
        else
            segments.push_back({cell, seg_len});
        t_prev = t;
    }
    return segments;
}

/// Cross-well acquisition geometry: sources in the left well, receivers in
/// the right well, equispaced vertically at cell-center-style offsets.
struct SourceReceiverLayout {
    std::vector<Point> sources;
    std::vector<Point> receivers;

    Index n_sou() const { return static_cast<Index>(sources.size()); }
    Index n_rec() const { return static_cast<Index>(receivers.size()); }
    Index n_m() const { return n_sou() * n_rec(); }

    static SourceReceiverLayout cross_well(const Grid& grid, int n_sou, int n_rec,
                                           double source_x = 0.0,
                                           double receiver_x = -1.0) {
        if (n_sou < 1 || n_rec < 1)
            throw std::invalid_argument("layout: n_sou and n_rec must be positive");
        if (receiver_x < 0.0) receiver_x = grid.lx;
        SourceReceiverLayout layout;
        layout.sources.reserve(static_cast<std::size_t>(n_sou));
        layout.receivers.reserve(static_cast<std::size_t>(n_rec));
        for (int i = 0; i < n_sou; ++i)
            layout.sources.push_back({source_x, (i + 0.5) * grid.ly / n_sou});
        for (int j = 0; j < n_rec; ++j)
            layout.receivers.push_back({receiver_x, (j + 0.5) * grid.ly / n_rec});
        layout.validate(grid);
        return layout;
    }

    void validate(const Grid& grid) const {
        if (sources.empty() || receivers.empty())
            throw std::invalid_argument("layout: sources and receivers must be nonempty");
        auto inside = [&grid](const Point& p) {
            return p[0] >= 0.0 && p[0] <= grid.lx && p[1] >= 0.0 && p[1] <= grid.ly;
        };
        for (const Point& p : sources)
            if (!inside(p)) throw std::invalid_argument("layout: source outside domain");
        for (const Point& p : receivers)
            if (!inside(p)) throw std::invalid_argument("layout: receiver outside domain");
    }
};

/// Travel-time measurement operator: row (i_sou·n_rec + i_rec) holds the
/// per-cell intersection lengths of that source-receiver ray.
inline SparseRowMatrix build_H(const Grid& grid, const SourceReceiverLayout& layout) {
    layout.validate(grid);
    SparseRowMatrix h(layout.n_m(), grid.size());
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(static_cast<std::size_t>(layout.n_m() * (grid.nx + grid.ny)));
    Index row = 0;
    for (const Point& src : layout.sources)
        for (const Point& rec : layout.receivers) {
            for (const RaySegment& seg : trace_ray(grid, src, rec))
                triplets.emplace_back(static_cast<int>(row), static_cast<int>(seg.cell),
                                      seg.length);
            ++row;
        }
    h.setFromTriplets(triplets.begin(), triplets.end());
    h.makeCompressed();
    return h;
}

struct GaussianBlob {
    Point center{0.5, 0.5};   ///< initial center (domain units)
    Point drift{0.0, 0.0};    ///< center velocity (domain units per hour)
    Point sigma{0.1, 0.1};    ///< spatial widths
    double rate = 1e-5;       ///< amplitude growth (slowness per hour)
};

/// Synthetic slowness-perturbation plume: up to three Gaussian blobs whose
/// amplitudes grow linearly in time and whose centers drift.  Nonnegative
/// by construction and clamped at max_perturbation.
struct PlumeModel {
    std::vector<GaussianBlob> blobs{GaussianBlob{}};
    double max_perturbation = 5e-3;

    void validate() const {
        if (blobs.empty() || blobs.size() > 3)
            throw std::invalid_argument("plume: between 1 and 3 blobs supported, got " +
                                        std::to_string(blobs.size()));
        for (const GaussianBlob& b : blobs) {
            if (!(b.sigma[0] > 0.0) || !(b.sigma[1] > 0.0))
                throw std::invalid_argument("plume: blob widths must be positive");
            if (b.rate < 0.0)
                throw std::invalid_argument("plume: blob growth rate must be nonnegative");
        }
        if (!(max_perturbation > 0.0))
            throw std::invalid_argument("plume: max_perturbation must be positive");
    }

    Vector field(const Grid& grid, double t_hours) const {
        validate();
        if (t_hours < 0.0)
            throw std::invalid_argument("plume: time must be nonnegative");
        Vector out = Vector::Zero(grid.size());
        for (const GaussianBlob& b : blobs) {
            const double amp = b.rate * t_hours;
            if (amp == 0.0) continue;
            const Point c = b.center + t_hours * b.drift;
            for (int i = 0; i < grid.nx; ++i)
                for (int j = 0; j < grid.ny; ++j) {
                    const Point x = grid.center(i, j);
                    const double ex = (x[0] - c[0]) / b.sigma[0];
                    const double ey = (x[1] - c[1]) / b.sigma[1];
                    out[grid.index(i, j)] += amp * std::exp(-0.5 * (ex * ex + ey * ey));
                }
        }
        return out.cwiseMin(max_perturbation);
    }
};

/// y = H s + v with v ~ N(0, sigma2·I), deterministic per (seed, stream).
inline Vector simulate_observations(const SparseRowMatrix& h, const Vector& s,
                                    double sigma2, std::uint64_t seed,
                                    std::uint64_t stream = 0) {
    if (h.cols() != s.size())
        throw std::invalid_argument("simulate_observations: field length " +
                                    std::to_string(s.size()) + " does not match H columns " +
                                    std::to_string(h.cols()));
    if (sigma2 < 0.0)
        throw std::invalid_argument("simulate_observations: sigma2 must be nonnegative");
    Vector y = h * s;
    if (sigma2 > 0.0)
        y += std::sqrt(sigma2) * gaussian_vector(h.rows(), seed, stream);
    return y;
}

}  // namespace fastkf
