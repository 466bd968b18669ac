#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "covariance.hpp"
#include "dense_filter.hpp"
#include "enkf.hpp"
#include "fast_filter.hpp"
#include "field_io.hpp"
#include "tomography.hpp"
#include "uq.hpp"

namespace fastkf {

namespace fs = std::filesystem;

inline constexpr Index kDensePolicyLimit = 20000;

/// Dense covariance paths (full matrices, eigendecompositions) are refused
/// above n_s = 20000 unless explicitly forced.
inline void ensure_dense_allowed(Index n_s, bool force_dense) {
    if (n_s > kDensePolicyLimit && !force_dense)
        throw std::runtime_error(
            "dense covariance path refused: n_s = " + std::to_string(n_s) +
            " exceeds the policy threshold " + std::to_string(kDensePolicyLimit) +
            "; pass --force-dense to override");
}

namespace detail {

inline std::string step_file(const std::string& prefix, int step, const std::string& ext) {
    std::ostringstream name;
    name << prefix << std::setw(3) << std::setfill('0') << step << ext;
    return name.str();
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir.string() +
                                     ": " + ec.message());
}

inline std::ofstream open_text_out(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << std::setprecision(17);
    return out;
}

template <class Fn>
double time_call(Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::uint64_t obs_seed(std::uint64_t seed, int step) {
    return derive_seed(seed, 1000 + static_cast<std::uint64_t>(step));
}
inline std::uint64_t enkf_seed(std::uint64_t seed, int step) {
    return derive_seed(seed, 2000 + static_cast<std::uint64_t>(step));
}
inline std::uint64_t ghep_seed(std::uint64_t seed) { return derive_seed(seed, 3000); }
inline std::uint64_t ekf_seed(std::uint64_t seed, int step) {
    return derive_seed(seed, 4000 + static_cast<std::uint64_t>(step));
}
inline std::uint64_t sample_seed(std::uint64_t seed) { return derive_seed(seed, 5000); }

}  // namespace detail

inline void write_observations(const fs::path& path, const std::vector<Vector>& batches) {
    auto out = detail::open_text_out(path);
    out << "step,measurement,value\n";
    for (std::size_t k = 0; k < batches.size(); ++k)
        for (Index i = 0; i < batches[k].size(); ++i)
            out << (k + 1) << "," << i << "," << batches[k][i] << "\n";
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<Vector> read_observations(const fs::path& path, int n_steps,
                                             Index n_m) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open observations: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("step,measurement,value", 0) != 0)
        throw std::runtime_error("unexpected observations header in " + path.string());
    std::vector<Vector> batches(static_cast<std::size_t>(n_steps), Vector::Zero(n_m));
    std::vector<Index> filled(static_cast<std::size_t>(n_steps), 0);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string tok;
        std::getline(row, tok, ',');
        const int step = std::stoi(tok);
        std::getline(row, tok, ',');
        const Index meas = std::stol(tok);
        std::getline(row, tok, ',');
        const double value = std::stod(tok);
        if (step < 1 || step > n_steps || meas < 0 || meas >= n_m)
            throw std::runtime_error("observation row out of range in " + path.string() +
                                     ": " + line);
        batches[static_cast<std::size_t>(step - 1)][meas] = value;
        ++filled[static_cast<std::size_t>(step - 1)];
    }
    for (int k = 0; k < n_steps; ++k)
        if (filled[static_cast<std::size_t>(k)] != n_m)
            throw std::runtime_error("observations for step " + std::to_string(k + 1) +
                                     " are incomplete in " + path.string());
    return batches;
}

/// Writes the synthetic truth (plume fields per step), the simulated
/// observation batches, and the fully-resolved config into out_dir.
inline void cmd_generate(const ExperimentConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    detail::ensure_dir(out_dir);

    const SourceReceiverLayout layout = cfg.make_layout();
    const SparseRowMatrix h = build_H(cfg.grid, layout);

    std::vector<Vector> batches;
    batches.reserve(static_cast<std::size_t>(cfg.time.n_steps));
    for (int k = 0; k <= cfg.time.n_steps; ++k) {
        const Vector truth = cfg.plume.field(cfg.grid, k * cfg.time.hours_per_step);
        write_field(out_dir / detail::step_file("truth_step", k, ".fkf"), cfg.grid.nx,
                    cfg.grid.ny, truth);
        if (k > 0)
            batches.push_back(simulate_observations(h, truth, cfg.sigma2,
                                                    detail::obs_seed(cfg.seed, k)));
    }
    write_observations(out_dir / "observations.csv", batches);
    cfg.save(out_dir / "config.json");
}

struct MetricsRow {
    int step = 0;
    double wall_s = 0.0;
    double rel_l2 = std::numeric_limits<double>::quiet_NaN();
    double effective_rank = std::numeric_limits<double>::quiet_NaN();
    double trace = std::numeric_limits<double>::quiet_NaN();
    double entropy = std::numeric_limits<double>::quiet_NaN();
};

inline void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
    auto out = detail::open_text_out(path);
    out << "step,wall_time_s,rel_l2_error,effective_rank,trace_criterion,relative_entropy\n";
    for (const MetricsRow& r : rows)
        out << r.step << "," << r.wall_s << "," << r.rel_l2 << "," << r.effective_rank
            << "," << r.trace << "," << r.entropy << "\n";
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct RunResult {
    std::vector<MetricsRow> metrics;
};

namespace detail {

inline double rel_l2_vs(const Vector& mean, const std::optional<std::vector<Vector>>& refs,
                        int step) {
    if (!refs) return std::numeric_limits<double>::quiet_NaN();
    const Vector& ref = refs->at(static_cast<std::size_t>(step - 1));
    const double denom = ref.norm();
    if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return (mean - ref).norm() / denom;
}

/// ½(log det Σ − log det Γ) for the dense baseline on small grids.
inline double dense_entropy(const Matrix& sigma, const CovarianceOperator& cov) {
    const Eigen::LLT<Matrix> ls(sigma);
    const Eigen::LLT<Matrix> lg(cov.dense_matrix());
    if (ls.info() != Eigen::Success || lg.info() != Eigen::Success)
        return std::numeric_limits<double>::quiet_NaN();
    const auto logdet = [](const Eigen::LLT<Matrix>& llt) {
        return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    };
    return 0.5 * (logdet(ls) - logdet(lg));
}

}  // namespace detail

/// Runs the configured filter over the generated data, writing per-step
/// physical-domain mean snapshots, low-rank state snapshots (fkf/ekf),
/// the resolved config, and the metrics CSV.  When `reference` points at a
/// previous run directory, the per-step relative L2 error against its mean
/// snapshots is recorded.
inline RunResult cmd_run(const ExperimentConfig& cfg, const fs::path& data_dir,
                         const fs::path& out_dir,
                         const std::optional<fs::path>& reference = std::nullopt,
                         bool force_dense = false) {
    cfg.validate_for_run();
    const ExperimentConfig data_cfg = ExperimentConfig::load(data_dir / "config.json");
    if (!(cfg.grid == data_cfg.grid))
        throw std::runtime_error("cmd_run: config grid does not match the data directory "
                                 "grid (" + std::to_string(data_cfg.grid.nx) + "x" +
                                 std::to_string(data_cfg.grid.ny) + ")");
    if (cfg.layout.n_sou != data_cfg.layout.n_sou ||
        cfg.layout.n_rec != data_cfg.layout.n_rec)
        throw std::runtime_error("cmd_run: config layout does not match the data directory");
    if (cfg.time.n_steps != data_cfg.time.n_steps)
        throw std::runtime_error("cmd_run: config step count does not match the data "
                                 "directory");

    const Index n = cfg.grid.size();
    const int n_steps = cfg.time.n_steps;
    const std::vector<Vector> obs =
        read_observations(data_dir / "observations.csv", n_steps, cfg.n_m());

    std::optional<std::vector<Vector>> refs;
    if (reference) {
        refs.emplace();
        refs->reserve(static_cast<std::size_t>(n_steps));
        for (int k = 1; k <= n_steps; ++k) {
            const Field f =
                read_field(*reference / detail::step_file("mean_step", k, ".fkf"));
            if (f.nx != cfg.grid.nx || f.ny != cfg.grid.ny)
                throw std::runtime_error("cmd_run: reference grid mismatch at step " +
                                         std::to_string(k));
            refs->push_back(f.data);
        }
    }

    detail::ensure_dir(out_dir);
    const SourceReceiverLayout layout = cfg.make_layout();
    const SparseRowMatrix h = build_H(cfg.grid, layout);

    RunResult result;
    result.metrics.reserve(static_cast<std::size_t>(n_steps));
    const auto write_mean = [&](int step, const Vector& mean) {
        write_field(out_dir / detail::step_file("mean_step", step, ".fkf"), cfg.grid.nx,
                    cfg.grid.ny, mean);
    };

    switch (cfg.filter.kind) {
        case FilterKind::kf: {
            ensure_dense_allowed(n, force_dense);
            const CovarianceOperator cov = build_operator(cfg.grid, cfg.kernel,
                                                          CovMode::dense);
            DenseFilterState state = dense_kf_init(n);
            write_mean(0, state.mean);
            for (int k = 1; k <= n_steps; ++k) {
                MetricsRow row;
                row.step = k;
                row.wall_s = detail::time_call([&] {
                    state = dense_kf_step(state, h, obs[static_cast<std::size_t>(k - 1)],
                                          cov, cfg.sigma2);
                });
                row.rel_l2 = detail::rel_l2_vs(state.mean, refs, k);
                row.effective_rank = static_cast<double>(n);
                row.trace = state.cov.trace();
                row.entropy = n <= 2000 ? detail::dense_entropy(state.cov, cov)
                                        : std::numeric_limits<double>::quiet_NaN();
                result.metrics.push_back(row);
                write_mean(k, state.mean);
            }
            break;
        }
        case FilterKind::fkf: {
            const CovarianceOperator cov = build_operator(cfg.grid, cfg.kernel,
                                                          CovMode::fft);
            const Index l_max = std::min<Index>(cfg.ghep_rank() + cfg.filter.oversampling, n);
            const Index k_rank = std::min<Index>(cfg.ghep_rank(), l_max);
            const FkfContext ctx = fkf_init(cov, h, cfg.sigma2, k_rank,
                                            l_max - k_rank,
                                            detail::ghep_seed(cfg.seed));
            LowRankState state = LowRankState::zero_start(n);
            write_mean(0, state.mean);
            for (int k = 1; k <= n_steps; ++k) {
                MetricsRow row;
                row.step = k;
                row.wall_s = detail::time_call([&] {
                    state = fkf_step(state, ctx, obs[static_cast<std::size_t>(k - 1)]);
                });
                row.rel_l2 = detail::rel_l2_vs(state.mean, refs, k);
                row.effective_rank = static_cast<double>(state.rank());
                row.trace = trace_criterion(state, cov);
                row.entropy = relative_entropy(state);
                result.metrics.push_back(row);
                write_mean(k, state.mean);
                write_state(out_dir / detail::step_file("state_step", k, ".fks"), state);
            }
            break;
        }
        case FilterKind::ekf: {
            const bool dense_ok = n <= kDensePolicyLimit || force_dense;
            const CovarianceOperator cov = build_operator(
                cfg.grid, cfg.kernel, dense_ok ? CovMode::dense : CovMode::fft);
            const BoxCox transform = cfg.transform();
            FekfOptions opts;
            opts.k_rank = std::min<Index>(cfg.ghep_rank(), n - cfg.filter.oversampling);
            opts.oversampling = cfg.filter.oversampling;
            opts.trunc_tol = cfg.filter.trunc_tol;
            opts.relinearizations = cfg.filter.relinearizations;
            LowRankState state = LowRankState::zero_start(n);
            state.mean = Vector::Constant(n, transform.forward(cfg.filter.init_slowness));
            write_mean(0, transform.inverse(state.mean));
            for (int k = 1; k <= n_steps; ++k) {
                opts.seed = detail::ekf_seed(cfg.seed, k);
                MetricsRow row;
                row.step = k;
                row.wall_s = detail::time_call([&] {
                    state = fekf_step(state, cov, h, obs[static_cast<std::size_t>(k - 1)],
                                      cfg.sigma2, transform, opts);
                });
                const Vector physical = transform.inverse(state.mean);
                row.rel_l2 = detail::rel_l2_vs(physical, refs, k);
                row.effective_rank = static_cast<double>(state.rank());
                row.trace = trace_criterion(state, cov);
                row.entropy = relative_entropy(state);
                result.metrics.push_back(row);
                write_mean(k, physical);
                write_state(out_dir / detail::step_file("state_step", k, ".fks"), state);
            }
            break;
        }
        case FilterKind::enkf: {
            const CovarianceOperator cov = build_operator(cfg.grid, cfg.kernel,
                                                          CovMode::fft);
            Ensemble ens = enkf_init(n, cfg.filter.ensemble_size);
            write_mean(0, ens.mean());
            for (int k = 1; k <= n_steps; ++k) {
                MetricsRow row;
                row.step = k;
                row.wall_s = detail::time_call([&] {
                    ens = enkf_step(ens, h, obs[static_cast<std::size_t>(k - 1)], cov,
                                    cfg.sigma2, detail::enkf_seed(cfg.seed, k));
                });
                const Vector mean = ens.mean();
                row.rel_l2 = detail::rel_l2_vs(mean, refs, k);
                const Matrix dev = ens.members.colwise() - mean;
                row.trace = dev.squaredNorm() / double(ens.size() - 1);
                result.metrics.push_back(row);
                write_mean(k, mean);
            }
            break;
        }
    }

    write_metrics(out_dir / "metrics.csv", result.metrics);
    cfg.save(out_dir / "config.json");
    return result;
}

enum class UqWhat { variance, trace, entropy };

/// Recomputes the requested uncertainty measure from the low-rank state
/// snapshots of a previous fkf/ekf run.
inline void cmd_uq(const fs::path& run_dir, UqWhat what, std::vector<int> steps,
                   const fs::path& out_dir) {
    const ExperimentConfig cfg = ExperimentConfig::load(run_dir / "config.json");
    if (cfg.filter.kind != FilterKind::fkf && cfg.filter.kind != FilterKind::ekf)
        throw std::runtime_error(
            "cmd_uq: measures need low-rank covariance snapshots, which '" +
            to_string(cfg.filter.kind) + "' runs do not save");
    if (steps.empty())
        for (int k = 1; k <= cfg.time.n_steps; ++k) steps.push_back(k);

    detail::ensure_dir(out_dir);
    const CovarianceOperator cov = build_operator(cfg.grid, cfg.kernel, CovMode::fft);

    std::optional<std::ofstream> csv;
    if (what == UqWhat::trace) {
        csv.emplace(detail::open_text_out(out_dir / "uq_trace.csv"));
        *csv << "step,trace_criterion\n";
    } else if (what == UqWhat::entropy) {
        csv.emplace(detail::open_text_out(out_dir / "uq_entropy.csv"));
        *csv << "step,relative_entropy\n";
    }

    for (int k : steps) {
        if (k < 1 || k > cfg.time.n_steps)
            throw std::runtime_error("cmd_uq: step " + std::to_string(k) +
                                     " outside 1.." + std::to_string(cfg.time.n_steps));
        const LowRankState state =
            read_state(run_dir / detail::step_file("state_step", k, ".fks"));
        switch (what) {
            case UqWhat::variance:
                write_field(out_dir / detail::step_file("variance_step", k, ".fkf"),
                            cfg.grid.nx, cfg.grid.ny, variance(state, cov));
                break;
            case UqWhat::trace:
                *csv << k << "," << trace_criterion(state, cov) << "\n";
                break;
            case UqWhat::entropy:
                *csv << k << "," << relative_entropy(state) << "\n";
                break;
        }
    }
}

/// Draws conditional realizations from saved fkf/ekf states.  Each
/// realization j propagates one fixed standard-normal vector through all
/// selected steps; ekf realizations are mapped back to physical slowness.
inline void cmd_sample(const fs::path& run_dir, int count, std::vector<int> steps,
                       std::optional<std::uint64_t> seed_override, const fs::path& out_dir,
                       bool force_dense = false) {
    const ExperimentConfig cfg = ExperimentConfig::load(run_dir / "config.json");
    if (cfg.filter.kind != FilterKind::fkf && cfg.filter.kind != FilterKind::ekf)
        throw std::runtime_error(
            "cmd_sample: sampling needs low-rank covariance snapshots, which '" +
            to_string(cfg.filter.kind) + "' runs do not save");
    if (count < 1) throw std::invalid_argument("cmd_sample: count must be positive");
    ensure_dense_allowed(cfg.grid.size(), force_dense);
    if (steps.empty())
        for (int k = 1; k <= cfg.time.n_steps; ++k) steps.push_back(k);

    std::vector<LowRankState> states;
    states.reserve(steps.size());
    for (int k : steps) {
        if (k < 1 || k > cfg.time.n_steps)
            throw std::runtime_error("cmd_sample: step " + std::to_string(k) +
                                     " outside 1.." + std::to_string(cfg.time.n_steps));
        states.push_back(read_state(run_dir / detail::step_file("state_step", k, ".fks")));
    }

    detail::ensure_dir(out_dir);
    const CovarianceOperator cov = build_operator(cfg.grid, cfg.kernel, CovMode::dense);
    const std::uint64_t seed = detail::sample_seed(seed_override.value_or(cfg.seed));
    const BoxCox transform = cfg.transform();

    for (int j = 0; j < count; ++j) {
        const RealizationPropagator prop(
            cov, gaussian_vector(cfg.grid.size(), seed, static_cast<std::uint64_t>(j)));
        for (std::size_t si = 0; si < steps.size(); ++si) {
            Vector realization = prop.at(states[si]);
            if (cfg.filter.kind == FilterKind::ekf) {
                // Clamp below the transform domain boundary to physical zero.
                for (Index i = 0; i < realization.size(); ++i) {
                    const double base =
                        (realization[i] + transform.alpha) / transform.alpha;
                    realization[i] = base <= 0.0 ? 0.0 : transform.inverse(realization[i]);
                }
            }
            std::ostringstream name;
            name << "sample_step" << std::setw(3) << std::setfill('0') << steps[si]
                 << "_r" << std::setw(3) << std::setfill('0') << j << ".fkf";
            write_field(out_dir / name.str(), cfg.grid.nx, cfg.grid.ny, realization);
        }
    }
}

struct BenchRow {
    Grid grid;
    FilterKind kind = FilterKind::fkf;
    double offline_s = 0.0;
    double step_median_s = 0.0;
    double step_min_s = 0.0;
    double step_max_s = 0.0;
};

/// Parses "59x55,117x109" into grids inheriting the config's extents.
inline std::vector<Grid> parse_grid_list(const std::string& text, const Grid& base) {
    std::vector<Grid> grids;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto sep = item.find('x');
        if (sep == std::string::npos)
            throw std::invalid_argument("bench: grid '" + item + "' is not WxH");
        try {
            grids.emplace_back(std::stoi(item.substr(0, sep)),
                               std::stoi(item.substr(sep + 1)), base.lx, base.ly);
        } catch (const std::exception&) {
            throw std::invalid_argument("bench: cannot parse grid '" + item + "'");
        }
    }
    if (grids.empty()) throw std::invalid_argument("bench: empty grid list");
    return grids;
}

/// Times the offline stage (operator construction plus any filter
/// precomputation) and five per-step repetitions for the configured filter
/// kind on each grid.
inline std::vector<BenchRow> cmd_bench(const ExperimentConfig& cfg,
                                       const std::vector<Grid>& grids,
                                       const fs::path& out_csv,
                                       bool force_dense = false) {
    cfg.validate_for_run();
    constexpr int kReps = 5;
    std::vector<BenchRow> rows;

    for (const Grid& grid : grids) {
        const double src_frac = cfg.layout.source_x / cfg.grid.lx;
        const double rec_frac = cfg.layout.receiver_x / cfg.grid.lx;
        const SourceReceiverLayout layout = SourceReceiverLayout::cross_well(
            grid, cfg.layout.n_sou, cfg.layout.n_rec, src_frac * grid.lx,
            rec_frac * grid.lx);
        const SparseRowMatrix h = build_H(grid, layout);
        const Vector y = gaussian_vector(layout.n_m(), derive_seed(cfg.seed, 7000));
        const Index n = grid.size();

        BenchRow row;
        row.grid = grid;
        row.kind = cfg.filter.kind;
        std::vector<double> times;

        switch (cfg.filter.kind) {
            case FilterKind::fkf: {
                std::optional<CovarianceOperator> cov;
                std::optional<FkfContext> ctx;
                row.offline_s = detail::time_call([&] {
                    cov.emplace(grid, cfg.kernel, CovMode::fft);
                    const Index l_max =
                        std::min<Index>(cfg.ghep_rank() + cfg.filter.oversampling, n);
                    const Index k_rank = std::min<Index>(cfg.ghep_rank(), l_max);
                    ctx = fkf_init(*cov, h, cfg.sigma2, k_rank, l_max - k_rank,
                                   detail::ghep_seed(cfg.seed));
                });
                const LowRankState warm = fkf_step(LowRankState::zero_start(n), *ctx, y);
                for (int rep = 0; rep < kReps; ++rep) {
                    LowRankState state = warm;
                    times.push_back(detail::time_call([&] {
                        state = fkf_step(state, *ctx, y);
                    }));
                }
                break;
            }
            case FilterKind::kf: {
                ensure_dense_allowed(n, force_dense);
                std::optional<CovarianceOperator> cov;
                row.offline_s = detail::time_call([&] {
                    cov.emplace(grid, cfg.kernel, CovMode::dense);
                });
                const DenseFilterState warm =
                    dense_kf_step(dense_kf_init(n), h, y, *cov, cfg.sigma2);
                for (int rep = 0; rep < kReps; ++rep) {
                    DenseFilterState state = warm;
                    times.push_back(detail::time_call([&] {
                        state = dense_kf_step(state, h, y, *cov, cfg.sigma2);
                    }));
                }
                break;
            }
            case FilterKind::ekf: {
                const bool dense_ok = n <= kDensePolicyLimit || force_dense;
                std::optional<CovarianceOperator> cov;
                row.offline_s = detail::time_call([&] {
                    cov.emplace(grid, cfg.kernel,
                                dense_ok ? CovMode::dense : CovMode::fft);
                });
                const BoxCox transform = cfg.transform();
                FekfOptions opts;
                opts.k_rank = std::min<Index>(cfg.ghep_rank(), n - cfg.filter.oversampling);
                opts.oversampling = cfg.filter.oversampling;
                opts.trunc_tol = cfg.filter.trunc_tol;
                opts.relinearizations = cfg.filter.relinearizations;
                opts.seed = detail::ekf_seed(cfg.seed, 1);
                LowRankState start = LowRankState::zero_start(n);
                start.mean =
                    Vector::Constant(n, transform.forward(cfg.filter.init_slowness));
                const LowRankState warm =
                    fekf_step(start, *cov, h, y, cfg.sigma2, transform, opts);
                for (int rep = 0; rep < kReps; ++rep) {
                    LowRankState state = warm;
                    opts.seed = detail::ekf_seed(cfg.seed, 2 + rep);
                    times.push_back(detail::time_call([&] {
                        state = fekf_step(state, *cov, h, y, cfg.sigma2, transform, opts);
                    }));
                }
                break;
            }
            case FilterKind::enkf: {
                std::optional<CovarianceOperator> cov;
                row.offline_s = detail::time_call([&] {
                    cov.emplace(grid, cfg.kernel, CovMode::fft);
                });
                const Ensemble warm = enkf_step(enkf_init(n, cfg.filter.ensemble_size), h,
                                                y, *cov, cfg.sigma2,
                                                detail::enkf_seed(cfg.seed, 1));
                for (int rep = 0; rep < kReps; ++rep) {
                    Ensemble ens = warm;
                    times.push_back(detail::time_call([&] {
                        ens = enkf_step(ens, h, y, *cov, cfg.sigma2,
                                        detail::enkf_seed(cfg.seed, 2 + rep));
                    }));
                }
                break;
            }
        }

        row.step_median_s = detail::median(times);
        row.step_min_s = *std::min_element(times.begin(), times.end());
        row.step_max_s = *std::max_element(times.begin(), times.end());
        rows.push_back(row);
    }

    auto out = detail::open_text_out(out_csv);
    out << "grid,nx,ny,n_s,kind,offline_s,step_median_s,step_min_s,step_max_s\n";
    for (const BenchRow& r : rows)
        out << r.grid.nx << "x" << r.grid.ny << "," << r.grid.nx << "," << r.grid.ny
            << "," << r.grid.size() << "," << to_string(r.kind) << "," << r.offline_s
            << "," << r.step_median_s << "," << r.step_min_s << "," << r.step_max_s
            << "\n";
    if (!out) throw std::runtime_error("write failed: " + out_csv.string());
    return rows;
}

}  // namespace fastkf
