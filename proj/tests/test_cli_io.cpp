#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <fastkf/config.hpp>
#include <fastkf/driver.hpp>
#include <fastkf/field_io.hpp>
#include <fastkf/rng.hpp>
#include <fastkf/tomography.hpp>

#include "oracles.hpp"

using namespace fastkf;
namespace fsys = std::filesystem;

namespace {

/// Fresh scratch directory per test, removed on destruction.
struct Scratch {
    fsys::path dir;
    Scratch() {
        static int counter = 0;
        dir = fsys::temp_directory_path() /
              ("fastkf_test_" + std::to_string(::getpid()) + "_" +
               std::to_string(counter++));
        fsys::create_directories(dir);
    }
    ~Scratch() { fsys::remove_all(dir); }
    fsys::path operator/(const std::string& name) const { return dir / name; }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FKF_BIN_PATH) + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kTinyConfig = R"({
  "grid": {"nx": 10, "ny": 10},
  "kernel": {"family": "powered-exponential", "theta": 1e-4, "length": 0.2, "power": 0.5},
  "noise": {"sigma2": 2e-4},
  "layout": {"n_sou": 3, "n_rec": 8},
  "time": {"n_steps": 4, "hours_per_step": 3},
  "filter": {"kind": "fkf", "rank": 24, "oversampling": 20},
  "seed": 99
})";

void write_text(const fsys::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

}  // namespace

TEST_CASE("field files round-trip exactly", "[io]") {
    Scratch tmp;
    const Vector data = gaussian_vector(12 * 7, 3);
    write_field(tmp / "f.fkf", 12, 7, data);
    const Field back = read_field(tmp / "f.fkf");
    CHECK(back.nx == 12);
    CHECK(back.ny == 7);
    CHECK((back.data - data).norm() == 0.0);
}

TEST_CASE("field reader rejects corrupt inputs", "[io]") {
    Scratch tmp;
    write_text(tmp / "bad_magic.fkf", "NOPE----------------");
    CHECK_THROWS_AS(read_field(tmp / "bad_magic.fkf"), std::runtime_error);

    write_field(tmp / "trunc.fkf", 4, 4, Vector::Ones(16));
    fsys::resize_file(tmp / "trunc.fkf", 40);
    CHECK_THROWS_AS(read_field(tmp / "trunc.fkf"), std::runtime_error);

    CHECK_THROWS_AS(read_field(tmp / "missing.fkf"), std::runtime_error);
    CHECK_THROWS_AS(write_field(tmp / "bad.fkf", 3, 3, Vector::Ones(5)),
                    std::invalid_argument);
}

TEST_CASE("state snapshots round-trip exactly", "[io]") {
    Scratch tmp;
    LowRankState state = LowRankState::zero_start(20);
    state.alpha = 3.0;
    state.step = 3;
    state.mean = gaussian_vector(20, 5);
    state.d = Vector::LinSpaced(4, 0.1, 0.9);
    state.w = gaussian_matrix(20, 4, 6, 0);
    write_state(tmp / "s.fks", state);

    const LowRankState back = read_state(tmp / "s.fks");
    CHECK(back.alpha == state.alpha);
    CHECK(back.step == state.step);
    CHECK((back.mean - state.mean).norm() == 0.0);
    CHECK((back.d - state.d).norm() == 0.0);
    CHECK((back.w - state.w).norm() == 0.0);
}

TEST_CASE("observation files round-trip", "[io]") {
    Scratch tmp;
    std::vector<Vector> batches = {gaussian_vector(5, 7), gaussian_vector(5, 8)};
    write_observations(tmp / "obs.csv", batches);
    const auto back = read_observations(tmp / "obs.csv", 2, 5);
    CHECK((back[0] - batches[0]).norm() == 0.0);
    CHECK((back[1] - batches[1]).norm() == 0.0);
    CHECK_THROWS_AS(read_observations(tmp / "obs.csv", 3, 5), std::runtime_error);
}

TEST_CASE("config defaults resolve and round-trip bit-identically", "[config]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    const ExperimentConfig cfg = ExperimentConfig::load(tmp / "cfg.json");

    CHECK(cfg.grid.nx == 10);
    CHECK(cfg.kernel.length == 0.2);
    CHECK(cfg.layout.receiver_x == cfg.grid.lx);  // defaulted from the grid
    CHECK(cfg.filter.kind == FilterKind::fkf);
    CHECK(cfg.seed == 99);

    cfg.save(tmp / "resolved1.json");
    const ExperimentConfig cfg2 = ExperimentConfig::load(tmp / "resolved1.json");
    cfg2.save(tmp / "resolved2.json");
    CHECK(oracle::read_bytes(tmp / "resolved1.json") ==
          oracle::read_bytes(tmp / "resolved2.json"));
}

TEST_CASE("defaults match the experiment setup", "[config]") {
    const ExperimentConfig cfg;
    CHECK(cfg.grid.nx == 59);
    CHECK(cfg.grid.ny == 55);
    CHECK(cfg.kernel.theta == 1e-4);
    CHECK(cfg.kernel.power == 0.5);
    CHECK(cfg.kernel.length == 0.2);
    CHECK(cfg.sigma2 == 2e-4);
    CHECK(cfg.layout.n_sou == 6);
    CHECK(cfg.layout.n_rec == 48);
    CHECK(cfg.time.n_steps == 20);
    CHECK(cfg.time.hours_per_step == 3.0);
    CHECK(cfg.filter.oversampling == 20);
    CHECK(cfg.filter.trunc_tol == 1e-5);
    CHECK(cfg.filter.ensemble_size == 1000);
    CHECK(cfg.n_m() == 288);
}

TEST_CASE("config validation catches malformed inputs", "[config]") {
    Scratch tmp;
    const auto expect_error = [&](const std::string& body, const std::string& needle) {
        write_text(tmp / "bad.json", body);
        try {
            ExperimentConfig::load(tmp / "bad.json");
            FAIL("expected a config error for: " + body);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };

    expect_error(R"({"grid": {"nx": 0}})", "grid");
    expect_error(R"({"bogus": 1})", "bogus");
    expect_error(R"({"filter": {"kind": "magic"}})", "kind");
    expect_error(R"({"noise": {"sigma2": -1.0}})", "sigma2");
    expect_error(R"({"kernel": {"power": 3.0}})", "power");
    expect_error(R"({"filter": {"relinearizations": 7}})", "relinearizations");
    expect_error(R"({"seed": -4})", "seed");
    expect_error(R"(not json at all)", "config");
}

TEST_CASE("generate writes a self-describing deterministic data set", "[cli]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);

    CHECK(fsys::exists(tmp / "data" / "config.json"));
    CHECK(fsys::exists(tmp / "data" / "observations.csv"));
    for (int k = 0; k <= 4; ++k)
        CHECK(fsys::exists(tmp / "data" /
                           ("truth_step00" + std::to_string(k) + ".fkf")));

    // truth at t=0 is the zero field
    CHECK(read_field(tmp / "data" / "truth_step000.fkf").data.norm() == 0.0);

    // byte-identical on regeneration
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data2").string()) == 0);
    CHECK(oracle::read_bytes(tmp / "data" / "observations.csv") ==
          oracle::read_bytes(tmp / "data2" / "observations.csv"));
    CHECK(oracle::read_bytes(tmp / "data" / "truth_step003.fkf") ==
          oracle::read_bytes(tmp / "data2" / "truth_step003.fkf"));

    // --seed overrides the config seed
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --seed 7" +
                    " --out " + (tmp / "data3").string()) == 0);
    CHECK(oracle::read_bytes(tmp / "data" / "observations.csv") !=
          oracle::read_bytes(tmp / "data3" / "observations.csv"));
}

TEST_CASE("noise-free observations equal the projected truth", "[cli]") {
    Scratch tmp;
    std::string cfg(kTinyConfig);
    cfg.replace(cfg.find("2e-4"), 4, "0.0");
    write_text(tmp / "cfg.json", cfg);
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);

    const ExperimentConfig loaded = ExperimentConfig::load(tmp / "data" / "config.json");
    const SparseRowMatrix h = build_H(loaded.grid, loaded.make_layout());
    const auto obs = read_observations(tmp / "data" / "observations.csv", 4, 24);
    for (int k = 1; k <= 4; ++k) {
        const Vector truth =
            read_field(tmp / "data" / ("truth_step00" + std::to_string(k) + ".fkf")).data;
        CHECK(oracle::rel_err(obs[static_cast<std::size_t>(k - 1)], Vector(h * truth)) <
              1e-13);
    }
}

TEST_CASE("run produces metrics and snapshots; filters cross-check", "[cli]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    std::string kf_cfg(kTinyConfig);
    kf_cfg.replace(kf_cfg.find("\"fkf\""), 5, "\"kf\"");
    write_text(tmp / "kf.json", kf_cfg);

    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);
    REQUIRE(run_cli("run --config " + (tmp / "cfg.json").string() + " --data " +
                    (tmp / "data").string() + " --out " + (tmp / "fkf").string()) == 0);
    REQUIRE(run_cli("run --config " + (tmp / "kf.json").string() + " --data " +
                    (tmp / "data").string() + " --out " + (tmp / "kf").string() +
                    " --reference " + (tmp / "fkf").string()) == 0);

    for (int k = 0; k <= 4; ++k)
        CHECK(fsys::exists(tmp / "fkf" /
                           ("mean_step00" + std::to_string(k) + ".fkf")));
    for (int k = 1; k <= 4; ++k)
        CHECK(fsys::exists(tmp / "fkf" /
                           ("state_step00" + std::to_string(k) + ".fks")));

    // full-rank fast filter and dense baseline agree at every step
    const oracle::Csv metrics = oracle::read_csv(tmp / "kf" / "metrics.csv");
    REQUIRE(metrics.rows.size() == 4);
    const Index err_col = metrics.col("rel_l2_error");
    for (const auto& row : metrics.rows)
        CHECK(row[static_cast<std::size_t>(err_col)] < 1e-8);

    // the first fast-filter mean equals the prior-only dense update
    const ExperimentConfig loaded = ExperimentConfig::load(tmp / "data" / "config.json");
    const SparseRowMatrix h = build_H(loaded.grid, loaded.make_layout());
    const Matrix gamma = oracle::kernel_matrix(loaded.grid, loaded.kernel);
    const auto obs = read_observations(tmp / "data" / "observations.csv", 4, 24);
    const Matrix hg = h * gamma;
    const Matrix s = hg * h.transpose() + loaded.sigma2 * Matrix::Identity(24, 24);
    const Vector want = hg.transpose() * Eigen::LLT<Matrix>(s).solve(obs[0]);
    const Vector got = read_field(tmp / "fkf" / "mean_step001.fkf").data;
    CHECK(oracle::rel_err(got, want) < 1e-8);

    // determinism: identical run -> identical metrics modulo wall time
    REQUIRE(run_cli("run --config " + (tmp / "cfg.json").string() + " --data " +
                    (tmp / "data").string() + " --out " + (tmp / "fkf2").string()) == 0);
    CHECK(oracle::read_bytes(tmp / "fkf" / "mean_step004.fkf") ==
          oracle::read_bytes(tmp / "fkf2" / "mean_step004.fkf"));
}

TEST_CASE("run rejects data/config shape mismatches", "[cli]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);

    std::string other(kTinyConfig);
    other.replace(other.find("\"nx\": 10"), 8, "\"nx\": 12");
    write_text(tmp / "other.json", other);
    CHECK(run_cli("run --config " + (tmp / "other.json").string() + " --data " +
                  (tmp / "data").string() + " --out " + (tmp / "r").string()) == 1);
}

TEST_CASE("uq and sample post-process a run directory", "[cli]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);
    REQUIRE(run_cli("run --config " + (tmp / "cfg.json").string() + " --data " +
                    (tmp / "data").string() + " --out " + (tmp / "run").string()) == 0);

    REQUIRE(run_cli("uq --data " + (tmp / "run").string() + " --out " +
                    (tmp / "uq").string() + " --what variance --steps 2,4") == 0);
    CHECK(fsys::exists(tmp / "uq" / "variance_step002.fkf"));
    CHECK(fsys::exists(tmp / "uq" / "variance_step004.fkf"));

    // recomputation matches the library exactly
    const ExperimentConfig cfg = ExperimentConfig::load(tmp / "run" / "config.json");
    const CovarianceOperator cov(cfg.grid, cfg.kernel, CovMode::fft);
    const LowRankState state = read_state(tmp / "run" / "state_step002.fks");
    CHECK(oracle::rel_err(read_field(tmp / "uq" / "variance_step002.fkf").data,
                          variance(state, cov)) < 1e-14);

    REQUIRE(run_cli("uq --data " + (tmp / "run").string() + " --out " +
                    (tmp / "uq").string() + " --what entropy") == 0);
    const oracle::Csv entropy = oracle::read_csv(tmp / "uq" / "uq_entropy.csv");
    REQUIRE(entropy.rows.size() == 4);
    CHECK(oracle::rel_err(entropy.rows[1][1], relative_entropy(
              read_state(tmp / "run" / "state_step002.fks"))) < 1e-12);

    // three realizations at three steps -> nine field files
    REQUIRE(run_cli("sample --data " + (tmp / "run").string() + " --out " +
                    (tmp / "samp").string() + " --count 3 --steps 1,2,4") == 0);
    int files = 0;
    for (const auto& entry : fsys::directory_iterator(tmp / "samp")) {
        (void)entry;
        ++files;
    }
    CHECK(files == 9);

    REQUIRE(run_cli("sample --data " + (tmp / "run").string() + " --out " +
                    (tmp / "samp2").string() + " --count 1 --steps 1") == 0);
    CHECK(oracle::read_bytes(tmp / "samp" / "sample_step001_r000.fkf") ==
          oracle::read_bytes(tmp / "samp2" / "sample_step001_r000.fkf"));
}

TEST_CASE("uq refuses runs without covariance snapshots", "[cli]") {
    Scratch tmp;
    std::string cfg(kTinyConfig);
    cfg.replace(cfg.find("\"fkf\""), 5, "\"kf\"");
    write_text(tmp / "cfg.json", cfg);
    REQUIRE(run_cli("generate --config " + (tmp / "cfg.json").string() + " --out " +
                    (tmp / "data").string()) == 0);
    REQUIRE(run_cli("run --config " + (tmp / "cfg.json").string() + " --data " +
                    (tmp / "data").string() + " --out " + (tmp / "run").string()) == 0);
    CHECK(run_cli("uq --data " + (tmp / "run").string() + " --out " +
                  (tmp / "uq").string() + " --what variance") == 1);
}

TEST_CASE("bench emits one row per grid", "[cli]") {
    Scratch tmp;
    write_text(tmp / "cfg.json", kTinyConfig);
    REQUIRE(run_cli("bench --config " + (tmp / "cfg.json").string() +
                    " --grids 8x8,10x10 --out " + (tmp / "bench.csv").string()) == 0);
    const oracle::Csv bench = oracle::read_csv(tmp / "bench.csv");
    REQUIRE(bench.rows.size() == 2);
    CHECK(bench.rows[0][bench.col("n_s")] == 64.0);
    CHECK(bench.rows[1][bench.col("n_s")] == 100.0);
    for (const auto& row : bench.rows) {
        CHECK(row[bench.col("offline_s")] >= 0.0);
        CHECK(row[bench.col("step_median_s")] > 0.0);
    }
}

TEST_CASE("exit codes distinguish config errors from runtime errors", "[cli]") {
    Scratch tmp;
    write_text(tmp / "bad.json", R"({"grid": {"nx": -3}})");
    CHECK(run_cli("generate --config " + (tmp / "bad.json").string() + " --out " +
                  (tmp / "x").string()) == 2);

    CHECK(run_cli("run --config /nonexistent.json --data /nope --out " +
                  (tmp / "y").string()) != 0);

    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("generate") == 2);  // missing required options
    CHECK(run_cli("generate --config " + (tmp / "missing.json").string() + " --out " +
                  (tmp / "d").string()) == 2);
}

TEST_CASE("oversized dense requests are refused with the policy threshold", "[cli]") {
    Scratch tmp;
    std::string big(kTinyConfig);
    big.replace(big.find("\"nx\": 10"), 8, "\"nx\": 150");
    big.replace(big.find("\"ny\": 10"), 8, "\"ny\": 150");
    big.replace(big.find("\"fkf\""), 5, "\"kf\"");
    write_text(tmp / "big.json", big);
    REQUIRE(run_cli("generate --config " + (tmp / "big.json").string() + " --out " +
                    (tmp / "data").string()) == 0);
    CHECK(run_cli("run --config " + (tmp / "big.json").string() + " --data " +
                  (tmp / "data").string() + " --out " + (tmp / "run").string()) == 1);

    // the library-level check names the limit
    try {
        ensure_dense_allowed(22500, false);
        FAIL("expected refusal");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("20000") != std::string::npos);
        CHECK(std::string(e.what()).find("force-dense") != std::string::npos);
    }
    CHECK_NOTHROW(ensure_dense_allowed(22500, true));
}
