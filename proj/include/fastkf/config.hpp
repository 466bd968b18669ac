#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "boxcox.hpp"
#include "grid.hpp"
#include "kernel.hpp"
#include "tomography.hpp"

namespace fastkf {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class FilterKind { kf, fkf, ekf, enkf };

inline std::string to_string(FilterKind kind) {
    switch (kind) {
        case FilterKind::kf: return "kf";
        case FilterKind::fkf: return "fkf";
        case FilterKind::ekf: return "ekf";
        case FilterKind::enkf: return "enkf";
    }
    return "?";
}

struct LayoutConfig {
    int n_sou = 6;
    int n_rec = 48;
    double source_x = 0.0;
    double receiver_x = 1.0;  // resolved to lx when absent
};

struct TimeConfig {
    int n_steps = 20;
    double hours_per_step = 3.0;
};

struct FilterConfig {
    FilterKind kind = FilterKind::fkf;
    Index rank = 0;  ///< 0 selects the full measurement rank n_m
    Index oversampling = 20;
    double trunc_tol = 1e-5;
    Index ensemble_size = 1000;
    double boxcox_alpha = 1.0;
    int relinearizations = 1;
    double init_slowness = 1e-4;  ///< initial physical slowness for ekf runs
};

namespace detail {

/// Strict accessor: typed reads with full key paths in every error and
/// rejection of unknown keys, so config typos fail loudly.
class JsonSection {
public:
    JsonSection(const nlohmann::json& j, std::string path)
        : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError("config: '" + path_ + "' must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    double number(const std::string& key, double fallback) const {
        if (!j_.contains(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_number())
            throw ConfigError("config: '" + path_ + "." + key + "' must be a number");
        return v.get<double>();
    }

    int integer(const std::string& key, int fallback) const {
        if (!j_.contains(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_number_integer())
            throw ConfigError("config: '" + path_ + "." + key + "' must be an integer");
        return v.get<int>();
    }

    std::string text(const std::string& key, const std::string& fallback) const {
        if (!j_.contains(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_string())
            throw ConfigError("config: '" + path_ + "." + key + "' must be a string");
        return v.get<std::string>();
    }

    void allow_only(std::initializer_list<const char*> keys) const {
        for (const auto& [key, value] : j_.items()) {
            if (std::find_if(keys.begin(), keys.end(), [&key](const char* k) {
                    return key == k;
                }) == keys.end())
                throw ConfigError("config: unknown key '" + path_ + "." + key + "'");
        }
    }

    const nlohmann::json& raw() const { return j_; }
    const std::string& path() const { return path_; }

private:
    const nlohmann::json& j_;
    std::string path_;
};

inline Point point2(const nlohmann::json& v, const std::string& path) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
        throw ConfigError("config: '" + path + "' must be an array of two numbers");
    return {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace detail

/// Fully-resolved experiment description.  Parsing applies documented
/// defaults; serialization writes every resolved value so that a config
/// round-trips bit-identically and a run directory is self-describing.
struct ExperimentConfig {
    Grid grid{59, 55, 1.0, 1.0};
    KernelSpec kernel;
    double sigma2 = 2e-4;
    LayoutConfig layout;
    TimeConfig time;
    PlumeModel plume;
    FilterConfig filter;
    std::uint64_t seed = 20260825;

    ExperimentConfig() {
        kernel.family = KernelFamily::powered_exponential;
        kernel.theta = 1e-4;
        kernel.length = 0.2;
        kernel.power = 0.5;
        kernel.nu = 0.5;
        kernel.alpha_scale = 0.0;
        plume.blobs = {GaussianBlob{{0.35, 0.5}, {0.003, 0.001}, {0.12, 0.10}, 2e-5}};
        plume.max_perturbation = 5e-3;
    }

    void validate() const {
        try {
            grid.validate();
            kernel.validate();
            plume.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("config: " + std::string(e.what()));
        }
        if (sigma2 < 0.0) throw ConfigError("config: noise.sigma2 must be nonnegative");
        if (layout.n_sou < 1 || layout.n_rec < 1)
            throw ConfigError("config: layout.n_sou and layout.n_rec must be positive");
        if (layout.source_x < 0.0 || layout.source_x > grid.lx ||
            layout.receiver_x < 0.0 || layout.receiver_x > grid.lx)
            throw ConfigError("config: layout well positions must lie inside [0, lx]");
        if (time.n_steps < 1) throw ConfigError("config: time.n_steps must be positive");
        if (!(time.hours_per_step > 0.0))
            throw ConfigError("config: time.hours_per_step must be positive");
        if (filter.rank < 0) throw ConfigError("config: filter.rank must be nonnegative");
        if (filter.oversampling < 0)
            throw ConfigError("config: filter.oversampling must be nonnegative");
        if (filter.trunc_tol < 0.0)
            throw ConfigError("config: filter.trunc_tol must be nonnegative");
        if (filter.ensemble_size < 2)
            throw ConfigError("config: filter.ensemble_size must be at least 2");
        if (!(filter.boxcox_alpha > 0.0))
            throw ConfigError("config: filter.boxcox_alpha must be positive");
        if (filter.relinearizations < 1 || filter.relinearizations > 5)
            throw ConfigError("config: filter.relinearizations must lie in [1, 5]");
        if (filter.init_slowness < 0.0)
            throw ConfigError("config: filter.init_slowness must be nonnegative");
    }

    /// Extra constraints that only bind when the filter actually runs;
    /// generating noise-free data with sigma2 = 0 is legitimate.
    void validate_for_run() const {
        validate();
        if ((filter.kind == FilterKind::fkf || filter.kind == FilterKind::ekf ||
             filter.kind == FilterKind::kf) &&
            !(sigma2 > 0.0))
            throw ConfigError("config: noise.sigma2 must be positive for kf/fkf/ekf runs");
    }

    static ExperimentConfig from_json(const nlohmann::json& root) {
        if (!root.is_object()) throw ConfigError("config: top level must be an object");
        ExperimentConfig cfg;
        for (const auto& [key, value] : root.items()) {
            (void)value;
            static const char* known[] = {"grid", "kernel", "noise",  "layout",
                                          "time", "plume",  "filter", "seed"};
            if (std::find_if(std::begin(known), std::end(known), [&key](const char* k) {
                    return key == k;
                }) == std::end(known))
                throw ConfigError("config: unknown top-level key '" + key + "'");
        }

        if (root.contains("grid")) {
            detail::JsonSection s(root.at("grid"), "grid");
            s.allow_only({"nx", "ny", "lx", "ly"});
            cfg.grid.nx = s.integer("nx", cfg.grid.nx);
            cfg.grid.ny = s.integer("ny", cfg.grid.ny);
            cfg.grid.lx = s.number("lx", cfg.grid.lx);
            cfg.grid.ly = s.number("ly", cfg.grid.ly);
        }
        if (cfg.grid.nx < 1 || cfg.grid.ny < 1)
            throw ConfigError("config: grid.nx and grid.ny must be positive");
        if (!(cfg.grid.lx > 0.0) || !(cfg.grid.ly > 0.0))
            throw ConfigError("config: grid.lx and grid.ly must be positive");

        cfg.kernel.length = 0.2 * std::max(cfg.grid.lx, cfg.grid.ly);
        if (root.contains("kernel")) {
            detail::JsonSection s(root.at("kernel"), "kernel");
            s.allow_only({"family", "theta", "length", "power", "nu", "alpha_scale"});
            const std::string family = s.text(
                "family", cfg.kernel.family == KernelFamily::matern ? "matern"
                                                                    : "powered-exponential");
            if (family == "powered-exponential")
                cfg.kernel.family = KernelFamily::powered_exponential;
            else if (family == "matern")
                cfg.kernel.family = KernelFamily::matern;
            else
                throw ConfigError("config: kernel.family must be 'powered-exponential' "
                                  "or 'matern', got '" + family + "'");
            cfg.kernel.theta = s.number("theta", cfg.kernel.theta);
            cfg.kernel.length = s.number("length", cfg.kernel.length);
            cfg.kernel.power = s.number("power", cfg.kernel.power);
            cfg.kernel.nu = s.number("nu", cfg.kernel.nu);
            cfg.kernel.alpha_scale = s.number("alpha_scale", cfg.kernel.alpha_scale);
        }
        try {
            cfg.kernel.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("config: kernel: " + std::string(e.what()));
        }

        if (root.contains("noise")) {
            detail::JsonSection s(root.at("noise"), "noise");
            s.allow_only({"sigma2"});
            cfg.sigma2 = s.number("sigma2", cfg.sigma2);
        }

        cfg.layout.receiver_x = cfg.grid.lx;
        if (root.contains("layout")) {
            detail::JsonSection s(root.at("layout"), "layout");
            s.allow_only({"n_sou", "n_rec", "source_x", "receiver_x"});
            cfg.layout.n_sou = s.integer("n_sou", cfg.layout.n_sou);
            cfg.layout.n_rec = s.integer("n_rec", cfg.layout.n_rec);
            cfg.layout.source_x = s.number("source_x", cfg.layout.source_x);
            cfg.layout.receiver_x = s.number("receiver_x", cfg.layout.receiver_x);
        }

        if (root.contains("time")) {
            detail::JsonSection s(root.at("time"), "time");
            s.allow_only({"n_steps", "hours_per_step"});
            cfg.time.n_steps = s.integer("n_steps", cfg.time.n_steps);
            cfg.time.hours_per_step = s.number("hours_per_step", cfg.time.hours_per_step);
        }

        if (root.contains("plume")) {
            detail::JsonSection s(root.at("plume"), "plume");
            s.allow_only({"max_perturbation", "blobs"});
            cfg.plume.max_perturbation =
                s.number("max_perturbation", cfg.plume.max_perturbation);
            if (s.has("blobs")) {
                const auto& blobs = s.raw().at("blobs");
                if (!blobs.is_array())
                    throw ConfigError("config: 'plume.blobs' must be an array");
                cfg.plume.blobs.clear();
                int idx = 0;
                for (const auto& bj : blobs) {
                    const std::string bpath = "plume.blobs[" + std::to_string(idx++) + "]";
                    detail::JsonSection bs(bj, bpath);
                    bs.allow_only({"center", "drift", "sigma", "rate"});
                    GaussianBlob blob;
                    if (bs.has("center"))
                        blob.center = detail::point2(bj.at("center"), bpath + ".center");
                    if (bs.has("drift"))
                        blob.drift = detail::point2(bj.at("drift"), bpath + ".drift");
                    if (bs.has("sigma"))
                        blob.sigma = detail::point2(bj.at("sigma"), bpath + ".sigma");
                    blob.rate = bs.number("rate", blob.rate);
                    cfg.plume.blobs.push_back(blob);
                }
            }
        }
        try {
            cfg.plume.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("config: plume: " + std::string(e.what()));
        }

        if (root.contains("filter")) {
            detail::JsonSection s(root.at("filter"), "filter");
            s.allow_only({"kind", "rank", "oversampling", "trunc_tol", "ensemble_size",
                          "boxcox_alpha", "relinearizations", "init_slowness"});
            const std::string kind = s.text("kind", to_string(cfg.filter.kind));
            if (kind == "kf")
                cfg.filter.kind = FilterKind::kf;
            else if (kind == "fkf")
                cfg.filter.kind = FilterKind::fkf;
            else if (kind == "ekf")
                cfg.filter.kind = FilterKind::ekf;
            else if (kind == "enkf")
                cfg.filter.kind = FilterKind::enkf;
            else
                throw ConfigError("config: filter.kind must be one of kf|fkf|ekf|enkf, "
                                  "got '" + kind + "'");
            cfg.filter.rank = s.integer("rank", static_cast<int>(cfg.filter.rank));
            cfg.filter.oversampling =
                s.integer("oversampling", static_cast<int>(cfg.filter.oversampling));
            cfg.filter.trunc_tol = s.number("trunc_tol", cfg.filter.trunc_tol);
            cfg.filter.ensemble_size =
                s.integer("ensemble_size", static_cast<int>(cfg.filter.ensemble_size));
            cfg.filter.boxcox_alpha = s.number("boxcox_alpha", cfg.filter.boxcox_alpha);
            cfg.filter.relinearizations =
                s.integer("relinearizations", cfg.filter.relinearizations);
            cfg.filter.init_slowness = s.number("init_slowness", cfg.filter.init_slowness);
        }

        if (root.contains("seed")) {
            const auto& v = root.at("seed");
            if (!v.is_number_unsigned() && !v.is_number_integer())
                throw ConfigError("config: 'seed' must be a nonnegative integer");
            if (v.is_number_integer() && v.get<long long>() < 0)
                throw ConfigError("config: 'seed' must be a nonnegative integer");
            cfg.seed = v.get<std::uint64_t>();
        }

        cfg.validate();
        return cfg;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["grid"] = {{"nx", grid.nx}, {"ny", grid.ny}, {"lx", grid.lx}, {"ly", grid.ly}};
        j["kernel"] = {{"family", kernel.family == KernelFamily::matern
                                      ? "matern"
                                      : "powered-exponential"},
                       {"theta", kernel.theta},
                       {"length", kernel.length},
                       {"power", kernel.power},
                       {"nu", kernel.nu},
                       {"alpha_scale", kernel.alpha_scale}};
        j["noise"] = {{"sigma2", sigma2}};
        j["layout"] = {{"n_sou", layout.n_sou},
                       {"n_rec", layout.n_rec},
                       {"source_x", layout.source_x},
                       {"receiver_x", layout.receiver_x}};
        j["time"] = {{"n_steps", time.n_steps}, {"hours_per_step", time.hours_per_step}};
        nlohmann::json blobs = nlohmann::json::array();
        for (const GaussianBlob& b : plume.blobs)
            blobs.push_back({{"center", {b.center[0], b.center[1]}},
                             {"drift", {b.drift[0], b.drift[1]}},
                             {"sigma", {b.sigma[0], b.sigma[1]}},
                             {"rate", b.rate}});
        j["plume"] = {{"max_perturbation", plume.max_perturbation}, {"blobs", blobs}};
        j["filter"] = {{"kind", to_string(filter.kind)},
                       {"rank", filter.rank},
                       {"oversampling", filter.oversampling},
                       {"trunc_tol", filter.trunc_tol},
                       {"ensemble_size", filter.ensemble_size},
                       {"boxcox_alpha", filter.boxcox_alpha},
                       {"relinearizations", filter.relinearizations},
                       {"init_slowness", filter.init_slowness}};
        j["seed"] = seed;
        return j;
    }

    static ExperimentConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: JSON parse error in " + path.string() + ": " +
                              e.what());
        }
        return from_json(j);
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write config file: " + path.string());
        out << to_json().dump(2) << "\n";
    }

    SourceReceiverLayout make_layout() const {
        return SourceReceiverLayout::cross_well(grid, layout.n_sou, layout.n_rec,
                                                layout.source_x, layout.receiver_x);
    }

    BoxCox transform() const { return BoxCox{filter.boxcox_alpha}; }

    Index n_m() const { return static_cast<Index>(layout.n_sou) * layout.n_rec; }

    Index ghep_rank() const { return filter.rank > 0 ? filter.rank : n_m(); }
};

}  // namespace fastkf
