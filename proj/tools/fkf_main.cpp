// Command-line front end: generate synthetic data, run filters, and post-process.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <fastkf/fastkf.hpp>

namespace {

std::vector<int> parse_steps(const std::string& text) {
    std::vector<int> steps;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        steps.push_back(std::stoi(item));
    }
    return steps;
}

fastkf::ExperimentConfig load_config(const std::string& path,
                                     const std::optional<std::uint64_t>& seed) {
    fastkf::ExperimentConfig cfg = fastkf::ExperimentConfig::load(path);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fast Kalman filtering for random-walk forecast models"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_path, reference_dir, what = "variance";
    std::string steps_text, grids_text = "59x55,117x109,234x219";
    std::optional<std::uint64_t> seed;
    bool force_dense = false;
    int count = 1;

    CLI::App* gen = app.add_subcommand("generate", "Write synthetic truth and observations");
    gen->add_option("--config", config_path, "Experiment config JSON")->required();
    gen->add_option("--out", out_path, "Output data directory")->required();
    gen->add_option("--seed", seed, "Override the config seed");

    CLI::App* run = app.add_subcommand("run", "Assimilate observations with the configured filter");
    run->add_option("--config", config_path, "Experiment config JSON")->required();
    run->add_option("--data", data_dir, "Data directory from 'generate'")->required();
    run->add_option("--out", out_path, "Output run directory")->required();
    run->add_option("--reference", reference_dir, "Run directory to compare means against");
    run->add_option("--seed", seed, "Override the config seed");
    run->add_flag("--force-dense", force_dense, "Allow dense paths above the size policy");

    CLI::App* uq = app.add_subcommand("uq", "Recompute uncertainty measures from a run");
    uq->add_option("--data", data_dir, "Run directory with state snapshots")->required();
    uq->add_option("--out", out_path, "Output directory")->required();
    uq->add_option("--what", what, "variance, trace, or entropy")
        ->check(CLI::IsMember({"variance", "trace", "entropy"}));
    uq->add_option("--steps", steps_text, "Comma-separated steps (default: all)");

    CLI::App* sample = app.add_subcommand("sample", "Draw conditional realizations from a run");
    sample->add_option("--data", data_dir, "Run directory with state snapshots")->required();
    sample->add_option("--out", out_path, "Output directory")->required();
    sample->add_option("--count", count, "Number of realizations")->check(CLI::PositiveNumber);
    sample->add_option("--steps", steps_text, "Comma-separated steps (default: all)");
    sample->add_option("--seed", seed, "Override the run seed for sampling");
    sample->add_flag("--force-dense", force_dense, "Allow dense paths above the size policy");

    CLI::App* bench = app.add_subcommand("bench", "Time offline and per-step filter costs");
    bench->add_option("--config", config_path, "Experiment config JSON")->required();
    bench->add_option("--grids", grids_text, "Comma-separated WxH grid sizes");
    bench->add_option("--out", out_path, "Output CSV path")->required();
    bench->add_option("--seed", seed, "Override the config seed");
    bench->add_flag("--force-dense", force_dense, "Allow dense paths above the size policy");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            fastkf::cmd_generate(load_config(config_path, seed), out_path);
        } else if (run->parsed()) {
            std::optional<std::filesystem::path> reference;
            if (!reference_dir.empty()) reference = reference_dir;
            fastkf::cmd_run(load_config(config_path, seed), data_dir, out_path, reference,
                            force_dense);
        } else if (uq->parsed()) {
            const fastkf::UqWhat measure = what == "variance" ? fastkf::UqWhat::variance
                                           : what == "trace"  ? fastkf::UqWhat::trace
                                                              : fastkf::UqWhat::entropy;
            fastkf::cmd_uq(data_dir, measure, parse_steps(steps_text), out_path);
        } else if (sample->parsed()) {
            fastkf::cmd_sample(data_dir, count, parse_steps(steps_text), seed, out_path,
                               force_dense);
        } else if (bench->parsed()) {
            const fastkf::ExperimentConfig cfg = load_config(config_path, seed);
            fastkf::cmd_bench(cfg, fastkf::parse_grid_list(grids_text, cfg.grid), out_path,
                              force_dense);
        }
    } catch (const fastkf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
