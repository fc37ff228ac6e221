// Command-line front end for the experiment pipelines.
//
//   clsrlab run -c config.json [-o output_dir] [-w workers] [-v]
//   clsrlab report <output_dir>
//
// Exit codes: 0 success, 1 directional-invariant failure, 2 configuration
// error, 3 runtime failure (partial artifacts plus a FAILED marker are left
// in the output directory).
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "clsr/error.hpp"
#include "clsr/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Conditional language-specific routing experiment harness"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir;
    int workers = 0;
    bool verbose = false;
    CLI::App* run = app.add_subcommand("run", "Run a pipeline from a JSON config");
    run->add_option("-c,--config", config_path, "Path to the experiment config file")
        ->required();
    run->add_option("-o,--output-dir", output_dir, "Override the config's output_dir");
    run->add_option("-w,--workers", workers, "Override the config's worker count");
    run->add_flag("-v,--verbose", verbose, "Print per-cell progress");

    std::string report_dir;
    CLI::App* report = app.add_subcommand("report", "Re-print aggregates and verdicts");
    report->add_option("dir", report_dir, "Output directory of a previous run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // help/version exit cleanly; bad flags are config errors
    }

    try {
        if (run->parsed()) {
            clsr::ExperimentConfig cfg = clsr::load_experiment_config(config_path);
            if (!output_dir.empty()) cfg.output_dir = output_dir;
            if (const char* env = std::getenv("CLSRLAB_OUTPUT_DIR");
                env != nullptr && output_dir.empty()) {
                cfg.output_dir = env;
            }
            if (workers > 0) cfg.workers = workers;
            return clsr::run_pipeline(cfg, verbose);
        }
        return clsr::report_directory(report_dir, std::cout);
    } catch (const clsr::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}
