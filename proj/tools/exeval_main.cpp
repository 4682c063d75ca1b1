// exeval command line: validate configs, run evaluation pipelines, export
// plot data, and score externally produced explanation files.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "exeval/config.hpp"
#include "exeval/pipeline.hpp"

namespace {

unsigned default_workers() {
    if (const char* env = std::getenv("EXEVAL_WORKERS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"exeval: evaluation harness for example-based explainers"};
    app.require_subcommand(1);

    unsigned workers = default_workers();
    app.add_option("--workers", workers,
                   "worker threads for independent units (never affects output values)")
        ->capture_default_str();

    std::string config_path;
    auto* validate = app.add_subcommand("validate", "validate a run config and print it");
    validate->add_option("config", config_path, "config file (JSON)")->required();

    auto* run = app.add_subcommand("run", "execute the full evaluation pipeline");
    run->add_option("config", config_path, "config file (JSON)")->required();

    std::string run_dir;
    std::size_t top_k = 2;
    auto* plots = app.add_subcommand("export-plots", "write plot CSVs from a run directory");
    plots->add_option("dir", run_dir, "run output directory")->required();
    plots->add_option("--top-k", top_k, "rows in the top-popular CSV")->capture_default_str();

    std::string explanations_path, dataset_path, method_label = "external";
    auto* ingest = app.add_subcommand(
        "explain-file", "compute metrics over externally produced explanations");
    ingest->add_option("explanations", explanations_path, "explanations JSONL")->required();
    ingest->add_option("dataset", dataset_path, "training corpus (csv or jsonl)")->required();
    ingest->add_option("config", config_path, "config file (JSON)")->required();
    ingest->add_option("--method", method_label, "method label for the report")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate->parsed()) {
            const auto cfg = exeval::validate_config(config_path);
            std::cout << cfg.effective.dump(2) << '\n';
            return 0;
        }
        if (run->parsed()) {
            const auto cfg = exeval::validate_config(config_path);
            try {
                exeval::run_pipeline(cfg, workers, std::cout);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << '\n';
                return 2;
            }
            std::cout << "run complete: " << cfg.output.dir << '\n';
            return 0;
        }
        if (plots->parsed()) {
            try {
                const auto files = exeval::export_plots(run_dir, top_k);
                for (const auto& f : files) std::cout << f << '\n';
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << '\n';
                return 2;
            }
            return 0;
        }
        if (ingest->parsed()) {
            const auto cfg = exeval::validate_config(config_path);
            try {
                exeval::ingest_explanations(cfg, explanations_path, dataset_path, method_label,
                                            std::cout);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << '\n';
                return 2;
            }
            return 0;
        }
    } catch (const exeval::validation_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
