// vpflow CLI: thin wrapper over the shared-library C API.
// Usage: vpflow run <config.json> [--threads N] [--out DIR] [--seed S]
#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "vpflow/vpflow.h"

int main(int argc, char** argv) {
    CLI::App app{"vpflow: variance-preserving probability-flow experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    int threads = 0;
    std::int64_t seed = -1;

    CLI::App* run = app.add_subcommand("run", "run an experiment from a JSON config");
    run->add_option("config", config_path, "path to the experiment config JSON")->required();
    run->add_option("--threads", threads, "internal parallelism cap (or VPFLOW_THREADS)");
    run->add_option("--out", out_dir, "output directory override");
    run->add_option("--seed", seed, "seed override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // invalid invocation maps to the config error code
    }

    const vpf_status status = vpf_run(config_path.c_str(), out_dir.empty() ? nullptr : out_dir.c_str(),
                                      threads, seed);
    if (status != VPF_OK && vpf_last_error()[0] != '\0')
        std::fprintf(stderr, "%s\n", vpf_last_error());
    return static_cast<int>(status);
}
