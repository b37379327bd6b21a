#ifndef VPFLOW_EXPERIMENTS_HPP
#define VPFLOW_EXPERIMENTS_HPP

#include "iresnet.hpp"
#include "metrics.hpp"
#include "score_learn.hpp"

namespace vpflow::experiments {

struct RunOptions {
    std::string out_dir;            // overrides config "output_dir" when nonempty
    int threads = 0;                // 0 = config / VPFLOW_THREADS / 1
    std::int64_t seed_override = -1;  // >= 0 overrides config "seed"
};

// Dispatches the experiment named in the config; writes all declared CSV/JSON
// outputs plus manifest.json. Throws ConfigError (exit 2) / NumericError (exit 3).
void run_config(const nlohmann::json& config, const RunOptions& opts);

// Parses the file, runs it, maps errors to exit codes 0/2/3 and prints a
// machine-readable error JSON to stderr on failure.
int run_config_file(const std::string& path, const RunOptions& opts);

// CSV helpers (all emitted CSVs use these and round-trip through read_csv).
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);
void write_csv_text(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows);
struct CsvData {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> cells;
    double num(std::size_t row, std::size_t col) const;
    std::size_t col_index(const std::string& name) const;
};
CsvData read_csv(const std::string& path);

// Tail-guard-safe evaluation box for empirical Lipschitz sweeps and probes.
metrics::GridSpec default_eval_grid(const targets::TargetDensity& target, int count_per_axis);

// Default metric grid: [-8,8] x 1601 in 1D, [-4,4]^2 x 201^2 in 2D.
metrics::GridSpec default_metric_grid(int dim);

targets::TargetPtr target_from_json(const nlohmann::json& block);

}  // namespace vpflow::experiments

#endif
