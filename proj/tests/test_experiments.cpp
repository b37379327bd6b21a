#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "experiments.hpp"
#include "testutil.hpp"

using namespace vpflow;
using nlohmann::json;

namespace {

std::string file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

int run_json(const json& config, const std::filesystem::path& dir,
             const std::filesystem::path& out) {
    const auto cfg_path = dir / "config.json";
    std::ofstream(cfg_path) << config.dump(2);
    experiments::RunOptions opts;
    opts.out_dir = out.string();
    return experiments::run_config_file(cfg_path.string(), opts);
}

json small_converge_config() {
    return json{{"experiment", "converge"},
                {"target", {{"name", "gmm1d"}}},
                {"sweep", {{{"delta", 0.05}, {"T", 1.5}}, {{"delta", 0.01}, {"T", 2.0}}}},
                {"grids", {{"metric", {{"lo", -8.0}, {"hi", 8.0}, {"count", 401}}}}},
                {"integrator", {{"rtol", 1e-6}, {"atol", 1e-8}}},
                {"seed", 5},
                {"threads", 2}};
}

}  // namespace

TEST_CASE("converge experiment writes sweep CSV and manifest") {
    const auto dir = testutil::fresh_dir("exp_converge");
    const auto out = dir / "out";
    REQUIRE(run_json(small_converge_config(), dir, out) == 0);

    const auto csv = experiments::read_csv((out / "converge.csv").string());
    REQUIRE(csv.header ==
            std::vector<std::string>{"delta", "T", "l1", "kl", "w1", "w2", "kl_bound_slack"});
    REQUIRE(csv.cells.size() == 2);
    // L1 decreases along the refining sweep and the KL slack stays nonnegative
    CHECK(csv.num(1, 2) < csv.num(0, 2));
    CHECK(csv.num(0, 6) >= -1e-6);
    CHECK(csv.num(1, 6) >= -1e-6);

    const auto manifest = json::parse(file_bytes(out / "manifest.json"));
    CHECK(manifest["experiment"] == "converge");
    CHECK(manifest["seed"] == 5);
    CHECK(manifest.contains("config_hash"));
    CHECK(manifest.contains("wall_time_s"));
    std::vector<std::string> outs = manifest["outputs"];
    CHECK(outs == std::vector<std::string>{"converge.csv"});
}

TEST_CASE("same config and seed produce byte-identical CSVs") {
    const auto dir = testutil::fresh_dir("exp_repro");
    REQUIRE(run_json(small_converge_config(), dir, dir / "a") == 0);
    REQUIRE(run_json(small_converge_config(), dir, dir / "b") == 0);
    CHECK(file_bytes(dir / "a" / "converge.csv") == file_bytes(dir / "b" / "converge.csv"));

    // training runs included
    json train = {{"experiment", "train_score"},
                  {"target", {{"name", "gmm1d"}}},
                  {"training", {{"steps", 30}, {"batch", 64}}},
                  {"seed", 9}};
    REQUIRE(run_json(train, dir, dir / "ta") == 0);
    REQUIRE(run_json(train, dir, dir / "tb") == 0);
    CHECK(file_bytes(dir / "ta" / "training_log.csv") == file_bytes(dir / "tb" / "training_log.csv"));
    CHECK(file_bytes(dir / "ta" / "score.ckpt") == file_bytes(dir / "tb" / "score.ckpt"));
}

TEST_CASE("invalid configs exit with code 2 and point at the field") {
    const auto dir = testutil::fresh_dir("exp_invalid");

    json bad_delta = small_converge_config();
    bad_delta["sweep"] = {{{"delta", 2.0}, {"T", 1.0}}};
    CHECK(run_json(bad_delta, dir, dir / "o1") == 2);

    json unknown_key = small_converge_config();
    unknown_key["frobnicate"] = 1;
    CHECK(run_json(unknown_key, dir, dir / "o2") == 2);

    json unknown_exp = {{"experiment", "nope"}};
    CHECK(run_json(unknown_exp, dir, dir / "o3") == 2);

    json bad_target = small_converge_config();
    bad_target["target"]["name"] = "mystery";
    CHECK(run_json(bad_target, dir, dir / "o4") == 2);

    // empty target list for compare
    json empty_compare = {{"experiment", "compare"},
                          {"targets", json::array()},
                          {"time", {{"delta", 0.01}, {"T", 2.0}}}};
    CHECK(run_json(empty_compare, dir, dir / "o5") == 2);

    // unparseable file
    const auto bad_path = dir / "broken.json";
    std::ofstream(bad_path) << "{ not json";
    experiments::RunOptions opts;
    CHECK(experiments::run_config_file(bad_path.string(), opts) == 2);
    CHECK(experiments::run_config_file((dir / "missing.json").string(), opts) == 2);
}

TEST_CASE("score_bounds emits the L(t) curve CSV") {
    const auto dir = testutil::fresh_dir("exp_ltc");
    json config = {{"experiment", "score_bounds"},
                   {"target", {{"name", "gmm1d"}}},
                   {"grids",
                    {{"time", {{"lo", 1e-2}, {"hi", 5.0}, {"count", 8}, {"scale", "log"}}},
                     {"eval", {{"lo", -4.5}, {"hi", 2.5}, {"count", 21}}}}},
                   {"seed", 1},
                   {"threads", 2}};
    REQUIRE(run_json(config, dir, dir / "out") == 0);
    const auto csv = experiments::read_csv((dir / "out" / "ltc_curve.csv").string());
    REQUIRE(csv.header == std::vector<std::string>{"t", "empirical_L", "theoretical_L"});
    REQUIRE(csv.cells.size() == 8);
    for (std::size_t r = 0; r < csv.cells.size(); ++r) {
        CHECK(csv.num(r, 1) <= csv.num(r, 2) * (1.0 + 1e-6));  // bound dominance per row
    }
    // terminal behavior: empirical_L at t=5 close to 1
    CHECK(csv.num(7, 1) > 0.8);
    CHECK(csv.num(7, 1) < 1.2);
}

TEST_CASE("transport experiment writes grid, trajectory and samples") {
    const auto dir = testutil::fresh_dir("exp_transport");
    json config = {{"experiment", "transport"},
                   {"target", {{"name", "gmm1d"}}},
                   {"time", {{"delta", 0.01}, {"T", 2.0}}},
                   {"integrator", {{"rtol", 1e-6}, {"atol", 1e-8}}},
                   {"grids", {{"eval", {{"lo", -4.0}, {"hi", 2.0}, {"count", 11}}}}},
                   {"samples", 50},
                   {"seed", 3}};
    REQUIRE(run_json(config, dir, dir / "out") == 0);
    const auto grid = experiments::read_csv((dir / "out" / "transport_grid.csv").string());
    CHECK(grid.header == std::vector<std::string>{"x0", "y0", "logdet"});
    CHECK(grid.cells.size() == 11);
    const auto traj = experiments::read_csv((dir / "out" / "trajectory.csv").string());
    CHECK(traj.header == std::vector<std::string>{"t", "x0", "logdet"});
    CHECK(traj.cells.size() > 3);
    CHECK(traj.num(0, 0) == 0.01);
    CHECK(traj.num(traj.cells.size() - 1, 0) == 2.0);
    const auto samples = experiments::read_csv((dir / "out" / "samples.csv").string());
    CHECK(samples.header == std::vector<std::string>{"dim", "x0"});
    CHECK(samples.cells.size() == 50);
    CHECK(samples.num(0, 0) == 1.0);
}

TEST_CASE("compare experiment emits the table-shaped CSV") {
    const auto dir = testutil::fresh_dir("exp_compare");
    json config = {{"experiment", "compare"},
                   {"targets", {{{"name", "gmm1d"}}}},
                   {"time", {{"delta", 0.01}, {"T", 2.0}}},
                   {"training",
                    {{"k", 3}, {"L", {0.25, 0.95}}, {"steps", 60}, {"batch", 64},
                     {"score_steps", 60}, {"score_batch", 64}}},
                   {"grids", {{"metric", {{"lo", -8.0}, {"hi", 8.0}, {"count", 201}}}}},
                   {"integrator", {{"rtol", 1e-6}, {"atol", 1e-8}}},
                   {"seed", 2},
                   {"threads", 2}};
    REQUIRE(run_json(config, dir, dir / "out") == 0);
    const auto csv = experiments::read_csv((dir / "out" / "compare.csv").string());
    REQUIRE(csv.header == std::vector<std::string>{"target", "model", "L_or_T", "l1", "kl"});
    REQUIRE(csv.cells.size() == 4);  // two iresnets + exact flow + learned flow
    CHECK(csv.cells[0][0] == "gmm1d");
    CHECK(csv.cells[0][1] == "iresnet_L0p25");
    CHECK(csv.cells[1][1] == "iresnet_L0p95");
    CHECK(csv.cells[2][1] == "flow_exact");
    CHECK(csv.cells[3][1] == "flow_learned");
    // the exact-score flow beats the (barely trained) learned flow
    CHECK(csv.num(2, 3) <= csv.num(3, 3));
}

TEST_CASE("csv round trip through the project reader") {
    const auto dir = testutil::fresh_dir("exp_csv");
    const std::vector<std::string> header = {"a", "b"};
    const std::vector<std::vector<double>> rows = {{1.5, -2.25}, {3.0, 0.1}};
    experiments::write_csv((dir / "x.csv").string(), header, rows);
    const auto back = experiments::read_csv((dir / "x.csv").string());
    CHECK(back.header == header);
    REQUIRE(back.cells.size() == 2);
    CHECK(back.num(0, 0) == 1.5);
    CHECK(back.num(0, 1) == -2.25);
    CHECK(back.num(1, 1) == 0.1);
}

TEST_CASE("parallel grid sweeps match serial evaluation") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    vp::VpScoreModel model(gmm);
    Vec serial(101), parallel(101);
    for (int i = 0; i <= 100; ++i)
        serial[i] = model.score(0.5, testutil::vec1(-4.0 + 0.06 * i))[0];
    parallel_for(101, 4, [&](std::int64_t i) {
        parallel[i] = model.score(0.5, testutil::vec1(-4.0 + 0.06 * static_cast<int>(i)))[0];
    });
    CHECK((serial - parallel).norm() == 0.0);
}
