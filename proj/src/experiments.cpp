#include "experiments.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace vpflow::experiments {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "1.0.0";

void check_allowed(const nlohmann::json& obj, std::initializer_list<const char*> keys,
                   const std::string& path) {
    if (!obj.is_object()) throw ConfigError(path + " must be a JSON object", path);
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : keys)
            if (it.key() == k) { ok = true; break; }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + path,
                                   path + "/" + it.key());
    }
}

double require_double(const nlohmann::json& obj, const char* key, const std::string& path) {
    if (!obj.contains(key)) throw ConfigError("missing required field " + path + "/" + key,
                                              path + "/" + key);
    if (!obj[key].is_number()) throw ConfigError(path + "/" + key + " must be a number",
                                                 path + "/" + key);
    return obj[key].get<double>();
}

metrics::GridSpec grid_from_json(const nlohmann::json& g, const std::string& path) {
    check_allowed(g, {"lo", "hi", "count"}, path);
    const auto& lo = g.at("lo");
    if (lo.is_number()) {
        return metrics::GridSpec::d1(g.at("lo").get<double>(), g.at("hi").get<double>(),
                                     g.at("count").get<int>());
    }
    if (!lo.is_array() || lo.size() != 2)
        throw ConfigError(path + "/lo must be a number or a 2-array", path + "/lo");
    return metrics::GridSpec::d2(g.at("lo")[0].get<double>(), g.at("hi")[0].get<double>(),
                                 g.at("count")[0].get<int>(), g.at("lo")[1].get<double>(),
                                 g.at("hi")[1].get<double>(), g.at("count")[1].get<int>());
}

Vec time_grid_from_json(const nlohmann::json& g, const std::string& path) {
    check_allowed(g, {"lo", "hi", "count", "scale"}, path);
    const double lo = require_double(g, "lo", path), hi = require_double(g, "hi", path);
    const int n = g.at("count").get<int>();
    if (n < 1 || !(hi >= lo)) throw ConfigError("invalid time grid at " + path, path);
    const std::string scale = g.value("scale", "log");
    Vec t(n);
    if (n == 1) {
        t[0] = lo;
        return t;
    }
    if (scale == "log") {
        if (!(lo > 0.0)) throw ConfigError(path + ": log scale requires lo > 0", path + "/lo");
        for (int i = 0; i < n; ++i)
            t[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1));
    } else if (scale == "linear") {
        for (int i = 0; i < n; ++i) t[i] = lo + (hi - lo) * i / (n - 1);
    } else {
        throw ConfigError(path + "/scale must be 'log' or 'linear'", path + "/scale");
    }
    return t;
}

flow::IntegratorConfig integrator_from_json(const nlohmann::json& config) {
    flow::IntegratorConfig cfg;
    if (!config.contains("integrator")) return cfg;
    const auto& j = config["integrator"];
    check_allowed(j, {"rtol", "atol", "max_steps", "initial_step"}, "/integrator");
    cfg.rtol = j.value("rtol", cfg.rtol);
    cfg.atol = j.value("atol", cfg.atol);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    cfg.initial_step = j.value("initial_step", cfg.initial_step);
    cfg.validate();
    return cfg;
}

score_learn::DsmConfig dsm_config_from_json(const nlohmann::json& j, std::uint64_t seed) {
    check_allowed(j, {"T", "delta_train", "batch", "steps", "lr", "width", "blocks",
                      "fourier_features", "fourier_scale"},
                  "/training");
    score_learn::DsmConfig cfg;
    cfg.T = j.value("T", cfg.T);
    cfg.delta_train = j.value("delta_train", cfg.delta_train);
    cfg.batch = j.value("batch", cfg.batch);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.width = j.value("width", cfg.width);
    cfg.n_blocks = j.value("blocks", cfg.n_blocks);
    cfg.fourier_features = j.value("fourier_features", cfg.fourier_features);
    cfg.fourier_scale = j.value("fourier_scale", cfg.fourier_scale);
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

struct RunContext {
    fs::path out;
    std::uint64_t seed = 0;
    int threads = 1;
    std::vector<std::string> outputs;

    fs::path file(const std::string& name) {
        outputs.push_back(name);
        return out / name;
    }
};

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw NumericError("cannot open output file '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

}  // namespace

void write_csv_text(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) throw NumericError("cannot open output file '" + path + "'");
    for (std::size_t i = 0; i < header.size(); ++i)
        out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        if (row.size() != header.size())
            throw NumericError("write_csv: row width does not match header");
        for (std::size_t i = 0; i < row.size(); ++i)
            out << (i ? "," : "") << row[i];
        out << "\n";
    }
    if (!out) throw NumericError("write_csv: write failed for '" + path + "'");
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::vector<std::vector<std::string>> cells;
    cells.reserve(rows.size());
    for (const auto& row : rows) {
        std::vector<std::string> r;
        r.reserve(row.size());
        for (double v : row) r.push_back(format_double(v));
        cells.push_back(std::move(r));
    }
    write_csv_text(path, header, cells);
}

double CsvData::num(std::size_t row, std::size_t col) const {
    return std::stod(cells.at(row).at(col));
}

std::size_t CsvData::col_index(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw NumericError("read_csv: no column named '" + name + "'");
}

CsvData read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NumericError("read_csv: cannot open '" + path + "'");
    CsvData data;
    std::string line;
    if (!std::getline(in, line)) throw NumericError("read_csv: empty file '" + path + "'");
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) data.header.push_back(cell);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::stringstream ls(line);
        while (std::getline(ls, cell, ',')) row.push_back(cell);
        if (row.size() != data.header.size())
            throw NumericError("read_csv: ragged row in '" + path + "'");
        data.cells.push_back(std::move(row));
    }
    return data;
}

targets::TargetPtr target_from_json(const nlohmann::json& block) {
    check_allowed(block, {"name", "params"}, "/target");
    if (!block.contains("name")) throw ConfigError("missing /target/name", "/target/name");
    return targets::make_builtin_target(block.at("name").get<std::string>(),
                                        block.value("params", nlohmann::json::object()));
}

metrics::GridSpec default_metric_grid(int dim) {
    if (dim == 1) return metrics::GridSpec::d1(-8.0, 8.0, 1601);
    return metrics::GridSpec::d2(-4.0, 4.0, 201, -4.0, 4.0, 201);
}

metrics::GridSpec default_eval_grid(const targets::TargetDensity& target, int n) {
    using targets::ClassTag;
    if (target.dim == 1) {
        double lo = -3.0, hi = 3.0;
        if (target.class_tag == ClassTag::A1) {
            lo = -target.support_radius - 1.0;
            hi = target.support_radius + 1.0;
        } else if (target.mixture) {
            lo = std::numeric_limits<double>::infinity();
            hi = -lo;
            for (int k = 0; k < target.mixture->components(); ++k) {
                const double s = std::sqrt(target.mixture->covs[static_cast<std::size_t>(k)](0, 0));
                lo = std::min(lo, target.mixture->means(0, k) - 4.0 * s);
                hi = std::max(hi, target.mixture->means(0, k) + 4.0 * s);
            }
        } else if (target.name == "cubic_pullback") {
            lo = -2.0;
            hi = 2.0;
        }
        return metrics::GridSpec::d1(lo, hi, n);
    }
    // 2D: bounding box of the structural mass region, padded.
    double lo0 = -3.0, hi0 = 3.0, lo1 = -3.0, hi1 = 3.0;
    if (target.box_mixture) {
        lo0 = lo1 = std::numeric_limits<double>::infinity();
        hi0 = hi1 = -lo0;
        for (const auto& b : target.box_mixture->boxes) {
            lo0 = std::min(lo0, b.lo[0]); hi0 = std::max(hi0, b.hi[0]);
            lo1 = std::min(lo1, b.lo[1]); hi1 = std::max(hi1, b.hi[1]);
        }
        lo0 -= 0.5; hi0 += 0.5; lo1 -= 0.5; hi1 += 0.5;
    } else if (target.mixture) {
        lo0 = lo1 = std::numeric_limits<double>::infinity();
        hi0 = hi1 = -lo0;
        for (int k = 0; k < target.mixture->components(); ++k) {
            const double s = std::sqrt(target.mixture->covs[static_cast<std::size_t>(k)](0, 0));
            lo0 = std::min(lo0, target.mixture->means(0, k) - 3.0 * s);
            hi0 = std::max(hi0, target.mixture->means(0, k) + 3.0 * s);
            lo1 = std::min(lo1, target.mixture->means(1, k) - 3.0 * s);
            hi1 = std::max(hi1, target.mixture->means(1, k) + 3.0 * s);
        }
    } else if (target.convolution) {
        Mat nodes;
        Vec w;
        target.convolution->base.discretize(&nodes, &w, 64);
        const double pad = 3.0 * std::sqrt(target.convolution->sigma(0, 0));
        lo0 = nodes.row(0).minCoeff() - pad;
        hi0 = nodes.row(0).maxCoeff() + pad;
        lo1 = nodes.row(1).minCoeff() - pad;
        hi1 = nodes.row(1).maxCoeff() + pad;
    }
    return metrics::GridSpec::d2(lo0, hi0, n, lo1, hi1, n);
}

namespace {

// ---- individual experiments ---------------------------------------------

void run_score_bounds(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    const auto model = std::make_shared<vp::VpScoreModel>(target);

    Vec tgrid;
    metrics::GridSpec eval = default_eval_grid(*target, target->dim == 1 ? 41 : 15);
    if (config.contains("grids")) {
        check_allowed(config["grids"], {"time", "eval", "metric"}, "/grids");
        if (config["grids"].contains("time"))
            tgrid = time_grid_from_json(config["grids"]["time"], "/grids/time");
        if (config["grids"].contains("eval"))
            eval = grid_from_json(config["grids"]["eval"], "/grids/eval");
    }
    if (tgrid.size() == 0) {
        nlohmann::json def = {{"lo", 1e-3}, {"hi", 5.0}, {"count", 40}, {"scale", "log"}};
        tgrid = time_grid_from_json(def, "/grids/time");
    }
    const double horizon = tgrid[tgrid.size() - 1];
    const auto bound = vp::make_lipschitz_bound(*target, horizon);
    const Mat pts = eval.points();

    std::optional<score_learn::LearnedScore> learned;
    if (config.contains("checkpoint"))
        learned = score_learn::LearnedScore::from_checkpoint(
            nn::load_checkpoint(config.at("checkpoint").get<std::string>()));

    std::vector<std::string> header = {"t", "empirical_L", "theoretical_L"};
    if (learned) header.push_back("learned_L");
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(tgrid.size()));
    parallel_for(tgrid.size(), ctx.threads, [&](std::int64_t i) {
        const double t = tgrid[static_cast<int>(i)];
        std::vector<double> row = {t, vp::empirical_L(*model, t, pts), bound(t)};
        if (learned) {
            double best = 0.0;
            for (int c = 0; c < pts.cols(); ++c)
                best = std::max(best, opnorm_small(learned->input_jacobian(t, pts.col(c))));
            row.push_back(best);
        }
        rows[static_cast<std::size_t>(i)] = std::move(row);
    });
    write_csv(ctx.file("ltc_curve.csv").string(), header, rows);
}

void run_transport(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    const auto model = std::make_shared<vp::VpScoreModel>(target);
    const flow::FlowField field = flow::FlowField::from_model(model);
    const flow::IntegratorConfig icfg = integrator_from_json(config);
    check_allowed(config.at("time"), {"delta", "T"}, "/time");
    const double delta = require_double(config.at("time"), "delta", "/time");
    const double T = require_double(config.at("time"), "T", "/time");
    if (!(delta < T)) throw ConfigError("requires delta < T", "/time/delta");

    metrics::GridSpec eval = default_eval_grid(*target, target->dim == 1 ? 41 : 9);
    if (config.contains("grids")) {
        check_allowed(config["grids"], {"eval"}, "/grids");
        if (config["grids"].contains("eval"))
            eval = grid_from_json(config["grids"]["eval"], "/grids/eval");
    }

    // grid evaluations of the transport map
    const Mat pts = eval.points();
    const int d = target->dim;
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(pts.cols()));
    parallel_for(pts.cols(), ctx.threads, [&](std::int64_t i) {
        const auto r = flow::transport(field, delta, T, pts.col(static_cast<int>(i)), icfg);
        std::vector<double> row;
        for (int k = 0; k < d; ++k) row.push_back(pts(k, static_cast<int>(i)));
        for (int k = 0; k < d; ++k) row.push_back(r.endpoint[k]);
        row.push_back(r.logdet);
        rows[static_cast<std::size_t>(i)] = std::move(row);
    });
    std::vector<std::string> header;
    for (int k = 0; k < d; ++k) header.push_back("x" + std::to_string(k));
    for (int k = 0; k < d; ++k) header.push_back("y" + std::to_string(k));
    header.push_back("logdet");
    write_csv(ctx.file("transport_grid.csv").string(), header, rows);

    // one dense trajectory from the eval box center
    Vec x0 = Vec::Zero(d);
    for (int k = 0; k < d; ++k) x0[k] = 0.5 * (eval.lo[k] + eval.hi[k]);
    std::vector<flow::TrajectoryPoint> traj;
    flow::transport(field, delta, T, x0, icfg, &traj);
    std::vector<std::string> theader = {"t"};
    for (int k = 0; k < d; ++k) theader.push_back("x" + std::to_string(k));
    theader.push_back("logdet");
    std::vector<std::vector<double>> trows;
    for (const auto& p : traj) {
        std::vector<double> row = {p.t};
        for (int k = 0; k < d; ++k) row.push_back(p.x[k]);
        row.push_back(p.logdet);
        trows.push_back(std::move(row));
    }
    write_csv(ctx.file("trajectory.csv").string(), theader, trows);

    // seeded sample export: header dim,x0[,x1]
    const int n_samples = config.value("samples", 0);
    if (n_samples > 0) {
        const Mat s = target->sample(n_samples, ctx.seed);
        std::vector<std::string> sheader = {"dim", "x0"};
        if (d == 2) sheader.push_back("x1");
        std::vector<std::vector<double>> srows;
        for (int i = 0; i < s.cols(); ++i) {
            std::vector<double> row = {static_cast<double>(d), s(0, i)};
            if (d == 2) row.push_back(s(1, i));
            srows.push_back(std::move(row));
        }
        write_csv(ctx.file("samples.csv").string(), sheader, srows);
    }
}

void run_converge(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    const auto model = std::make_shared<vp::VpScoreModel>(target);
    const flow::FlowField field = flow::FlowField::from_model(model);
    const flow::IntegratorConfig icfg = integrator_from_json(config);

    if (!config.contains("sweep") || !config["sweep"].is_array() || config["sweep"].empty())
        throw ConfigError("converge requires a nonempty /sweep array of {delta,T}", "/sweep");

    metrics::GridSpec grid = default_metric_grid(target->dim);
    if (config.contains("grids")) {
        check_allowed(config["grids"], {"metric"}, "/grids");
        if (config["grids"].contains("metric"))
            grid = grid_from_json(config["grids"]["metric"], "/grids/metric");
    }

    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < config["sweep"].size(); ++i) {
        const auto& entry = config["sweep"][i];
        const std::string path = "/sweep/" + std::to_string(i);
        check_allowed(entry, {"delta", "T"}, path);
        const double delta = require_double(entry, "delta", path);
        const double T = require_double(entry, "T", path);
        if (!(delta < T)) throw ConfigError("requires delta < T", path + "/delta");
        const auto rep = metrics::bound_suite(*model, &field, delta, T, grid, icfg, ctx.threads);
        rows.push_back({delta, T, rep.at("l1_pullback"),
                        rep.values.count("kl_pullback") ? rep.at("kl_pullback") : std::nan(""),
                        target->dim == 1 ? rep.at("w1_pullback") : std::nan(""),
                        target->dim == 1 ? rep.at("w2_pullback") : std::nan(""),
                        rep.at("slack_kl_exp")});
    }
    write_csv(ctx.file("converge.csv").string(),
              {"delta", "T", "l1", "kl", "w1", "w2", "kl_bound_slack"}, rows);
}

void run_train_score(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    if (!config.contains("training")) throw ConfigError("train_score requires /training", "/training");
    const auto cfg = dsm_config_from_json(config["training"], ctx.seed);
    const auto result = score_learn::train_dsm(*target, cfg);

    std::vector<std::vector<double>> rows;
    for (const auto& e : result.log)
        rows.push_back({static_cast<double>(e.step), e.loss_ema});
    write_csv(ctx.file("training_log.csv").string(), {"step", "loss_ema"}, rows);
    nn::save_checkpoint(ctx.file("score.ckpt").string(), result.model.to_checkpoint());

    nlohmann::json rep;
    rep["final_loss_ema"] = result.log.empty() ? std::nan("") : result.log.back().loss_ema;
    rep["steps"] = cfg.steps;
    rep["target"] = target->name;
    write_json_file(ctx.file("train_report.json"), rep);
}

std::string l_label(double L) {
    std::ostringstream os;
    os << L;
    std::string s = os.str();
    for (auto& c : s)
        if (c == '.') c = 'p';
    return s;
}

void run_train_iresnet(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    if (!config.contains("training")) throw ConfigError("train_iresnet requires /training", "/training");
    metrics::GridSpec heat_grid = default_eval_grid(*target, target->dim == 2 ? 101 : 2);
    if (config.contains("grids")) {
        check_allowed(config["grids"], {"heatmap"}, "/grids");
        if (config["grids"].contains("heatmap"))
            heat_grid = grid_from_json(config["grids"]["heatmap"], "/grids/heatmap");
    }
    const auto& j = config["training"];
    check_allowed(j, {"k", "L", "steps", "batch", "lr"}, "/training");
    const int k = j.value("k", target->dim == 1 ? 5 : 20);
    const long steps = j.value("steps", 3000L);
    iresnet::MleTrainConfig mcfg;
    mcfg.batch = j.value("batch", 256);
    mcfg.lr = j.value("lr", 1e-3);
    std::vector<double> Ls;
    if (j.contains("L")) {
        if (j["L"].is_array())
            for (const auto& v : j["L"]) Ls.push_back(v.get<double>());
        else
            Ls.push_back(j["L"].get<double>());
    } else {
        Ls = {0.25, 0.75, 0.95};
    }

    nlohmann::json report;
    for (double L : Ls) {
        const auto res = iresnet::train_mle(*target, k, L, steps, ctx.seed, mcfg);
        const std::string tag = l_label(L);
        nn::save_checkpoint(ctx.file("iresnet_L" + tag + ".ckpt").string(),
                            res.net.to_checkpoint());
        std::vector<std::vector<double>> rows;
        for (const auto& e : res.log)
            rows.push_back({static_cast<double>(e.first), e.second});
        write_csv(ctx.file("iresnet_L" + tag + "_log.csv").string(), {"step", "loss_ema"}, rows);
        if (target->dim == 2) {
            // density heatmap on the configured grid
            const Mat pts = heat_grid.points();
            std::vector<std::vector<double>> hrows(static_cast<std::size_t>(pts.cols()));
            const auto& net = res.net;
            parallel_for(pts.cols(), ctx.threads, [&](std::int64_t i) {
                const Vec x = pts.col(static_cast<int>(i));
                const double logp = -0.5 * net.forward(x).squaredNorm() -
                                    1.8378770664093454836 + net.logdet(x);
                hrows[static_cast<std::size_t>(i)] = {x[0], x[1], logp};
            });
            write_csv(ctx.file("iresnet_L" + tag + "_heatmap.csv").string(),
                      {"x0", "x1", "logp"}, hrows);
        }
        const auto cert = res.net.lipschitz_certificate();
        nlohmann::json c;
        c["L"] = L;
        c["k"] = k;
        c["lip_fwd_blocks_only"] = cert.fwd_blocks_only;
        c["lip_inv_blocks_only"] = cert.inv_blocks_only;
        c["lip_fwd_with_actnorm"] = cert.fwd_with_actnorm;
        c["lip_inv_with_actnorm"] = cert.inv_with_actnorm;
        c["certified_layer_sigmas"] = res.certified_sigmas;
        report["L" + tag] = c;
    }
    write_json_file(ctx.file("iresnet_report.json"), report);
}

void run_compare(const nlohmann::json& config, RunContext& ctx) {
    if (!config.contains("targets") || !config["targets"].is_array() || config["targets"].empty())
        throw ConfigError("compare requires a nonempty /targets array", "/targets");
    if (!config.contains("time")) throw ConfigError("compare requires /time", "/time");
    check_allowed(config.at("time"), {"delta", "T"}, "/time");
    const double delta = require_double(config.at("time"), "delta", "/time");
    const double T = require_double(config.at("time"), "T", "/time");
    if (!(delta < T)) throw ConfigError("requires delta < T", "/time/delta");
    const flow::IntegratorConfig icfg = integrator_from_json(config);

    const auto& jt = config.contains("training") ? config["training"] : nlohmann::json::object();
    check_allowed(jt, {"k", "L", "steps", "batch", "lr", "score_steps", "score_batch"}, "/training");
    const long iresnet_steps = jt.value("steps", 3000L);
    const long score_steps = jt.value("score_steps", 8000L);
    std::vector<double> Ls = {0.25, 0.75, 0.95};
    if (jt.contains("L")) {
        Ls.clear();
        for (const auto& v : jt["L"]) Ls.push_back(v.get<double>());
    }

    std::vector<std::vector<std::string>> rows;

    for (std::size_t ti = 0; ti < config["targets"].size(); ++ti) {
        const auto target = target_from_json(config["targets"][ti]);
        const auto model = std::make_shared<vp::VpScoreModel>(target);
        metrics::GridSpec grid = default_metric_grid(target->dim);
        if (target->dim == 2) grid = metrics::GridSpec::d2(-4.0, 4.0, 121, -4.0, 4.0, 121);
        if (config.contains("grids")) {
            check_allowed(config["grids"], {"metric"}, "/grids");
            if (config["grids"].contains("metric"))
                grid = grid_from_json(config["grids"]["metric"], "/grids/metric");
        }
        const metrics::DensityFn p_H = [&](const Vec& x) { return target->pdf(x); };

        auto emit = [&](const std::string& mname, double l_or_T, const metrics::DensityFn& q) {
            const double l1 = metrics::l1_distance(p_H, q, grid);
            double kl = std::nan("");
            try {
                kl = metrics::kl_divergence(p_H, q, grid);
            } catch (const NumericError&) {
            }
            rows.push_back({target->name, mname, format_double(l_or_T), format_double(l1),
                            format_double(kl)});
        };

        // iResNets at each Lipschitz bound
        iresnet::MleTrainConfig mcfg;
        mcfg.batch = jt.value("batch", 256);
        mcfg.lr = jt.value("lr", 1e-3);
        const int k = jt.value("k", target->dim == 1 ? 5 : 20);
        for (double L : Ls) {
            const auto res = iresnet::train_mle(*target, k, L, iresnet_steps, ctx.seed, mcfg);
            const auto& net = res.net;
            metrics::DensityFn q = [&net](const Vec& x) {
                return std::exp(-0.5 * net.forward(x).squaredNorm() -
                                0.5 * net.dim * 1.8378770664093454836 + net.logdet(x));
            };
            emit("iresnet_L" + l_label(L), L, q);
        }

        // exact-score flow pullback
        {
            const flow::FlowField field = flow::FlowField::from_model(model);
            const Mat pts = grid.points();
            auto vals = std::make_shared<Vec>(pts.cols());
            parallel_for(pts.cols(), ctx.threads, [&](std::int64_t i) {
                (*vals)[static_cast<int>(i)] = std::exp(flow::pullback_logpdf(
                    field, delta, T, pts.col(static_cast<int>(i)), icfg));
            });
            emit("flow_exact", T, metrics::grid_table_fn(grid, vals));
        }

        // learned-score flow pullback
        {
            score_learn::DsmConfig scfg;
            scfg.T = T;
            scfg.steps = score_steps;
            scfg.batch = jt.value("score_batch", 256);
            scfg.seed = ctx.seed;
            const auto trained = score_learn::train_dsm(*target, scfg);
            const flow::FlowField field =
                flow::FlowField::from_score_fn(target->dim, trained.model.as_score_fn());
            const Mat pts = grid.points();
            auto vals = std::make_shared<Vec>(pts.cols());
            parallel_for(pts.cols(), ctx.threads, [&](std::int64_t i) {
                (*vals)[static_cast<int>(i)] = std::exp(flow::pullback_logpdf(
                    field, delta, T, pts.col(static_cast<int>(i)), icfg));
            });
            emit("flow_learned", T, metrics::grid_table_fn(grid, vals));
        }
    }
    write_csv_text(ctx.file("compare.csv").string(), {"target", "model", "L_or_T", "l1", "kl"},
                   rows);
}

void run_girsanov_check(const nlohmann::json& config, RunContext& ctx) {
    const auto target = target_from_json(config.at("target"));
    const auto model = std::make_shared<vp::VpScoreModel>(target);
    check_allowed(config.at("time"), {"delta", "T"}, "/time");
    const double delta = require_double(config.at("time"), "delta", "/time");
    const double T = require_double(config.at("time"), "T", "/time");
    if (!(delta < T)) throw ConfigError("requires delta < T", "/time/delta");

    score_learn::LearnedScore learned;
    if (config.contains("checkpoint")) {
        learned = score_learn::LearnedScore::from_checkpoint(
            nn::load_checkpoint(config.at("checkpoint").get<std::string>()));
    } else if (config.contains("training")) {
        const auto cfg = dsm_config_from_json(config["training"], ctx.seed);
        learned = score_learn::train_dsm(*target, cfg).model;
        nn::save_checkpoint(ctx.file("score.ckpt").string(), learned.to_checkpoint());
    } else {
        throw ConfigError("girsanov_check requires /training or /checkpoint", "/training");
    }

    metrics::GridSpec grid = default_metric_grid(target->dim);
    if (config.contains("grids")) {
        check_allowed(config["grids"], {"metric"}, "/grids");
        if (config["grids"].contains("metric"))
            grid = grid_from_json(config["grids"]["metric"], "/grids/metric");
    }
    const long n_mc = config.value("n_mc", 100000L);

    const auto rep = score_learn::girsanov_kl_check(learned.as_score_fn(), *model, delta, T, grid,
                                                    n_mc, ctx.seed, integrator_from_json(config),
                                                    ctx.threads);
    write_json_file(ctx.file("girsanov.json"), rep.to_json());
}

}  // namespace

void run_config(const nlohmann::json& config, const RunOptions& opts) {
    check_allowed(config,
                  {"experiment", "target", "targets", "time", "integrator", "training", "grids",
                   "seed", "output_dir", "threads", "sweep", "checkpoint", "samples", "n_mc"},
                  "/");
    if (!config.contains("experiment"))
        throw ConfigError("missing /experiment", "/experiment");
    const std::string experiment = config.at("experiment").get<std::string>();

    RunContext ctx;
    ctx.seed = opts.seed_override >= 0 ? static_cast<std::uint64_t>(opts.seed_override)
                                       : config.value("seed", 0ULL);
    ctx.threads = opts.threads;
    if (ctx.threads <= 0) ctx.threads = config.value("threads", 0);
    if (ctx.threads <= 0) {
        if (const char* env = std::getenv("VPFLOW_THREADS")) ctx.threads = std::atoi(env);
    }
    if (ctx.threads <= 0) ctx.threads = 1;

    const std::string out_dir =
        !opts.out_dir.empty() ? opts.out_dir : config.value("output_dir", std::string("."));
    ctx.out = fs::path(out_dir);
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec) throw NumericError("cannot create output directory '" + out_dir + "'");

    const auto start = std::chrono::steady_clock::now();
    if (experiment == "score_bounds") run_score_bounds(config, ctx);
    else if (experiment == "transport") run_transport(config, ctx);
    else if (experiment == "converge") run_converge(config, ctx);
    else if (experiment == "train_score") run_train_score(config, ctx);
    else if (experiment == "train_iresnet") run_train_iresnet(config, ctx);
    else if (experiment == "compare") run_compare(config, ctx);
    else if (experiment == "girsanov_check") run_girsanov_check(config, ctx);
    else
        throw ConfigError("unknown experiment '" + experiment + "'", "/experiment");
    const auto end = std::chrono::steady_clock::now();

    nlohmann::json manifest;
    manifest["config_hash"] = [&] {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(config.dump())));
        return std::string(buf);
    }();
    manifest["version"] = kVersion;
    manifest["experiment"] = experiment;
    manifest["seed"] = ctx.seed;
    manifest["threads"] = ctx.threads;
    manifest["outputs"] = ctx.outputs;
    manifest["wall_time_s"] = std::chrono::duration<double>(end - start).count();
    write_json_file(ctx.out / "manifest.json", manifest);
}

int run_config_file(const std::string& path, const RunOptions& opts) {
    nlohmann::json config;
    try {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        config = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        nlohmann::json err = {{"error", std::string("config parse error: ") + e.what()},
                              {"code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const ConfigError& e) {
        nlohmann::json err = {{"error", e.what()}, {"code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    }
    try {
        run_config(config, opts);
        return 0;
    } catch (const ConfigError& e) {
        nlohmann::json err = {{"error", e.what()}, {"field", e.field}, {"code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const nlohmann::json::exception& e) {
        nlohmann::json err = {{"error", std::string("config error: ") + e.what()}, {"code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        nlohmann::json err = {{"error", e.what()}, {"code", 3}};
        std::cerr << err.dump() << std::endl;
        return 3;
    }
}

}  // namespace vpflow::experiments
