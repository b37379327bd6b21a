#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "experiments.hpp"
#include "testutil.hpp"

using namespace vpflow;
using targets::ClassTag;
using testutil::vec1;
using testutil::vec2;

namespace {

flow::FlowField field_for(const targets::TargetPtr& target) {
    return flow::FlowField::from_model(std::make_shared<vp::VpScoreModel>(target));
}

}  // namespace

TEST_CASE("standard Gaussian: transport is the identity") {
    const auto g = targets::make_gaussian_target(vec1(0.0), Mat::Identity(1, 1));
    const auto f = field_for(g);
    const auto r = flow::transport(f, 0.0, 3.0, vec1(1.3));
    CHECK(r.endpoint[0] == doctest::Approx(1.3).epsilon(1e-10));
    CHECK(std::abs(r.logdet) < 1e-10);
    CHECK(r.jacobian(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.steps_accepted > 0);
}

TEST_CASE("N(0,4) closed-form linear flow over [0, ln 3]") {
    const auto g = targets::make_gaussian_target(vec1(0.0), Mat::Constant(1, 1, 4.0));
    const auto f = field_for(g);
    const double slope = std::sqrt(2.0) / 2.0;
    for (int xi = -3; xi <= 3; ++xi) {
        const auto r = flow::transport(f, 0.0, std::log(3.0), vec1(static_cast<double>(xi)));
        if (xi != 0)
            CHECK(std::abs(r.endpoint[0] - slope * xi) / std::abs(slope * xi) < 1e-6);
        CHECK(std::abs(r.logdet - std::log(slope)) < 1e-6);
        CHECK(r.jacobian(0, 0) == doctest::Approx(slope).epsilon(1e-6));
    }
}

TEST_CASE("round trip is the identity within tolerance") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    const auto f = field_for(gmm);
    flow::IntegratorConfig cfg;
    for (double x = -3.0; x <= 1.01; x += 0.5) {
        const auto fwd = flow::transport(f, 1e-3, 3.0, vec1(x), cfg);
        const auto back = flow::transport(f, 3.0, 1e-3, fwd.endpoint, cfg);
        CHECK(std::abs(back.endpoint[0] - x) < 1e-6);
        CHECK(std::abs(back.endpoint[0] - x) < 10.0 * cfg.rtol * (1.0 + std::abs(x)) + 1e-9);
    }
}

TEST_CASE("1D jacobian equals exp(logdet)") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    const auto f = field_for(gmm);
    for (double x : {-2.4, -1.0, 0.3}) {
        const auto r = flow::transport(f, 0.0, 2.0, vec1(x));
        CHECK(std::abs(r.jacobian(0, 0)) ==
              doctest::Approx(std::exp(r.logdet)).epsilon(1e-6));
    }
}

TEST_CASE("2D det(jacobian) equals exp(logdet)") {
    const auto rings = targets::make_builtin_target("rings");
    const auto f = field_for(rings);
    for (const Vec& x : {vec2(1.8, 0.3), vec2(-0.5, 1.2), vec2(0.0, -2.0)}) {
        const auto r = flow::transport(f, 0.0, 1.5, x);
        const double det =
            r.jacobian(0, 0) * r.jacobian(1, 1) - r.jacobian(0, 1) * r.jacobian(1, 0);
        CHECK(det > 0.0);
        CHECK(std::abs(det - std::exp(r.logdet)) / std::exp(r.logdet) < 1e-5);
    }
}

TEST_CASE("pullback: Gaussian special cases") {
    const auto g1 = targets::make_gaussian_target(vec1(0.0), Mat::Identity(1, 1));
    const auto f1 = field_for(g1);
    for (double x : {-1.0, 0.0, 2.0})
        CHECK(flow::pullback_logpdf(f1, 0.0, 3.0, vec1(x)) ==
              doctest::Approx(-0.5 * x * x - 0.9189385332046727).epsilon(1e-8));

    // N(0,4): pullback at 0 approaches N(0,4) density as T grows
    const auto g4 = targets::make_gaussian_target(vec1(0.0), Mat::Constant(1, 1, 4.0));
    const auto f4 = field_for(g4);
    const double v = std::exp(flow::pullback_logpdf(f4, 0.0, 6.0, vec1(0.0)));
    CHECK(std::abs(v - 1.0 / std::sqrt(8.0 * 3.14159265358979323846)) < 1e-3);
}

TEST_CASE("pullback normalization for gmm1d") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    const auto f = field_for(gmm);
    const Vec w = trapezoid_weights(-8.0, 8.0, 801);
    double mass = 0.0;
    for (int i = 0; i < 801; ++i) {
        const double x = -8.0 + 16.0 * i / 800.0;
        mass += w[i] * std::exp(flow::pullback_logpdf(f, 1e-3, 4.0, vec1(x)));
    }
    CHECK(std::abs(mass - 1.0) < 5e-3);
}

TEST_CASE("gronwall certificate") {
    // constant L = 1 on [0,1]
    CHECK(flow::gronwall_certificate([](double) { return 1.0; }, 0.0, 1.0) ==
          doctest::Approx(std::exp(1.0)).epsilon(1e-10));

    // A2 curve: closed-form antiderivative of 1 + 2/(1-e^{-t}) is 3t + 2 ln(1-e^{-t})
    const double lo = std::log(2.0), hi = std::log(4.0);
    double logv = 0.0;
    flow::gronwall_certificate([](double t) { return 2.0 / (1.0 - std::exp(-t)); }, lo, hi,
                               &logv);
    const auto anti = [](double t) { return 3.0 * t + 2.0 * std::log(1.0 - std::exp(-t)); };
    CHECK(std::abs(2.0 * logv - (anti(hi) - anti(lo))) < 1e-10);

    CHECK_THROWS_AS((void)flow::gronwall_certificate(
                        [](double) { return std::numeric_limits<double>::infinity(); }, 0.0, 1.0),
                    NumericError);
}

TEST_CASE("measured Lipschitz constants") {
    const auto g1 = targets::make_gaussian_target(vec1(0.0), Mat::Identity(1, 1));
    Mat grid(1, 9);
    for (int i = 0; i < 9; ++i) grid(0, i) = -2.0 + 0.5 * i;
    const auto [f1, i1] = flow::measure_lipschitz(field_for(g1), 0.0, 2.0, grid);
    CHECK(f1 == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(i1 == doctest::Approx(1.0).epsilon(1e-8));

    const auto g4 = targets::make_gaussian_target(vec1(0.0), Mat::Constant(1, 1, 4.0));
    const auto [f4, i4] = flow::measure_lipschitz(field_for(g4), 0.0, std::log(3.0), grid);
    CHECK(f4 == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-6));
    CHECK(i4 == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
}

TEST_CASE("Gronwall certificate dominates measured Lipschitz constants") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    const auto bound = vp::make_lipschitz_bound(*gmm, 3.0);
    double log_cert = 0.0;
    flow::gronwall_certificate([&](double t) { return bound(t); }, 0.0, 3.0, &log_cert);
    Mat grid(1, 25);
    for (int i = 0; i < 25; ++i) grid(0, i) = -4.0 + 6.0 * i / 24.0;
    const auto [lf, li] = flow::measure_lipschitz(field_for(gmm), 0.0, 3.0, grid);
    CHECK(std::log(lf) <= log_cert);
    CHECK(std::log(li) <= log_cert);
}

TEST_CASE("Gronwall dominance across A1/A2/A4 builtins on [0.01, 3]") {
    flow::IntegratorConfig cfg;
    cfg.rtol = 1e-7;
    cfg.atol = 1e-9;
    auto check = [&](const targets::TargetPtr& target, double from_t) {
        CAPTURE(target->name);
        const auto bound = vp::make_lipschitz_bound(*target, 3.0);
        double log_cert = 0.0;
        flow::gronwall_certificate([&](double t) { return bound(t); }, from_t, 3.0, &log_cert);
        const auto box = experiments::default_eval_grid(*target, target->dim == 1 ? 9 : 3);
        const auto [lf, li] = flow::measure_lipschitz(field_for(target), from_t, 3.0,
                                                      box.points(), cfg);
        CHECK(std::log(lf) <= log_cert);
        CHECK(std::log(li) <= log_cert);
    };
    for (const char* name : {"triangular", "two_uniform", "squares"})
        check(targets::make_builtin_target(name), 0.01);
    check(targets::make_gaussian_target(testutil::vec1(0.0), Mat::Constant(1, 1, 0.64),
                                        targets::ClassTag::A2, "gauss_a2"),
          0.01);
    for (const char* name : {"gmm1d", "rings"}) {
        check(targets::make_builtin_target(name), 0.01);
        check(targets::make_builtin_target(name), 0.0);  // A4 also from t = 0
    }
}

TEST_CASE("qualitative convergence chains (summary-table shape)") {
    const auto grid = metrics::GridSpec::d1(-8.0, 8.0, 801);
    const Mat pts = grid.points();
    flow::IntegratorConfig cfg;
    cfg.rtol = 1e-7;
    cfg.atol = 1e-9;

    // A1 target: pullback L1 decreases along the refining (delta, T) chain
    {
        const auto two = targets::make_builtin_target("two_uniform");
        const auto f = field_for(two);
        const metrics::DensityFn p_H = [&](const Vec& x) { return two->pdf(x); };
        double prev = std::numeric_limits<double>::infinity();
        const double chain[][2] = {{0.1, 2.0}, {0.01, 3.0}, {0.001, 4.0}};
        for (const auto& dt : chain) {
            auto q = std::make_shared<Vec>(pts.cols());
            parallel_for(pts.cols(), 4, [&](std::int64_t i) {
                (*q)[static_cast<int>(i)] = std::exp(flow::pullback_logpdf(
                    f, dt[0], dt[1], pts.col(static_cast<int>(i)), cfg));
            });
            const double l1 = metrics::l1_distance(p_H, metrics::grid_table_fn(grid, q), grid);
            CHECK(l1 < prev);
            prev = l1;
        }
    }

    // A4 target: KL(p_H || pullback(0, T)) decreases along T in {2,3,4}
    {
        const auto gmm = targets::make_builtin_target("gmm1d");
        const auto f = field_for(gmm);
        const metrics::DensityFn p_H = [&](const Vec& x) { return gmm->pdf(x); };
        double prev = std::numeric_limits<double>::infinity();
        for (double T : {2.0, 3.0, 4.0}) {
            auto q = std::make_shared<Vec>(pts.cols());
            parallel_for(pts.cols(), 4, [&](std::int64_t i) {
                (*q)[static_cast<int>(i)] = std::exp(
                    flow::pullback_logpdf(f, 0.0, T, pts.col(static_cast<int>(i)), cfg));
            });
            const double kl =
                metrics::kl_divergence(p_H, metrics::grid_table_fn(grid, q), grid);
            CHECK(kl < prev);
            prev = kl;
        }
    }
}

TEST_CASE("two_uniform inverse Lipschitz grows as delta shrinks") {
    const auto two = targets::make_builtin_target("two_uniform");
    const auto f = field_for(two);
    Mat grid(1, 9);
    for (int i = 0; i < 9; ++i) grid(0, i) = -1.6 + 0.4 * i;
    double prev = 0.0;
    for (double delta : {1e-1, 1e-2, 1e-3}) {
        const auto [lf, li] = flow::measure_lipschitz(f, delta, 3.0, grid);
        (void)lf;
        CHECK(li >= prev);
        prev = li;
    }
}

TEST_CASE("pushforward of p_delta approaches N(0,1) monotonically in T") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    const auto f = field_for(gmm);
    const double delta = 1e-3;
    const int N = 10000;
    const Mat x0 = gmm->sample(N, 11);
    flow::IntegratorConfig cfg;
    cfg.rtol = 1e-6;
    cfg.atol = 1e-8;
    double prev = std::numeric_limits<double>::infinity();
    for (double T : {1.0, 2.0, 3.0, 4.0}) {
        Vec pushed(N);
        parallel_for(N, 4, [&](std::int64_t i) {
            Rng rng(Rng::derive(77, static_cast<std::uint64_t>(i)));
            const Vec xd = vp::forward_sample(x0.col(static_cast<int>(i)), delta, rng);
            pushed[static_cast<int>(i)] = flow::transport(f, delta, T, xd, cfg).endpoint[0];
        });
        const double ks = metrics::ks_distance_std_normal(pushed);
        CHECK(ks < prev);
        prev = ks;
    }
}

TEST_CASE("window and step-limit errors") {
    const auto two = targets::make_builtin_target("two_uniform");
    const auto f = field_for(two);
    CHECK_THROWS_AS((void)flow::transport(f, 0.0, 1.0, vec1(0.7)), ConfigError);
    flow::IntegratorConfig cfg;
    cfg.max_steps = 3;
    CHECK_THROWS_AS((void)flow::transport(f, 0.01, 3.0, vec1(0.7), cfg), NumericError);

    // degenerate window: identity bookkeeping
    const auto r = flow::transport(f, 0.5, 0.5, vec1(0.7));
    CHECK(r.endpoint[0] == 0.7);
    CHECK(r.logdet == 0.0);
    CHECK(r.steps_accepted == 0);
}
