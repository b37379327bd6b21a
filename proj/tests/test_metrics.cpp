#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "metrics.hpp"
#include "testutil.hpp"

using namespace vpflow;
using metrics::GridSpec;
using testutil::vec1;

namespace {

metrics::DensityFn gauss1d(double mean, double sd) {
    return [mean, sd](const Vec& x) { return std_normal_pdf((x[0] - mean) / sd) / sd; };
}

}  // namespace

TEST_CASE("grid spec validation") {
    CHECK_THROWS_AS((void)GridSpec::d1(0.0, 1.0, 1), ConfigError);
    CHECK_THROWS_AS((void)GridSpec::d1(1.0, 1.0, 10), ConfigError);
    const auto g = GridSpec::d2(-1.0, 1.0, 3, 0.0, 2.0, 4);
    CHECK(g.points().cols() == 12);
    CHECK(g.quadrature_weights().sum() == doctest::Approx(2.0 * 2.0));
}

TEST_CASE("l1_distance") {
    const auto grid = GridSpec::d1(-8.0, 8.0, 1601);
    const auto p = gauss1d(0.0, 1.0);
    CHECK(metrics::l1_distance(p, p, grid) == 0.0);

    // closed form: 2(Phi(0.05) - Phi(-0.05))
    const double expected = 2.0 * (std_normal_cdf(0.05) - std_normal_cdf(-0.05));
    CHECK(std::abs(metrics::l1_distance(p, gauss1d(0.1, 1.0), grid) - expected) < 1e-4);

    // disjoint supports: L1 = 2
    const auto box1 = [](const Vec& x) { return (x[0] >= 0.0 && x[0] <= 1.0) ? 1.0 : 0.0; };
    const auto box2 = [](const Vec& x) { return (x[0] >= 3.0 && x[0] <= 4.0) ? 1.0 : 0.0; };
    CHECK(metrics::l1_distance(box1, box2, GridSpec::d1(-1.0, 5.0, 6001)) ==
          doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("kl_divergence") {
    const auto grid = GridSpec::d1(-8.0, 8.0, 1601);
    const auto p = gauss1d(0.0, 1.0);
    CHECK(metrics::kl_divergence(p, p, grid) == doctest::Approx(0.0).epsilon(1e-12));

    // KL(N(0,4) || N(0,1)) = (s^2 - 1 - ln s^2)/2 with s = 2
    const double expected = 0.5 * (4.0 - 1.0 - std::log(4.0));
    const auto wide_grid = GridSpec::d1(-16.0, 16.0, 3201);
    CHECK(std::abs(metrics::kl_divergence(gauss1d(0.0, 2.0), p, wide_grid) - expected) < 1e-4);

    // nonnegativity on randomized pairs (Gibbs); parameters kept inside the
    // window where both densities stay representable
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const double m1 = 1.5 * std::tanh(rng.normal()), m2 = 1.5 * std::tanh(rng.normal());
        const double s1 = 0.5 + rng.uniform(), s2 = 0.5 + rng.uniform();
        const auto a = gauss1d(m1, s1), b = gauss1d(m2, s2);
        CHECK(metrics::kl_divergence(a, b, GridSpec::d1(-12.0, 12.0, 2401)) > -1e-12);
    }

    // absolute continuity violation is an error listing points
    const auto box = [](const Vec& x) { return (std::abs(x[0]) <= 1.0) ? 0.5 : 0.0; };
    CHECK_THROWS_AS((void)metrics::kl_divergence(p, box, grid), NumericError);
}

TEST_CASE("wasserstein_1d") {
    const auto grid = GridSpec::d1(-10.0, 10.0, 2001);
    const auto p = gauss1d(0.0, 1.0);
    CHECK(metrics::wasserstein_1d(p, p, grid, 1) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(metrics::wasserstein_1d(p, p, grid, 2) == doctest::Approx(0.0).epsilon(1e-8));

    // translation: W1 = W2 = |c|
    const auto q = gauss1d(0.3, 1.0);
    CHECK(std::abs(metrics::wasserstein_1d(p, q, grid, 1) - 0.3) < 1e-3);
    CHECK(std::abs(metrics::wasserstein_1d(p, q, grid, 2) - 0.3) < 1e-3);

    CHECK_THROWS_AS((void)metrics::wasserstein_1d(p, q, grid, 3), ConfigError);
    CHECK_THROWS_AS(
        (void)metrics::wasserstein_1d(p, q, GridSpec::d2(-1, 1, 3, -1, 1, 3), 1),
        ConfigError);

    // W1 <= W2 + 1e-6 on randomized pairs
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const double m1 = rng.normal(), m2 = rng.normal();
        const double s1 = 0.4 + rng.uniform(), s2 = 0.4 + rng.uniform();
        const auto a = gauss1d(m1, s1), b = gauss1d(m2, s2);
        const double w1 = metrics::wasserstein_1d(a, b, grid, 1);
        const double w2 = metrics::wasserstein_1d(a, b, grid, 2);
        CHECK(w1 <= w2 + 1e-6);
    }
}

TEST_CASE("bound_suite: standard Gaussian has zero lhs everywhere") {
    const auto g = targets::make_gaussian_target(vec1(0.0), Mat::Identity(1, 1));
    vp::VpScoreModel model(g);
    const auto rep =
        metrics::bound_suite(model, nullptr, 0.0, 3.0, GridSpec::d1(-8.0, 8.0, 1601));
    CHECK(std::abs(rep.at("kl_T")) < 1e-10);
    CHECK(std::abs(rep.at("l1_T")) < 1e-10);
    CHECK(rep.at("slack_kl_exp") == doctest::Approx(std::exp(-3.0) * 2.0).epsilon(1e-8));
    CHECK(rep.at("slack_pinsker") >= -1e-9);
    CHECK(rep.at("slack_talagrand") >= -1e-9);
    CHECK(rep.at("slack_holder") >= -1e-9);
}

TEST_CASE("bound_suite: gmm1d exponential-KL bound and monotonicity") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    vp::VpScoreModel model(gmm);
    const auto grid = GridSpec::d1(-8.0, 8.0, 1601);
    CHECK(gmm->second_moment == doctest::Approx(2.688).epsilon(1e-12));
    double prev = std::numeric_limits<double>::infinity();
    for (double T : {1.0, 2.0, 3.0, 4.0}) {
        const auto rep = metrics::bound_suite(model, nullptr, 0.0, T, grid);
        const double kl = rep.at("kl_T");
        CHECK(kl <= std::exp(-T) * (1.0 + gmm->second_moment));
        CHECK(kl < prev);
        prev = kl;
        CHECK(rep.at("slack_kl_exp") >= -1e-6);
        CHECK(rep.at("slack_pinsker") >= -1e-6);
        CHECK(rep.at("slack_talagrand") >= -1e-6);
        CHECK(rep.at("slack_holder") >= -1e-6);
    }
}

TEST_CASE("bound_suite: all four slacks nonnegative for builtin 1D targets at T=3") {
    const auto grid = GridSpec::d1(-8.0, 8.0, 1601);
    for (const char* name : {"triangular", "two_uniform", "cubic_pullback", "gmm1d"}) {
        CAPTURE(name);
        const auto target = targets::make_builtin_target(name);
        vp::VpScoreModel model(target);
        const auto rep = metrics::bound_suite(model, nullptr, 0.0, 3.0, grid);
        CHECK(rep.at("slack_kl_exp") >= -1e-6);
        CHECK(rep.at("slack_pinsker") >= -1e-6);
        CHECK(rep.at("slack_talagrand") >= -1e-6);
        CHECK(rep.at("slack_holder") >= -1e-6);
    }
}

TEST_CASE("grid refinement stability") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    vp::VpScoreModel model(gmm);
    const metrics::DensityFn p_T = [&](const Vec& x) { return model.marginal_pdf(2.0, x); };
    const metrics::DensityFn p_Z = [](const Vec& x) { return metrics::std_normal_density(x); };
    const double l1_a = metrics::l1_distance(p_T, p_Z, GridSpec::d1(-8.0, 8.0, 1601));
    const double l1_b = metrics::l1_distance(p_T, p_Z, GridSpec::d1(-8.0, 8.0, 3201));
    CHECK(std::abs(l1_a - l1_b) < 0.01 * l1_b);
    const double kl_a = metrics::kl_divergence(p_T, p_Z, GridSpec::d1(-8.0, 8.0, 1601));
    const double kl_b = metrics::kl_divergence(p_T, p_Z, GridSpec::d1(-8.0, 8.0, 3201));
    CHECK(std::abs(kl_a - kl_b) < 0.01 * kl_b);
}

TEST_CASE("pinsker holds for every computed pair in reports") {
    const auto gmm = targets::make_builtin_target("gmm1d");
    vp::VpScoreModel model(gmm);
    for (double T : {0.5, 1.5, 3.0}) {
        const auto rep =
            metrics::bound_suite(model, nullptr, 0.0, T, GridSpec::d1(-8.0, 8.0, 1601));
        CHECK(rep.at("l1_T") <= std::sqrt(2.0 * rep.at("kl_T")) + 1e-6);
    }
}

TEST_CASE("ks distance") {
    Rng rng(8);
    Vec s(20000);
    for (int i = 0; i < s.size(); ++i) s[i] = rng.normal();
    CHECK(metrics::ks_distance_std_normal(s) < 1.628 / std::sqrt(20000.0));
    for (int i = 0; i < s.size(); ++i) s[i] += 1.0;
    CHECK(metrics::ks_distance_std_normal(s) > 0.3);
}
