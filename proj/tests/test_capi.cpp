// Exercises the extern-C shared-library surface end to end.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "vpflow/vpflow.h"

TEST_CASE("version and error strings") {
    CHECK(std::strcmp(vpf_version(), "1.0.0") == 0);
    CHECK(vpf_last_error() != nullptr);
}

TEST_CASE("target handles") {
    vpf_target* t = nullptr;
    REQUIRE(vpf_target_create("gmm1d", nullptr, &t) == VPF_OK);
    REQUIRE(t != nullptr);
    CHECK(vpf_target_dim(t) == 1);
    CHECK(std::isinf(vpf_target_support_radius(t)));
    CHECK(vpf_target_second_moment(t) == doctest::Approx(2.688));

    double x = -1.0, pdf = 0.0;
    REQUIRE(vpf_target_pdf(t, &x, &pdf) == VPF_OK);
    CHECK(pdf > 0.5);

    std::vector<double> samples(200);
    REQUIRE(vpf_target_sample(t, 200, 42, samples.data()) == VPF_OK);
    std::vector<double> again(200);
    REQUIRE(vpf_target_sample(t, 200, 42, again.data()) == VPF_OK);
    CHECK(samples == again);
    vpf_target_release(t);

    // parameterized creation
    vpf_target* t2 = nullptr;
    REQUIRE(vpf_target_create("rings", "{\"components\": 6}", &t2) == VPF_OK);
    CHECK(vpf_target_dim(t2) == 2);
    vpf_target_release(t2);

    // error paths
    vpf_target* bad = nullptr;
    CHECK(vpf_target_create("mystery", nullptr, &bad) == VPF_ERR_INVALID);
    CHECK(std::strlen(vpf_last_error()) > 0);
    CHECK(bad == nullptr);
}

TEST_CASE("score model and flow handles") {
    vpf_target* t = nullptr;
    REQUIRE(vpf_target_create("gmm1d", nullptr, &t) == VPF_OK);
    vpf_score_model* m = nullptr;
    REQUIRE(vpf_score_model_create(t, &m) == VPF_OK);

    const double x = -1.0;
    double pdf = 0.0, score = 0.0, jac = 0.0;
    REQUIRE(vpf_marginal_pdf(m, 0.5, &x, &pdf) == VPF_OK);
    CHECK(pdf > 0.0);
    REQUIRE(vpf_score(m, 0.5, &x, &score) == VPF_OK);
    REQUIRE(vpf_score_jacobian(m, 0.5, &x, &jac) == VPF_OK);
    // finite-difference cross-check through the same C surface
    const double h = 1e-5;
    double pp = 0.0, pm = 0.0;
    const double xp = x + h, xm = x - h;
    REQUIRE(vpf_marginal_pdf(m, 0.5, &xp, &pp) == VPF_OK);
    REQUIRE(vpf_marginal_pdf(m, 0.5, &xm, &pm) == VPF_OK);
    CHECK(score == doctest::Approx((std::log(pp) - std::log(pm)) / (2.0 * h)).epsilon(1e-4));

    double bound = 0.0;
    REQUIRE(vpf_theoretical_lipschitz(m, 1.0, 5.0, &bound) == VPF_OK);
    CHECK(bound > std::abs(jac));

    // invalid time maps to VPF_ERR_INVALID
    CHECK(vpf_score(m, -1.0, &x, &score) == VPF_ERR_INVALID);

    vpf_flow* f = nullptr;
    REQUIRE(vpf_flow_create(m, &f) == VPF_OK);
    double endpoint = 0.0, logdet = 0.0, jmat = 0.0;
    REQUIRE(vpf_flow_transport(f, 0.0, 0.0, &x, 0, 0, &endpoint, &logdet, &jmat) == VPF_OK);
    CHECK(endpoint == x);
    CHECK(jmat == 1.0);
    REQUIRE(vpf_flow_transport(f, 0.01, 2.0, &x, 1e-6, 1e-8, &endpoint, &logdet, &jmat) ==
            VPF_OK);
    CHECK(std::isfinite(endpoint));
    double back = 0.0;
    REQUIRE(vpf_flow_transport(f, 2.0, 0.01, &endpoint, 1e-6, 1e-8, &back, nullptr, nullptr) ==
            VPF_OK);
    CHECK(std::abs(back - x) < 1e-4);

    double logq = 0.0;
    REQUIRE(vpf_flow_pullback_logpdf(f, 0.01, 2.0, &x, 1e-6, 1e-8, &logq) == VPF_OK);
    CHECK(std::isfinite(logq));

    vpf_flow_release(f);
    vpf_score_model_release(m);
    vpf_target_release(t);
}

TEST_CASE("vpf_run maps exit codes") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "vpflow_capi_run";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const auto cfg = dir / "config.json";
    std::ofstream(cfg) << R"({
      "experiment": "score_bounds",
      "target": {"name": "gmm1d"},
      "grids": {"time": {"lo": 0.1, "hi": 5.0, "count": 4, "scale": "log"},
                 "eval": {"lo": -4.5, "hi": 2.5, "count": 11}},
      "seed": 1
    })";
    CHECK(vpf_run(cfg.string().c_str(), (dir / "out").string().c_str(), 2, -1) == VPF_OK);
    CHECK(fs::exists(dir / "out" / "ltc_curve.csv"));
    CHECK(fs::exists(dir / "out" / "manifest.json"));

    const auto bad = dir / "bad.json";
    std::ofstream(bad) << R"({"experiment": "mystery"})";
    CHECK(vpf_run(bad.string().c_str(), (dir / "out2").string().c_str(), 1, -1) ==
          VPF_ERR_CONFIG);
    CHECK(vpf_run(nullptr, nullptr, 1, -1) == VPF_ERR_INVALID);
}
