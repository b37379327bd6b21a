#ifndef VPFLOW_TESTUTIL_HPP
#define VPFLOW_TESTUTIL_HPP

#include <filesystem>
#include <functional>

#include "common.hpp"
#include "quadrature.hpp"
#include "targets.hpp"

namespace testutil {

using vpflow::Mat;
using vpflow::Vec;

// Central finite difference of a scalar function of a vector.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    Vec g(x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
}

// Central finite difference Jacobian of a vector function.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
    const Vec f0 = f(x);
    Mat j(f0.size(), x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        j.col(i) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return j;
}

inline double trapz(const std::function<double(double)>& f, double lo, double hi, int n) {
    const vpflow::Vec w = vpflow::trapezoid_weights(lo, hi, n);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += w[i] * f(lo + (hi - lo) * i / (n - 1));
    return acc;
}

// Gauss-Legendre quadrature oracle of the diffused marginal, Eq.-(8)-style:
// integral of pdf(y) * N(x; a y, sigma^2) dy over the target's 1D pieces.
inline double marginal_quadrature_oracle(const vpflow::targets::TargetDensity& target, double t,
                                         double x, int nodes_per_piece = 2000) {
    const double a = std::exp(-0.5 * t);
    const double s2 = -std::expm1(-t);
    double acc = 0.0;
    for (const auto& [lo, hi] : target.pieces_1d) {
        Vec n, w;
        vpflow::gauss_legendre_on(nodes_per_piece, lo, hi, &n, &w);
        for (int i = 0; i < n.size(); ++i) {
            Vec y(1);
            y[0] = n[i];
            acc += w[i] * target.pdf(y) *
                   std::exp(-(x - a * n[i]) * (x - a * n[i]) / (2.0 * s2)) /
                   std::sqrt(2.0 * 3.14159265358979323846 * s2);
        }
    }
    return acc;
}

inline Vec vec1(double x) {
    Vec v(1);
    v[0] = x;
    return v;
}

inline Vec vec2(double x, double y) {
    Vec v(2);
    v << x, y;
    return v;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("vpflow_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil

#endif
