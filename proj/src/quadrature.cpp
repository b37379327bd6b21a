#include "quadrature.hpp"

#include <cmath>
#include <map>
#include <mutex>

namespace vpflow {

namespace {

QuadRule compute_gauss_legendre(int n) {
    QuadRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < (n + 1) / 2; ++i) {
        // Chebyshev-based initial guess, then Newton on P_n.
        double x = std::cos(pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        rule.nodes[i] = -x;
        rule.nodes[n - 1 - i] = x;
        const double w = 2.0 / ((1.0 - x * x) * pp * pp);
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    return rule;
}

}  // namespace

const QuadRule& gauss_legendre(int n) {
    static std::map<int, QuadRule> cache;
    static std::mutex mutex;
    std::lock_guard<std::mutex> lock(mutex);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, compute_gauss_legendre(n)).first;
    return it->second;
}

void gauss_legendre_on(int n, double a, double b, Vec* nodes, Vec* weights) {
    const QuadRule& rule = gauss_legendre(n);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    *nodes = (rule.nodes.array() * half + mid).matrix();
    *weights = rule.weights * half;
}

namespace {

double simpson(double a, double fa, double b, double fb, double fm) {
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_simpson_rec(const std::function<double(double)>& f, double a, double fa, double b,
                            double fb, double m, double fm, double whole, double tol, int depth) {
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    if (!std::isfinite(flm) || !std::isfinite(frm))
        throw NumericError("adaptive_simpson: non-finite integrand");
    const double left = simpson(a, fa, m, fm, flm);
    const double right = simpson(m, fm, b, fb, frm);
    const double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
    return adaptive_simpson_rec(f, a, fa, m, fm, lm, flm, left, tol * 0.5, depth - 1) +
           adaptive_simpson_rec(f, m, fm, b, fb, rm, frm, right, tol * 0.5, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth) {
    if (a == b) return 0.0;
    const double fa = f(a), fb = f(b), m = 0.5 * (a + b), fm = f(m);
    if (!std::isfinite(fa) || !std::isfinite(fb) || !std::isfinite(fm))
        throw NumericError("adaptive_simpson: non-finite integrand");
    const double whole = simpson(a, fa, b, fb, fm);
    return adaptive_simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, max_depth);
}

Vec trapezoid_weights(double lo, double hi, int count) {
    if (count < 2) throw ConfigError("trapezoid_weights: count must be >= 2");
    const double h = (hi - lo) / (count - 1);
    Vec w = Vec::Constant(count, h);
    w[0] = 0.5 * h;
    w[count - 1] = 0.5 * h;
    return w;
}

}  // namespace vpflow
