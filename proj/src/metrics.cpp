#include "metrics.hpp"

#include <algorithm>
#include <cmath>

#include "quadrature.hpp"

namespace vpflow::metrics {

GridSpec GridSpec::d1(double lo, double hi, int count) {
    GridSpec g;
    g.dim = 1;
    g.lo[0] = lo;
    g.hi[0] = hi;
    g.count[0] = count;
    g.validate();
    return g;
}

GridSpec GridSpec::d2(double lo0, double hi0, int count0, double lo1, double hi1, int count1) {
    GridSpec g;
    g.dim = 2;
    g.lo[0] = lo0;
    g.hi[0] = hi0;
    g.count[0] = count0;
    g.lo[1] = lo1;
    g.hi[1] = hi1;
    g.count[1] = count1;
    g.validate();
    return g;
}

void GridSpec::validate() const {
    if (dim != 1 && dim != 2) throw ConfigError("GridSpec: dim must be 1 or 2");
    for (int d = 0; d < dim; ++d) {
        if (count[d] < 2) throw ConfigError("GridSpec: count must be >= 2");
        if (!(hi[d] > lo[d])) throw ConfigError("GridSpec: hi must exceed lo");
    }
}

Vec GridSpec::axis(int d) const {
    Vec x(count[d]);
    for (int i = 0; i < count[d]; ++i)
        x[i] = lo[d] + (hi[d] - lo[d]) * i / (count[d] - 1);
    return x;
}

Mat GridSpec::points() const {
    if (dim == 1) {
        Mat p(1, count[0]);
        p.row(0) = axis(0).transpose();
        return p;
    }
    const Vec a0 = axis(0), a1 = axis(1);
    Mat p(2, count[0] * count[1]);
    int idx = 0;
    for (int j = 0; j < count[1]; ++j)
        for (int i = 0; i < count[0]; ++i) {
            p(0, idx) = a0[i];
            p(1, idx) = a1[j];
            ++idx;
        }
    return p;
}

Vec GridSpec::quadrature_weights() const {
    const Vec w0 = trapezoid_weights(lo[0], hi[0], count[0]);
    if (dim == 1) return w0;
    const Vec w1 = trapezoid_weights(lo[1], hi[1], count[1]);
    Vec w(count[0] * count[1]);
    int idx = 0;
    for (int j = 0; j < count[1]; ++j)
        for (int i = 0; i < count[0]; ++i) w[idx++] = w0[i] * w1[j];
    return w;
}

nlohmann::json GridSpec::to_json() const {
    nlohmann::json j;
    j["dim"] = dim;
    for (int d = 0; d < dim; ++d)
        j["axes"].push_back({{"lo", lo[d]}, {"hi", hi[d]}, {"count", count[d]}});
    return j;
}

double MetricReport::at(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("MetricReport: no value named '" + key + "'");
    return it->second;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["values"] = values;
    j["metadata"] = metadata;
    return j;
}

double std_normal_density(const Vec& x) {
    return std::exp(-0.5 * x.squaredNorm() - 0.5 * x.size() * 1.8378770664093454836);
}

DensityFn grid_table_fn(const GridSpec& grid, std::shared_ptr<const Vec> values) {
    if (values->size() != grid.points().cols())
        throw ConfigError("grid_table_fn: value count does not match grid");
    const GridSpec g = grid;
    return [values, g](const Vec& x) {
        std::int64_t idx = 0, stride = 1;
        for (int k = 0; k < g.dim; ++k) {
            const double s = (x[k] - g.lo[k]) / (g.hi[k] - g.lo[k]) * (g.count[k] - 1);
            const auto i = static_cast<std::int64_t>(std::lround(s));
            if (i < 0 || i >= g.count[k] || std::abs(s - i) > 1e-6)
                throw NumericError("grid_table_fn: query off the precomputed grid");
            idx += i * stride;
            stride *= g.count[k];
        }
        return (*values)[idx];
    };
}

double l1_distance(const DensityFn& p, const DensityFn& q, const GridSpec& grid) {
    const Mat pts = grid.points();
    const Vec w = grid.quadrature_weights();
    double acc = 0.0;
    for (int i = 0; i < pts.cols(); ++i) {
        const double pv = p(pts.col(i)), qv = q(pts.col(i));
        if (!std::isfinite(pv) || !std::isfinite(qv))
            throw NumericError("l1_distance: non-finite density value on grid");
        acc += w[i] * std::abs(pv - qv);
    }
    return acc;
}

double kl_divergence(const DensityFn& p, const DensityFn& q, const GridSpec& grid) {
    const Mat pts = grid.points();
    const Vec w = grid.quadrature_weights();
    double acc = 0.0;
    std::string violations;
    int n_viol = 0;
    for (int i = 0; i < pts.cols(); ++i) {
        const double pv = p(pts.col(i));
        if (pv <= 0.0) continue;  // p=0 contributes 0 (limit convention)
        const double qv = q(pts.col(i));
        if (!(qv > 0.0)) {
            if (++n_viol <= 8) {
                violations += " (";
                for (int k = 0; k < pts.rows(); ++k)
                    violations += (k ? "," : "") + format_double(pts(k, i));
                violations += ")";
            }
            continue;
        }
        acc += w[i] * pv * std::log(pv / qv);
    }
    if (n_viol > 0)
        throw NumericError("kl_divergence: absolute continuity violated on grid at " +
                           std::to_string(n_viol) + " points, e.g." + violations);
    return acc;
}

namespace {

// Normalized cumulative trapezoid CDF over the grid axis.
Vec grid_cdf(const DensityFn& f, const Vec& x) {
    const int n = static_cast<int>(x.size());
    Vec F(n);
    F[0] = 0.0;
    Vec vals(n);
    for (int i = 0; i < n; ++i) {
        Vec xi(1);
        xi[0] = x[i];
        vals[i] = f(xi);
        if (!std::isfinite(vals[i]) || vals[i] < 0.0)
            throw NumericError("wasserstein_1d: invalid density value on grid");
    }
    for (int i = 1; i < n; ++i)
        F[i] = F[i - 1] + 0.5 * (vals[i] + vals[i - 1]) * (x[i] - x[i - 1]);
    if (F[n - 1] <= 0.0) throw NumericError("wasserstein_1d: zero total mass on grid");
    F /= F[n - 1];
    return F;
}

// Exact integral of |Fp - Fq| for the piecewise-linear interpolants.
double cdf_l1(const Vec& x, const Vec& Fp, const Vec& Fq) {
    double acc = 0.0;
    for (int i = 0; i + 1 < x.size(); ++i) {
        const double h = x[i + 1] - x[i];
        const double d0 = Fp[i] - Fq[i], d1 = Fp[i + 1] - Fq[i + 1];
        if (d0 * d1 >= 0.0) {
            acc += 0.5 * std::abs(d0 + d1) * h;
        } else {
            acc += 0.5 * h * (d0 * d0 + d1 * d1) / std::abs(d0 - d1);
        }
    }
    return acc;
}

double inv_cdf(const Vec& x, const Vec& F, double u) {
    const double* begin = F.data();
    const double* end = F.data() + F.size();
    const double* it = std::lower_bound(begin, end, u);
    if (it == begin) return x[0];
    if (it == end) return x[x.size() - 1];
    const int k = static_cast<int>(it - begin);
    const double f0 = F[k - 1], f1 = F[k];
    if (f1 <= f0) return x[k];
    const double s = (u - f0) / (f1 - f0);
    return x[k - 1] + s * (x[k] - x[k - 1]);
}

}  // namespace

double wasserstein_1d(const DensityFn& p, const DensityFn& q, const GridSpec& grid, int order) {
    if (grid.dim != 1) throw ConfigError("wasserstein_1d: grid must be one-dimensional");
    if (order != 1 && order != 2) throw ConfigError("wasserstein_1d: order must be 1 or 2");
    const Vec x = grid.axis(0);
    const Vec Fp = grid_cdf(p, x), Fq = grid_cdf(q, x);
    if (order == 1) return cdf_l1(x, Fp, Fq);
    const int nq = 10000;
    double acc = 0.0;
    for (int j = 0; j < nq; ++j) {
        const double u = (j + 0.5) / nq;
        const double d = inv_cdf(x, Fp, u) - inv_cdf(x, Fq, u);
        acc += d * d;
    }
    return std::sqrt(acc / nq);
}

MetricReport bound_suite(const vp::VpScoreModel& model, const flow::FlowField* flow_field,
                         double delta, double T, const GridSpec& grid,
                         const flow::IntegratorConfig& cfg, int threads) {
    MetricReport rep;
    const int d = model.dim();
    DensityFn p_T = [&](const Vec& x) { return model.marginal_pdf(T, x); };
    DensityFn p_Z = [](const Vec& x) { return std_normal_density(x); };

    const double kl_T = kl_divergence(p_T, p_Z, grid);
    const double l1_T = l1_distance(p_T, p_Z, grid);
    const double M2 = model.target().second_moment;

    double sup_pT = 0.0, sup_pZ = 0.0, l2sq = 0.0;
    {
        const Mat pts = grid.points();
        const Vec w = grid.quadrature_weights();
        for (int i = 0; i < pts.cols(); ++i) {
            const double a = p_T(pts.col(i)), b = p_Z(pts.col(i));
            sup_pT = std::max(sup_pT, a);
            sup_pZ = std::max(sup_pZ, b);
            l2sq += w[i] * (a - b) * (a - b);
        }
    }

    rep.values["kl_T"] = kl_T;
    rep.values["l1_T"] = l1_T;
    rep.values["l2sq_T"] = l2sq;
    rep.values["M2"] = M2;
    rep.values["slack_kl_exp"] = std::exp(-T) * (d + M2) - kl_T;
    rep.values["slack_pinsker"] = std::sqrt(2.0 * kl_T) - l1_T;
    rep.values["slack_holder"] = (sup_pT + sup_pZ) * l1_T - l2sq;
    if (d == 1) {
        const double w2 = wasserstein_1d(p_T, p_Z, grid, 2);
        const double w1 = wasserstein_1d(p_T, p_Z, grid, 1);
        rep.values["w1_T"] = w1;
        rep.values["w2_T"] = w2;
        rep.values["slack_talagrand"] = 2.0 * kl_T - w2 * w2;
    }

    if (flow_field) {
        // Pullback-vs-target metrics on the same grid; pullback values are
        // precomputed (each needs an ODE solve) and looked up by grid index.
        const Mat pts = grid.points();
        auto qvals = std::make_shared<Vec>(pts.cols());
        parallel_for(pts.cols(), threads, [&](std::int64_t i) {
            (*qvals)[static_cast<int>(i)] = std::exp(
                flow::pullback_logpdf(*flow_field, delta, T, pts.col(static_cast<int>(i)), cfg));
        });
        DensityFn q_pull = grid_table_fn(grid, qvals);
        DensityFn p_H = [&](const Vec& x) { return model.target().pdf(x); };
        rep.values["l1_pullback"] = l1_distance(p_H, q_pull, grid);
        try {
            rep.values["kl_pullback"] = kl_divergence(p_H, q_pull, grid);
        } catch (const NumericError&) {
            rep.values["kl_pullback"] = std::numeric_limits<double>::quiet_NaN();
        }
        if (d == 1) {
            rep.values["w1_pullback"] = wasserstein_1d(p_H, q_pull, grid, 1);
            rep.values["w2_pullback"] = wasserstein_1d(p_H, q_pull, grid, 2);
        }
    }

    rep.metadata["grid"] = grid.to_json();
    rep.metadata["T"] = T;
    rep.metadata["delta"] = delta;
    rep.metadata["target"] = model.target().name;
    return rep;
}

double ks_distance_std_normal(Vec samples) {
    std::sort(samples.data(), samples.data() + samples.size());
    const int n = static_cast<int>(samples.size());
    double ks = 0.0;
    for (int i = 0; i < n; ++i) {
        const double F = std_normal_cdf(samples[i]);
        ks = std::max(ks, std::max(std::abs(F - static_cast<double>(i) / n),
                                   std::abs(F - static_cast<double>(i + 1) / n)));
    }
    return ks;
}

}  // namespace vpflow::metrics
