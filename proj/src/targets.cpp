#include "targets.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "quadrature.hpp"

namespace vpflow::targets {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 6.28318530717958647692;

struct GaussianEval {
    Mat inv;
    double log_norm;  // -0.5*logdet - d/2 log(2pi)
    Mat chol;
    static GaussianEval from_cov(const Mat& cov) {
        Eigen::LLT<Mat> llt(cov);
        if (llt.info() != Eigen::Success)
            throw ConfigError("covariance matrix is not positive definite");
        GaussianEval g;
        g.chol = llt.matrixL();
        double logdet = 0.0;
        for (int i = 0; i < cov.rows(); ++i) logdet += 2.0 * std::log(g.chol(i, i));
        g.inv = llt.solve(Mat::Identity(cov.rows(), cov.cols()));
        g.log_norm = -0.5 * logdet - 0.5 * cov.rows() * std::log(kTwoPi);
        return g;
    }
    double logpdf(const Vec& d) const { return log_norm - 0.5 * d.dot(inv * d); }
};

void check_keys(const nlohmann::json& params, std::initializer_list<const char*> allowed,
                const std::string& family) {
    if (!params.is_object() && !params.is_null())
        throw ConfigError("params for target '" + family + "' must be a JSON object",
                          "/target/params");
    if (params.is_null()) return;
    for (auto it = params.begin(); it != params.end(); ++it) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* k) { return it.key() == k; }) == allowed.end())
            throw ConfigError("unknown parameter '" + it.key() + "' for target '" + family + "'",
                              "/target/params/" + it.key());
    }
}

Vec json_to_vec(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) throw ConfigError(field + " must be an array", field);
    Vec v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<int>(i)] = j[i].get<double>();
    return v;
}

double min_eig_sym(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    return es.eigenvalues().minCoeff();
}

double max_eig_sym(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    return es.eigenvalues().maxCoeff();
}

// Monotone cubic 3x^3 + x = z solved by safeguarded Newton.
double invert_cubic(double z) {
    double lo = std::min(0.0, z), hi = std::max(0.0, z);
    double x = std::cbrt(z / 3.0);
    for (int it = 0; it < 100; ++it) {
        const double g = 3.0 * x * x * x + x - z;
        const double dg = 9.0 * x * x + 1.0;
        double step = g / dg;
        double xn = x - step;
        if (xn < lo || xn > hi) xn = 0.5 * (lo + hi);
        if (g > 0.0) hi = x; else lo = x;
        if (std::abs(xn - x) < 1e-15 * (1.0 + std::abs(xn))) { x = xn; break; }
        x = xn;
    }
    return x;
}

}  // namespace

std::string class_tag_name(ClassTag tag) {
    switch (tag) {
        case ClassTag::A1: return "A1";
        case ClassTag::A2: return "A2";
        case ClassTag::A3: return "A3";
        case ClassTag::A4: return "A4";
        default: return "General";
    }
}

bool GaussianMixture::shared_cov() const {
    for (std::size_t k = 1; k < covs.size(); ++k)
        if (!covs[k].isApprox(covs[0], 1e-14)) return false;
    return true;
}

void GaussianMixture::validate() const {
    if (weights.size() == 0 || means.cols() != weights.size() ||
        static_cast<int>(covs.size()) != weights.size())
        throw ConfigError("mixture: inconsistent component counts");
    if ((weights.array() <= 0.0).any()) throw ConfigError("mixture: weights must be positive");
    if (std::abs(weights.sum() - 1.0) > 1e-9)
        throw ConfigError("mixture: weights must sum to 1 (tolerance 1e-9)");
    for (const Mat& c : covs) {
        if (c.rows() != dim() || c.cols() != dim())
            throw ConfigError("mixture: covariance shape mismatch");
        if (min_eig_sym(c) <= 0.0)
            throw ConfigError("mixture: covariance is not positive definite");
    }
}

bool ArcSegment::full_circle() const { return std::abs((theta1 - theta0) - kTwoPi) < 1e-12; }

Vec GridBase::cell_size() const {
    Vec h(dim());
    for (int d = 0; d < dim(); ++d) h[d] = (hi[d] - lo[d]) / shape[d];
    return h;
}

Vec GridBase::cell_center(std::int64_t flat) const {
    Vec c(dim());
    const Vec h = cell_size();
    for (int d = 0; d < dim(); ++d) {
        const std::int64_t i = flat % shape[d];
        flat /= shape[d];
        c[d] = lo[d] + (i + 0.5) * h[d];
    }
    return c;
}

int CompactBase::dim() const {
    if (points.size() > 0) return static_cast<int>(points.rows());
    if (!arcs.empty()) return 2;
    if (grid) return grid->dim();
    throw ConfigError("CompactBase: empty base measure");
}

double CompactBase::total_mass() const {
    double m = 0.0;
    if (point_weights.size() > 0) m += point_weights.sum();
    for (const auto& a : arcs) m += a.weight;
    if (grid) m += grid->cell_mass.sum();
    return m;
}

double CompactBase::support_radius() const {
    double r = 0.0;
    for (int i = 0; i < points.cols(); ++i) r = std::max(r, points.col(i).norm());
    for (const auto& a : arcs) {
        const double cn = a.center.norm();
        if (cn < 1e-15 || a.full_circle()) {
            r = std::max(r, cn + a.radius);
            continue;
        }
        const double psi = std::atan2(a.center.y(), a.center.x());
        double best = -std::numeric_limits<double>::infinity();
        auto norm_at = [&](double th) {
            return std::sqrt(cn * cn + a.radius * a.radius + 2.0 * a.radius * cn * std::cos(th - psi));
        };
        best = std::max(norm_at(a.theta0), norm_at(a.theta1));
        for (int k = -1; k <= 1; ++k) {
            const double th = psi + kTwoPi * k;
            if (th >= a.theta0 && th <= a.theta1) best = std::max(best, norm_at(th));
        }
        r = std::max(r, best);
    }
    if (grid) {
        const double half_diag = 0.5 * grid->cell_size().norm();
        for (std::int64_t i = 0; i < grid->cell_mass.size(); ++i)
            if (grid->cell_mass[i] > 0.0)
                r = std::max(r, grid->cell_center(i).norm() + half_diag);
    }
    return r;
}

void CompactBase::discretize(Mat* nodes, Vec* weights, int nodes_per_arc) const {
    const int d = dim();
    std::vector<Vec> ys;
    std::vector<double> ws;
    for (int i = 0; i < points.cols(); ++i) {
        ys.push_back(points.col(i));
        ws.push_back(point_weights[i]);
    }
    for (const auto& a : arcs) {
        const double span = a.theta1 - a.theta0;
        if (a.full_circle()) {
            for (int i = 0; i < nodes_per_arc; ++i) {
                const double th = a.theta0 + (i + 0.5) * span / nodes_per_arc;
                Vec y(2);
                y << a.center.x() + a.radius * std::cos(th), a.center.y() + a.radius * std::sin(th);
                ys.push_back(y);
                ws.push_back(a.weight / nodes_per_arc);
            }
        } else {
            Vec th_nodes, th_w;
            gauss_legendre_on(nodes_per_arc, a.theta0, a.theta1, &th_nodes, &th_w);
            for (int i = 0; i < nodes_per_arc; ++i) {
                Vec y(2);
                y << a.center.x() + a.radius * std::cos(th_nodes[i]),
                    a.center.y() + a.radius * std::sin(th_nodes[i]);
                ys.push_back(y);
                ws.push_back(a.weight * th_w[i] / span);
            }
        }
    }
    if (grid) {
        for (std::int64_t i = 0; i < grid->cell_mass.size(); ++i) {
            if (grid->cell_mass[i] > 0.0) {
                ys.push_back(grid->cell_center(i));
                ws.push_back(grid->cell_mass[i]);
            }
        }
    }
    nodes->resize(d, static_cast<int>(ys.size()));
    weights->resize(static_cast<int>(ys.size()));
    for (std::size_t i = 0; i < ys.size(); ++i) {
        nodes->col(static_cast<int>(i)) = ys[i];
        (*weights)[static_cast<int>(i)] = ws[i];
    }
}

void CompactConvolution::validate() const {
    const int d = base.dim();
    if (sigma.rows() != d || sigma.cols() != d)
        throw ConfigError("CompactConvolution: sigma shape mismatch");
    if (min_eig_sym(sigma) <= 0.0)
        throw ConfigError("CompactConvolution: sigma is not positive definite");
    if (std::abs(base.total_mass() - 1.0) > 1e-10)
        throw ConfigError("CompactConvolution: base mass must be 1 (tolerance 1e-10)");
    if (!std::isfinite(base.support_radius()))
        throw ConfigError("CompactConvolution: base support radius must be finite");
}

bool CompactConvolution::isotropic_sigma() const {
    const int d = static_cast<int>(sigma.rows());
    return sigma.isApprox(Mat::Identity(d, d) * sigma(0, 0), 1e-14);
}

Mat TargetDensity::sample(int n, std::uint64_t seed) const {
    if (n < 1) throw ConfigError("sample: n must be >= 1");
    Rng rng(Rng::derive(seed, 0x7461726765ULL));
    Mat out(dim, n);
    for (int i = 0; i < n; ++i) out.col(i) = draw_(rng);
    return out;
}

double TargetDensity::base_radius() const {
    if (class_tag == ClassTag::A3 && convolution) return convolution->base.support_radius();
    if (class_tag == ClassTag::A4 && mixture) {
        double lam_min = std::numeric_limits<double>::infinity();
        for (const Mat& c : mixture->covs) lam_min = std::min(lam_min, min_eig_sym(c));
        double r = 0.0;
        for (int k = 0; k < mixture->components(); ++k) {
            double slack = 0.0;
            if (!mixture->shared_cov())
                slack = 8.0 * std::sqrt(std::max(0.0, max_eig_sym(mixture->covs[k]) - lam_min));
            r = std::max(r, mixture->means.col(k).norm() + slack);
        }
        return r;
    }
    if (class_tag == ClassTag::A1) return support_radius;
    return std::numeric_limits<double>::quiet_NaN();
}

TargetPtr make_mixture_target(GaussianMixture gm, const std::string& name) {
    gm.validate();
    auto t = std::make_shared<TargetDensity>();
    t->name = name;
    t->dim = gm.dim();
    t->class_tag = ClassTag::A4;
    t->support_radius = std::numeric_limits<double>::infinity();
    double m2 = 0.0;
    for (int k = 0; k < gm.components(); ++k)
        m2 += gm.weights[k] * (gm.means.col(k).squaredNorm() + gm.covs[k].trace());
    t->second_moment = m2;

    auto evals = std::make_shared<std::vector<GaussianEval>>();
    for (const Mat& c : gm.covs) evals->push_back(GaussianEval::from_cov(c));
    const auto gm_shared = std::make_shared<GaussianMixture>(gm);
    t->pdf_ = [gm_shared, evals](const Vec& x) {
        Vec lp(gm_shared->components());
        for (int k = 0; k < gm_shared->components(); ++k)
            lp[k] = std::log(gm_shared->weights[k]) +
                    (*evals)[k].logpdf(x - gm_shared->means.col(k));
        return std::exp(log_sum_exp(lp));
    };
    t->draw_ = [gm_shared, evals](Rng& rng) {
        const double u = rng.uniform();
        double acc = 0.0;
        int k = gm_shared->components() - 1;
        for (int i = 0; i < gm_shared->components(); ++i) {
            acc += gm_shared->weights[i];
            if (u < acc) { k = i; break; }
        }
        return Vec(gm_shared->means.col(k) +
                   (*evals)[k].chol * rng.normal_vec(gm_shared->dim()));
    };
    t->mixture = std::move(gm);

    // Effective 1D quadrature window for oracle cross-checks.
    if (t->dim == 1) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int k = 0; k < t->mixture->components(); ++k) {
            const double s = std::sqrt(t->mixture->covs[k](0, 0));
            lo = std::min(lo, t->mixture->means(0, k) - 10.0 * s);
            hi = std::max(hi, t->mixture->means(0, k) + 10.0 * s);
        }
        t->pieces_1d = {{lo, hi}};
    }
    return t;
}

TargetPtr make_gaussian_target(const Vec& mean, const Mat& cov, ClassTag tag,
                               const std::string& name) {
    if (tag != ClassTag::A4 && tag != ClassTag::A2)
        throw ConfigError("make_gaussian_target: tag must be A4 or A2");
    GaussianMixture gm;
    gm.weights = Vec::Ones(1);
    gm.means = mean;
    gm.covs = {cov};
    auto base = make_mixture_target(std::move(gm),
                                    name.empty() ? std::string("gaussian") : name);
    if (tag == ClassTag::A4) return base;
    auto t = std::make_shared<TargetDensity>(*base);
    t->class_tag = ClassTag::A2;
    const GaussianEval ge = GaussianEval::from_cov(cov);
    LogConcaveInfo lc;
    lc.potential = [mean, ge](const Vec& x) { return 0.5 * (x - mean).dot(ge.inv * (x - mean)); };
    lc.hessian_lower = 1.0 / max_eig_sym(cov);
    t->log_concave = std::move(lc);
    return t;
}

TargetPtr make_convolution_target(CompactConvolution cc, const std::string& name) {
    cc.validate();
    auto t = std::make_shared<TargetDensity>();
    t->name = name;
    t->dim = cc.base.dim();
    t->class_tag = ClassTag::A3;
    t->support_radius = std::numeric_limits<double>::infinity();

    auto nodes = std::make_shared<Mat>();
    auto weights = std::make_shared<Vec>();
    cc.base.discretize(nodes.get(), weights.get());
    const GaussianEval ge = GaussianEval::from_cov(cc.sigma);
    t->second_moment = cc.sigma.trace();
    for (int i = 0; i < nodes->cols(); ++i)
        t->second_moment += (*weights)[i] * nodes->col(i).squaredNorm();

    auto log_w = std::make_shared<Vec>(weights->array().log().matrix());
    const bool iso = cc.isotropic_sigma();
    const double s2 = cc.sigma(0, 0);
    const int d = t->dim;
    t->pdf_ = [nodes, log_w, ge, iso, s2, d](const Vec& x) {
        Vec lp(nodes->cols());
        if (iso) {
            lp = ((*log_w).array() -
                  ((*nodes).colwise() - x).colwise().squaredNorm().transpose().array() / (2.0 * s2))
                     .matrix();
            const double ln = -0.5 * d * std::log(kTwoPi * s2);
            return std::exp(log_sum_exp(lp) + ln);
        }
        for (int i = 0; i < nodes->cols(); ++i)
            lp[i] = (*log_w)[i] + ge.logpdf(x - nodes->col(i));
        return std::exp(log_sum_exp(lp));
    };

    // Exact sampling from the base (arcs/points/grid cells), then Gaussian offset.
    struct BaseSampler {
        CompactBase base;
        Vec grid_cum;  // cumulative cell masses
        std::vector<std::int64_t> grid_idx;
    };
    auto bs = std::make_shared<BaseSampler>();
    bs->base = cc.base;
    if (cc.base.grid) {
        const auto& g = *cc.base.grid;
        for (std::int64_t i = 0; i < g.cell_mass.size(); ++i)
            if (g.cell_mass[i] > 0.0) bs->grid_idx.push_back(i);
        bs->grid_cum.resize(static_cast<int>(bs->grid_idx.size()));
        double acc = 0.0;
        for (std::size_t i = 0; i < bs->grid_idx.size(); ++i) {
            acc += g.cell_mass[bs->grid_idx[i]];
            bs->grid_cum[static_cast<int>(i)] = acc;
        }
    }
    Mat chol = ge.chol;
    t->draw_ = [bs, chol, d](Rng& rng) {
        double u = rng.uniform() * bs->base.total_mass();
        Vec y;
        for (int i = 0; i < bs->base.points.cols() && y.size() == 0; ++i) {
            if (u < bs->base.point_weights[i]) y = bs->base.points.col(i);
            else u -= bs->base.point_weights[i];
        }
        for (const auto& a : bs->base.arcs) {
            if (y.size() > 0) break;
            if (u < a.weight) {
                const double th = a.theta0 + rng.uniform() * (a.theta1 - a.theta0);
                y.resize(2);
                y << a.center.x() + a.radius * std::cos(th),
                    a.center.y() + a.radius * std::sin(th);
            } else {
                u -= a.weight;
            }
        }
        if (y.size() == 0 && bs->base.grid) {
            const auto it = std::lower_bound(bs->grid_cum.data(),
                                             bs->grid_cum.data() + bs->grid_cum.size(), u);
            std::int64_t pos = it - bs->grid_cum.data();
            if (pos >= bs->grid_cum.size()) pos = bs->grid_cum.size() - 1;
            y = bs->base.grid->cell_center(bs->grid_idx[static_cast<std::size_t>(pos)]);
        }
        if (y.size() == 0) y = bs->base.points.col(bs->base.points.cols() - 1);
        return Vec(y + chol * rng.normal_vec(d));
    };
    t->convolution = std::move(cc);
    return t;
}

namespace {

TargetPtr make_triangular() {
    auto t = std::make_shared<TargetDensity>();
    t->name = "triangular";
    t->dim = 1;
    t->class_tag = ClassTag::A1;
    t->support_radius = 1.0;
    t->second_moment = 1.0 / 6.0;
    t->pdf_ = [](const Vec& x) { return std::max(0.0, 1.0 - std::abs(x[0])); };
    t->draw_ = [](Rng& rng) {
        const double u = rng.uniform();
        Vec x(1);
        x[0] = (u < 0.5) ? std::sqrt(2.0 * u) - 1.0 : 1.0 - std::sqrt(2.0 * (1.0 - u));
        return x;
    };
    t->pieces_1d = {{-1.0, 0.0}, {0.0, 1.0}};
    return t;
}

TargetPtr make_two_uniform() {
    auto t = std::make_shared<TargetDensity>();
    t->name = "two_uniform";
    t->dim = 1;
    t->class_tag = ClassTag::A1;
    t->support_radius = 1.0;
    t->second_moment = 7.0 / 12.0;  // 2 * int_{1/2}^{1} x^2 dx
    t->pdf_ = [](const Vec& x) {
        const double a = std::abs(x[0]);
        return (a >= 0.5 && a <= 1.0) ? 1.0 : 0.0;
    };
    t->draw_ = [](Rng& rng) {
        const double u = rng.uniform();
        Vec x(1);
        x[0] = (u < 0.5) ? -1.0 + u : 0.5 + (u - 0.5);
        return x;
    };
    BoxMixture bm;
    bm.boxes.push_back({0.5, Vec::Constant(1, -1.0), Vec::Constant(1, -0.5)});
    bm.boxes.push_back({0.5, Vec::Constant(1, 0.5), Vec::Constant(1, 1.0)});
    t->box_mixture = std::move(bm);
    t->pieces_1d = {{-1.0, -0.5}, {0.5, 1.0}};
    return t;
}

TargetPtr make_cubic_pullback() {
    auto t = std::make_shared<TargetDensity>();
    t->name = "cubic_pullback";
    t->dim = 1;
    t->class_tag = ClassTag::General;
    t->support_radius = std::numeric_limits<double>::infinity();
    t->pdf_ = [](const Vec& x) {
        const double g = 3.0 * x[0] * x[0] * x[0] + x[0];
        return std_normal_pdf(g) * (9.0 * x[0] * x[0] + 1.0);
    };
    t->draw_ = [](Rng& rng) {
        Vec x(1);
        x[0] = invert_cubic(rng.normal());
        return x;
    };
    t->pieces_1d = {{-1.75, 0.0}, {0.0, 1.75}};
    Vec n, w;
    gauss_legendre_on(400, -1.75, 1.75, &n, &w);
    double m2 = 0.0;
    for (int i = 0; i < n.size(); ++i) {
        Vec xi(1);
        xi[0] = n[i];
        m2 += w[i] * n[i] * n[i] * t->pdf_(xi);
    }
    t->second_moment = m2;
    return t;
}

TargetPtr make_gmm1d(const nlohmann::json& params) {
    check_keys(params, {"means", "stds", "weights"}, "gmm1d");
    Vec means(3), stds(3), weights(3);
    means << -3.0, -1.0, 1.0;
    stds << 0.2, 0.35, 0.25;
    weights << 0.2, 0.5, 0.3;
    if (params.contains("means")) means = json_to_vec(params["means"], "/target/params/means");
    if (params.contains("stds")) stds = json_to_vec(params["stds"], "/target/params/stds");
    if (params.contains("weights"))
        weights = json_to_vec(params["weights"], "/target/params/weights");
    if (means.size() != stds.size() || means.size() != weights.size())
        throw ConfigError("gmm1d: means/stds/weights must have equal length", "/target/params");
    GaussianMixture gm;
    gm.weights = weights;
    gm.means = means.transpose();
    for (int k = 0; k < stds.size(); ++k) {
        if (stds[k] <= 0.0)
            throw ConfigError("gmm1d: stds must be positive", "/target/params/stds");
        gm.covs.push_back(Mat::Constant(1, 1, stds[k] * stds[k]));
    }
    auto t = std::const_pointer_cast<TargetDensity>(make_mixture_target(std::move(gm), "gmm1d"));
    return t;
}

TargetPtr make_rings(const nlohmann::json& params) {
    check_keys(params, {"components", "radius", "sigma"}, "rings");
    const int n = params.value("components", 8);
    const double radius = params.value("radius", 2.0);
    const double sigma = params.value("sigma", 0.3);
    if (n < 1 || radius <= 0.0 || sigma <= 0.0)
        throw ConfigError("rings: invalid parameters", "/target/params");
    GaussianMixture gm;
    gm.weights = Vec::Constant(n, 1.0 / n);
    gm.means.resize(2, n);
    for (int k = 0; k < n; ++k) {
        const double th = kTwoPi * k / n;
        gm.means.col(k) << radius * std::cos(th), radius * std::sin(th);
    }
    for (int k = 0; k < n; ++k) gm.covs.push_back(Mat::Identity(2, 2) * sigma * sigma);
    return make_mixture_target(std::move(gm), "rings");
}

TargetPtr make_squares() {
    auto t = std::make_shared<TargetDensity>();
    t->name = "squares";
    t->dim = 2;
    t->class_tag = ClassTag::A1;
    t->support_radius = std::sqrt(4.25);  // far corner of either unit square
    t->second_moment = 7.0 / 3.0 + 1.0 / 12.0;
    BoxMixture bm;
    Vec lo1(2), hi1(2), lo2(2), hi2(2);
    lo1 << -2.0, -0.5;
    hi1 << -1.0, 0.5;
    lo2 << 1.0, -0.5;
    hi2 << 2.0, 0.5;
    bm.boxes.push_back({0.5, lo1, hi1});
    bm.boxes.push_back({0.5, lo2, hi2});
    t->pdf_ = [bm](const Vec& x) {
        for (const auto& b : bm.boxes) {
            bool inside = true;
            for (int d = 0; d < 2; ++d)
                if (x[d] < b.lo[d] || x[d] > b.hi[d]) { inside = false; break; }
            if (inside) return b.weight;  // unit area boxes
        }
        return 0.0;
    };
    t->draw_ = [bm](Rng& rng) {
        const auto& b = bm.boxes[rng.uniform() < 0.5 ? 0 : 1];
        Vec x(2);
        for (int d = 0; d < 2; ++d) x[d] = b.lo[d] + rng.uniform() * (b.hi[d] - b.lo[d]);
        return x;
    };
    t->boxes_2d = {{lo1, hi1}, {lo2, hi2}};
    t->box_mixture = std::move(bm);
    return t;
}

TargetPtr make_moons(const nlohmann::json& params) {
    check_keys(params, {"sigma"}, "moons");
    const double sigma = params.value("sigma", 0.1);
    if (sigma <= 0.0) throw ConfigError("moons: sigma must be positive", "/target/params/sigma");
    CompactConvolution cc;
    ArcSegment upper, lower;
    upper.center << 0.0, 0.0;
    upper.radius = 1.0;
    upper.theta0 = 0.0;
    upper.theta1 = kPi;
    upper.weight = 0.5;
    lower.center << 1.0, 0.5;
    lower.radius = 1.0;
    lower.theta0 = kPi;
    lower.theta1 = kTwoPi;
    lower.weight = 0.5;
    cc.base.arcs = {upper, lower};
    cc.sigma = Mat::Identity(2, 2) * sigma * sigma;
    return make_convolution_target(std::move(cc), "moons");
}

TargetPtr make_concentric(const nlohmann::json& params) {
    check_keys(params, {"sigma"}, "concentric");
    const double sigma = params.value("sigma", 0.08);
    if (sigma <= 0.0)
        throw ConfigError("concentric: sigma must be positive", "/target/params/sigma");
    CompactConvolution cc;
    for (double r : {1.0, 2.0, 3.0}) {
        ArcSegment a;
        a.center << 0.0, 0.0;
        a.radius = r;
        a.theta0 = 0.0;
        a.theta1 = kTwoPi;
        a.weight = 1.0 / 3.0;
        cc.base.arcs.push_back(a);
    }
    cc.sigma = Mat::Identity(2, 2) * sigma * sigma;
    return make_convolution_target(std::move(cc), "concentric");
}

}  // namespace

TargetPtr make_builtin_target(const std::string& name, const nlohmann::json& params) {
    if (name == "triangular") { check_keys(params, {}, name); return make_triangular(); }
    if (name == "two_uniform") { check_keys(params, {}, name); return make_two_uniform(); }
    if (name == "cubic_pullback") { check_keys(params, {}, name); return make_cubic_pullback(); }
    if (name == "gmm1d") return make_gmm1d(params);
    if (name == "rings") return make_rings(params);
    if (name == "squares") { check_keys(params, {}, name); return make_squares(); }
    if (name == "moons") return make_moons(params);
    if (name == "concentric") return make_concentric(params);
    throw ConfigError("unknown target name '" + name + "'", "/target/name");
}

namespace {

// Separable discrete Gaussian convolution of samples on a uniform grid.
void convolve_axis(Mat& f, double h, double sigma) {
    const int taps = static_cast<int>(std::ceil(6.0 * sigma / h));
    Vec kernel(2 * taps + 1);
    for (int i = -taps; i <= taps; ++i) kernel[i + taps] = std_normal_pdf(i * h / sigma) / sigma;
    kernel /= kernel.sum() * h;  // unit discrete mass
    Mat out = Mat::Zero(f.rows(), f.cols());
    for (int c = 0; c < f.cols(); ++c) {
        for (int r = 0; r < f.rows(); ++r) {
            const double v = f(r, c);
            if (v == 0.0) continue;
            const int lo = std::max(0, r - taps), hi = std::min<int>(f.rows() - 1, r + taps);
            for (int r2 = lo; r2 <= hi; ++r2) out(r2, c) += v * kernel[r2 - r + taps];
        }
    }
    f = out * h;
}

}  // namespace

CompactConvolution g_approximant(const TargetDensity& target, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 2.0))
        throw ConfigError("g_approximant: epsilon must lie in (0,2)");
    const int d = target.dim;

    // Radius with tail mass < eps/4 (doubling search for unbounded targets).
    double R = target.support_radius;
    auto ball_mass = [&](double r) {
        if (d == 1) {
            Vec n, w;
            gauss_legendre_on(2000, -r, r, &n, &w);
            double m = 0.0;
            for (int i = 0; i < n.size(); ++i) {
                Vec x(1);
                x[0] = n[i];
                m += w[i] * target.pdf(x);
            }
            return m;
        }
        const int g = 601;
        const Vec tw = trapezoid_weights(-r, r, g);
        double m = 0.0;
        for (int i = 0; i < g; ++i) {
            const double xi = -r + 2.0 * r * i / (g - 1);
            for (int j = 0; j < g; ++j) {
                const double yj = -r + 2.0 * r * j / (g - 1);
                if (xi * xi + yj * yj > r * r) continue;
                Vec x(2);
                x << xi, yj;
                m += tw[i] * tw[j] * target.pdf(x);
            }
        }
        return m;
    };
    if (!std::isfinite(R)) {
        R = 1.0;
        while (1.0 - ball_mass(R) >= 0.25 * epsilon) {
            R *= 2.0;
            if (R > 1e4)
                throw NumericError("g_approximant: tail-radius search failed (non-integrable tail?)");
        }
    }
    const double mass_R = std::min(1.0, ball_mass(R));
    if (mass_R <= 0.0) throw NumericError("g_approximant: truncated target has zero mass");

    auto truncated_pdf = [&](const Vec& x) {
        return (x.norm() <= R) ? target.pdf(x) / mass_R : 0.0;
    };

    // L1 smoothing error for a candidate sigma, on the design-decision oracle
    // grid, via separable discrete convolution.
    auto smoothing_l1 = [&](double sigma) {
        const double W = R + 6.0 * sigma;
        const double h = (d == 1) ? std::min(sigma, 0.01) / 4.0 : std::min(sigma, 0.05) / 2.0;
        const int n = static_cast<int>(std::ceil(2.0 * W / h)) + 1;
        if (d == 1) {
            Mat f(n, 1);
            for (int i = 0; i < n; ++i) {
                Vec x(1);
                x[0] = -W + i * h;
                f(i, 0) = truncated_pdf(x);
            }
            Mat conv = f;
            convolve_axis(conv, h, sigma);
            return ((conv - f).array().abs().sum()) * h;
        }
        Mat f(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                Vec x(2);
                x << -W + i * h, -W + j * h;
                f(i, j) = truncated_pdf(x);
            }
        Mat conv = f;
        convolve_axis(conv, h, sigma);
        conv.transposeInPlace();
        convolve_axis(conv, h, sigma);
        conv.transposeInPlace();
        return ((conv - f).array().abs().sum()) * h * h;
    };

    double lo = (d == 1) ? 1e-4 : 5e-3, hi = 1.0;
    if (smoothing_l1(lo) >= 0.5 * epsilon)
        throw NumericError("g_approximant: smoothing error floor exceeds eps/2");
    for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (smoothing_l1(mid) < 0.5 * epsilon) lo = mid; else hi = mid;
    }
    const double sigma = lo;

    // Materialize the truncated-renormalized base on a grid at resolution
    // tied to the smoothing scale; verify the end-to-end guarantee with the
    // returned object's own evaluator, refining if discretization ate the margin.
    for (int refine = 0; refine < 4; ++refine) {
        const double hb = sigma / (8.0 * (1 << refine));
        CompactConvolution cc;
        GridBase gb;
        gb.lo = Vec::Constant(d, -R);
        gb.hi = Vec::Constant(d, R);
        const int cells = std::max(2, static_cast<int>(std::ceil(2.0 * R / hb)));
        gb.shape.assign(d, cells);
        std::int64_t total = 1;
        for (int k = 0; k < d; ++k) total *= cells;
        gb.cell_mass.resize(total);
        for (std::int64_t i = 0; i < total; ++i)
            gb.cell_mass[i] = truncated_pdf(gb.cell_center(i));
        const double s = gb.cell_mass.sum();
        if (s <= 0.0) throw NumericError("g_approximant: empty truncated base");
        gb.cell_mass /= s;
        cc.base.grid = std::move(gb);
        cc.sigma = Mat::Identity(d, d) * sigma * sigma;

        const double W = R + 6.0 * sigma;
        double err = 0.0;
        if (d == 1) {
            // Evaluate the returned object directly on the oracle grid.
            const auto approx = make_convolution_target(cc, "g_approximant");
            const double h = std::min(sigma, 0.01) / 4.0;
            const int n = static_cast<int>(std::ceil(2.0 * W / h)) + 1;
            const Vec tw = trapezoid_weights(-W, W, n);
            for (int i = 0; i < n; ++i) {
                Vec x(1);
                x[0] = -W + 2.0 * W * i / (n - 1);
                err += tw[i] * std::abs(target.pdf(x) - approx->pdf(x));
            }
        } else {
            // Separable convolution of the stored cell masses on a padded grid
            // equals the object's pdf at the grid nodes up to 6-sigma kernel truncation.
            const auto& g = *cc.base.grid;
            const double h = g.cell_size()[0];
            const int pad = static_cast<int>(std::ceil(6.0 * sigma / h)) + 1;
            const int n = g.shape[0] + 2 * pad;
            Mat f = Mat::Zero(n, n);
            for (std::int64_t idx = 0; idx < g.cell_mass.size(); ++idx) {
                const std::int64_t i = idx % g.shape[0], j = idx / g.shape[0];
                f(static_cast<int>(i) + pad, static_cast<int>(j) + pad) =
                    g.cell_mass[idx] / (h * h);
            }
            convolve_axis(f, h, sigma);
            f.transposeInPlace();
            convolve_axis(f, h, sigma);
            f.transposeInPlace();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Vec x(2);
                    x << g.lo[0] + (i - pad + 0.5) * h, g.lo[1] + (j - pad + 0.5) * h;
                    err += std::abs(target.pdf(x) - f(i, j)) * h * h;
                }
        }
        // Target mass outside the oracle window is part of the honest budget.
        err += std::max(0.0, 1.0 - ball_mass(W)) + 1e-8;
        if (err < epsilon) return cc;
    }
    throw NumericError("g_approximant: could not certify L1 error < eps after refinement");
}

}  // namespace vpflow::targets
