#include "vp.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>

#include "quadrature.hpp"

namespace vpflow::vp {

using targets::ClassTag;

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

Mat inverse_small(const Mat& m, double* logdet) {
    if (m.rows() == 1) {
        *logdet = std::log(m(0, 0));
        return Mat::Constant(1, 1, 1.0 / m(0, 0));
    }
    const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    *logdet = std::log(det);
    Mat inv(2, 2);
    inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
    return inv / det;
}

double min_eig_sym(const Mat& m) {
    if (m.rows() == 1) return m(0, 0);
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    return es.eigenvalues().minCoeff();
}

// Minimize a smooth scalar function on [0,T]: 1001-point grid then
// golden-section refinement around the grid argmin.
double minimize_on_interval(const std::function<double(double)>& f, double T) {
    const int n = 1001;
    double best_t = 0.0, best = f(0.0);
    for (int i = 1; i < n; ++i) {
        const double t = T * i / (n - 1);
        const double v = f(t);
        if (v < best) { best = v; best_t = t; }
    }
    double lo = std::max(0.0, best_t - T / (n - 1));
    double hi = std::min(T, best_t + T / (n - 1));
    const double phi = 0.6180339887498948482;
    double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < 80 && hi - lo > 1e-14 * (1.0 + T); ++it) {
        if (fc < fd) {
            hi = d; d = c; fd = fc;
            c = hi - phi * (hi - lo); fc = f(c);
        } else {
            lo = c; c = d; fc = fd;
            d = lo + phi * (hi - lo); fd = f(d);
        }
    }
    return std::min({best, fc, fd});
}

}  // namespace

Vec forward_sample(const Vec& x0, double t, Rng& rng) {
    if (t < 0.0) throw ConfigError("forward_sample: t must be >= 0");
    return VpSchedule::a(t) * x0 + VpSchedule::sigma(t) * rng.normal_vec(static_cast<int>(x0.size()));
}

Vec forward_sample(const Vec& x0, double t, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x666f7277617264ULL));
    return forward_sample(x0, t, rng);
}

VpScoreModel::VpScoreModel(targets::TargetPtr target, QuadratureSpec spec)
    : target_(std::move(target)), spec_(spec) {
    const auto& t = *target_;
    if (t.class_tag == ClassTag::A4 && t.mixture) {
        method_ = ScoreMethod::AnalyticGMM;
        path_ = Path::Mixture;
        return;
    }
    method_ = ScoreMethod::QuadraturePosterior;
    if (t.class_tag == ClassTag::A3 && t.convolution) {
        path_ = Path::Convolution;
        t.convolution->base.discretize(&nodes_, &log_w_, spec_.nodes_per_arc);
        log_w_ = log_w_.array().log().matrix();
        iso_ = t.convolution->isotropic_sigma();
        sigma0_sq_ = t.convolution->sigma(0, 0);
        sigma_mat_ = t.convolution->sigma;
        return;
    }
    if (t.box_mixture) {
        path_ = Path::BoxMixture;
        return;
    }
    // Generic posterior quadrature over the target's support pieces.
    path_ = Path::PosteriorQuad;
    std::vector<double> ys, ws;
    if (t.dim == 1) {
        if (t.pieces_1d.empty())
            throw ConfigError("VpScoreModel: target '" + t.name + "' has no quadrature pieces");
        for (const auto& [lo, hi] : t.pieces_1d) {
            Vec n, w;
            gauss_legendre_on(spec_.nodes_per_dim, lo, hi, &n, &w);
            for (int i = 0; i < n.size(); ++i) {
                Vec x(1);
                x[0] = n[i];
                const double p = t.pdf(x);
                if (p > 0.0) {
                    ys.push_back(n[i]);
                    ws.push_back(std::log(w[i] * p));
                }
            }
        }
        nodes_.resize(1, static_cast<int>(ys.size()));
        log_w_.resize(static_cast<int>(ys.size()));
        for (std::size_t i = 0; i < ys.size(); ++i) {
            nodes_(0, static_cast<int>(i)) = ys[i];
            log_w_[static_cast<int>(i)] = ws[i];
        }
        return;
    }
    if (t.boxes_2d.empty())
        throw ConfigError("VpScoreModel: 2D target '" + t.name + "' has no quadrature boxes");
    std::vector<Vec> pts;
    for (const auto& [lo, hi] : t.boxes_2d) {
        Vec n0, w0, n1, w1;
        gauss_legendre_on(spec_.nodes_per_dim, lo[0], hi[0], &n0, &w0);
        gauss_legendre_on(spec_.nodes_per_dim, lo[1], hi[1], &n1, &w1);
        for (int i = 0; i < n0.size(); ++i)
            for (int j = 0; j < n1.size(); ++j) {
                Vec x(2);
                x << n0[i], n1[j];
                const double p = t.pdf(x);
                if (p > 0.0) {
                    pts.push_back(x);
                    ws.push_back(std::log(w0[i] * w1[j] * p));
                }
            }
    }
    nodes_.resize(2, static_cast<int>(pts.size()));
    log_w_.resize(static_cast<int>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
        nodes_.col(static_cast<int>(i)) = pts[i];
        log_w_[static_cast<int>(i)] = ws[i];
    }
}

bool VpScoreModel::allows_t0() const {
    return path_ == Path::Mixture || path_ == Path::Convolution;
}

void VpScoreModel::check_time(double t, bool for_score) const {
    if (t < 0.0) throw ConfigError("VpScoreModel: t must be >= 0");
    if (for_score && t == 0.0 && !allows_t0())
        throw ConfigError("VpScoreModel: score at t=0 is only defined for classes A3/A4 (target '" +
                          target_->name + "' is " + targets::class_tag_name(target_->class_tag) + ")");
}

double VpScoreModel::marginal_pdf(double t, const Vec& x) const {
    if (t < 0.0) throw ConfigError("VpScoreModel: t must be >= 0");
    if (t == 0.0 && !allows_t0()) return target_->pdf(x);
    try {
        return std::exp(eval(t, x, false).logpdf);
    } catch (const TailGuardError&) {
        return 0.0;  // the marginal itself underflows; 0 is the honest value
    }
}

double VpScoreModel::marginal_logpdf(double t, const Vec& x) const {
    if (t < 0.0) throw ConfigError("VpScoreModel: t must be >= 0");
    if (t == 0.0 && !allows_t0()) return std::log(target_->pdf(x));
    return eval(t, x, false).logpdf;
}

Vec VpScoreModel::score(double t, const Vec& x) const { return eval(t, x, false).score; }

Mat VpScoreModel::score_jacobian(double t, const Vec& x) const {
    return eval(t, x, true).jacobian;
}

ScoreEval VpScoreModel::eval(double t, const Vec& x, bool need_jac) const {
    check_time(t, true);
    if (x.size() != target_->dim) throw ConfigError("VpScoreModel: dimension mismatch");
    switch (path_) {
        case Path::Mixture: return eval_mixture(t, x, need_jac);
        case Path::Convolution: return eval_convolution(t, x, need_jac);
        case Path::BoxMixture: return eval_boxes(t, x, need_jac);
        default: return eval_posterior_quad(t, x, need_jac);
    }
}

ScoreEval VpScoreModel::eval_mixture(double t, const Vec& x, bool need_jac) const {
    const auto& gm = *target_->mixture;
    const int d = gm.dim(), K = gm.components();
    const double a = VpSchedule::a(t), s2 = VpSchedule::sigma2(t);

    Vec lp(K);
    Mat grads(d, K);
    std::vector<Mat> invs(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        Mat S = a * a * gm.covs[static_cast<std::size_t>(k)] + s2 * Mat::Identity(d, d);
        double logdet = 0.0;
        invs[static_cast<std::size_t>(k)] = inverse_small(S, &logdet);
        const Vec diff = x - a * gm.means.col(k);
        grads.col(k) = -(invs[static_cast<std::size_t>(k)] * diff);
        lp[k] = std::log(gm.weights[k]) - 0.5 * d * kLogTwoPi - 0.5 * logdet +
                0.5 * diff.dot(grads.col(k));
    }
    ScoreEval out;
    const double m = lp.maxCoeff();
    Vec r = (lp.array() - m).exp().matrix();
    const double z = r.sum();
    r /= z;
    out.logpdf = m + std::log(z);
    out.score = grads * r;
    if (need_jac) {
        Mat jac = -out.score * out.score.transpose();
        for (int k = 0; k < K; ++k)
            jac += r[k] * (-invs[static_cast<std::size_t>(k)] +
                           grads.col(k) * grads.col(k).transpose());
        out.jacobian = jac;
    }
    return out;
}

ScoreEval VpScoreModel::eval_convolution(double t, const Vec& x, bool need_jac) const {
    const int d = dim();
    const double a = VpSchedule::a(t), s2 = VpSchedule::sigma2(t);
    ScoreEval out;
    if (iso_) {
        const double s = a * a * sigma0_sq_ + s2;  // isotropic S_t
        Vec lp = (log_w_.array() -
                  (nodes_ * a).colwise().squaredNorm().transpose().array() / (2.0 * s))
                     .matrix();
        // expand ||x - aY||^2 = ||x||^2 - 2a x.Y + a^2||Y||^2 for vectorization
        lp = (lp.array() + (a / s) * (nodes_.transpose() * x).array() -
              x.squaredNorm() / (2.0 * s))
                 .matrix();
        const double m = lp.maxCoeff();
        if (m < spec_.tail_guard_log || !std::isfinite(m))
            throw TailGuardError(t, x, "score tail guard: all posterior weights underflow");
        Vec r = (lp.array() - m).exp().matrix();
        const double z = r.sum();
        r /= z;
        out.logpdf = m + std::log(z) - 0.5 * d * std::log(6.283185307179586 * s);
        const Vec ybar = nodes_ * r;
        out.score = -(x - a * ybar) / s;
        if (need_jac) {
            Mat centered = nodes_.colwise() - ybar;
            Mat cov = centered * r.asDiagonal() * centered.transpose();
            out.jacobian = -Mat::Identity(d, d) / s + (a * a / (s * s)) * cov;
        }
        return out;
    }
    Mat S = a * a * sigma_mat_ + s2 * Mat::Identity(d, d);
    double logdet = 0.0;
    const Mat Sinv = inverse_small(S, &logdet);
    Vec lp(nodes_.cols());
    for (int i = 0; i < nodes_.cols(); ++i) {
        const Vec diff = x - a * nodes_.col(i);
        lp[i] = log_w_[i] - 0.5 * diff.dot(Sinv * diff);
    }
    const double m = lp.maxCoeff();
    if (m < spec_.tail_guard_log || !std::isfinite(m))
        throw TailGuardError(t, x, "score tail guard: all posterior weights underflow");
    Vec r = (lp.array() - m).exp().matrix();
    const double z = r.sum();
    r /= z;
    out.logpdf = m + std::log(z) - 0.5 * d * kLogTwoPi - 0.5 * logdet;
    const Vec ybar = nodes_ * r;
    out.score = -(Sinv * (x - a * ybar));
    if (need_jac) {
        Mat centered = nodes_.colwise() - ybar;
        Mat cov = centered * r.asDiagonal() * centered.transpose();
        out.jacobian = -Sinv + a * a * Sinv * cov * Sinv;
    }
    return out;
}

namespace {

// Stable per-dimension diffused-uniform factor ratios:
//   m(x)   = [Phi(u1)-Phi(u2)] / (a(beta-alpha)),  u1=(x-a*alpha)/sig > u2
//   m'/m   = (phi(u1)-phi(u2)) / (sig [Phi(u1)-Phi(u2)])
//   m''/m  = (u2 phi(u2)-u1 phi(u1)) / (sig^2 [Phi(u1)-Phi(u2)])
struct BoxFactor {
    double log_m;
    double r1;  // m'/m
    double r2;  // m''/m
};

BoxFactor box_factor(double x, double alpha, double beta, double a, double sig) {
    const double u1 = (x - a * alpha) / sig;
    const double u2 = (x - a * beta) / sig;
    const double logA = log_std_normal_cdf_diff(u1, u2);
    BoxFactor f;
    f.log_m = logA - std::log(a * (beta - alpha));
    const double lphi1 = -0.5 * u1 * u1 - 0.9189385332046727418;
    const double lphi2 = -0.5 * u2 * u2 - 0.9189385332046727418;
    const double t1 = std::exp(lphi1 - logA);
    const double t2 = std::exp(lphi2 - logA);
    f.r1 = (t1 - t2) / sig;
    f.r2 = (u2 * t2 - u1 * t1) / (sig * sig);
    return f;
}

}  // namespace

ScoreEval VpScoreModel::eval_boxes(double t, const Vec& x, bool need_jac) const {
    const auto& bm = *target_->box_mixture;
    const int d = dim();
    const double a = VpSchedule::a(t), sig = VpSchedule::sigma(t);
    const int B = static_cast<int>(bm.boxes.size());

    Vec lp(B);
    Mat g(d, B), h(d, B);
    for (int b = 0; b < B; ++b) {
        double l = std::log(bm.boxes[static_cast<std::size_t>(b)].weight);
        for (int k = 0; k < d; ++k) {
            const auto& box = bm.boxes[static_cast<std::size_t>(b)];
            const BoxFactor f = box_factor(x[k], box.lo[k], box.hi[k], a, sig);
            l += f.log_m;
            g(k, b) = f.r1;
            h(k, b) = f.r2 - f.r1 * f.r1;
        }
        lp[b] = l;
    }
    // The erf closed form stays exact in log space arbitrarily far out, so
    // only a genuinely degenerate factor trips the guard.
    const double m = lp.maxCoeff();
    if (!std::isfinite(m))
        throw TailGuardError(t, x, "score tail guard: degenerate diffused box factor");
    Vec r = (lp.array() - m).exp().matrix();
    const double z = r.sum();
    r /= z;
    ScoreEval out;
    out.logpdf = m + std::log(z);
    out.score = g * r;
    if (need_jac) {
        Mat jac = -out.score * out.score.transpose();
        for (int b = 0; b < B; ++b) {
            jac += r[b] * (g.col(b) * g.col(b).transpose());
            jac += r[b] * Mat(h.col(b).asDiagonal());
        }
        out.jacobian = jac;
    }
    return out;
}

ScoreEval VpScoreModel::eval_posterior_quad(double t, const Vec& x, bool need_jac) const {
    const int d = dim();
    const double a = VpSchedule::a(t), s2 = VpSchedule::sigma2(t);
    Vec lp = (log_w_.array() -
              ((nodes_ * a).colwise() - x).colwise().squaredNorm().transpose().array() /
                  (2.0 * s2))
                 .matrix();
    const double m = lp.maxCoeff();
    if (m < spec_.tail_guard_log || !std::isfinite(m))
        throw TailGuardError(t, x, "score tail guard: all posterior weights underflow (x too far "
                                   "in the tail for node coverage)");
    Vec r = (lp.array() - m).exp().matrix();
    const double z = r.sum();
    r /= z;
    ScoreEval out;
    out.logpdf = m + std::log(z) - 0.5 * d * std::log(6.283185307179586 * s2);
    const Vec ybar = nodes_ * r;
    out.score = (a * ybar - x) / s2;  // Tweedie form
    if (need_jac) {
        Mat centered = nodes_.colwise() - ybar;
        Mat cov = centered * r.asDiagonal() * centered.transpose();
        const double et = std::exp(-t);
        out.jacobian = -Mat::Identity(d, d) * (1.0 + et / s2) + (et / (s2 * s2)) * cov;
    }
    return out;
}

double LipschitzBound::operator()(double t) const {
    if (!valid_at(t))
        throw ConfigError("LipschitzBound: t outside validity interval for class " +
                          targets::class_tag_name(tag));
    const double et = std::exp(-t);
    const double s2 = -std::expm1(-t);
    switch (tag) {
        case ClassTag::A1: return 1.0 + et * R * R / (s2 * s2) + et / s2;
        case ClassTag::A2: return 2.0 / s2;
        default: return M_T;
    }
}

bool LipschitzBound::valid_at(double t) const {
    if (tag == ClassTag::A1 || tag == ClassTag::A2) return t > 0.0;
    return t >= 0.0 && t <= horizon * (1.0 + 1e-12);
}

LipschitzBound make_lipschitz_bound(const targets::TargetDensity& target, double horizon_T) {
    LipschitzBound b;
    b.tag = target.class_tag;
    b.horizon = horizon_T;
    switch (target.class_tag) {
        case ClassTag::A1:
            b.R = target.support_radius;
            return b;
        case ClassTag::A2:
            return b;
        case ClassTag::A3:
        case ClassTag::A4: {
            double lam_sigma = 0.0;
            if (target.class_tag == ClassTag::A3) {
                lam_sigma = min_eig_sym(target.convolution->sigma);
            } else {
                lam_sigma = std::numeric_limits<double>::infinity();
                for (const Mat& c : target.mixture->covs)
                    lam_sigma = std::min(lam_sigma, min_eig_sym(c));
            }
            b.R = target.base_radius();
            b.lambda_min = minimize_on_interval(
                [lam_sigma](double t) {
                    return std::exp(-t) * lam_sigma - std::expm1(-t);
                },
                horizon_T);
            b.M_T = 1.0 / b.lambda_min + b.R * b.R / (b.lambda_min * b.lambda_min);
            return b;
        }
        default:
            throw ConfigError("no theoretical Lipschitz bound for class General (target '" +
                              target.name + "')");
    }
}

double empirical_L(const VpScoreModel& model, double t, const Mat& grid) {
    if (grid.cols() == 0) throw ConfigError("empirical_L: grid must be nonempty");
    double best = 0.0;
    for (int i = 0; i < grid.cols(); ++i)
        best = std::max(best, opnorm_small(model.score_jacobian(t, grid.col(i))));
    return best;
}

}  // namespace vpflow::vp
