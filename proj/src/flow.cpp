#include "flow.hpp"

#include <cmath>

#include "quadrature.hpp"

namespace vpflow::flow {

void FlowField::check_window(double a, double b) const {
    const double lo = std::min(a, b);
    if (lo < t_min || (!t_min_inclusive && lo <= t_min))
        throw ConfigError("flow: time window outside the field's validity (t_min=" +
                          std::to_string(t_min) + (t_min_inclusive ? " inclusive)" : " exclusive)"));
}

FlowField FlowField::from_model(std::shared_ptr<const vp::VpScoreModel> model) {
    FlowField f;
    f.dim = model->dim();
    f.t_min = 0.0;
    f.t_min_inclusive = model->allows_t0();
    f.score_fn = [model](double t, const Vec& x) { return model->score(t, x); };
    f.score_jac_fn = [model](double t, const Vec& x) { return model->score_jacobian(t, x); };
    return f;
}

FlowField FlowField::from_score_fn(int dim, std::function<Vec(double, const Vec&)> score,
                                   double t_min, double fd_scale) {
    FlowField f;
    f.dim = dim;
    f.t_min = t_min;
    f.t_min_inclusive = true;
    f.score_fn = score;
    f.score_jac_fn = [score, dim, fd_scale](double t, const Vec& x) {
        const double h = fd_scale * (1.0 + x.norm());
        Mat jac(dim, dim);
        for (int j = 0; j < dim; ++j) {
            Vec xp = x, xm = x;
            xp[j] += h;
            xm[j] -= h;
            jac.col(j) = (score(t, xp) - score(t, xm)) / (2.0 * h);
        }
        return jac;
    };
    return f;
}

void IntegratorConfig::validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("integrator: rtol and atol must be > 0");
    if (max_steps < 1) throw ConfigError("integrator: max_steps must be >= 1");
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

struct AugmentedRhs {
    const FlowField& field;
    int d;

    Vec operator()(double t, const Vec& z) const {
        const Vec x = z.head(d);
        Vec out(z.size());
        try {
            out.head(d) = field.velocity(t, x);
            const Mat vj = field.velocity_jacobian(t, x);
            const Mat j = Eigen::Map<const Mat>(z.data() + d, d, d);
            Eigen::Map<Mat>(out.data() + d, d, d) = vj * j;
            out[d + d * d] = vj.trace();
        } catch (const TailGuardError& err) {
            throw TailGuardError(err.t, err.x,
                                 std::string(err.what()) + " (during transport, trajectory at t=" +
                                     std::to_string(t) + ")");
        }
        return out;
    }
};

}  // namespace

FlowResult transport(const FlowField& field, double from_t, double to_t, const Vec& x,
                     const IntegratorConfig& cfg, std::vector<TrajectoryPoint>* trajectory) {
    cfg.validate();
    const int d = field.dim;
    if (x.size() != d) throw ConfigError("transport: dimension mismatch");

    FlowResult res;
    res.jacobian = Mat::Identity(d, d);
    res.endpoint = x;
    if (trajectory) trajectory->push_back({from_t, x, 0.0});
    if (from_t == to_t) return res;
    field.check_window(from_t, to_t);

    const int n = d + d * d + 1;
    Vec z(n);
    z.head(d) = x;
    Eigen::Map<Mat>(z.data() + d, d, d) = Mat::Identity(d, d);
    z[n - 1] = 0.0;

    const AugmentedRhs rhs{field, d};
    const double dir = (to_t > from_t) ? 1.0 : -1.0;
    double t = from_t;
    double h = cfg.initial_step > 0.0 ? dir * cfg.initial_step
                                      : dir * std::min(0.01, std::abs(to_t - from_t) / 100.0);

    Vec k1 = rhs(t, z), k2, k3, k4, k5, k6, k7;
    long steps = 0;
    bool last = false;
    while (dir * (to_t - t) > 0.0) {
        if (++steps > cfg.max_steps)
            throw NumericError("transport: step count exceeded (" + std::to_string(cfg.max_steps) +
                               ") at t=" + std::to_string(t));
        last = dir * (t + h - to_t) >= 0.0;
        if (last) h = to_t - t;

        k2 = rhs(t + c2 * h, z + h * (a21 * k1));
        k3 = rhs(t + c3 * h, z + h * (a31 * k1 + a32 * k2));
        k4 = rhs(t + c4 * h, z + h * (a41 * k1 + a42 * k2 + a43 * k3));
        k5 = rhs(t + c5 * h, z + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
        k6 = rhs(t + h, z + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
        const Vec z_new = z + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        k7 = rhs(t + h, z_new);  // FSAL
        const Vec err_vec =
            h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

        double err = 0.0;
        for (int i = 0; i < n; ++i) {
            const double sc = cfg.atol + cfg.rtol * std::max(std::abs(z[i]), std::abs(z_new[i]));
            const double q = err_vec[i] / sc;
            err += q * q;
        }
        err = std::sqrt(err / n);

        if (err <= 1.0) {
            t = last ? to_t : t + h;  // snap the clamped final step exactly
            z = z_new;
            k1 = k7;
            ++res.steps_accepted;
            res.max_step_error = std::max(res.max_step_error, err);
            if (trajectory) trajectory->push_back({t, z.head(d), z[n - 1]});
        } else {
            ++res.steps_rejected;
        }
        const double factor =
            (err == 0.0) ? 5.0 : std::min(5.0, std::max(0.2, 0.9 * std::pow(err, -0.2)));
        h *= factor;
        if (std::abs(h) < 1e-15 * (1.0 + std::abs(t)))
            throw NumericError("transport: step size underflow at t=" + std::to_string(t));
    }

    res.endpoint = z.head(d);
    res.jacobian = Eigen::Map<const Mat>(z.data() + d, d, d);
    res.logdet = z[n - 1];
    return res;
}

double pullback_logpdf(const FlowField& field, double delta, double T, const Vec& x,
                       const IntegratorConfig& cfg) {
    if (delta > T) throw ConfigError("pullback_logpdf: requires delta <= T");
    const FlowResult r = transport(field, delta, T, x, cfg);
    const int d = field.dim;
    const double log_pz = -0.5 * r.endpoint.squaredNorm() - 0.5 * d * 1.8378770664093454836;
    return log_pz + r.logdet;
}

double gronwall_certificate(const std::function<double(double)>& L, double from_t, double to_t,
                            double* log_value) {
    const double a = std::min(from_t, to_t), b = std::max(from_t, to_t);
    const double integral = adaptive_simpson(
        [&L](double tau) {
            const double v = L(tau);
            if (!std::isfinite(v)) throw NumericError("gronwall_certificate: non-finite L(t)");
            return 1.0 + v;
        },
        a, b, 1e-10);
    if (log_value) *log_value = 0.5 * integral;
    return std::exp(0.5 * integral);
}

std::pair<double, double> measure_lipschitz(const FlowField& field, double from_t, double to_t,
                                            const Mat& grid, const IntegratorConfig& cfg) {
    if (grid.cols() == 0) throw ConfigError("measure_lipschitz: grid must be nonempty");
    double lip_fwd = 0.0, lip_inv = 0.0;
    for (int i = 0; i < grid.cols(); ++i) {
        const FlowResult r = transport(field, from_t, to_t, grid.col(i), cfg);
        lip_fwd = std::max(lip_fwd, opnorm_small(r.jacobian));
        const double det = (field.dim == 1)
                               ? r.jacobian(0, 0)
                               : r.jacobian(0, 0) * r.jacobian(1, 1) -
                                     r.jacobian(0, 1) * r.jacobian(1, 0);
        if (!(std::abs(det) > 1e-300)) {
            std::string pt = "(";
            for (int k = 0; k < grid.rows(); ++k)
                pt += (k ? "," : "") + format_double(grid(k, i));
            throw NumericError("measure_lipschitz: singular transport Jacobian at grid point " +
                               pt + ")");
        }
        Mat inv;
        if (field.dim == 1) {
            inv = Mat::Constant(1, 1, 1.0 / det);
        } else {
            inv.resize(2, 2);
            inv << r.jacobian(1, 1), -r.jacobian(0, 1), -r.jacobian(1, 0), r.jacobian(0, 0);
            inv /= det;
        }
        lip_inv = std::max(lip_inv, opnorm_small(inv));
    }
    return {lip_fwd, lip_inv};
}

}  // namespace vpflow::flow
