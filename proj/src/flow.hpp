#ifndef VPFLOW_FLOW_HPP
#define VPFLOW_FLOW_HPP

#include "vp.hpp"

namespace vpflow::flow {

// VP probability-flow vector field v(t,x) = -x/2 - s_t(x)/2, with a Jacobian
// evaluator (analytic for exact score models, central differences for learned
// scores) used for the variational equation and the divergence integral.
struct FlowField {
    int dim = 1;
    double t_min = 0.0;
    bool t_min_inclusive = true;
    std::function<Vec(double, const Vec&)> score_fn;
    std::function<Mat(double, const Vec&)> score_jac_fn;

    Vec velocity(double t, const Vec& x) const { return -0.5 * (x + score_fn(t, x)); }
    Mat velocity_jacobian(double t, const Vec& x) const {
        return -0.5 * (Mat::Identity(dim, dim) + score_jac_fn(t, x));
    }
    double divergence(double t, const Vec& x) const { return velocity_jacobian(t, x).trace(); }
    void check_window(double a, double b) const;

    static FlowField from_model(std::shared_ptr<const vp::VpScoreModel> model);
    // Learned/generic score: Jacobian by central differences with h = fd_scale*(1+||x||).
    static FlowField from_score_fn(int dim, std::function<Vec(double, const Vec&)> score,
                                   double t_min = 0.0, double fd_scale = 1e-4);
};

struct IntegratorConfig {
    double rtol = 1e-8;
    double atol = 1e-10;
    long max_steps = 1000000;
    double initial_step = 0.0;  // 0 = automatic
    void validate() const;
};

struct FlowResult {
    Vec endpoint;
    double logdet = 0.0;  // integral of div v along the trajectory
    Mat jacobian;         // solution of dJ/dt = grad v . J, J(from) = I
    long steps_accepted = 0;
    long steps_rejected = 0;
    double max_step_error = 0.0;  // max accepted scaled error estimate
};

struct TrajectoryPoint {
    double t;
    Vec x;
    double logdet;
};

// phi_{from->to}(x) with joint (x, J, logdet) state under one Dormand-Prince
// 5(4) adaptive stepper; backward integration (to < from) gives the inverse map.
FlowResult transport(const FlowField& field, double from_t, double to_t, const Vec& x,
                     const IntegratorConfig& cfg = {},
                     std::vector<TrajectoryPoint>* trajectory = nullptr);

// log of the Gaussian pullback ((phi_{delta->T})^{-1})_# p_Z at x:
// integrate forward and return log p_Z(endpoint) + logdet.
double pullback_logpdf(const FlowField& field, double delta, double T, const Vec& x,
                       const IntegratorConfig& cfg = {});

// exp( (1/2) int (1 + L(tau)) dtau ), an upper bound for Lip(phi) in both
// directions. May overflow to +inf for large constants; the log is also returned.
double gronwall_certificate(const std::function<double(double)>& L, double from_t, double to_t,
                            double* log_value = nullptr);

// (max grid opnorm of forward Jacobian, max grid opnorm of its inverse).
std::pair<double, double> measure_lipschitz(const FlowField& field, double from_t, double to_t,
                                            const Mat& grid, const IntegratorConfig& cfg = {});

}  // namespace vpflow::flow

#endif
