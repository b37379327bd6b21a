#ifndef VPFLOW_VP_HPP
#define VPFLOW_VP_HPP

#include "targets.hpp"

namespace vpflow::vp {

// Variance-preserving schedule with constant diffusion rate: a(t) = e^{-t/2},
// sigma^2(t) = 1 - e^{-t}, so a^2 + sigma^2 = 1 for all t.
struct VpSchedule {
    static double a(double t) { return std::exp(-0.5 * t); }
    static double sigma2(double t) { return -std::expm1(-t); }
    static double sigma(double t) { return std::sqrt(sigma2(t)); }
};

// X_t = a(t) x0 + sigma(t) Z with Z drawn from the seeded stream.
Vec forward_sample(const Vec& x0, double t, std::uint64_t seed);
Vec forward_sample(const Vec& x0, double t, Rng& rng);

enum class ScoreMethod { AnalyticGMM, QuadraturePosterior };

struct QuadratureSpec {
    int nodes_per_dim = 400;
    int nodes_per_arc = 800;
    double tail_guard_log = -700.0;  // error out below this max posterior log-weight
};

struct ScoreEval {
    double logpdf = 0.0;
    Vec score;
    Mat jacobian;  // empty unless requested
};

// Evaluator bundle for (p_t, s_t, grad s_t) of one target under the VP process.
// Analytic mixture algebra for A4; posterior-moment quadrature otherwise, with
// erf closed forms for uniform-box targets.
class VpScoreModel {
public:
    explicit VpScoreModel(targets::TargetPtr target, QuadratureSpec spec = {});

    const targets::TargetDensity& target() const { return *target_; }
    targets::TargetPtr target_ptr() const { return target_; }
    ScoreMethod method() const { return method_; }
    int dim() const { return target_->dim; }
    const QuadratureSpec& spec() const { return spec_; }
    bool allows_t0() const;

    double marginal_pdf(double t, const Vec& x) const;
    double marginal_logpdf(double t, const Vec& x) const;
    Vec score(double t, const Vec& x) const;
    Mat score_jacobian(double t, const Vec& x) const;
    ScoreEval eval(double t, const Vec& x, bool need_jacobian) const;

private:
    enum class Path { Mixture, Convolution, BoxMixture, PosteriorQuad };

    ScoreEval eval_mixture(double t, const Vec& x, bool need_jac) const;
    ScoreEval eval_convolution(double t, const Vec& x, bool need_jac) const;
    ScoreEval eval_boxes(double t, const Vec& x, bool need_jac) const;
    ScoreEval eval_posterior_quad(double t, const Vec& x, bool need_jac) const;
    void check_time(double t, bool for_score) const;

    targets::TargetPtr target_;
    QuadratureSpec spec_;
    ScoreMethod method_ = ScoreMethod::QuadraturePosterior;
    Path path_ = Path::PosteriorQuad;

    // cached discretizations
    Mat nodes_;      // dim x m (convolution base or quadrature nodes)
    Vec log_w_;      // m
    bool iso_ = true;
    double sigma0_sq_ = 0.0;  // isotropic smoothing variance (A3)
    Mat sigma_mat_;           // A3 smoothing covariance
};

// Class-specific closed-form score Lipschitz bound L(t):
//   A1: 1 + e^{-t} R^2/(1-e^{-t})^2 + e^{-t}/(1-e^{-t}), valid for t > 0
//   A2: 2/(1-e^{-t}), valid for t > 0
//   A3/A4: constant M_T = 1/lam + R^2/lam^2 on [0,T], with lam the minimum
//          eigenvalue of a(t)^2 Sigma + sigma^2(t) I over t in [0,T].
struct LipschitzBound {
    targets::ClassTag tag = targets::ClassTag::General;
    double R = 0.0;
    double horizon = std::numeric_limits<double>::infinity();
    double lambda_min = 0.0;  // A3/A4 only
    double M_T = 0.0;         // A3/A4 only
    double operator()(double t) const;
    bool valid_at(double t) const;
};

LipschitzBound make_lipschitz_bound(const targets::TargetDensity& target, double horizon_T);

inline double theoretical_L(const LipschitzBound& bound, double t) { return bound(t); }

// Max over grid columns of the operator norm of the score Jacobian.
double empirical_L(const VpScoreModel& model, double t, const Mat& grid);

}  // namespace vpflow::vp

#endif
