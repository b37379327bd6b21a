#ifndef VPFLOW_TARGETS_HPP
#define VPFLOW_TARGETS_HPP

#include <memory>
#include <optional>

#include "common.hpp"
#include "json.hpp"

namespace vpflow::targets {

enum class ClassTag { A1, A2, A3, A4, General };

std::string class_tag_name(ClassTag tag);

// Finite Gaussian mixture. Per-component covariances are allowed (the builtin
// gmm1d has them); a shared covariance is the special case where all entries
// coincide.
struct GaussianMixture {
    Vec weights;             // K, positive, sums to 1 within 1e-12
    Mat means;               // dim x K
    std::vector<Mat> covs;   // K of dim x dim, SPD
    int dim() const { return static_cast<int>(means.rows()); }
    int components() const { return static_cast<int>(means.cols()); }
    bool shared_cov() const;
    void validate() const;
};

struct ArcSegment {
    Eigen::Vector2d center;
    double radius = 1.0;
    double theta0 = 0.0, theta1 = 0.0;  // theta1 > theta0; full circle iff span == 2*pi
    double weight = 1.0;
    bool full_circle() const;
};

// Density on a box grid, stored as cell masses at cell centers.
struct GridBase {
    Vec lo, hi;              // dim
    std::vector<int> shape;  // cells per axis
    Vec cell_mass;           // prod(shape), nonnegative, sums to ~1
    int dim() const { return static_cast<int>(lo.size()); }
    Vec cell_center(std::int64_t flat_index) const;
    Vec cell_size() const;
};

// Compactly supported base probability measure of a Gaussian convolution.
struct CompactBase {
    Mat points;                     // dim x m, may be empty
    Vec point_weights;
    std::vector<ArcSegment> arcs;   // uniform-in-parameter measures
    std::optional<GridBase> grid;

    int dim() const;
    double total_mass() const;
    double support_radius() const;  // max ||y|| over the support
    // Flatten to quadrature nodes: exact for points/grid, 800 nodes per arc
    // (periodic trapezoid for full circles, Gauss-Legendre for open arcs).
    void discretize(Mat* nodes, Vec* weights, int nodes_per_arc = 800) const;
};

struct CompactConvolution {
    CompactBase base;
    Mat sigma;  // dim x dim SPD smoothing covariance
    void validate() const;
    bool isotropic_sigma() const;
};

struct LogConcaveInfo {
    std::function<double(const Vec&)> potential;  // V with p ~ exp(-V)
    double hessian_lower = 0.0;                   // nabla^2 V >= hessian_lower * I
};

// Mixture of axis-aligned uniform boxes; admits erf closed forms for the
// diffused marginals.
struct BoxMixture {
    struct Box {
        double weight;
        Vec lo, hi;
    };
    std::vector<Box> boxes;
};

class TargetDensity {
public:
    std::string name;
    int dim = 1;
    ClassTag class_tag = ClassTag::General;
    double support_radius = std::numeric_limits<double>::infinity();
    double second_moment = 0.0;  // E||X||^2

    double pdf(const Vec& x) const { return pdf_(x); }
    // dim x n matrix of i.i.d. draws, deterministic given seed.
    Mat sample(int n, std::uint64_t seed) const;

    std::optional<GaussianMixture> mixture;         // A4
    std::optional<CompactConvolution> convolution;  // A3
    std::optional<BoxMixture> box_mixture;          // uniform-box A1 targets
    std::optional<LogConcaveInfo> log_concave;      // A2

    // Integration pieces for posterior quadrature; cover the (effective) support.
    std::vector<std::pair<double, double>> pieces_1d;
    std::vector<std::pair<Eigen::Vector2d, Eigen::Vector2d>> boxes_2d;

    // Radius of the structural base measure: A3 base support, A4 mixture means
    // (plus an effective slack when covariances differ), A1 support radius.
    double base_radius() const;

    std::function<double(const Vec&)> pdf_;
    std::function<Vec(Rng&)> draw_;  // one draw
};

using TargetPtr = std::shared_ptr<const TargetDensity>;

// Builtin families: triangular, two_uniform, cubic_pullback, gmm1d (1D);
// rings, squares, moons, concentric (2D). Unknown names and invalid params throw.
TargetPtr make_builtin_target(const std::string& name,
                              const nlohmann::json& params = nlohmann::json::object());

// Gaussian N(mean, cov), tagged A4 (single-component mixture) or A2
// (log-concave view) for bound checks.
TargetPtr make_gaussian_target(const Vec& mean, const Mat& cov, ClassTag tag = ClassTag::A4,
                               const std::string& name = "");

TargetPtr make_mixture_target(GaussianMixture gm, const std::string& name);
TargetPtr make_convolution_target(CompactConvolution cc, const std::string& name);

// Class-G approximant of the density lemma: truncate to B(0,R) with tail mass
// < eps/4, renormalize, convolve with an isotropic Gaussian whose sigma is
// bisected against a trapezoid L1 oracle so that the smoothing error stays
// below eps/2. The overall L1 error against the target is verified < eps.
CompactConvolution g_approximant(const TargetDensity& target, double epsilon);

}  // namespace vpflow::targets

#endif
