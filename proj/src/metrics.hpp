#ifndef VPFLOW_METRICS_HPP
#define VPFLOW_METRICS_HPP

#include "flow.hpp"
#include "json.hpp"

namespace vpflow::metrics {

struct GridSpec {
    int dim = 1;
    double lo[2] = {0.0, 0.0};
    double hi[2] = {0.0, 0.0};
    int count[2] = {0, 0};

    static GridSpec d1(double lo, double hi, int count);
    static GridSpec d2(double lo0, double hi0, int count0, double lo1, double hi1, int count1);
    void validate() const;

    Vec axis(int d) const;
    Mat points() const;            // dim x N, axis 0 fastest
    Vec quadrature_weights() const;  // tensor trapezoid, matches points()
    nlohmann::json to_json() const;
};

struct MetricReport {
    std::map<std::string, double> values;
    nlohmann::json metadata = nlohmann::json::object();
    double at(const std::string& key) const;
    nlohmann::json to_json() const;
};

using DensityFn = std::function<double(const Vec&)>;

// Density backed by precomputed values on the grid (queries must hit grid nodes).
DensityFn grid_table_fn(const GridSpec& grid, std::shared_ptr<const Vec> values);

double l1_distance(const DensityFn& p, const DensityFn& q, const GridSpec& grid);

// Trapezoid integral of p log(p/q); p=0 contributes 0; q=0 where p>0 is an
// absolute-continuity error listing the offending points.
double kl_divergence(const DensityFn& p, const DensityFn& q, const GridSpec& grid);

double wasserstein_1d(const DensityFn& p, const DensityFn& q, const GridSpec& grid, int order);

// KL(p_T || p_Z) plus the slack of the exponential-KL, Pinsker, Talagrand and
// Hoelder bounds; with a flow field also the pullback-vs-target metrics.
MetricReport bound_suite(const vp::VpScoreModel& model, const flow::FlowField* flow_field,
                         double delta, double T, const GridSpec& grid,
                         const flow::IntegratorConfig& cfg = {}, int threads = 1);

// One-sample Kolmogorov-Smirnov distance to N(0,1).
double ks_distance_std_normal(Vec samples);

double std_normal_density(const Vec& x);

}  // namespace vpflow::metrics

#endif
