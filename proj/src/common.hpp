#ifndef VPFLOW_COMMON_HPP
#define VPFLOW_COMMON_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vpflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Numerical failure with context; maps to exit code 3 at the CLI boundary.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// All posterior weights underflowed: the query point is too far in the tail
// for the quadrature node coverage. Explicit failure instead of 0/0.
struct TailGuardError : NumericError {
    double t;
    Vec x;
    TailGuardError(double t_, Vec x_, const std::string& msg)
        : NumericError(msg), t(t_), x(std::move(x_)) {}
};

// Invalid configuration or arguments; maps to exit code 2 at the CLI boundary.
struct ConfigError : std::runtime_error {
    std::string field;  // JSON-pointer-ish path of the offending field, may be empty
    explicit ConfigError(const std::string& msg, std::string field_ = "")
        : std::runtime_error(msg), field(std::move(field_)) {}
};

// Deterministic RNG: mt19937_64 + Box-Muller normals so streams do not depend
// on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() {  // in [0,1)
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Vec normal_vec(int d) {
        Vec z(d);
        for (int i = 0; i < d; ++i) z[i] = normal();
        return z;
    }

    std::uint64_t next_u64() { return gen_(); }

    // Derive an independent stream (for per-call/per-worker generators).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
        x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27; x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline double log_sum_exp(const Vec& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;  // -inf stays -inf
    return m + std::log((v.array() - m).exp().sum());
}

// Standard normal pdf/cdf and stable log tails.
double std_normal_pdf(double u);
double std_normal_cdf(double u);
double log_std_normal_cdf_diff(double hi, double lo);  // log(Phi(hi)-Phi(lo)), hi > lo
double log_erfc(double z);

// Operator norm (largest singular value) of a matrix, dim <= 2 closed form.
double opnorm_small(const Mat& m);

// Deterministic shortest round-trip formatting for CSV output.
std::string format_double(double v);

// fn(i) for i in [0,n); results must go to preallocated slots. threads<=1 runs inline.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn);

// FNV-1a 64-bit, used for config hashes in run manifests.
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace vpflow

#endif
