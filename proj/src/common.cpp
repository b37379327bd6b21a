#include "common.hpp"

#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>

namespace vpflow {

double std_normal_pdf(double u) {
    return 0.3989422804014326779 * std::exp(-0.5 * u * u);
}

double std_normal_cdf(double u) {
    return 0.5 * std::erfc(-u * 0.7071067811865475244);
}

double log_erfc(double z) {
    if (z < 25.0) {
        return std::log(std::erfc(z));
    }
    // Asymptotic erfc(z) ~ exp(-z^2)/(z sqrt(pi)) (1 - 1/(2z^2) + 3/(4z^4))
    const double z2 = z * z;
    return -z2 - std::log(z) - 0.5723649429247000870 + std::log1p(-0.5 / z2 + 0.75 / (z2 * z2));
}

double log_std_normal_cdf_diff(double hi, double lo) {
    if (!(hi > lo)) throw NumericError("log_std_normal_cdf_diff: requires hi > lo");
    const double inv_sqrt2 = 0.7071067811865475244;
    if (lo >= 0.0) {
        // Both in the upper tail: Phi(hi)-Phi(lo) = (erfc(lo/r2) - erfc(hi/r2))/2
        const double la = log_erfc(lo * inv_sqrt2);
        const double lb = log_erfc(hi * inv_sqrt2);
        return la + std::log1p(-std::exp(lb - la)) - 0.6931471805599453094;
    }
    if (hi <= 0.0) {
        return log_std_normal_cdf_diff(-lo, -hi);
    }
    // Straddles zero; no underflow possible.
    return std::log(std_normal_cdf(hi) - std_normal_cdf(lo));
}

double opnorm_small(const Mat& m) {
    if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
    if (m.rows() == 2 && m.cols() == 2) {
        const double a = m(0, 0), b = m(0, 1), c = m(1, 0), d = m(1, 1);
        const double f = a * a + b * b + c * c + d * d;
        const double g = std::hypot(a * a + b * b - c * c - d * d, 2.0 * (a * c + b * d));
        return std::sqrt(0.5 * (f + g));
    }
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int nt = static_cast<int>(std::min<std::int64_t>(threads, n));
    std::vector<std::thread> workers;
    workers.reserve(nt);
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (int w = 0; w < nt; ++w) {
        workers.emplace_back([&, w]() {
            try {
                for (std::int64_t i = w; i < n; i += nt) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace vpflow
