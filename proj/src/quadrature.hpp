#ifndef VPFLOW_QUADRATURE_HPP
#define VPFLOW_QUADRATURE_HPP

#include "common.hpp"

namespace vpflow {

struct QuadRule {
    Vec nodes;    // on [-1,1]
    Vec weights;
};

// Gauss-Legendre rule with n nodes, cached per n.
const QuadRule& gauss_legendre(int n);

// Nodes/weights mapped to [a,b].
void gauss_legendre_on(int n, double a, double b, Vec* nodes, Vec* weights);

// exp(integral) is the caller's business; this returns the integral itself.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol = 1e-10, int max_depth = 40);

// Trapezoid weights for a uniform grid of `count` nodes spanning [lo,hi].
Vec trapezoid_weights(double lo, double hi, int count);

}  // namespace vpflow

#endif
