#pragma once

// Independent verification routes. Everything in this header exists to check
// the production code by a different algorithm: compensated summation against
// the reduction plans, a dense Jacobi eigensolver against the power iteration,
// central differences against backpropagation. None of the experiment
// pipelines call these; only tests and the verify suites do.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace fairdrift::oracles {

// Neumaier's compensated summation in binary64. For inputs whose exact sum is
// representable this is exact for all practical purposes, which makes it the
// "true sum" oracle for the binary32 reduction error bounds.
inline double compensated_sum(std::span<const double> values) {
    double sum = 0.0;
    double comp = 0.0;
    for (double x : values) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x)) {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    return sum + comp;
}

// All eigenvalues of a symmetric matrix (row-major, n x n) by the cyclic
// Jacobi method. Cubic and dense, fine for the n <= a-few-hundred probes the
// tests use. Returns eigenvalues in ascending order.
std::vector<double> jacobi_eigenvalues(std::span<const double> matrix, std::size_t n);

double jacobi_max_eigenvalue(std::span<const double> matrix, std::size_t n);

// Central-difference gradient of a scalar function, the oracle backprop is
// measured against. Step per coordinate: h_j = step_scale * (1 + |theta_j|).
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta, double step_scale = 1e-5);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

} // namespace fairdrift::oracles
