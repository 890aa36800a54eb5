#pragma once

// Dense vector/matrix helpers over contiguous doubles. All reductions run
// strictly left to right: reruns of the same binary must produce identical
// bytes, so no reassociation (and no -ffast-math anywhere in the build).

#include <cstddef>
#include <cmath>
#include <span>
#include <vector>

namespace poisonlab {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

// y = W x, W row-major [rows x cols].
inline void matvec(std::span<const double> w, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* row = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
        y[r] = s;
    }
}

// y = W^T x, W row-major [rows x cols], x has length rows, y length cols.
inline void matvec_t(std::span<const double> w, std::size_t rows, std::size_t cols,
                     std::span<const double> x, std::span<double> y) {
    for (std::size_t c = 0; c < cols; ++c) y[c] = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) y[c] += x[r] * row[c];
    }
}

// W += alpha * u v^T, W row-major [rows x cols].
inline void outer_acc(std::span<double> w, std::size_t rows, std::size_t cols,
                      double alpha, std::span<const double> u, std::span<const double> v) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = w.data() + r * cols;
        double a = alpha * u[r];
        for (std::size_t c = 0; c < cols; ++c) row[c] += a * v[c];
    }
}

// Mean of n stacked rows of width d (row-major), left-to-right over rows.
inline std::vector<double> row_mean(std::span<const double> rows, std::size_t n, std::size_t d) {
    std::vector<double> m(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) m[j] += rows[i * d + j];
    for (std::size_t j = 0; j < d; ++j) m[j] /= static_cast<double>(n);
    return m;
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace poisonlab
