#pragma once

// Test-side oracles kept independent of the library code paths they check:
// finite differences, regression fits, and brute-force statistics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "kpiwm/common.hpp"

namespace oracle {

inline double rel_err(double a, double b, double abs_guard = 1e-8) {
    const double m = std::max(std::abs(a), std::abs(b));
    if (m < abs_guard || std::abs(a - b) < abs_guard) return 0.0;
    return std::abs(a - b) / m;
}

// Central difference of f at *x, restoring *x afterwards.
inline double central_diff(const std::function<double()>& f, double* x, double h = 1e-5) {
    const double x0 = *x;
    const double step = h * std::max(1.0, std::abs(x0));
    *x = x0 + step;
    const double fp = f();
    *x = x0 - step;
    const double fm = f();
    *x = x0;
    return (fp - fm) / (2.0 * step);
}

// Max relative error between analytic gradient and central differences over
// a flat parameter buffer. The absolute guard sits above the finite
// difference noise floor (~1e-10 at h = 1e-5 for O(1) losses).
inline double max_grad_rel_err(const std::function<double()>& loss, double* params,
                               const double* analytic, std::size_t n, double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double fd = central_diff(loss, params + i, h);
        worst = std::max(worst, rel_err(analytic[i], fd, 1e-9));
    }
    return worst;
}

struct FitResult {
    std::vector<double> coeffs;
    double r2 = 0.0; // uncentered: 1 - SS_res / sum y^2
};

// Least squares on user-supplied basis columns (through the origin);
// small normal-equations solve, adequate for a handful of points.
inline FitResult fit_basis(const std::vector<std::vector<double>>& basis,
                           const std::vector<double>& y) {
    const std::size_t k = basis.size(), n = y.size();
    std::vector<std::vector<double>> g(k, std::vector<double>(k, 0.0));
    std::vector<double> rhs(k, 0.0);
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b)
            for (std::size_t i = 0; i < n; ++i) g[a][b] += basis[a][i] * basis[b][i];
        for (std::size_t i = 0; i < n; ++i) rhs[a] += basis[a][i] * y[i];
    }
    // Gaussian elimination with partial pivoting.
    std::vector<double> x(rhs);
    for (std::size_t col = 0; col < k; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < k; ++r)
            if (std::abs(g[r][col]) > std::abs(g[piv][col])) piv = r;
        std::swap(g[col], g[piv]);
        std::swap(x[col], x[piv]);
        for (std::size_t r = col + 1; r < k; ++r) {
            const double m = g[r][col] / g[col][col];
            for (std::size_t c = col; c < k; ++c) g[r][c] -= m * g[col][c];
            x[r] -= m * x[col];
        }
    }
    for (std::size_t col = k; col-- > 0;) {
        for (std::size_t c = col + 1; c < k; ++c) x[col] -= g[col][c] * x[c];
        x[col] /= g[col][col];
    }
    FitResult fit;
    fit.coeffs = x;
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double pred = 0.0;
        for (std::size_t a = 0; a < k; ++a) pred += x[a] * basis[a][i];
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += y[i] * y[i];
    }
    fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
    return fit;
}

// Independent percentile: nth_element based midpoint interpolation.
inline double percentile_reference(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return (1.0 - frac) * v[lo] + frac * v[lo + 1];
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double var_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

} // namespace oracle
