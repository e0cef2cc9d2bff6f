#pragma once

#include <complex>
#include <vector>

#include "kpiwm/common.hpp"

namespace kpiwm::linalg {

// Eigenvalues of a general real square matrix (backed by Eigen's solver;
// independent of any of our own discretization code paths).
std::vector<std::complex<double>> eigenvalues(const Mat& a);

double spectral_radius(const Mat& a);

// Solve L x = b for lower-triangular L (forward substitution).
Vec solve_lower_triangular(const Mat& l, const Vec& b);

} // namespace kpiwm::linalg
