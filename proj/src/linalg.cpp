#include "kpiwm/linalg.hpp"

#include <Eigen/Dense>

#include "kpiwm/errors.hpp"

namespace kpiwm::linalg {

std::vector<std::complex<double>> eigenvalues(const Mat& a) {
    if (a.rows() != a.cols()) throw ShapeError("eigenvalues: matrix must be square");
    Eigen::MatrixXd m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m(static_cast<long>(i), static_cast<long>(j)) = a(i, j);
    Eigen::EigenSolver<Eigen::MatrixXd> es(m, /*computeEigenvectors=*/false);
    if (es.info() != Eigen::Success) throw NumericalError("eigenvalue iteration failed to converge");
    std::vector<std::complex<double>> out(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) out[i] = es.eigenvalues()(static_cast<long>(i));
    return out;
}

double spectral_radius(const Mat& a) {
    double r = 0.0;
    for (const auto& ev : eigenvalues(a)) r = std::max(r, std::abs(ev));
    return r;
}

Vec solve_lower_triangular(const Mat& l, const Vec& b) {
    const std::size_t n = l.rows();
    if (l.cols() != n || b.size() != n) throw ShapeError("solve_lower_triangular: bad shapes");
    Vec x(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        const double* row = l.row_ptr(i);
        for (std::size_t j = 0; j < i; ++j) s -= row[j] * x[j];
        if (row[i] == 0.0) throw NumericalError("solve_lower_triangular: zero pivot");
        x[i] = s / row[i];
    }
    return x;
}

} // namespace kpiwm::linalg
