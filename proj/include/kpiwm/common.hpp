#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace kpiwm {

using Vec = std::vector<double>;

// Dense row-major matrix. Small and predictable; all model math runs on it.
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return v_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return v_[r * cols_ + c]; }

    double* row_ptr(std::size_t r) { return v_.data() + r * cols_; }
    const double* row_ptr(std::size_t r) const { return v_.data() + r * cols_; }

    Vec& data() { return v_; }
    const Vec& data() const { return v_; }

    void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

    Vec row(std::size_t r) const {
        return Vec(row_ptr(r), row_ptr(r) + cols_);
    }
    Vec col(std::size_t c) const {
        Vec out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }
    void set_row(std::size_t r, const Vec& x) {
        std::copy(x.begin(), x.end(), row_ptr(r));
    }

    bool operator==(const Mat& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && v_ == o.v_;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    Vec v_;
};

// Reuse a buffer when the shape already matches (hot forward paths).
inline void ensure_shape(Mat& m, std::size_t rows, std::size_t cols) {
    if (m.rows() != rows || m.cols() != cols) m = Mat(rows, cols);
}

// Small dense kernels used throughout; no BLAS dependency.
namespace num {

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const Vec& a, const Vec& b) { return dot(a.data(), b.data(), a.size()); }

// out = x * W  (x: 1xK, W: KxN)
inline void vec_mat(const double* x, const Mat& w, double* out) {
    const std::size_t k = w.rows(), n = w.cols();
    std::fill(out, out + n, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* wr = w.row_ptr(i);
        for (std::size_t j = 0; j < n; ++j) out[j] += xi * wr[j];
    }
}

// out = x * W^T (x: 1xN, W: KxN) -> length K
inline void vec_mat_t(const double* x, const Mat& w, double* out) {
    const std::size_t k = w.rows(), n = w.cols();
    for (std::size_t i = 0; i < k; ++i) out[i] = dot(x, w.row_ptr(i), n);
}

// C = A * B
inline Mat mat_mat(const Mat& a, const Mat& b) {
    Mat c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* br = b.row_ptr(k);
            double* cr = c.row_ptr(i);
            for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

// y = A * x
inline Vec mat_vec(const Mat& a, const Vec& x) {
    Vec y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row_ptr(i), x.data(), a.cols());
    return y;
}

// y = A^T * x
inline Vec mat_t_vec(const Mat& a, const Vec& x) {
    Vec y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* ar = a.row_ptr(i);
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += xi * ar[j];
    }
    return y;
}

inline double frobenius_dot(const Mat& a, const Mat& b) {
    return dot(a.data(), b.data());
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

// d/dx gelu(x) = Phi(x) + x phi(x)
inline double gelu_grad(double x) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// Overflow-safe softplus: log(1 + exp(x)).
inline double softplus(double x) {
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double clamp(double x, double lo, double hi) {
    return std::min(std::max(x, lo), hi);
}

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double mean(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

} // namespace num
} // namespace kpiwm
