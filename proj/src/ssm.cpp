#include "kpiwm/ssm.hpp"

#include <cmath>

#include "kpiwm/errors.hpp"

namespace kpiwm::ssm {

namespace {

// Solve (I - dt/2 A_ct) X = Rhs column by column; the pencil is lower
// triangular with positive diagonal for any dt > 0.
Mat solve_pencil(const Mat& a_ct, double dt, const Mat& rhs) {
    const std::size_t n = a_ct.rows();
    Mat p(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            p(i, j) = (i == j ? 1.0 : 0.0) - 0.5 * dt * a_ct(i, j);
    for (std::size_t i = 0; i < n; ++i)
        if (!(p(i, i) > 0.0)) throw NumericalError("discretize: non-positive pivot");

    Mat x(n, rhs.cols());
    for (std::size_t col = 0; col < rhs.cols(); ++col) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = rhs(i, col);
            for (std::size_t j = 0; j < i; ++j) s -= p(i, j) * x(j, col);
            x(i, col) = s / p(i, i);
        }
    }
    return x;
}

} // namespace

HippoOperator build_hippo(std::size_t n) {
    if (n < 1) throw ArgumentError("build_hippo: N must be >= 1");
    HippoOperator op;
    op.a_ct = Mat(n, n);
    op.b_ref.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        op.b_ref[i] = std::sqrt(2.0 * static_cast<double>(i) + 1.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (i > j)
                op.a_ct(i, j) = -std::sqrt((2.0 * static_cast<double>(i) + 1.0) *
                                           (2.0 * static_cast<double>(j) + 1.0));
            else if (i == j)
                op.a_ct(i, j) = -(static_cast<double>(i) + 1.0);
        }
    }
    return op;
}

double softplus_dt(double tau) { return num::softplus(tau) + kEpsilonDt; }

double softplus_dt_grad(double tau) { return num::sigmoid(tau); }

Mat discretize(const HippoOperator& op, double dt) {
    if (!(dt > 0.0)) throw ArgumentError("discretize: dt must be positive");
    const std::size_t n = op.state_size();
    Mat q(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            q(i, j) = (i == j ? 1.0 : 0.0) + 0.5 * dt * op.a_ct(i, j);
    return solve_pencil(op.a_ct, dt, q);
}

Mat discretize_dt_grad(const HippoOperator& op, double dt, const Mat& a_dt) {
    const std::size_t n = op.state_size();
    Mat api = a_dt;
    for (std::size_t i = 0; i < n; ++i) api(i, i) += 1.0;
    Mat rhs = num::mat_mat(op.a_ct, api);
    for (double& x : rhs.data()) x *= 0.5;
    return solve_pencil(op.a_ct, dt, rhs);
}

Mat make_taps(const HippoOperator& op, const SsmComponentParams& params, std::size_t tap_len) {
    if (tap_len < 1) throw ArgumentError("make_taps: tap length must be >= 1");
    const std::size_t d = params.channels();
    const std::size_t n = op.state_size();
    Mat taps(d, tap_len);

    for (std::size_t m = 0; m < params.components(); ++m) {
        const Mat a = discretize(op, softplus_dt(params.tau[m]));
        // states V[t] (d x N), one row per channel: V[0] = B, V[t] = V[t-1] A^T
        Mat v = params.b;
        for (std::size_t c = 0; c < d; ++c)
            taps(c, 0) += num::dot(params.c.row_ptr(c), params.b.row_ptr(c), n) + params.d[c];
        for (std::size_t t = 1; t < tap_len; ++t) {
            Mat vn(d, n);
            for (std::size_t c = 0; c < d; ++c) {
                const double* vr = v.row_ptr(c);
                double* out = vn.row_ptr(c);
                for (std::size_t i = 0; i < n; ++i) out[i] = num::dot(a.row_ptr(i), vr, n);
            }
            v = std::move(vn);
            for (std::size_t c = 0; c < d; ++c)
                taps(c, t) += num::dot(params.c.row_ptr(c), v.row_ptr(c), n);
        }
    }
    return taps;
}

Mat make_component_taps(const HippoOperator& op, const SsmComponentParams& params,
                        std::size_t component, std::size_t tap_len) {
    SsmComponentParams single = params;
    single.tau = {params.tau.at(component)};
    return make_taps(op, single, tap_len);
}

void taps_backward(const HippoOperator& op, const SsmComponentParams& params,
                   std::size_t tap_len, const Mat& d_taps, TapGrads& out) {
    const std::size_t d = params.channels();
    const std::size_t n = op.state_size();
    if (out.b.empty()) out.b = Mat(d, n);
    if (out.c.empty()) out.c = Mat(d, n);
    if (out.d.empty()) out.d.assign(d, 0.0);
    if (out.tau.empty()) out.tau.assign(params.components(), 0.0);

    for (std::size_t m = 0; m < params.components(); ++m) {
        const double dt = softplus_dt(params.tau[m]);
        const Mat a = discretize(op, dt);

        // Recompute forward states V[t] = B (A^T)^t for the adjoint sweep.
        std::vector<Mat> v(tap_len);
        v[0] = params.b;
        for (std::size_t t = 1; t < tap_len; ++t) {
            v[t] = Mat(d, n);
            for (std::size_t c = 0; c < d; ++c) {
                const double* vr = v[t - 1].row_ptr(c);
                double* outp = v[t].row_ptr(c);
                for (std::size_t i = 0; i < n; ++i) outp[i] = num::dot(a.row_ptr(i), vr, n);
            }
        }

        Mat dv(d, n);
        Mat da(n, n);
        for (std::size_t t = tap_len; t-- > 1;) {
            for (std::size_t c = 0; c < d; ++c) {
                const double g = d_taps(c, t);
                if (g != 0.0) {
                    const double* cr = params.c.row_ptr(c);
                    double* dvr = dv.row_ptr(c);
                    for (std::size_t i = 0; i < n; ++i) dvr[i] += g * cr[i];
                    double* dcr = out.c.row_ptr(c);
                    const double* vr = v[t].row_ptr(c);
                    for (std::size_t i = 0; i < n; ++i) dcr[i] += g * vr[i];
                }
            }
            // dA += dV[t]^T V[t-1]
            for (std::size_t c = 0; c < d; ++c) {
                const double* dvr = dv.row_ptr(c);
                const double* vr = v[t - 1].row_ptr(c);
                for (std::size_t i = 0; i < n; ++i) {
                    const double di = dvr[i];
                    if (di == 0.0) continue;
                    double* dar = da.row_ptr(i);
                    for (std::size_t j = 0; j < n; ++j) dar[j] += di * vr[j];
                }
            }
            // propagate through V[t] = V[t-1] A^T: dV[t-1] = dV[t] A
            Mat dvp(d, n);
            for (std::size_t c = 0; c < d; ++c) {
                const double* dvr = dv.row_ptr(c);
                double* outp = dvp.row_ptr(c);
                for (std::size_t i = 0; i < n; ++i) {
                    const double di = dvr[i];
                    if (di == 0.0) continue;
                    const double* ar = a.row_ptr(i);
                    for (std::size_t j = 0; j < n; ++j) outp[j] += di * ar[j];
                }
            }
            dv = std::move(dvp);
        }
        // lag 0: taps[c][0] = C_c . B_c + D_c, plus the accumulated dV[0].
        for (std::size_t c = 0; c < d; ++c) {
            const double g0 = d_taps(c, 0);
            double* dbr = out.b.row_ptr(c);
            double* dcr = out.c.row_ptr(c);
            const double* dvr = dv.row_ptr(c);
            const double* br = params.b.row_ptr(c);
            const double* cr = params.c.row_ptr(c);
            for (std::size_t i = 0; i < n; ++i) {
                dbr[i] += dvr[i] + g0 * cr[i];
                dcr[i] += g0 * br[i];
            }
            out.d[c] += g0;
        }
        const Mat dadt = discretize_dt_grad(op, dt, a);
        out.tau[m] += num::frobenius_dot(da, dadt) * softplus_dt_grad(params.tau[m]);
    }
}

void causal_depthwise_conv_into(const Mat& input, const Mat& taps, Mat& out) {
    const std::size_t len = input.rows(), d = input.cols();
    const std::size_t lk = taps.cols();
    if (taps.rows() != d) throw ShapeError("conv: taps/channel mismatch");
    ensure_shape(out, len, d);
    thread_local Vec chan;
    chan.resize(len);
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < len; ++t) chan[t] = input(t, c);
        const double* k = taps.row_ptr(c);
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t kmax = std::min(lk - 1, t);
            double s = 0.0;
            for (std::size_t tau = 0; tau <= kmax; ++tau) s += k[tau] * chan[t - tau];
            out(t, c) = s;
        }
    }
}

Mat causal_depthwise_conv(const Mat& input, const Mat& taps) {
    Mat out;
    causal_depthwise_conv_into(input, taps, out);
    return out;
}

void causal_depthwise_conv_backward(const Mat& input, const Mat& taps, const Mat& d_out,
                                    Mat& d_input, Mat& d_taps) {
    const std::size_t len = input.rows(), d = input.cols();
    const std::size_t lk = taps.cols();
    if (d_input.rows() != len || d_input.cols() != d) d_input = Mat(len, d);
    if (d_taps.rows() != d || d_taps.cols() != lk) d_taps = Mat(d, lk);
    Vec chan(len), dchan(len);
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < len; ++t) {
            chan[t] = input(t, c);
            dchan[t] = d_out(t, c);
        }
        const double* k = taps.row_ptr(c);
        double* dk = d_taps.row_ptr(c);
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t kmax = std::min(lk - 1, t);
            const double g = dchan[t];
            if (g == 0.0) continue;
            for (std::size_t tau = 0; tau <= kmax; ++tau) dk[tau] += g * chan[t - tau];
        }
        for (std::size_t s = 0; s < len; ++s) {
            double acc = 0.0;
            const std::size_t tmax = std::min(len - 1, s + lk - 1);
            for (std::size_t t = s; t <= tmax; ++t) acc += k[t - s] * dchan[t];
            d_input(s, c) += acc;
        }
    }
}

} // namespace kpiwm::ssm
