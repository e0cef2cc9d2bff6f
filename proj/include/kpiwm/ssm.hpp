#pragma once

#include <cstddef>

#include "kpiwm/common.hpp"

namespace kpiwm::ssm {

// Floor added to softplus so discretization steps stay away from zero.
constexpr double kEpsilonDt = 1e-4;

// Fixed continuous-time memory operator; lower triangular, Hurwitz.
struct HippoOperator {
    Mat a_ct;  // N x N
    Vec b_ref; // length N
    std::size_t state_size() const { return b_ref.size(); }
};

HippoOperator build_hippo(std::size_t n);

double softplus_dt(double tau);
double softplus_dt_grad(double tau);

// Bilinear (Tustin) map (I - dt/2 A)^{-1}(I + dt/2 A); Schur-stable for any
// dt > 0 since A is Hurwitz. Uses triangular solves, no general inverse.
Mat discretize(const HippoOperator& op, double dt);

// d A(dt) / d dt = 0.5 (I - dt/2 A)^{-1} A (A(dt) + I)
Mat discretize_dt_grad(const HippoOperator& op, double dt, const Mat& a_dt);

// Per-layer SSM parameters. B, C, D are shared across the M mixture
// components; each component has its own unconstrained step parameter tau.
struct SsmComponentParams {
    Mat b;   // d x N
    Mat c;   // d x N
    Vec d;   // length d (feedthrough)
    Vec tau; // length M

    std::size_t channels() const { return d.size(); }
    std::size_t components() const { return tau.size(); }
};

// Mixture-summed taps, d x L_k. taps[c][0] = sum_m (C_c.B_c + D_c);
// taps[c][t] = sum_m C_c A_m^t B_c via iterated matrix-vector products.
Mat make_taps(const HippoOperator& op, const SsmComponentParams& params, std::size_t tap_len);

// Taps for a single component (diagnostics).
Mat make_component_taps(const HippoOperator& op, const SsmComponentParams& params,
                        std::size_t component, std::size_t tap_len);

struct TapGrads {
    Mat b, c;
    Vec d;
    Vec tau;
};

// Accumulates d(loss)/d(B,C,D,tau) into out given d(loss)/d(taps).
void taps_backward(const HippoOperator& op, const SsmComponentParams& params,
                   std::size_t tap_len, const Mat& d_taps, TapGrads& out);

// U[t][c] = sum_tau taps[c][tau] * input[t - tau][c], zero left padding.
Mat causal_depthwise_conv(const Mat& input, const Mat& taps);
void causal_depthwise_conv_into(const Mat& input, const Mat& taps, Mat& out);

void causal_depthwise_conv_backward(const Mat& input, const Mat& taps, const Mat& d_out,
                                    Mat& d_input, Mat& d_taps);

} // namespace kpiwm::ssm
