#include "kpiwm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "kpiwm/errors.hpp"
#include "kpiwm/infer.hpp"
#include "kpiwm/rng.hpp"

namespace kpiwm::bench {

LatencyReport measure_latency(const model::WorldModel& m, const data::StandardScaler& scaler,
                              int action_index, const std::vector<Mat>& windows,
                              std::size_t samples, std::uint64_t seed) {
    if (windows.empty()) throw ArgumentError("measure_latency: no windows");
    m.cached_taps();
    infer::predict(m, scaler, action_index, windows.front(), samples, seed); // warmup

    std::vector<double> times;
    times.reserve(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        infer::predict(m, scaler, action_index, windows[i], samples, Rng::mix(seed, i));
        times.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    LatencyReport rep;
    rep.calls = times.size();
    double sum = 0.0;
    for (double t : times) sum += t;
    rep.mean_s = sum / static_cast<double>(times.size());
    std::sort(times.begin(), times.end());
    rep.median_s = times[times.size() / 2];
    return rep;
}

namespace {

double uncentered_r2(const std::vector<double>& xs, const std::vector<double>& ys,
                     bool quadratic) {
    // Normal equations for t = b*L (+ c*L^2), both through the origin.
    double s11 = 0.0, s12 = 0.0, s22 = 0.0, r1 = 0.0, r2 = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double l = xs[i], q = xs[i] * xs[i];
        s11 += l * l;
        s12 += l * q;
        s22 += q * q;
        r1 += l * ys[i];
        r2 += q * ys[i];
    }
    double b = 0.0, c = 0.0;
    if (quadratic) {
        const double det = s11 * s22 - s12 * s12;
        if (det == 0.0) throw NumericalError("scaling fit: singular normal equations");
        b = (r1 * s22 - r2 * s12) / det;
        c = (r2 * s11 - r1 * s12) / det;
    } else {
        b = r1 / s11;
    }
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double pred = b * xs[i] + c * xs[i] * xs[i];
        ss_res += (ys[i] - pred) * (ys[i] - pred);
        ss_tot += ys[i] * ys[i];
    }
    return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
}

} // namespace

ScalingReport window_scaling_sweep(model::ModelConfig base,
                                   const std::vector<std::size_t>& window_lens,
                                   std::size_t repeats, std::uint64_t seed) {
    if (window_lens.size() < 2) throw ArgumentError("scaling sweep needs at least two lengths");
    ScalingReport rep;
    const auto scaler = data::StandardScaler::identity(base.feature_count,
                                                       static_cast<int>(base.output_dim));
    for (const std::size_t len : window_lens) {
        model::ModelConfig cfg = base;
        cfg.window_len = len;
        cfg.tap_len = 0; // track the window
        const model::WorldModel m(cfg);

        std::vector<Mat> windows(repeats, Mat(len, cfg.feature_count));
        Rng rng = Rng::stream(seed, {0xBE, len});
        for (auto& w : windows)
            for (auto& v : w.data()) v = rng.normal();
        m.cached_taps();
        infer::predict(m, scaler, 0, windows.front(), 1, seed); // warmup
        // Scheduler interference only adds time, so the minimum over
        // repeats tracks the true per-window cost.
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < windows.size(); ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            infer::predict(m, scaler, 0, windows[i], 1, Rng::mix(seed, i));
            best = std::min(best, std::chrono::duration<double>(
                                      std::chrono::steady_clock::now() - t0)
                                      .count());
        }
        rep.points.push_back(SweepPoint{len, best});
    }
    std::vector<double> xs, ys;
    for (const auto& p : rep.points) {
        xs.push_back(static_cast<double>(p.window_len));
        ys.push_back(p.latency_s);
    }
    rep.r2_linear = uncentered_r2(xs, ys, false);
    rep.r2_quadratic = uncentered_r2(xs, ys, true);
    rep.margin = rep.r2_quadratic - rep.r2_linear;
    rep.partial_r2 =
        rep.r2_linear < 1.0 ? (rep.r2_quadratic - rep.r2_linear) / (1.0 - rep.r2_linear) : 0.0;
    {
        // Log-log slope across the sweep endpoints and interior points.
        double sxx = 0.0, sxy = 0.0, mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            mx += std::log(xs[i]);
            my += std::log(ys[i]);
        }
        mx /= static_cast<double>(xs.size());
        my /= static_cast<double>(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double dx = std::log(xs[i]) - mx;
            sxx += dx * dx;
            sxy += dx * (std::log(ys[i]) - my);
        }
        rep.effective_exponent = sxx > 0.0 ? sxy / sxx : 0.0;
    }
    return rep;
}

void dump_taps_csv(const model::WorldModel& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write taps CSV: " + path);
    out << "layer,channel,lag,value\n";
    const auto& taps = m.cached_taps();
    char buf[40];
    for (std::size_t l = 0; l < taps.per_layer.size(); ++l) {
        const Mat& t = taps.per_layer[l];
        for (std::size_t c = 0; c < t.rows(); ++c)
            for (std::size_t lag = 0; lag < t.cols(); ++lag) {
                std::snprintf(buf, sizeof(buf), "%.17g", t(c, lag));
                out << l << ',' << c << ',' << lag << ',' << buf << '\n';
            }
    }
}

} // namespace kpiwm::bench
