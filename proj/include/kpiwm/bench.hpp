#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpiwm/data.hpp"
#include "kpiwm/model.hpp"

namespace kpiwm::bench {

struct LatencyReport {
    double mean_s = 0.0;
    double median_s = 0.0;
    std::size_t calls = 0;
};

// Mean/median wall-clock per predict call over the given windows; tap caches
// are warmed beforehand so only steady-state inference is timed.
LatencyReport measure_latency(const model::WorldModel& m, const data::StandardScaler& scaler,
                              int action_index, const std::vector<Mat>& windows,
                              std::size_t samples, std::uint64_t seed);

struct SweepPoint {
    std::size_t window_len = 0;
    double latency_s = 0.0; // median per-window
};

struct ScalingReport {
    std::vector<SweepPoint> points;
    double r2_linear = 0.0;    // t ~ b*L        (uncentered R^2)
    double r2_quadratic = 0.0; // t ~ b*L + c*L^2
    double margin = 0.0;       // r2_quadratic - r2_linear
    // Share of the linear fit's residual explained by the L^2 term
    // (coefficient of partial determination); near 1 when a quadratic
    // component is clearly present.
    double partial_r2 = 0.0;
    // Slope of log t vs log L over the sweep.
    double effective_exponent = 0.0;
};

// Latency vs window length at fixed width. Both models pass through the
// origin; the margin measures how much the L^2 term explains.
ScalingReport window_scaling_sweep(model::ModelConfig base,
                                   const std::vector<std::size_t>& window_lens,
                                   std::size_t repeats, std::uint64_t seed);

void dump_taps_csv(const model::WorldModel& m, const std::string& path);

} // namespace kpiwm::bench
