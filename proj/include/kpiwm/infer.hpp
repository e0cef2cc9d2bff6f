#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpiwm/data.hpp"
#include "kpiwm/model.hpp"

namespace kpiwm::infer {

// Monte-Carlo prediction for one window. Variances decompose into the
// decoded noise level (aleatoric) and the spread of decoded means across
// prior draws (epistemic); physical-unit variance scales by sigma_y^2.
struct Prediction {
    Vec mean;      // physical units, length O
    Vec std_mean;  // standardized MC mean, length O
    Vec variance;  // physical units, length O
    Vec aleatoric; // standardized, length O
    Vec epistemic; // standardized, length O
    std::size_t samples_used = 0;
};

Prediction predict(const model::WorldModel& m, const data::StandardScaler& scaler,
                   int action_index, const Mat& window_physical, std::size_t samples,
                   std::uint64_t seed);

struct MetricReport {
    double rmse = 0.0, mae = 0.0, mse = 0.0, r2 = 0.0;
    double skill_r = 0.0, skill_m = 0.0;
    bool skill_defined = false;
    double persistence_rmse = 0.0, persistence_mae = 0.0;
    std::size_t n_samples = 0;
    double latency_mean_s = 0.0, latency_median_s = 0.0;
    // Per-feature breakdown when O = F (empty for the univariate head).
    std::vector<double> rmse_per_feature, mae_per_feature, r2_per_feature;

    std::string to_json_string() const;
};

struct EvalRow {
    std::int64_t timestamp = 0;
    Vec truth, prediction, lower, upper; // physical units
};

struct EvalResult {
    MetricReport metrics;
    std::vector<EvalRow> rows;
};

struct EvalOptions {
    std::size_t samples = 8;
    std::uint64_t seed = 0;
    double interval_z = 1.96;
    unsigned threads = 1;
};

EvalResult evaluate(const model::WorldModel& m, const data::StandardScaler& scaler,
                    const data::KpiTrace& trace, const data::SplitPlan& plan, data::Split split,
                    const EvalOptions& options);

// Pooled error metrics in whatever units the inputs carry.
double rmse_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred);
double mae_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred);
double mse_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred);
double r2_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred);

// skill = 1 - error_model / error_persistence; undefined when the
// persistence error is zero.
struct SkillScores {
    double skill_r = 0.0, skill_m = 0.0;
    bool defined = false;
};
SkillScores skill_scores(const std::vector<Vec>& model_residuals,
                         const std::vector<Vec>& persistence_residuals);

} // namespace kpiwm::infer
