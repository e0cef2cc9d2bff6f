#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kpiwm/common.hpp"

namespace kpiwm::data {

// Roles used by the planner reward; indices into KpiTrace columns.
enum class RewardRole : int { Sinr = 0, Se = 1, Bler = 2, Delay = 3, Prb = 4, Rsrp = 5 };
constexpr std::size_t kRewardRoleCount = 6;
const char* reward_role_name(RewardRole r);

struct CsvSchema {
    std::string timestamp_column;
    std::string target_column;
    std::string action_column;
    // Optional explicit feature order; empty means all non-timestamp columns
    // in CSV order.
    std::vector<std::string> feature_columns;
    // Optional role -> column map; required only for planning.
    std::map<std::string, std::string> reward_columns;
};

// Immutable after construction. Timestamps are aggregation-period indices.
struct KpiTrace {
    std::vector<std::int64_t> timestamps;
    Mat values; // T x F, physical units
    std::vector<std::string> feature_names;
    int action_index = -1;
    int target_index = -1;
    std::array<int, kRewardRoleCount> reward_indices{-1, -1, -1, -1, -1, -1};
    std::size_t dropped_rows = 0;

    std::size_t length() const { return timestamps.size(); }
    std::size_t feature_count() const { return values.cols(); }
    bool has_reward_indices() const;
    int reward_index(RewardRole r) const { return reward_indices[static_cast<int>(r)]; }
};

KpiTrace ingest_csv(const std::string& path, const CsvSchema& schema);
void write_trace_csv(const KpiTrace& trace, const std::string& path);

// Half-open row intervals, chronologically ordered train < val < test.
struct SplitPlan {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t val_begin = 0, val_end = 0;
    std::size_t test_begin = 0, test_end = 0;

    std::pair<std::size_t, std::size_t> range(int split) const;
};

enum class Split : int { Train = 0, Val = 1, Test = 2 };

SplitPlan make_split(const KpiTrace& trace, const std::array<double, 3>& fractions,
                     std::size_t window_len);

// Per-feature affine transform fit on the training split only.
class StandardScaler {
public:
    static constexpr double kEpsilonFloor = 1e-6;

    StandardScaler() = default;
    static StandardScaler fit(const KpiTrace& trace, const SplitPlan& plan, int output_dim);
    // Unit scaler (mean 0, std 1); handy for benchmarks and tests.
    static StandardScaler identity(std::size_t feature_count, int output_dim);

    std::size_t feature_count() const { return mean_.size(); }
    int output_dim() const { return static_cast<int>(target_mean_.size()); }
    const Vec& mean() const { return mean_; }
    const Vec& stdev() const { return std_; }
    const Vec& target_mean() const { return target_mean_; }
    const Vec& target_stdev() const { return target_std_; }
    double epsilon_floor() const { return epsilon_floor_; }

    Vec transform(const Vec& row) const;
    Vec inverse_transform(const Vec& row) const;
    Mat transform(const Mat& rows) const;
    double transform_feature(std::size_t j, double x) const;
    double inverse_feature(std::size_t j, double x) const;
    Vec transform_target(const Vec& y) const;
    Vec inverse_target(const Vec& y) const;

    std::string to_json_string() const;
    static StandardScaler from_json_string(const std::string& text);

    bool operator==(const StandardScaler& o) const {
        return mean_ == o.mean_ && std_ == o.std_ && target_mean_ == o.target_mean_ &&
               target_std_ == o.target_std_;
    }

private:
    Vec mean_, std_;
    Vec target_mean_, target_std_;
    double epsilon_floor_ = kEpsilonFloor;
};

// One-step-ahead supervised windows, standardized, stride 1 within a split.
struct WindowBatch {
    std::size_t window_len = 0;
    std::size_t output_dim = 0;
    int action_index = -1;
    std::vector<Mat> inputs;       // L x F each
    std::vector<Vec> actions;      // length L each; equals inputs[:, i_a]
    std::vector<Vec> targets_full; // length F each
    std::vector<Vec> targets;      // length O each
    std::vector<std::size_t> anchors; // absolute row index t; target row is t+1

    std::size_t size() const { return inputs.size(); }
    bool operator==(const WindowBatch& o) const {
        return inputs == o.inputs && actions == o.actions && targets_full == o.targets_full &&
               targets == o.targets && anchors == o.anchors;
    }
};

WindowBatch build_windows(const KpiTrace& trace, const SplitPlan& plan,
                          const StandardScaler& scaler, std::size_t window_len, Split split,
                          int output_dim);

// Admissible PRB interval: train-split 5th/95th percentiles.
struct ActionBounds {
    double lo = 0.0, hi = 0.0;
    double lo_std = 0.0, hi_std = 0.0;
};

ActionBounds compute_action_bounds(const KpiTrace& trace, const SplitPlan& plan,
                                   const StandardScaler& scaler);

// Linear interpolation between closest ranks; p in [0, 100].
double percentile_linear(Vec values, double p);

std::string bounds_to_json_string(const ActionBounds& b);
ActionBounds bounds_from_json_string(const std::string& text);

// Controlled linear-Gaussian simulator:
//   x_{t+1} = A x_t + B u_t + w_t,   obs_t = C x_t + v_t
// The action column carries u_t itself; remaining columns carry C x_t + v_t.
struct SyntheticConfig {
    std::size_t length = 1000;
    std::uint64_t seed = 0;
    Mat state_transition; // n x n, spectral radius < 1
    Mat action_gain;      // n x 1
    Mat observation;      // (F-1) x n
    Vec initial_state;    // length n
    double process_noise = 0.0;
    double observation_noise = 0.0;
    std::vector<std::string> feature_names; // length F, includes the action column
    int action_index = -1;
    int target_index = -1;
    std::map<std::string, std::string> reward_columns;

    std::string action_schedule = "sine"; // sine | walk | hold
    double action_min = 20.0, action_max = 80.0;
    double action_period = 200.0;
    double action_walk_step = 1.0;

    static SyntheticConfig preset(const std::string& name);
};

KpiTrace generate_synthetic_trace(const SyntheticConfig& config);

} // namespace kpiwm::data
