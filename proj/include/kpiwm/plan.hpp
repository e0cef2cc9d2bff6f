#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kpiwm/data.hpp"
#include "kpiwm/model.hpp"

namespace kpiwm::plan {

struct PlanConfig {
    std::size_t horizon = 8;      // H
    std::size_t population = 256; // P
    double elite_fraction = 0.1;  // rho
    std::size_t iterations = 4;   // I
    double smoothness = 0.05;     // lambda_sm
    // Ordered as RewardRole: sinr, se, bler, delay, prb, rsrp.
    std::array<double, data::kRewardRoleCount> reward_weights = {1, 1, 1, 1, 1, 1};
    double sigma_init = 0.5;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    // Alternate window advance that overwrites the decoded PRB column with
    // the applied action (ablation flag; off matches the base procedure).
    bool overwrite_action_column = false;

    std::size_t elites() const {
        const auto k = static_cast<std::size_t>(elite_fraction * static_cast<double>(population));
        return std::max<std::size_t>(1, k);
    }
    void validate() const;
};

// CEM search state; sigma floors at 1e-6 after every refit.
struct CemState {
    Vec mu, sigma;
    std::size_t iteration = 0;
};

struct IterationDiag {
    double best_reward = 0.0;
    double elite_mean_reward = 0.0;
    double population_median = 0.0;
    Vec mu, sigma;
};

struct PlanResult {
    double next_action = 0.0;     // physical units, inside [lo, hi]
    double next_action_std = 0.0;
    std::size_t elites = 0;
    Vec final_mu, final_sigma;    // standardized
    Vec best_actions_std;
    double best_reward = 0.0;
    std::vector<IterationDiag> iterations;
};

std::string plan_result_to_json(const PlanResult& r);

struct RolloutResult {
    double total = 0.0;
    Vec step_rewards;
    std::vector<Vec> frames_std; // decoded full frames, one per step
};

// Signed six-term step score in standardized space plus the smoothness
// penalty; the PRB slot carries the applied action, not the decoded column.
double step_reward(const Vec& frame_std, double action_std, double prev_action_std,
                   const std::array<double, data::kRewardRoleCount>& weights, double smoothness,
                   const std::array<int, data::kRewardRoleCount>& reward_indices);

RolloutResult rollout(const model::WorldModel& m, const Mat& window_std,
                      const Vec& action_hist_std, const Vec& candidate_std,
                      const std::array<int, data::kRewardRoleCount>& reward_indices,
                      const std::array<double, data::kRewardRoleCount>& weights,
                      double smoothness, int action_index, bool overwrite_action_column);

// Generic CEM loop over clamped Gaussian action paths; scoring is pure and
// may be evaluated concurrently (per-candidate seeds fix the samples).
PlanResult cem_optimize(const std::function<double(const Vec& actions_std)>& score,
                        double lo_std, double hi_std, const Vec& init_mu, const PlanConfig& cfg);

struct PlanContext {
    const model::WorldModel& model;
    const data::StandardScaler& scaler;
    data::ActionBounds bounds;
    std::array<int, data::kRewardRoleCount> reward_indices;
    int action_index = -1;
};

PlanContext make_context(const model::WorldModel& m, const data::StandardScaler& scaler,
                         const data::ActionBounds& bounds, const data::KpiTrace& trace);

PlanResult cem_plan(const PlanContext& ctx, const Mat& window_physical, const PlanConfig& cfg);

struct ScenarioResult {
    std::string name;
    Vec actions_physical;              // length H
    Vec step_rewards;                  // length H
    double total_reward = 0.0;
    std::vector<Vec> kpi_frames_physical; // decoded frames per step
    Vec avg_kpis;                      // per-feature mean over the horizon
};

// Named interventions evaluated on the same window and reward: hold,
// step_up, step_down, ramp_high, cem.
std::vector<ScenarioResult> run_scenarios(const PlanContext& ctx, const Mat& window_physical,
                                          const PlanConfig& cfg,
                                          const std::vector<std::string>& names);

const std::vector<std::string>& default_scenarios();

} // namespace kpiwm::plan
