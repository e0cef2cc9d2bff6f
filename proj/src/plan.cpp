#include "kpiwm/plan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "kpiwm/errors.hpp"
#include "kpiwm/parallel.hpp"
#include "kpiwm/rng.hpp"

namespace kpiwm::plan {

void PlanConfig::validate() const {
    if (horizon < 1) throw ConfigError("plan: horizon must be >= 1");
    if (population < 1) throw ConfigError("plan: population must be >= 1");
    if (iterations < 1) throw ConfigError("plan: iterations must be >= 1");
    if (!(elite_fraction > 0.0 && elite_fraction <= 1.0))
        throw ConfigError("plan: elite_fraction must be in (0, 1]");
    if (smoothness < 0.0) throw ConfigError("plan: smoothness must be >= 0");
    if (!(sigma_init > 0.0)) throw ConfigError("plan: sigma_init must be positive");
    for (double w : reward_weights)
        if (w < 0.0) throw ConfigError("plan: reward weights must be >= 0");
}

double step_reward(const Vec& frame_std, double action_std, double prev_action_std,
                   const std::array<double, data::kRewardRoleCount>& weights, double smoothness,
                   const std::array<int, data::kRewardRoleCount>& reward_indices) {
    using data::RewardRole;
    const auto value = [&](RewardRole role) {
        return frame_std[static_cast<std::size_t>(reward_indices[static_cast<int>(role)])];
    };
    double r = 0.0;
    r += weights[static_cast<int>(RewardRole::Sinr)] * value(RewardRole::Sinr);
    r += weights[static_cast<int>(RewardRole::Se)] * value(RewardRole::Se);
    r -= weights[static_cast<int>(RewardRole::Bler)] * value(RewardRole::Bler);
    r -= weights[static_cast<int>(RewardRole::Delay)] * value(RewardRole::Delay);
    r -= weights[static_cast<int>(RewardRole::Prb)] * action_std;
    r += weights[static_cast<int>(RewardRole::Rsrp)] * value(RewardRole::Rsrp);
    r -= smoothness * std::abs(action_std - prev_action_std);
    return r;
}

RolloutResult rollout(const model::WorldModel& m, const Mat& window_std,
                      const Vec& action_hist_std, const Vec& candidate_std,
                      const std::array<int, data::kRewardRoleCount>& reward_indices,
                      const std::array<double, data::kRewardRoleCount>& weights,
                      double smoothness, int action_index, bool overwrite_action_column) {
    const std::size_t len = window_std.rows(), f = window_std.cols();
    const std::size_t horizon = candidate_std.size();
    RolloutResult out;
    out.step_rewards.resize(horizon);
    out.frames_std.reserve(horizon);

    Mat win = window_std;
    Vec act = action_hist_std;
    double prev = act.back();
    const auto& taps = m.cached_taps();
    for (std::size_t h = 0; h < horizon; ++h) {
        thread_local model::EncodeWs enc;
        const Vec summary = m.encode(win, act, taps, enc);
        thread_local model::MlpWs prior_ws, full_ws;
        const auto prior = m.prior(summary, prior_ws);
        Vec frame = m.decode_full(summary, prior.mu, full_ws);

        const double a = candidate_std[h];
        const double r = step_reward(frame, a, prev, weights, smoothness, reward_indices);
        out.step_rewards[h] = r;
        out.total += r;

        if (overwrite_action_column) frame[static_cast<std::size_t>(action_index)] = a;
        out.frames_std.push_back(frame);
        if (h + 1 < horizon) {
            Mat next(len, f);
            for (std::size_t r2 = 0; r2 + 1 < len; ++r2) next.set_row(r2, win.row(r2 + 1));
            next.set_row(len - 1, frame);
            win = std::move(next);
            for (std::size_t r2 = 0; r2 + 1 < len; ++r2) act[r2] = act[r2 + 1];
            act[len - 1] = a;
        }
        prev = a;
    }
    return out;
}

PlanResult cem_optimize(const std::function<double(const Vec& actions_std)>& score,
                        double lo_std, double hi_std, const Vec& init_mu, const PlanConfig& cfg) {
    cfg.validate();
    if (!(lo_std < hi_std)) throw BoundsError("cem: degenerate standardized bounds");
    const std::size_t horizon = init_mu.size();
    const std::size_t pop = cfg.population;
    const std::size_t k_elite = cfg.elites();

    CemState state;
    state.mu = init_mu;
    for (double& x : state.mu) x = num::clamp(x, lo_std, hi_std);
    state.sigma.assign(horizon, cfg.sigma_init);

    PlanResult result;
    result.elites = k_elite;

    std::vector<Vec> actions(pop, Vec(horizon));
    std::vector<double> rewards(pop);
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        for (std::size_t b = 0; b < pop; ++b) {
            Rng rng = Rng::stream(cfg.seed, {0xCE, iter, b});
            for (std::size_t h = 0; h < horizon; ++h)
                actions[b][h] =
                    num::clamp(state.mu[h] + state.sigma[h] * rng.normal(), lo_std, hi_std);
        }
        parallel_for(
            pop, [&](std::size_t b) { rewards[b] = score(actions[b]); }, cfg.threads);

        std::vector<std::size_t> order(pop);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return rewards[a] > rewards[b]; // ties keep sample-index order
        });

        IterationDiag diag;
        diag.best_reward = rewards[order[0]];
        {
            std::vector<double> sorted = rewards;
            std::sort(sorted.begin(), sorted.end());
            diag.population_median = sorted[pop / 2];
        }
        if (rewards[order[0]] > result.best_reward || iter == 0) {
            result.best_reward = rewards[order[0]];
            result.best_actions_std = actions[order[0]];
        }

        // Refit to the elites; sigma floors at 1e-6, mu stays feasible.
        Vec mu(horizon, 0.0), var(horizon, 0.0);
        double elite_sum = 0.0;
        for (std::size_t e = 0; e < k_elite; ++e) {
            elite_sum += rewards[order[e]];
            for (std::size_t h = 0; h < horizon; ++h) mu[h] += actions[order[e]][h];
        }
        for (std::size_t h = 0; h < horizon; ++h) mu[h] /= static_cast<double>(k_elite);
        for (std::size_t e = 0; e < k_elite; ++e)
            for (std::size_t h = 0; h < horizon; ++h) {
                const double d = actions[order[e]][h] - mu[h];
                var[h] += d * d;
            }
        for (std::size_t h = 0; h < horizon; ++h) {
            state.mu[h] = num::clamp(mu[h], lo_std, hi_std);
            state.sigma[h] = std::sqrt(var[h] / static_cast<double>(k_elite)) + 1e-6;
        }
        state.iteration = iter + 1;
        diag.elite_mean_reward = elite_sum / static_cast<double>(k_elite);
        diag.mu = state.mu;
        diag.sigma = state.sigma;
        result.iterations.push_back(std::move(diag));
    }
    result.final_mu = state.mu;
    result.final_sigma = state.sigma;
    result.next_action_std = state.mu[0];
    return result;
}

PlanContext make_context(const model::WorldModel& m, const data::StandardScaler& scaler,
                         const data::ActionBounds& bounds, const data::KpiTrace& trace) {
    if (!trace.has_reward_indices())
        throw ConfigError("planning requires a full reward-role map (sinr, se, bler, delay, prb, rsrp)");
    PlanContext ctx{m, scaler, bounds, trace.reward_indices, trace.action_index};
    return ctx;
}

PlanResult cem_plan(const PlanContext& ctx, const Mat& window_physical, const PlanConfig& cfg) {
    cfg.validate();
    if (!(ctx.bounds.lo < ctx.bounds.hi)) throw BoundsError("plan: degenerate action bounds");
    const Mat window = ctx.scaler.transform(window_physical);
    const Vec actions = window.col(static_cast<std::size_t>(ctx.action_index));

    const auto score = [&](const Vec& candidate) {
        return rollout(ctx.model, window, actions, candidate, ctx.reward_indices,
                       cfg.reward_weights, cfg.smoothness, ctx.action_index,
                       cfg.overwrite_action_column)
            .total;
    };
    const Vec init_mu(cfg.horizon, actions.back());
    PlanResult result =
        cem_optimize(score, ctx.bounds.lo_std, ctx.bounds.hi_std, init_mu, cfg);
    result.next_action = ctx.scaler.inverse_feature(
        static_cast<std::size_t>(ctx.action_index), result.next_action_std);
    return result;
}

const std::vector<std::string>& default_scenarios() {
    static const std::vector<std::string> names = {"hold", "step_up", "step_down", "ramp_high",
                                                   "cem"};
    return names;
}

namespace {

std::string scenario_display_name(const std::string& key) {
    if (key == "hold") return "Hold (last PRB)";
    if (key == "step_up") return "Step +20%";
    if (key == "step_down") return "Step -20%";
    if (key == "ramp_high") return "Ramp -> high";
    if (key == "cem") return "CEM (receding)";
    return key;
}

} // namespace

std::vector<ScenarioResult> run_scenarios(const PlanContext& ctx, const Mat& window_physical,
                                          const PlanConfig& cfg,
                                          const std::vector<std::string>& names) {
    cfg.validate();
    const Mat window = ctx.scaler.transform(window_physical);
    const Vec action_hist = window.col(static_cast<std::size_t>(ctx.action_index));
    const auto ia = static_cast<std::size_t>(ctx.action_index);
    const double last_physical = window_physical(window_physical.rows() - 1, ia);
    const std::size_t horizon = cfg.horizon;

    std::vector<ScenarioResult> results;
    for (const auto& key : names) {
        Vec path(horizon);
        if (key == "hold") {
            path.assign(horizon, last_physical);
        } else if (key == "step_up") {
            path.assign(horizon, num::clamp(last_physical * 1.2, ctx.bounds.lo, ctx.bounds.hi));
        } else if (key == "step_down") {
            path.assign(horizon, num::clamp(last_physical * 0.8, ctx.bounds.lo, ctx.bounds.hi));
        } else if (key == "ramp_high") {
            for (std::size_t h = 0; h < horizon; ++h) {
                const double frac = static_cast<double>(h + 1) / static_cast<double>(horizon);
                path[h] = num::clamp(last_physical + frac * (ctx.bounds.hi - last_physical),
                                     ctx.bounds.lo, ctx.bounds.hi);
            }
        } else if (key == "cem") {
            // Receding horizon: replan each step, apply the first action,
            // advance on the prior-mean decode.
            Mat win = window;
            Vec act = action_hist;
            for (std::size_t h = 0; h < horizon; ++h) {
                PlanConfig step_cfg = cfg;
                step_cfg.seed = Rng::mix(cfg.seed, 0xD0 + h);
                const auto score = [&](const Vec& candidate) {
                    return rollout(ctx.model, win, act, candidate, ctx.reward_indices,
                                   cfg.reward_weights, cfg.smoothness, ctx.action_index,
                                   cfg.overwrite_action_column)
                        .total;
                };
                const Vec init_mu(cfg.horizon, act.back());
                const auto plan =
                    cem_optimize(score, ctx.bounds.lo_std, ctx.bounds.hi_std, init_mu, step_cfg);
                const double a_std = plan.next_action_std;
                path[h] = ctx.scaler.inverse_feature(ia, a_std);

                const auto step = rollout(ctx.model, win, act, {a_std}, ctx.reward_indices,
                                          cfg.reward_weights, cfg.smoothness, ctx.action_index,
                                          cfg.overwrite_action_column);
                Mat next(win.rows(), win.cols());
                for (std::size_t r = 0; r + 1 < win.rows(); ++r) next.set_row(r, win.row(r + 1));
                next.set_row(win.rows() - 1, step.frames_std[0]);
                win = std::move(next);
                for (std::size_t r = 0; r + 1 < act.size(); ++r) act[r] = act[r + 1];
                act[act.size() - 1] = a_std;
            }
        } else {
            throw ArgumentError("unknown scenario \"" + key + "\"");
        }

        Vec path_std(horizon);
        for (std::size_t h = 0; h < horizon; ++h) {
            path[h] = num::clamp(path[h], ctx.bounds.lo, ctx.bounds.hi);
            path_std[h] = ctx.scaler.transform_feature(ia, path[h]);
        }
        const auto roll = rollout(ctx.model, window, action_hist, path_std, ctx.reward_indices,
                                  cfg.reward_weights, cfg.smoothness, ctx.action_index,
                                  cfg.overwrite_action_column);

        ScenarioResult res;
        res.name = scenario_display_name(key);
        res.actions_physical = path;
        res.step_rewards = roll.step_rewards;
        res.total_reward = roll.total;
        res.avg_kpis.assign(window.cols(), 0.0);
        for (const auto& frame : roll.frames_std) {
            Vec phys(frame.size());
            for (std::size_t j = 0; j < frame.size(); ++j)
                phys[j] = ctx.scaler.inverse_feature(j, frame[j]);
            for (std::size_t j = 0; j < phys.size(); ++j) res.avg_kpis[j] += phys[j];
            res.kpi_frames_physical.push_back(std::move(phys));
        }
        for (double& v : res.avg_kpis) v /= static_cast<double>(horizon);
        results.push_back(std::move(res));
    }
    return results;
}

std::string plan_result_to_json(const PlanResult& r) {
    nlohmann::json j;
    j["next_action"] = r.next_action;
    j["next_action_std"] = r.next_action_std;
    j["elites"] = r.elites;
    j["best_reward"] = r.best_reward;
    j["best_actions_std"] = r.best_actions_std;
    j["final_mu"] = r.final_mu;
    j["final_sigma"] = r.final_sigma;
    nlohmann::json iters = nlohmann::json::array();
    for (const auto& it : r.iterations) {
        nlohmann::json d;
        d["best_reward"] = it.best_reward;
        d["elite_mean_reward"] = it.elite_mean_reward;
        d["population_median"] = it.population_median;
        d["mu"] = it.mu;
        d["sigma"] = it.sigma;
        iters.push_back(std::move(d));
    }
    j["iterations"] = std::move(iters);
    return j.dump(2);
}

} // namespace kpiwm::plan
