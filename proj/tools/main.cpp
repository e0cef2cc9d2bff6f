#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "kpiwm/bench.hpp"
#include "kpiwm/config.hpp"
#include "kpiwm/data.hpp"
#include "kpiwm/errors.hpp"
#include "kpiwm/infer.hpp"
#include "kpiwm/model.hpp"
#include "kpiwm/plan.hpp"
#include "kpiwm/train.hpp"

using namespace kpiwm;
using nlohmann::json;

namespace {

std::string apply_output_root(const std::string& dir) {
    const char* root = std::getenv("KPIWM_OUT_ROOT");
    if (root == nullptr || dir.empty() || dir.front() == '/') return dir;
    return std::string(root) + "/" + dir;
}

struct CommonFlags {
    std::string config_path;
    std::string run_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::optional<unsigned> threads;
};

cli::RunConfig load_config(const CommonFlags& flags) {
    if (flags.config_path.empty()) throw ConfigError("missing --config");
    cli::RunConfig cfg = cli::RunConfig::load(flags.config_path);
    if (flags.seed) {
        cfg.seed = *flags.seed;
        cfg.finalize_seeds();
    }
    if (flags.output_dir) cfg.output_dir = *flags.output_dir;
    if (flags.threads) cfg.threads = *flags.threads;
    cfg.output_dir = apply_output_root(cfg.output_dir);
    return cfg;
}

std::string resolve_run_dir(const CommonFlags& flags) {
    if (!flags.run_dir.empty()) return apply_output_root(flags.run_dir);
    if (!flags.config_path.empty()) return load_config(flags).output_dir;
    throw ConfigError("missing --run (or --config to derive the run directory)");
}

json data_input_hashes(const cli::RunConfig& cfg) {
    json h = json::object();
    if (!cfg.data.synthetic && !cfg.data.csv_path.empty()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(
                          cli::fnv1a64(cli::read_text_file(cfg.data.csv_path))));
        h["csv_fnv1a64"] = buf;
    }
    return h;
}

struct RunContext {
    cli::RunConfig cfg;
    data::KpiTrace trace;
    data::SplitPlan split;
    data::StandardScaler scaler;
    data::ActionBounds bounds;
    model::WorldModel model;
};

RunContext load_run(const std::string& run_dir) {
    const auto paths = cli::run_paths(run_dir);
    cli::RunConfig cfg = cli::RunConfig::from_json_text(cli::read_text_file(paths.resolved_config));

    std::string scaler_json, bounds_json;
    model::WorldModel m = model::WorldModel::from_checkpoint_json(
        cli::read_text_file(paths.checkpoint), &scaler_json, &bounds_json);
    if (scaler_json.empty() || bounds_json.empty())
        throw VersionError("checkpoint lacks embedded scaler/bounds");

    // The sidecar must agree with the checkpoint's copy.
    const json sidecar = json::parse(cli::read_text_file(paths.scaler_sidecar));
    if (sidecar.value("format_version", 0) != 1)
        throw VersionError("unsupported scaler sidecar version");
    if (sidecar.at("scaler").dump() != json::parse(scaler_json).dump() ||
        sidecar.at("bounds").dump() != json::parse(bounds_json).dump())
        throw VersionError("scaler sidecar does not match the checkpoint (stale artifacts)");

    data::KpiTrace trace = cli::load_trace(cfg.data);
    data::SplitPlan split = data::make_split(trace, cfg.data.fractions, cfg.data.window_len);
    data::StandardScaler scaler = data::StandardScaler::from_json_string(scaler_json);
    data::ActionBounds bounds = data::bounds_from_json_string(bounds_json);
    return RunContext{std::move(cfg), std::move(trace), split, std::move(scaler), bounds,
                      std::move(m)};
}

Mat window_at(const data::KpiTrace& trace, std::size_t anchor, std::size_t len) {
    if (anchor + 1 < len || anchor >= trace.length())
        throw ArgumentError("anchor " + std::to_string(anchor) + " cannot host a window of L=" +
                            std::to_string(len));
    Mat w(len, trace.feature_count());
    for (std::size_t r = 0; r < len; ++r) w.set_row(r, trace.values.row(anchor + 1 - len + r));
    return w;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int cmd_ingest(const CommonFlags& flags) {
    cli::RunConfig cfg = load_config(flags);
    const data::KpiTrace trace = cli::load_trace(cfg.data);
    json report;
    report["rows"] = trace.length();
    report["dropped_rows"] = trace.dropped_rows;
    report["features"] = trace.feature_names;
    report["action_index"] = trace.action_index;
    report["target_index"] = trace.target_index;
    report["reward_roles_resolved"] = trace.has_reward_indices();
    report["t_first"] = trace.timestamps.front();
    report["t_last"] = trace.timestamps.back();
    cli::ensure_dir(cfg.output_dir);
    cli::write_text_file(cfg.output_dir + "/ingest_report.json", report.dump(2));
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_train(const CommonFlags& flags) {
    cli::RunConfig cfg = load_config(flags);
    cli::LoadedData loaded = cli::prepare_data(cfg);
    const auto paths = cli::run_paths(cfg.output_dir);
    cli::ensure_dir(cfg.output_dir);

    json resolved = json::parse(cfg.resolved_json_text());
    resolved["input_hashes"] = data_input_hashes(cfg);
    cli::write_text_file(paths.resolved_config, resolved.dump(2));

    model::WorldModel m(cfg.model);
    const auto result = train::train(m, loaded.trace, loaded.split, loaded.scaler, cfg.train);

    std::string log_text;
    for (const auto& rec : result.log) log_text += rec.to_json_line() + "\n";
    cli::write_text_file(paths.training_log, log_text);

    const std::string scaler_json = loaded.scaler.to_json_string();
    const std::string bounds_json = data::bounds_to_json_string(loaded.bounds);
    json sidecar;
    sidecar["format_version"] = 1;
    sidecar["scaler"] = json::parse(scaler_json);
    sidecar["bounds"] = json::parse(bounds_json);
    cli::write_text_file(paths.scaler_sidecar, sidecar.dump(2));
    cli::write_text_file(paths.checkpoint, m.checkpoint_json(scaler_json, bounds_json));

    json summary;
    summary["best_epoch"] = result.best_epoch;
    summary["best_val"] = result.best_val;
    summary["epochs_run"] = result.epochs_run;
    summary["aborted"] = result.aborted;
    summary["abort_reason"] = result.abort_reason;
    summary["parameter_count"] = m.parameter_count();
    cli::write_text_file(paths.train_summary, summary.dump(2));
    std::cout << summary.dump(2) << "\n";
    return result.aborted ? 1 : 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& split_name,
                 std::optional<std::size_t> samples) {
    RunContext ctx = load_run(resolve_run_dir(flags));
    const auto paths = cli::run_paths(resolve_run_dir(flags));
    infer::EvalOptions opts;
    opts.samples = samples.value_or(ctx.cfg.eval_samples);
    opts.seed = Rng::mix(ctx.cfg.seed, 0x44);
    opts.interval_z = ctx.cfg.interval_z;
    opts.threads = flags.threads.value_or(ctx.cfg.threads);
    const data::Split split =
        split_name == "val" ? data::Split::Val : data::Split::Test;
    const auto result =
        infer::evaluate(ctx.model, ctx.scaler, ctx.trace, ctx.split, split, opts);

    cli::write_text_file(paths.metrics, result.metrics.to_json_string());
    std::string csv = "timestamp,feature,truth,prediction,lower,upper\n";
    const bool univariate = ctx.model.config().output_dim == 1;
    for (const auto& row : result.rows) {
        for (std::size_t i = 0; i < row.truth.size(); ++i) {
            const std::string feature =
                univariate ? ctx.trace.feature_names[ctx.trace.target_index]
                           : ctx.trace.feature_names[i];
            csv += std::to_string(row.timestamp) + "," + feature + "," + fmt(row.truth[i]) +
                   "," + fmt(row.prediction[i]) + "," + fmt(row.lower[i]) + "," +
                   fmt(row.upper[i]) + "\n";
        }
    }
    cli::write_text_file(paths.predictions_csv, csv);
    std::cout << result.metrics.to_json_string() << "\n";
    return 0;
}

int cmd_predict(const CommonFlags& flags, std::optional<std::size_t> anchor_opt,
                std::optional<std::size_t> samples) {
    RunContext ctx = load_run(resolve_run_dir(flags));
    const auto paths = cli::run_paths(resolve_run_dir(flags));
    const std::size_t len = ctx.model.config().window_len;
    const std::size_t anchor = anchor_opt.value_or(ctx.trace.length() - 1);
    const Mat window = window_at(ctx.trace, anchor, len);
    const std::size_t s = samples.value_or(ctx.cfg.eval_samples);
    const auto pred = infer::predict(ctx.model, ctx.scaler, ctx.trace.action_index, window, s,
                                     Rng::mix(ctx.cfg.seed, Rng::mix(0x45, anchor)));

    json out;
    out["anchor"] = anchor;
    out["timestamp"] = ctx.trace.timestamps[anchor];
    out["samples"] = pred.samples_used;
    out["mean"] = pred.mean;
    out["std_mean"] = pred.std_mean;
    out["aleatoric"] = pred.aleatoric;
    out["epistemic"] = pred.epistemic;
    out["variance"] = pred.variance;
    json lower = json::array(), upper = json::array();
    for (std::size_t i = 0; i < pred.mean.size(); ++i) {
        const double half = ctx.cfg.interval_z * std::sqrt(pred.variance[i]);
        lower.push_back(pred.mean[i] - half);
        upper.push_back(pred.mean[i] + half);
    }
    out["interval_z"] = ctx.cfg.interval_z;
    out["lower"] = lower;
    out["upper"] = upper;
    cli::write_text_file(paths.prediction, out.dump(2));
    std::cout << out.dump(2) << "\n";
    return 0;
}

plan::PlanConfig plan_config_with_flags(const RunContext& ctx, const CommonFlags& flags,
                                        std::optional<std::size_t> horizon,
                                        std::optional<std::size_t> population,
                                        std::optional<std::size_t> iterations) {
    plan::PlanConfig pc = ctx.cfg.plan;
    if (horizon) pc.horizon = *horizon;
    if (population) pc.population = *population;
    if (iterations) pc.iterations = *iterations;
    pc.threads = flags.threads.value_or(ctx.cfg.threads);
    return pc;
}

int cmd_plan(const CommonFlags& flags, std::optional<std::size_t> anchor_opt,
             std::optional<std::size_t> horizon, std::optional<std::size_t> population,
             std::optional<std::size_t> iterations, std::optional<double> lo_override,
             std::optional<double> hi_override) {
    RunContext ctx = load_run(resolve_run_dir(flags));
    const auto paths = cli::run_paths(resolve_run_dir(flags));
    if (lo_override) {
        ctx.bounds.lo = *lo_override;
        ctx.bounds.lo_std = ctx.scaler.transform_feature(
            static_cast<std::size_t>(ctx.trace.action_index), *lo_override);
    }
    if (hi_override) {
        ctx.bounds.hi = *hi_override;
        ctx.bounds.hi_std = ctx.scaler.transform_feature(
            static_cast<std::size_t>(ctx.trace.action_index), *hi_override);
    }
    const auto pc = plan_config_with_flags(ctx, flags, horizon, population, iterations);
    const std::size_t len = ctx.model.config().window_len;
    const std::size_t anchor = anchor_opt.value_or(ctx.trace.length() - 1);
    const Mat window = window_at(ctx.trace, anchor, len);

    const auto pctx = plan::make_context(ctx.model, ctx.scaler, ctx.bounds, ctx.trace);
    const auto result = plan::cem_plan(pctx, window, pc);

    json out = json::parse(plan::plan_result_to_json(result));
    out["anchor"] = anchor;
    out["bounds"] = {{"lo", ctx.bounds.lo},
                     {"hi", ctx.bounds.hi},
                     {"lo_std", ctx.bounds.lo_std},
                     {"hi_std", ctx.bounds.hi_std}};
    cli::write_text_file(paths.plan_json, out.dump(2));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_whatif(const CommonFlags& flags, std::optional<std::size_t> anchor_opt,
               std::vector<std::string> scenarios) {
    RunContext ctx = load_run(resolve_run_dir(flags));
    const auto paths = cli::run_paths(resolve_run_dir(flags));
    if (scenarios.empty()) scenarios = plan::default_scenarios();
    const std::size_t len = ctx.model.config().window_len;
    const std::size_t anchor = anchor_opt.value_or(ctx.trace.length() - 1);
    const Mat window = window_at(ctx.trace, anchor, len);

    const auto pctx = plan::make_context(ctx.model, ctx.scaler, ctx.bounds, ctx.trace);
    plan::PlanConfig pc = ctx.cfg.plan;
    pc.threads = flags.threads.value_or(ctx.cfg.threads);
    const auto results = plan::run_scenarios(pctx, window, pc, scenarios);

    std::string steps = "scenario,step,action,reward";
    for (const auto& name : ctx.trace.feature_names) steps += "," + name;
    steps += "\n";
    for (const auto& res : results)
        for (std::size_t h = 0; h < res.step_rewards.size(); ++h) {
            steps += res.name + "," + std::to_string(h + 1) + "," +
                     fmt(res.actions_physical[h]) + "," + fmt(res.step_rewards[h]);
            for (double v : res.kpi_frames_physical[h]) steps += "," + fmt(v);
            steps += "\n";
        }
    cli::write_text_file(paths.whatif_steps, steps);

    const int i_rsrp = ctx.trace.reward_index(data::RewardRole::Rsrp);
    const int i_sinr = ctx.trace.reward_index(data::RewardRole::Sinr);
    const int i_bler = ctx.trace.reward_index(data::RewardRole::Bler);
    std::string summary = "scenario,reward,avg_rsrp,avg_sinr,avg_bler\n";
    for (const auto& res : results)
        summary += res.name + "," + fmt(res.total_reward) + "," + fmt(res.avg_kpis[i_rsrp]) +
                   "," + fmt(res.avg_kpis[i_sinr]) + "," + fmt(res.avg_kpis[i_bler]) + "\n";
    cli::write_text_file(paths.whatif_summary, summary);
    std::cout << summary;
    return 0;
}

int cmd_bench(const CommonFlags& flags, std::size_t latency_windows, std::size_t sweep_repeats,
              std::vector<std::size_t> sweep_lens, double ref_params, double ref_latency,
              const std::string& dump_taps) {
    RunContext ctx = load_run(resolve_run_dir(flags));
    const auto paths = cli::run_paths(resolve_run_dir(flags));

    // Steady-state latency over test-split windows.
    const std::size_t len = ctx.model.config().window_len;
    std::vector<Mat> windows;
    for (std::size_t t = ctx.split.test_begin + len - 1;
         t < ctx.split.test_end && windows.size() < latency_windows; ++t)
        windows.push_back(window_at(ctx.trace, t, len));
    const auto latency =
        bench::measure_latency(ctx.model, ctx.scaler, ctx.trace.action_index, windows,
                               ctx.cfg.eval_samples, Rng::mix(ctx.cfg.seed, 0x46));

    // Width-fixed scaling sweep on a lean encoder-dominated configuration.
    model::ModelConfig sweep_cfg;
    sweep_cfg.feature_count = 2;
    sweep_cfg.embed_dim = 64;
    sweep_cfg.layer_count = 3;
    sweep_cfg.state_size = 4;
    sweep_cfg.mixture_count = 1;
    sweep_cfg.glu_ratio = 0.02;
    sweep_cfg.dropout = 0.0;
    sweep_cfg.latent_dim = 2;
    sweep_cfg.output_dim = 1;
    sweep_cfg.init_seed = 7;
    if (sweep_lens.empty()) sweep_lens = {16, 32, 64, 128};
    sweep_cfg.window_len = sweep_lens.front();
    const auto sweep = bench::window_scaling_sweep(sweep_cfg, sweep_lens, sweep_repeats,
                                                   Rng::mix(ctx.cfg.seed, 0x47));

    json out;
    out["parameter_count"] = ctx.model.parameter_count();
    out["latency_mean_s"] = latency.mean_s;
    out["latency_median_s"] = latency.median_s;
    out["latency_windows"] = latency.calls;
    out["samples"] = ctx.cfg.eval_samples;
    json sw;
    json pts = json::array();
    for (const auto& p : sweep.points)
        pts.push_back({{"window_len", p.window_len}, {"latency_s", p.latency_s}});
    sw["points"] = pts;
    sw["r2_linear"] = sweep.r2_linear;
    sw["r2_quadratic"] = sweep.r2_quadratic;
    sw["margin"] = sweep.margin;
    sw["partial_r2"] = sweep.partial_r2;
    sw["effective_exponent"] = sweep.effective_exponent;
    out["scaling"] = sw;
    if (ref_params > 0) {
        out["ref_parameter_count"] = ref_params;
        out["parameter_count_delta_pct"] =
            100.0 * (static_cast<double>(ctx.model.parameter_count()) - ref_params) / ref_params;
    }
    if (ref_latency > 0) {
        out["ref_latency_s"] = ref_latency;
        out["latency_ratio"] = latency.mean_s / ref_latency;
    }
    if (!dump_taps.empty()) bench::dump_taps_csv(ctx.model, dump_taps);
    cli::write_text_file(paths.bench_json, out.dump(2));
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KPI world model: train, predict, evaluate, plan, and what-if over KPI traces"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::optional<std::size_t> anchor, horizon, population, iterations, samples;
    std::optional<double> lo_override, hi_override;
    std::string split_name = "test";
    std::vector<std::string> scenarios;
    std::size_t latency_windows = 50, sweep_repeats = 25;
    std::vector<std::size_t> sweep_lens;
    double ref_params = 0.0, ref_latency = 0.0;
    std::string dump_taps;

    const auto add_common = [&](CLI::App* sub, bool needs_run) {
        sub->add_option("-c,--config", flags.config_path, "run config (.toml or .json)");
        if (needs_run) sub->add_option("--run", flags.run_dir, "run directory with artifacts");
        sub->add_option("--seed", flags.seed, "override the master seed");
        sub->add_option("--output-dir", flags.output_dir, "override the output directory");
        sub->add_option("--threads", flags.threads, "worker threads (0 = hardware)");
    };

    auto* ingest = app.add_subcommand("ingest", "validate and summarize a KPI trace");
    add_common(ingest, false);
    auto* train_cmd = app.add_subcommand("train", "train a model and write run artifacts");
    add_common(train_cmd, false);
    auto* evaluate = app.add_subcommand("evaluate", "score a trained model on a split");
    add_common(evaluate, true);
    evaluate->add_option("--split", split_name, "val or test")
        ->check(CLI::IsMember({"val", "test"}));
    evaluate->add_option("--samples", samples, "prior samples per prediction");
    auto* predict = app.add_subcommand("predict", "one-step prediction with uncertainty");
    add_common(predict, true);
    predict->add_option("--anchor", anchor, "window anchor row (default: last row)");
    predict->add_option("--samples", samples, "prior samples per prediction");
    auto* plan_cmd = app.add_subcommand("plan", "choose the next PRB action");
    add_common(plan_cmd, true);
    plan_cmd->add_option("--anchor", anchor, "window anchor row (default: last row)");
    plan_cmd->add_option("--horizon", horizon, "planning horizon");
    plan_cmd->add_option("--population", population, "candidate population");
    plan_cmd->add_option("--iterations", iterations, "refit iterations");
    plan_cmd->add_option("--bounds-lo", lo_override, "override lower PRB bound");
    plan_cmd->add_option("--bounds-hi", hi_override, "override upper PRB bound");
    auto* whatif = app.add_subcommand("whatif", "score named PRB scenarios");
    add_common(whatif, true);
    whatif->add_option("--anchor", anchor, "window anchor row (default: last row)");
    whatif->add_option("--scenarios", scenarios,
                       "subset of: hold step_up step_down ramp_high cem");
    auto* bench_cmd = app.add_subcommand("bench", "latency, parameter count, and scaling trend");
    add_common(bench_cmd, true);
    bench_cmd->add_option("--latency-windows", latency_windows, "windows to time");
    bench_cmd->add_option("--sweep-repeats", sweep_repeats, "repeats per sweep point");
    bench_cmd->add_option("--sweep", sweep_lens, "window lengths for the scaling sweep");
    bench_cmd->add_option("--ref-params", ref_params, "reference parameter count to compare");
    bench_cmd->add_option("--ref-latency", ref_latency, "reference per-window latency (s)");
    bench_cmd->add_option("--dump-taps", dump_taps, "write kernel taps to this CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ingest->parsed()) return cmd_ingest(flags);
        if (train_cmd->parsed()) return cmd_train(flags);
        if (evaluate->parsed()) return cmd_evaluate(flags, split_name, samples);
        if (predict->parsed()) return cmd_predict(flags, anchor, samples);
        if (plan_cmd->parsed())
            return cmd_plan(flags, anchor, horizon, population, iterations, lo_override,
                            hi_override);
        if (whatif->parsed()) return cmd_whatif(flags, anchor, scenarios);
        if (bench_cmd->parsed())
            return cmd_bench(flags, latency_windows, sweep_repeats, sweep_lens, ref_params,
                             ref_latency, dump_taps);
    } catch (const VersionError& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const ArtifactError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const SchemaError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 1;
}
