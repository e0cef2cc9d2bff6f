#include "kpiwm/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "kpiwm/errors.hpp"
#include "kpiwm/parallel.hpp"

namespace kpiwm::infer {

Prediction predict(const model::WorldModel& m, const data::StandardScaler& scaler,
                   int action_index, const Mat& window_physical, std::size_t samples,
                   std::uint64_t seed) {
    if (samples < 1) throw ArgumentError("predict: samples must be >= 1");
    const auto& cfg = m.config();
    if (window_physical.rows() != cfg.window_len || window_physical.cols() != cfg.feature_count)
        throw ShapeError("predict: window must be L x F");

    const Mat window = scaler.transform(window_physical);
    const Vec actions = window.col(static_cast<std::size_t>(action_index));
    const Vec last_row = window.row(window.rows() - 1);

    thread_local model::EncodeWs enc;
    const Vec summary = m.encode(window, actions, m.cached_taps(), enc);
    thread_local model::MlpWs prior_ws;
    const auto prior = m.prior(summary, prior_ws);

    const std::size_t o = cfg.output_dim;
    Prediction out;
    out.samples_used = samples;
    out.std_mean.assign(o, 0.0);
    out.aleatoric.assign(o, 0.0);
    out.epistemic.assign(o, 0.0);

    std::vector<Vec> means(samples);
    for (std::size_t s = 0; s < samples; ++s) {
        Rng noise_rng = Rng::stream(seed, {0x90, s});
        const Vec z = model::WorldModel::sample(prior, noise_rng.normal_vec(cfg.latent_dim));
        thread_local model::MlpWs dec_ws, ar_ws;
        const auto pred = m.decode_target(summary, z, last_row, dec_ws, ar_ws);
        means[s] = pred.mean;
        for (std::size_t i = 0; i < o; ++i) {
            out.std_mean[i] += pred.mean[i];
            if (!pred.logvar.empty()) out.aleatoric[i] += std::exp(pred.logvar[i]);
        }
    }
    const auto sn = static_cast<double>(samples);
    for (std::size_t i = 0; i < o; ++i) {
        out.std_mean[i] /= sn;
        out.aleatoric[i] /= sn;
    }
    if (samples > 1) {
        for (std::size_t s = 0; s < samples; ++s)
            for (std::size_t i = 0; i < o; ++i) {
                const double d = means[s][i] - out.std_mean[i];
                out.epistemic[i] += d * d;
            }
        for (std::size_t i = 0; i < o; ++i) out.epistemic[i] /= (sn - 1.0);
    }

    out.mean = scaler.inverse_target(out.std_mean);
    out.variance.resize(o);
    for (std::size_t i = 0; i < o; ++i) {
        const double sy = scaler.target_stdev()[i];
        out.variance[i] = (out.aleatoric[i] + out.epistemic[i]) * sy * sy;
    }
    return out;
}

namespace {

void pooled_errors(const std::vector<Vec>& truth, const std::vector<Vec>& pred, double& sse,
                   double& sae, std::size_t& n) {
    sse = 0.0;
    sae = 0.0;
    n = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        for (std::size_t j = 0; j < truth[i].size(); ++j) {
            const double d = truth[i][j] - pred[i][j];
            sse += d * d;
            sae += std::abs(d);
            ++n;
        }
}

} // namespace

double mse_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred) {
    double sse, sae;
    std::size_t n;
    pooled_errors(truth, pred, sse, sae, n);
    return n == 0 ? 0.0 : sse / static_cast<double>(n);
}

double rmse_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred) {
    return std::sqrt(mse_of(truth, pred));
}

double mae_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred) {
    double sse, sae;
    std::size_t n;
    pooled_errors(truth, pred, sse, sae, n);
    return n == 0 ? 0.0 : sae / static_cast<double>(n);
}

double r2_of(const std::vector<Vec>& truth, const std::vector<Vec>& pred) {
    double mean = 0.0;
    std::size_t n = 0;
    for (const auto& row : truth)
        for (double v : row) {
            mean += v;
            ++n;
        }
    if (n == 0) return 0.0;
    mean /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        for (std::size_t j = 0; j < truth[i].size(); ++j) {
            const double r = truth[i][j] - pred[i][j];
            ss_res += r * r;
            const double c = truth[i][j] - mean;
            ss_tot += c * c;
        }
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

SkillScores skill_scores(const std::vector<Vec>& model_residuals,
                         const std::vector<Vec>& persistence_residuals) {
    double mr = 0.0, ma = 0.0, pr = 0.0, pa = 0.0;
    std::size_t n = 0, np = 0;
    for (const auto& row : model_residuals)
        for (double v : row) {
            mr += v * v;
            ma += std::abs(v);
            ++n;
        }
    for (const auto& row : persistence_residuals)
        for (double v : row) {
            pr += v * v;
            pa += std::abs(v);
            ++np;
        }
    SkillScores s;
    if (n == 0 || np == 0) return s;
    const double rmse_m = std::sqrt(mr / static_cast<double>(n));
    const double mae_m = ma / static_cast<double>(n);
    const double rmse_p = std::sqrt(pr / static_cast<double>(np));
    const double mae_p = pa / static_cast<double>(np);
    if (rmse_p == 0.0 || mae_p == 0.0) return s; // undefined baseline
    s.skill_r = 1.0 - rmse_m / rmse_p;
    s.skill_m = 1.0 - mae_m / mae_p;
    s.defined = true;
    return s;
}

std::string MetricReport::to_json_string() const {
    nlohmann::json j;
    j["rmse"] = rmse;
    j["mae"] = mae;
    j["mse"] = mse;
    j["r2"] = r2;
    if (skill_defined) {
        j["skill_r"] = skill_r;
        j["skill_m"] = skill_m;
    } else {
        j["skill_r"] = nullptr;
        j["skill_m"] = nullptr;
    }
    j["persistence_rmse"] = persistence_rmse;
    j["persistence_mae"] = persistence_mae;
    j["n_samples"] = n_samples;
    j["latency_mean_s"] = latency_mean_s;
    j["latency_median_s"] = latency_median_s;
    if (!rmse_per_feature.empty()) {
        j["rmse_per_feature"] = rmse_per_feature;
        j["mae_per_feature"] = mae_per_feature;
        j["r2_per_feature"] = r2_per_feature;
    }
    return j.dump(2);
}

EvalResult evaluate(const model::WorldModel& m, const data::StandardScaler& scaler,
                    const data::KpiTrace& trace, const data::SplitPlan& plan, data::Split split,
                    const EvalOptions& options) {
    if (options.samples < 1) throw ArgumentError("evaluate: samples must be >= 1");
    const auto& cfg = m.config();
    const std::size_t len = cfg.window_len;
    const auto [begin, end] = plan.range(static_cast<int>(split));
    if (end - begin < len + 1)
        throw ArgumentError("evaluate: split has no complete window/target pair");
    m.cached_taps(); // build once, outside the timed region

    const std::size_t o = cfg.output_dim;
    const auto istar = static_cast<std::size_t>(trace.target_index);
    std::vector<std::size_t> anchors;
    for (std::size_t t = begin + len - 1; t + 1 < end; ++t) anchors.push_back(t);

    std::vector<Prediction> preds(anchors.size());
    std::vector<double> latency(anchors.size());
    parallel_for(
        anchors.size(),
        [&](std::size_t w) {
            const std::size_t t = anchors[w];
            Mat window(len, cfg.feature_count);
            for (std::size_t r = 0; r < len; ++r)
                window.set_row(r, trace.values.row(t + 1 - len + r));
            const auto t0 = std::chrono::steady_clock::now();
            preds[w] = predict(m, scaler, trace.action_index, window, options.samples,
                               Rng::mix(options.seed, w));
            latency[w] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        },
        options.threads);

    EvalResult out;
    out.rows.resize(anchors.size());
    std::vector<Vec> truth(anchors.size()), pred(anchors.size());
    std::vector<Vec> model_resid(anchors.size()), pers_resid(anchors.size());
    for (std::size_t w = 0; w < anchors.size(); ++w) {
        const std::size_t t = anchors[w];
        Vec y(o), y_prev(o);
        if (o == 1) {
            y[0] = trace.values(t + 1, istar);
            y_prev[0] = trace.values(t, istar);
        } else {
            y = trace.values.row(t + 1);
            y_prev = trace.values.row(t);
        }
        truth[w] = y;
        pred[w] = preds[w].mean;
        model_resid[w].resize(o);
        pers_resid[w].resize(o);
        EvalRow row;
        row.timestamp = trace.timestamps[t + 1];
        row.truth = y;
        row.prediction = preds[w].mean;
        row.lower.resize(o);
        row.upper.resize(o);
        for (std::size_t i = 0; i < o; ++i) {
            model_resid[w][i] = y[i] - preds[w].mean[i];
            pers_resid[w][i] = y[i] - y_prev[i];
            const double half = options.interval_z * std::sqrt(preds[w].variance[i]);
            row.lower[i] = preds[w].mean[i] - half;
            row.upper[i] = preds[w].mean[i] + half;
        }
        out.rows[w] = std::move(row);
    }

    MetricReport& rep = out.metrics;
    rep.rmse = rmse_of(truth, pred);
    rep.mae = mae_of(truth, pred);
    rep.mse = mse_of(truth, pred);
    rep.r2 = r2_of(truth, pred);
    rep.n_samples = anchors.size();
    const auto skills = skill_scores(model_resid, pers_resid);
    rep.skill_defined = skills.defined;
    rep.skill_r = skills.skill_r;
    rep.skill_m = skills.skill_m;
    {
        double pr = 0.0, pa = 0.0;
        std::size_t n = 0;
        for (const auto& row : pers_resid)
            for (double v : row) {
                pr += v * v;
                pa += std::abs(v);
                ++n;
            }
        rep.persistence_rmse = n > 0 ? std::sqrt(pr / static_cast<double>(n)) : 0.0;
        rep.persistence_mae = n > 0 ? pa / static_cast<double>(n) : 0.0;
    }
    if (o > 1) {
        rep.rmse_per_feature.resize(o);
        rep.mae_per_feature.resize(o);
        rep.r2_per_feature.resize(o);
        for (std::size_t i = 0; i < o; ++i) {
            std::vector<Vec> ti(truth.size()), pi(truth.size());
            for (std::size_t w = 0; w < truth.size(); ++w) {
                ti[w] = {truth[w][i]};
                pi[w] = {pred[w][i]};
            }
            rep.rmse_per_feature[i] = rmse_of(ti, pi);
            rep.mae_per_feature[i] = mae_of(ti, pi);
            rep.r2_per_feature[i] = r2_of(ti, pi);
        }
    }
    std::vector<double> sorted = latency;
    std::sort(sorted.begin(), sorted.end());
    double lat_sum = 0.0;
    for (double v : latency) lat_sum += v;
    rep.latency_mean_s = latency.empty() ? 0.0 : lat_sum / static_cast<double>(latency.size());
    rep.latency_median_s = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
    return out;
}

} // namespace kpiwm::infer
