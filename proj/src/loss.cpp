#include "kpiwm/loss.hpp"

#include <cmath>

#include "kpiwm/errors.hpp"

namespace kpiwm::train {

namespace {

double huber_value(double r, double delta) {
    const double a = std::abs(r);
    return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double huber_grad(double r, double delta) {
    if (std::abs(r) <= delta) return r;
    return r > 0.0 ? delta : -delta;
}

constexpr double kLog2Pi = 1.8378770664093454836;

} // namespace

bool LossBreakdown::finite() const { return first_non_finite()[0] == '\0'; }

const char* LossBreakdown::first_non_finite() const {
    if (!std::isfinite(recon)) return "recon";
    if (!std::isfinite(target)) return "target";
    if (!std::isfinite(huber)) return "huber";
    if (!std::isfinite(consistency)) return "consistency";
    if (!std::isfinite(kl)) return "kl";
    if (!std::isfinite(rollout)) return "rollout";
    if (!std::isfinite(total)) return "total";
    return "";
}

double weighted_total(const LossBreakdown& t, const LossWeights& w, double beta,
                      bool include_rollout) {
    double total = w.recon * t.recon + w.target * t.target + w.huber * t.huber +
                   w.consistency * t.consistency + beta * t.kl;
    if (include_rollout) total += w.rollout * t.rollout;
    return total;
}

void forward_window(const model::WorldModel& m, const model::TapSet& taps, const Mat& inputs,
                    const Vec& actions, const Vec* y_full_label, Phase phase, const Vec& noise,
                    const model::TrainingMode* token, WindowPass& out, Rng* dropout_rng) {
    out.phase = phase;
    out.noise = noise;
    out.summary = m.encode(inputs, actions, taps, out.enc, dropout_rng);
    out.prior_g = m.prior(out.summary, out.prior_ws);

    const model::LatentGaussian* sel = &out.prior_g;
    if (phase == Phase::Posterior) {
        if (y_full_label == nullptr || token == nullptr)
            throw ModeError("posterior phase requires the label and a training token");
        out.post_g = m.posterior(out.summary, *y_full_label, *token, out.post_ws);
        sel = &out.post_g;
    }
    out.z = noise.empty() ? sel->mu : model::WorldModel::sample(*sel, noise);
    out.y_full_hat = m.decode_full(out.summary, out.z, out.full_ws);
    const Vec last_row = inputs.row(inputs.rows() - 1);
    out.pred = m.decode_target(out.summary, out.z, last_row, out.targ_ws, out.ar_ws);
}

LossBreakdown loss_terms(const std::vector<WindowPass>& passes,
                         const std::vector<Vec>& targets_full, const std::vector<Vec>& targets,
                         int target_index, const LossWeights& w) {
    LossBreakdown out;
    const auto n = static_cast<double>(passes.size());
    if (passes.empty()) return out;

    for (std::size_t b = 0; b < passes.size(); ++b) {
        const auto& p = passes[b];
        const Vec& yf = targets_full[b];
        const Vec& yt = targets[b];

        for (std::size_t j = 0; j < yf.size(); ++j) {
            const double d = p.y_full_hat[j] - yf[j];
            out.recon += d * d;
        }
        const std::size_t o = yt.size();
        const bool hetero = !p.pred.logvar.empty();
        for (std::size_t i = 0; i < o; ++i) {
            const double resid = yt[i] - p.pred.mean[i];
            if (hetero) {
                const double lv = p.pred.logvar[i];
                out.target += 0.5 * (lv + resid * resid / std::exp(lv) + kLog2Pi);
            } else {
                out.target += resid * resid;
            }
            out.huber += huber_value(p.pred.mean[i] - yt[i], w.huber_delta);
        }
        if (o == 1) {
            const double gap = p.pred.mean[0] - p.y_full_hat[target_index];
            out.consistency += gap * gap;
        } else {
            for (std::size_t i = 0; i < o; ++i) {
                const double gap = p.pred.mean[i] - p.y_full_hat[i];
                out.consistency += gap * gap;
            }
        }
        if (p.phase == Phase::Posterior) out.kl += model::kl_diag(p.post_g, p.prior_g);
    }
    out.recon /= n;
    out.target /= n;
    out.huber /= n;
    out.consistency /= n;
    out.kl /= n;
    return out;
}

void backward_window(model::WorldModel& m, const model::TapSet& taps, WindowPass& pass,
                     const Vec& target_full, const Vec& target, int target_index,
                     const LossWeights& w, double beta, double scale_inv_batch,
                     std::vector<Mat>& d_taps) {
    const std::size_t o = target.size();
    const std::size_t f = target_full.size();
    const bool hetero = !pass.pred.logvar.empty();

    Vec d_mean(o, 0.0);
    Vec d_logvar(hetero ? o : 0, 0.0);
    Vec d_yfull(f, 0.0);

    for (std::size_t j = 0; j < f; ++j)
        d_yfull[j] = w.recon * scale_inv_batch * 2.0 * (pass.y_full_hat[j] - target_full[j]);

    for (std::size_t i = 0; i < o; ++i) {
        const double resid = target[i] - pass.pred.mean[i];
        if (hetero) {
            const double inv_var = std::exp(-pass.pred.logvar[i]);
            d_mean[i] += w.target * scale_inv_batch * (pass.pred.mean[i] - target[i]) * inv_var;
            d_logvar[i] += w.target * scale_inv_batch * 0.5 * (1.0 - resid * resid * inv_var);
        } else {
            d_mean[i] += w.target * scale_inv_batch * 2.0 * (pass.pred.mean[i] - target[i]);
        }
        d_mean[i] +=
            w.huber * scale_inv_batch * huber_grad(pass.pred.mean[i] - target[i], w.huber_delta);
    }
    if (o == 1) {
        const double gap = pass.pred.mean[0] - pass.y_full_hat[target_index];
        d_mean[0] += w.consistency * scale_inv_batch * 2.0 * gap;
        d_yfull[target_index] -= w.consistency * scale_inv_batch * 2.0 * gap;
    } else {
        for (std::size_t i = 0; i < o; ++i) {
            const double gap = pass.pred.mean[i] - pass.y_full_hat[i];
            d_mean[i] += w.consistency * scale_inv_batch * 2.0 * gap;
            d_yfull[i] -= w.consistency * scale_inv_batch * 2.0 * gap;
        }
    }

    Vec d_z(pass.z.size(), 0.0);
    Vec d_summary(pass.summary.size(), 0.0);

    {
        const Vec ds = m.decode_target_backward(pass.pred, pass.targ_ws, pass.ar_ws, d_mean,
                                                d_logvar, d_z, nullptr);
        for (std::size_t i = 0; i < d_summary.size(); ++i) d_summary[i] += ds[i];
    }
    {
        const Vec ds = m.decode_full_backward(pass.full_ws, d_yfull, d_z);
        for (std::size_t i = 0; i < d_summary.size(); ++i) d_summary[i] += ds[i];
    }

    const std::size_t dz = pass.z.size();
    Vec d_mu_p(dz, 0.0), d_lv_p(dz, 0.0);
    Vec d_mu_q(dz, 0.0), d_lv_q(dz, 0.0);
    const bool posterior = pass.phase == Phase::Posterior;
    if (!pass.noise.empty()) {
        const auto& sel = posterior ? pass.post_g : pass.prior_g;
        model::WorldModel::sample_backward(sel, pass.noise, d_z, posterior ? d_mu_q : d_mu_p,
                                           posterior ? d_lv_q : d_lv_p);
    } else {
        // Mean latent: gradient lands on mu of the selected distribution.
        for (std::size_t i = 0; i < dz; ++i) (posterior ? d_mu_q : d_mu_p)[i] += d_z[i];
    }
    if (posterior)
        model::kl_diag_backward(pass.post_g, pass.prior_g, beta * scale_inv_batch, d_mu_q, d_lv_q,
                                d_mu_p, d_lv_p);

    if (posterior) {
        const Vec ds = m.posterior_backward(pass.post_ws, d_mu_q, d_lv_q);
        for (std::size_t i = 0; i < d_summary.size(); ++i) d_summary[i] += ds[i];
    }
    {
        const Vec ds = m.prior_backward(pass.prior_ws, d_mu_p, d_lv_p);
        for (std::size_t i = 0; i < d_summary.size(); ++i) d_summary[i] += ds[i];
    }

    Mat d_rows(pass.enc.final_rows().rows(), pass.enc.final_rows().cols());
    d_rows.set_row(d_rows.rows() - 1, d_summary);
    m.encode_backward(pass.enc, taps, d_rows, d_taps, nullptr, nullptr);
}

double rollout_penalty(const model::WorldModel& m, const model::TapSet& taps, const Mat& inputs,
                       const Vec& actions, const std::vector<Vec>& future_full_std,
                       int action_index, RolloutCache* cache) {
    const std::size_t k_steps = future_full_std.size();
    if (k_steps == 0) throw ArgumentError("rollout_penalty: no aligned labels");
    const std::size_t len = inputs.rows(), f = inputs.cols();

    RolloutCache local;
    RolloutCache& c = cache != nullptr ? *cache : local;
    c.enc.resize(k_steps);
    c.prior_ws.resize(k_steps);
    c.full_ws.resize(k_steps);
    c.prior_g.resize(k_steps);
    c.frames.resize(k_steps);
    c.windows.resize(k_steps);
    c.actions.resize(k_steps);

    Mat win = inputs;
    Vec act = actions;
    double penalty = 0.0;
    for (std::size_t k = 0; k < k_steps; ++k) {
        c.windows[k] = win;
        c.actions[k] = act;
        const Vec summary = m.encode(win, act, taps, c.enc[k]);
        c.prior_g[k] = m.prior(summary, c.prior_ws[k]);
        const Vec frame = m.decode_full(summary, c.prior_g[k].mu, c.full_ws[k]);
        c.frames[k] = frame;
        for (std::size_t j = 0; j < f; ++j) {
            const double d = frame[j] - future_full_std[k][j];
            penalty += d * d;
        }
        if (k + 1 < k_steps) {
            Mat next(len, f);
            for (std::size_t r = 0; r + 1 < len; ++r) next.set_row(r, win.row(r + 1));
            next.set_row(len - 1, frame);
            win = std::move(next);
            act = win.col(static_cast<std::size_t>(action_index));
        }
    }
    return penalty / static_cast<double>(k_steps);
}

void rollout_backward(model::WorldModel& m, const model::TapSet& taps, const RolloutCache& cache,
                      const std::vector<Vec>& future_full_std, int action_index, double scale,
                      std::vector<Mat>& d_taps) {
    const std::size_t k_steps = cache.frames.size();
    const std::size_t len = cache.windows[0].rows(), f = cache.windows[0].cols();
    const double per_step = scale / static_cast<double>(k_steps);

    std::vector<Vec> d_frames(k_steps, Vec(f, 0.0));
    for (std::size_t k = k_steps; k-- > 0;) {
        Vec d_frame(f, 0.0);
        for (std::size_t j = 0; j < f; ++j) {
            d_frame[j] = per_step * 2.0 * (cache.frames[k][j] - future_full_std[k][j]) +
                         d_frames[k][j];
        }
        Vec d_z(cache.prior_g[k].mu.size(), 0.0);
        Vec d_summary = m.decode_full_backward(cache.full_ws[k], d_frame, d_z);
        {
            Vec d_lv(d_z.size(), 0.0);
            const Vec ds = m.prior_backward(cache.prior_ws[k], d_z, d_lv);
            for (std::size_t i = 0; i < d_summary.size(); ++i) d_summary[i] += ds[i];
        }
        Mat d_rows(len, d_summary.size());
        d_rows.set_row(len - 1, d_summary);
        Mat d_inputs(len, f);
        Vec d_actions(len, 0.0);
        m.encode_backward(cache.enc[k], taps, d_rows, d_taps, &d_inputs, &d_actions);
        // The action channel mirrors column i_a of the rolled window.
        for (std::size_t r = 0; r < len; ++r)
            d_inputs(r, static_cast<std::size_t>(action_index)) += d_actions[r];
        // Rows of window k are original data (no gradient needed) or earlier
        // decoded frames; route those contributions back.
        for (std::size_t r = 0; r < len; ++r) {
            const std::size_t src = r + k; // index into original rows
            if (src >= len) {
                const std::size_t frame_idx = src - len; // feeds frame k' = frame_idx
                for (std::size_t j = 0; j < f; ++j) d_frames[frame_idx][j] += d_inputs(r, j);
            }
        }
    }
}

} // namespace kpiwm::train
