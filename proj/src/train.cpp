#include "kpiwm/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "kpiwm/errors.hpp"

namespace kpiwm::train {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
    if (tolerance < 0.0) throw ConfigError("train: tolerance must be >= 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (kl_epochs < 1) throw ConfigError("train: kl_epochs must be >= 1");
    for (double p : {pi_start, pi_end, channel_drop})
        if (p < 0.0 || p > 1.0) throw ConfigError("train: probabilities must be in [0, 1]");
    if (input_noise < 0.0) throw ConfigError("train: input_noise must be >= 0");
    if (restart_period < 1) throw ConfigError("train: restart_period must be >= 1");
    if (restart_mult < 1.0) throw ConfigError("train: restart_mult must be >= 1");
}

std::pair<double, double> schedules(std::size_t epoch, const TrainConfig& cfg) {
    const double frac =
        std::min(1.0, static_cast<double>(epoch) / static_cast<double>(cfg.kl_epochs));
    const double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
    const double pi = cfg.pi_start + (cfg.pi_end - cfg.pi_start) * frac;
    return {beta, pi};
}

double warm_restart_lr(double frac_epoch, const TrainConfig& cfg) {
    double period = static_cast<double>(cfg.restart_period);
    double t = frac_epoch;
    while (t >= period) {
        t -= period;
        period *= cfg.restart_mult;
    }
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + std::cos(M_PI * t / period));
}

void clip_global_grad_norm(model::ParamStore& store, double c_max) {
    const double norm = store.grad_norm();
    if (norm > c_max && norm > 0.0) store.scale_grads(c_max / norm);
}

data::WindowBatch augment(const data::WindowBatch& batch, double input_noise,
                          double channel_drop, Rng& rng) {
    data::WindowBatch out = batch;
    const auto ia = static_cast<std::size_t>(batch.action_index);
    for (std::size_t b = 0; b < out.size(); ++b) {
        Mat& in = out.inputs[b];
        for (std::size_t j = 0; j < in.cols(); ++j) {
            if (j == ia) continue;
            if (channel_drop > 0.0 && rng.bernoulli(channel_drop)) {
                for (std::size_t t = 0; t < in.rows(); ++t) in(t, j) = 0.0;
            } else if (input_noise > 0.0) {
                for (std::size_t t = 0; t < in.rows(); ++t)
                    in(t, j) += input_noise * rng.normal();
            }
        }
    }
    return out;
}

AdamW::AdamW(const model::ParamStore& store) {
    m_.resize(store.count());
    v_.resize(store.count());
    for (std::size_t i = 0; i < store.count(); ++i) {
        m_[i].assign(store.at(i).value.size(), 0.0);
        v_[i].assign(store.at(i).value.size(), 0.0);
    }
}

void AdamW::step(model::ParamStore& store, double lr, double weight_decay) {
    store.assert_writable();
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& p = store.at(i);
        Vec& m = m_[i];
        Vec& v = v_[i];
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double g = p.grad.data()[k];
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            double& x = p.value.data()[k];
            x -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * x);
        }
    }
}

std::string EpochRecord::to_json_line() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["recon"] = train_loss.recon;
    j["target"] = train_loss.target;
    j["huber"] = train_loss.huber;
    j["consistency"] = train_loss.consistency;
    j["kl"] = train_loss.kl;
    j["rollout"] = train_loss.rollout;
    j["total"] = train_loss.total;
    j["beta"] = beta;
    j["pi"] = pi;
    j["lr_last"] = lr_last;
    j["batches"] = batches;
    j["posterior_batches"] = posterior_batches;
    j["val_loss"] = val_loss;
    j["improved"] = improved;
    j["patience_counter"] = patience_counter;
    j["wall_clock_s"] = wall_clock_s;
    return j.dump();
}

Vec snapshot_params(const model::ParamStore& store) {
    Vec out;
    out.reserve(store.total_size());
    for (std::size_t i = 0; i < store.count(); ++i)
        out.insert(out.end(), store.at(i).value.data().begin(), store.at(i).value.data().end());
    return out;
}

void restore_params(model::ParamStore& store, const Vec& snapshot) {
    store.assert_writable();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& v = store.at(i).value.data();
        std::copy(snapshot.begin() + pos, snapshot.begin() + pos + v.size(), v.begin());
        pos += v.size();
    }
    if (pos != snapshot.size()) throw ShapeError("parameter snapshot size mismatch");
}

namespace {

// Teacher-forced validation: prior phase, mean latent, parameters locked.
double validation_loss(const model::WorldModel& m, const model::TapSet& taps,
                       const data::WindowBatch& val, int target_index, const LossWeights& w) {
    std::vector<WindowPass> passes(val.size());
    for (std::size_t b = 0; b < val.size(); ++b)
        forward_window(m, taps, val.inputs[b], val.actions[b], nullptr, Phase::Prior, Vec{},
                       nullptr, passes[b]);
    const LossBreakdown terms = loss_terms(passes, val.targets_full, val.targets, target_index, w);
    return weighted_total(terms, w, 0.0, false);
}

} // namespace

TrainResult train(model::WorldModel& m, const data::KpiTrace& trace, const data::SplitPlan& plan,
                  const data::StandardScaler& scaler, const TrainConfig& cfg) {
    cfg.validate();
    const auto& mc = m.config();
    const std::size_t window_len = mc.window_len;
    const auto out_dim = static_cast<int>(mc.output_dim);

    const auto train_batch =
        data::build_windows(trace, plan, scaler, window_len, data::Split::Train, out_dim);
    const auto val_batch =
        data::build_windows(trace, plan, scaler, window_len, data::Split::Val, out_dim);
    const int i_star = trace.target_index;
    const int i_a = trace.action_index;
    const std::size_t dz = mc.latent_dim;
    const std::size_t k_roll = cfg.rollout_steps;

    // Standardized full rows of the train split for rollout labels.
    std::vector<Vec> train_rows_std;
    if (k_roll > 0) {
        train_rows_std.resize(plan.train_end - plan.train_begin);
        for (std::size_t t = plan.train_begin; t < plan.train_end; ++t)
            train_rows_std[t - plan.train_begin] = scaler.transform(trace.values.row(t));
    }

    model::TrainingMode token(m);
    AdamW optimizer(m.params());
    TrainResult result;
    EarlyStopTracker stopper;
    Vec best_snapshot = snapshot_params(m.params());

    std::vector<std::size_t> order(train_batch.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t num_batches =
        (train_batch.size() + cfg.batch_size - 1) / cfg.batch_size;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t_start = std::chrono::steady_clock::now();
        const auto [beta, pi] = schedules(epoch, cfg);

        Rng shuffle_rng = Rng::stream(cfg.seed, {0x51, epoch});
        shuffle_rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.beta = beta;
        rec.pi = pi;
        double epoch_weight = 0.0;

        for (std::size_t bi = 0; bi < num_batches; ++bi) {
            const std::size_t lo = bi * cfg.batch_size;
            const std::size_t hi = std::min(train_batch.size(), lo + cfg.batch_size);
            const std::size_t bsz = hi - lo;

            data::WindowBatch sub;
            sub.window_len = train_batch.window_len;
            sub.output_dim = train_batch.output_dim;
            sub.action_index = train_batch.action_index;
            for (std::size_t k = lo; k < hi; ++k) {
                sub.inputs.push_back(train_batch.inputs[order[k]]);
                sub.actions.push_back(train_batch.actions[order[k]]);
                sub.targets_full.push_back(train_batch.targets_full[order[k]]);
                sub.targets.push_back(train_batch.targets[order[k]]);
                sub.anchors.push_back(train_batch.anchors[order[k]]);
            }
            Rng aug_rng = Rng::stream(cfg.seed, {0x53, epoch, bi});
            sub = augment(sub, cfg.input_noise, cfg.channel_drop, aug_rng);

            Rng phase_rng = Rng::stream(cfg.seed, {0x52, epoch, bi});
            const Phase phase = phase_rng.bernoulli(pi) ? Phase::Posterior : Phase::Prior;
            if (phase == Phase::Posterior) ++rec.posterior_batches;

            const auto taps = m.make_tap_set();
            m.params().zero_grads();
            std::vector<Mat> d_taps;

            std::vector<WindowPass> passes(bsz);
            for (std::size_t wi = 0; wi < bsz; ++wi) {
                Rng noise_rng = Rng::stream(cfg.seed, {0x54, epoch, bi, wi});
                Rng drop_rng = Rng::stream(cfg.seed, {0x55, epoch, bi, wi});
                const Vec noise = noise_rng.normal_vec(dz);
                forward_window(m, taps, sub.inputs[wi], sub.actions[wi], &sub.targets_full[wi],
                               phase, noise, &token, passes[wi],
                               mc.dropout > 0.0 ? &drop_rng : nullptr);
            }
            LossBreakdown terms =
                loss_terms(passes, sub.targets_full, sub.targets, i_star, cfg.weights);
            terms.beta = beta;
            terms.pi = pi;

            // Optional open-loop rollout term on windows with aligned labels.
            std::vector<RolloutCache> roll_caches;
            std::vector<std::size_t> roll_windows;
            std::vector<std::vector<Vec>> roll_labels;
            if (k_roll > 0) {
                for (std::size_t wi = 0; wi < bsz; ++wi) {
                    const std::size_t anchor = sub.anchors[wi];
                    if (anchor + k_roll >= plan.train_end) continue;
                    std::vector<Vec> labels;
                    for (std::size_t k = 1; k <= k_roll; ++k)
                        labels.push_back(train_rows_std[anchor + k - plan.train_begin]);
                    roll_windows.push_back(wi);
                    roll_labels.push_back(std::move(labels));
                }
                roll_caches.resize(roll_windows.size());
                double roll_sum = 0.0;
                for (std::size_t r = 0; r < roll_windows.size(); ++r) {
                    const std::size_t wi = roll_windows[r];
                    roll_sum += rollout_penalty(m, taps, sub.inputs[wi], sub.actions[wi],
                                                roll_labels[r], i_a, &roll_caches[r]);
                }
                if (!roll_windows.empty())
                    terms.rollout = roll_sum / static_cast<double>(roll_windows.size());
            }
            terms.total = weighted_total(terms, cfg.weights, beta, k_roll > 0);

            if (!terms.finite()) {
                restore_params(m.params(), best_snapshot);
                m.invalidate_taps();
                result.aborted = true;
                result.abort_reason = std::string("non-finite ") + terms.first_non_finite() +
                                      " at epoch " + std::to_string(epoch + 1) + " batch " +
                                      std::to_string(bi);
                result.best_val = stopper.best;
                result.epochs_run = epoch;
                return result;
            }

            const double inv_b = 1.0 / static_cast<double>(bsz);
            for (std::size_t wi = 0; wi < bsz; ++wi)
                backward_window(m, taps, passes[wi], sub.targets_full[wi], sub.targets[wi],
                                i_star, cfg.weights, phase == Phase::Posterior ? beta : 0.0,
                                inv_b, d_taps);
            for (std::size_t r = 0; r < roll_windows.size(); ++r)
                rollout_backward(m, taps, roll_caches[r], roll_labels[r], i_a,
                                 cfg.weights.rollout / static_cast<double>(roll_windows.size()),
                                 d_taps);
            m.apply_tap_gradients(d_taps);

            clip_global_grad_norm(m.params(), cfg.grad_clip);
            const double frac_epoch =
                static_cast<double>(epoch) +
                static_cast<double>(bi) / static_cast<double>(num_batches);
            rec.lr_last = warm_restart_lr(frac_epoch, cfg);
            optimizer.step(m.params(), rec.lr_last, cfg.weight_decay);

            const auto wb = static_cast<double>(bsz);
            rec.train_loss.recon += terms.recon * wb;
            rec.train_loss.target += terms.target * wb;
            rec.train_loss.huber += terms.huber * wb;
            rec.train_loss.consistency += terms.consistency * wb;
            rec.train_loss.kl += terms.kl * wb;
            rec.train_loss.rollout += terms.rollout * wb;
            rec.train_loss.total += terms.total * wb;
            epoch_weight += wb;
            ++rec.batches;
        }
        rec.train_loss.recon /= epoch_weight;
        rec.train_loss.target /= epoch_weight;
        rec.train_loss.huber /= epoch_weight;
        rec.train_loss.consistency /= epoch_weight;
        rec.train_loss.kl /= epoch_weight;
        rec.train_loss.rollout /= epoch_weight;
        rec.train_loss.total /= epoch_weight;
        rec.train_loss.beta = beta;
        rec.train_loss.pi = pi;

        m.invalidate_taps();
        {
            model::ParamStore::WriteLock lock(m.params());
            rec.val_loss =
                validation_loss(m, m.cached_taps(), val_batch, i_star, cfg.weights);
        }
        if (!std::isfinite(rec.val_loss)) {
            restore_params(m.params(), best_snapshot);
            m.invalidate_taps();
            result.aborted = true;
            result.abort_reason =
                "non-finite validation loss at epoch " + std::to_string(epoch + 1);
            result.best_val = stopper.best;
            result.epochs_run = epoch + 1;
            result.log.push_back(rec);
            return result;
        }

        rec.improved = stopper.observe(epoch + 1, rec.val_loss, cfg.tolerance);
        if (rec.improved) {
            best_snapshot = snapshot_params(m.params());
            result.best_epoch = epoch + 1;
        }
        rec.patience_counter = stopper.counter;
        rec.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        result.log.push_back(rec);
        result.epochs_run = epoch + 1;
        if (stopper.should_stop(cfg.patience)) break;
    }

    restore_params(m.params(), best_snapshot);
    m.invalidate_taps();
    result.best_val = stopper.best;
    return result;
}

} // namespace kpiwm::train
