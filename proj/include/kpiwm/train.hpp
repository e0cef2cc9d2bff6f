#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "kpiwm/data.hpp"
#include "kpiwm/loss.hpp"
#include "kpiwm/model.hpp"

namespace kpiwm::train {

struct TrainConfig {
    double lr = 2e-3;
    double lr_min = 0.0;
    double weight_decay = 1e-4;
    std::size_t batch_size = 256;
    double grad_clip = 1.0;     // c_max
    std::size_t max_epochs = 100;
    std::size_t patience = 10;  // p
    double tolerance = 1e-5;    // tol
    double beta_start = 0.01, beta_end = 1.0;
    std::size_t kl_epochs = 20; // E_kl
    double pi_start = 1.0, pi_end = 0.5;
    double input_noise = 0.01;  // sigma_in
    double channel_drop = 0.1;  // p_cd
    LossWeights weights;
    std::size_t rollout_steps = 0; // K; 0 disables the rollout term
    std::size_t restart_period = 10; // T0 (epochs)
    double restart_mult = 2.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Linear ramps for the KL weight and posterior-use probability.
std::pair<double, double> schedules(std::size_t epoch, const TrainConfig& cfg);

// Cosine warm restarts on the fractional epoch, stepped per mini-batch.
double warm_restart_lr(double frac_epoch, const TrainConfig& cfg);

void clip_global_grad_norm(model::ParamStore& store, double c_max);

// Gaussian input noise on non-action feature columns plus whole-column
// dropout; the action channel is never touched.
data::WindowBatch augment(const data::WindowBatch& batch, double input_noise,
                          double channel_drop, Rng& rng);

class AdamW {
public:
    explicit AdamW(const model::ParamStore& store);
    void step(model::ParamStore& store, double lr, double weight_decay);

private:
    std::vector<Vec> m_, v_;
    std::size_t t_ = 0;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown train_loss; // batch-size-weighted epoch means
    double val_loss = 0.0;
    double lr_last = 0.0;
    double beta = 0.0, pi = 0.0;
    std::size_t batches = 0, posterior_batches = 0;
    bool improved = false;
    std::size_t patience_counter = 0;
    double wall_clock_s = 0.0; // excluded from determinism comparisons

    std::string to_json_line() const;
};

// Patience bookkeeping: an epoch improves when it beats the best value by
// more than tol; training stops once `patience` epochs pass without one.
struct EarlyStopTracker {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t counter = 0;

    bool observe(std::size_t epoch, double val, double tol) {
        if (val < best - tol) {
            best = val;
            best_epoch = epoch;
            counter = 0;
            return true;
        }
        ++counter;
        return false;
    }
    bool should_stop(std::size_t patience) const { return counter >= patience; }
};

struct TrainResult {
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0; // 1-based; 0 means never improved
    double best_val = 0.0;
    std::size_t epochs_run = 0;
    bool aborted = false;
    std::string abort_reason;
};

Vec snapshot_params(const model::ParamStore& store);
void restore_params(model::ParamStore& store, const Vec& snapshot);

// Leakage-safe loop: scalers are fit upstream on train only; validation runs
// teacher-forced in the prior phase (mean latent) under a parameter write
// lock; best parameters are restored into the model on return.
TrainResult train(model::WorldModel& m, const data::KpiTrace& trace, const data::SplitPlan& plan,
                  const data::StandardScaler& scaler, const TrainConfig& cfg);

} // namespace kpiwm::train
