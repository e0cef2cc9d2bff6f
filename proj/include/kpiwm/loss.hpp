#pragma once

#include <cstdint>
#include <vector>

#include "kpiwm/common.hpp"
#include "kpiwm/data.hpp"
#include "kpiwm/model.hpp"

namespace kpiwm::train {

enum class Phase : int { Prior = 0, Posterior = 1 };

struct LossWeights {
    double recon = 1.0;       // alpha_rec
    double target = 1.0;      // alpha_t
    double huber = 0.1;       // alpha_hub
    double consistency = 0.1; // alpha_cons
    double rollout = 0.1;     // alpha_roll
    double huber_delta = 1.0; // delta
};

struct LossBreakdown {
    double recon = 0.0;
    double target = 0.0;
    double huber = 0.0;
    double consistency = 0.0;
    double kl = 0.0;
    double rollout = 0.0;
    double total = 0.0;
    double beta = 0.0;
    double pi = 0.0;

    bool finite() const;
    // Name of the first non-finite term, empty when all finite.
    const char* first_non_finite() const;
};

double weighted_total(const LossBreakdown& terms, const LossWeights& w, double beta,
                      bool include_rollout);

// Forward artifacts for one window; loss_terms reads the outputs, the
// backward pass consumes the cached workspaces.
struct WindowPass {
    model::EncodeWs enc;
    Vec summary;
    model::MlpWs prior_ws, post_ws, full_ws, targ_ws, ar_ws;
    model::LatentGaussian prior_g, post_g;
    Vec noise; // empty when the latent is the distribution mean
    Vec z;
    Vec y_full_hat;
    model::TargetPrediction pred;
    Phase phase = Phase::Prior;
};

// Runs encode + latent + decoders for one window. `noise` empty uses the
// mean of the selected distribution. `token` is required (and the label
// used) only in the posterior phase.
void forward_window(const model::WorldModel& m, const model::TapSet& taps, const Mat& inputs,
                    const Vec& actions, const Vec* y_full_label, Phase phase, const Vec& noise,
                    const model::TrainingMode* token, WindowPass& out,
                    Rng* dropout_rng = nullptr);

// Batch-mean loss terms (unweighted); kl is identically zero for prior-phase
// windows.
LossBreakdown loss_terms(const std::vector<WindowPass>& passes,
                         const std::vector<Vec>& targets_full, const std::vector<Vec>& targets,
                         int target_index, const LossWeights& w);

// Accumulates parameter gradients for the standard five terms of one window;
// scale_inv_batch is 1/|B|. Returns nothing; tap gradients accumulate into
// d_taps for a single taps_backward call per batch.
void backward_window(model::WorldModel& m, const model::TapSet& taps, WindowPass& pass,
                     const Vec& target_full, const Vec& target, int target_index,
                     const LossWeights& w, double beta, double scale_inv_batch,
                     std::vector<Mat>& d_taps);

// K-step open-loop reconstruction penalty: windows advance on decoded frames
// with the prior-mean latent; labels are the true standardized next rows.
struct RolloutCache {
    std::vector<model::EncodeWs> enc;
    std::vector<model::MlpWs> prior_ws, full_ws;
    std::vector<model::LatentGaussian> prior_g;
    std::vector<Vec> frames; // decoded frames, k = 1..K
    std::vector<Mat> windows;
    std::vector<Vec> actions;
};

double rollout_penalty(const model::WorldModel& m, const model::TapSet& taps, const Mat& inputs,
                       const Vec& actions, const std::vector<Vec>& future_full_std,
                       int action_index, RolloutCache* cache);

void rollout_backward(model::WorldModel& m, const model::TapSet& taps, const RolloutCache& cache,
                      const std::vector<Vec>& future_full_std, int action_index, double scale,
                      std::vector<Mat>& d_taps);

} // namespace kpiwm::train
