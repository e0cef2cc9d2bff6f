#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kpiwm/common.hpp"
#include "kpiwm/rng.hpp"
#include "kpiwm/ssm.hpp"

namespace kpiwm::model {

// ---------------------------------------------------------------------------
// Parameters

struct Param {
    std::string name;
    Mat value;
    Mat grad;
};

// Flat registry of named tensors. Gradient writes and value updates go
// through here so validation can hold a write lock; any mutation attempted
// under the lock is a ModeError.
class ParamStore {
public:
    std::size_t add(const std::string& name, std::size_t rows, std::size_t cols);
    Param& at(std::size_t h) { return params_[h]; }
    const Param& at(std::size_t h) const { return params_[h]; }
    const Mat& value(std::size_t h) const { return params_[h].value; }
    Mat& value_mut(std::size_t h);
    Mat& grad(std::size_t h);

    std::size_t count() const { return params_.size(); }
    std::size_t total_size() const;
    void zero_grads();
    double grad_norm() const;
    void scale_grads(double s);

    void assert_writable() const;
    bool write_locked() const { return lock_depth_ > 0; }

    class WriteLock {
    public:
        explicit WriteLock(ParamStore& s) : s_(s) { ++s_.lock_depth_; }
        ~WriteLock() { --s_.lock_depth_; }
        WriteLock(const WriteLock&) = delete;
        WriteLock& operator=(const WriteLock&) = delete;

    private:
        ParamStore& s_;
    };

    int find(const std::string& name) const;

private:
    std::vector<Param> params_;
    int lock_depth_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
    std::size_t feature_count = 0; // F
    std::size_t window_len = 0;    // L
    std::size_t embed_dim = 192;   // d
    std::size_t layer_count = 4;   // L_ell
    std::size_t state_size = 64;   // N
    std::size_t mixture_count = 4; // M
    std::size_t tap_len = 0;       // L_k; 0 means L
    double glu_ratio = 1.0;        // h = round(ratio * d), floored at 1
    double dropout = 0.1;
    std::size_t latent_dim = 48; // d_z
    std::size_t output_dim = 1;  // O in {1, F}
    bool heteroscedastic = true;
    bool causal_gate = false;
    std::size_t ar_hidden = 32;
    std::uint64_t init_seed = 0;

    std::size_t glu_hidden() const {
        const auto h = static_cast<long long>(std::llround(glu_ratio * static_cast<double>(embed_dim)));
        return static_cast<std::size_t>(std::max(1LL, h));
    }
    std::size_t se_hidden() const { return std::max<std::size_t>(4, embed_dim / 8); }
    std::size_t tap_length() const { return tap_len == 0 ? window_len : tap_len; }
    std::size_t target_head_width() const { return heteroscedastic ? 2 * output_dim : output_dim; }

    void validate() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& text);
};

// ---------------------------------------------------------------------------
// Workspaces (forward caches consumed by the backward passes)

struct MlpWs {
    Vec in, a1, h1, out;
};

struct LayerWs {
    Mat h_in;
    Mat u;
    Mat s, a1, h1, a2, g; // one row (window-mean gate) or L rows (causal gate)
    Mat sum1, y, xhat1;
    Vec inv_sigma1;
    Mat ga, gg, act, gate2, prod, z;
    Mat drop_mask; // empty when dropout inactive
    Mat sum2, out, xhat2;
    Vec inv_sigma2;
};

struct EncodeWs {
    Mat x_aug;
    Mat h0;
    std::vector<LayerWs> layers;
    const Mat& final_rows() const { return layers.empty() ? h0 : layers.back().out; }
};

// Per-layer mixture-summed taps, recomputed from parameters during training
// and cached once the model is frozen.
struct TapSet {
    std::vector<Mat> per_layer;
};

struct LatentGaussian {
    Vec mu;
    Vec logvar;
};

// Heteroscedastic log-variance clamp range.
constexpr double kLogVarLo = -8.0;
constexpr double kLogVarHi = 8.0;

struct TargetPrediction {
    Vec mean;     // mu_t + tanh(kappa) * ar_skip
    Vec logvar;   // clamped; empty when homoscedastic
    Vec ar_skip;  // f_ar(last standardized input row)
    double gain_raw = 0.0; // kappa
};

class WorldModel;

// RAII token gating posterior access: only code paths that explicitly opt
// into training mode can touch the label-conditioned encoder.
class TrainingMode {
public:
    explicit TrainingMode(WorldModel& m);
    ~TrainingMode();
    TrainingMode(const TrainingMode&) = delete;
    TrainingMode& operator=(const TrainingMode&) = delete;

private:
    WorldModel& m_;
};

// ---------------------------------------------------------------------------

class WorldModel {
public:
    explicit WorldModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const ssm::HippoOperator& hippo() const { return hippo_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    std::size_t parameter_count() const { return store_.total_size(); }

    TapSet make_tap_set() const;
    const TapSet& cached_taps() const;
    void invalidate_taps();

    // Forward through embed + layers. `dropout_rng` non-null enables GLU
    // dropout (training only). Returns the last-row summary.
    Vec encode(const Mat& inputs, const Vec& actions, const TapSet& taps, EncodeWs& ws,
               Rng* dropout_rng = nullptr) const;

    // Backward from gradients on all output rows. Accumulates parameter
    // gradients, per-layer tap gradients, and (optionally) input gradients.
    void encode_backward(const EncodeWs& ws, const TapSet& taps, const Mat& d_out_rows,
                         std::vector<Mat>& d_taps, Mat* d_inputs, Vec* d_actions);

    // Converts accumulated tap gradients into (B, C, D, tau) gradients.
    void apply_tap_gradients(const std::vector<Mat>& d_taps);

    LatentGaussian prior(const Vec& summary, MlpWs& ws) const;
    // Gradients w.r.t. (mu, logvar) flow back to the MLP and the summary.
    Vec prior_backward(const MlpWs& ws, const Vec& d_mu, const Vec& d_logvar);

    LatentGaussian posterior(const Vec& summary, const Vec& y_full_std, const TrainingMode& mode,
                             MlpWs& ws) const;
    Vec posterior_backward(const MlpWs& ws, const Vec& d_mu, const Vec& d_logvar);

    static Vec sample(const LatentGaussian& g, const Vec& noise);
    static void sample_backward(const LatentGaussian& g, const Vec& noise, const Vec& d_z,
                                Vec& d_mu, Vec& d_logvar);

    Vec decode_full(const Vec& summary, const Vec& z, MlpWs& ws) const;
    // Returns d_summary; adds latent gradient into d_z.
    Vec decode_full_backward(const MlpWs& ws, const Vec& d_out, Vec& d_z);

    TargetPrediction decode_target(const Vec& summary, const Vec& z, const Vec& last_row,
                                   MlpWs& dec_ws, MlpWs& ar_ws) const;
    // d_mean is the gradient on the final (skip-included) mean; d_logvar on
    // the clamped log-variance (empty when homoscedastic). Returns d_summary;
    // accumulates d_z and d_last_row.
    Vec decode_target_backward(const TargetPrediction& pred, const MlpWs& dec_ws,
                               const MlpWs& ar_ws, const Vec& d_mean, const Vec& d_logvar,
                               Vec& d_z, Vec* d_last_row);

    bool training_mode() const { return training_depth_ > 0; }

    // Diagnostic probes for a single layer.
    Mat layer_output(std::size_t layer, const Mat& taps, const Mat& h_in) const;
    Mat se_gate_values(std::size_t layer, const Mat& h_in) const;

    std::string checkpoint_json(const std::string& scaler_json, const std::string& bounds_json) const;
    static WorldModel from_checkpoint_json(const std::string& text, std::string* scaler_json,
                                           std::string* bounds_json);

private:
    friend class TrainingMode;

    struct MlpHandles {
        std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    };
    struct LayerHandles {
        std::size_t ssm_b = 0, ssm_c = 0, ssm_d = 0, ssm_tau = 0;
        std::size_t se_w1 = 0, se_b1 = 0, se_w2 = 0, se_b2 = 0;
        std::size_t glu_wa = 0, glu_ba = 0, glu_wg = 0, glu_bg = 0, glu_wd = 0, glu_bd = 0;
        std::size_t ln1_scale = 0, ln1_shift = 0, ln2_scale = 0, ln2_shift = 0;
    };

    ssm::SsmComponentParams layer_ssm_params(const LayerHandles& lh) const;
    Vec mlp_forward(const MlpHandles& h, const Vec& in, MlpWs& ws) const;
    Vec mlp_backward(const MlpHandles& h, const MlpWs& ws, const Vec& d_out);

    void layer_forward(const LayerHandles& lh, const Mat& taps, const Mat& h_in, LayerWs& ws,
                       Rng* dropout_rng) const;
    void layer_backward(const LayerHandles& lh, const LayerWs& ws, const Mat& taps,
                        const Mat& d_out, Mat& d_in, Mat& d_taps);

    void init_params();

    ModelConfig cfg_;
    ssm::HippoOperator hippo_;
    ParamStore store_;
    std::size_t w_in_ = 0;
    std::vector<LayerHandles> layers_;
    MlpHandles prior_, posterior_, dec_full_, dec_target_, f_ar_;
    std::size_t kappa_ = 0;
    int training_depth_ = 0;
    mutable TapSet tap_cache_;
    mutable bool tap_cache_valid_ = false;
};

// Diagonal-Gaussian KL(q || p), closed form; zero iff q == p.
double kl_diag(const LatentGaussian& q, const LatentGaussian& p);
void kl_diag_backward(const LatentGaussian& q, const LatentGaussian& p, double d_kl,
                      Vec& d_mu_q, Vec& d_logvar_q, Vec& d_mu_p, Vec& d_logvar_p);

} // namespace kpiwm::model
