#include "kpiwm/model.hpp"

#include <json.hpp>

#include "kpiwm/errors.hpp"

namespace kpiwm::model {

namespace {
constexpr double kLnEps = 1e-5;
constexpr int kCheckpointVersion = 1;

// Row-wise layer norm; caches normalized values and 1/sigma for backward.
void layer_norm_forward(const Mat& x, const Mat& scale, const Mat& shift, Mat& out, Mat& xhat,
                        Vec& inv_sigma) {
    const std::size_t rows = x.rows(), d = x.cols();
    ensure_shape(out, rows, d);
    ensure_shape(xhat, rows, d);
    inv_sigma.assign(rows, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
        const double* xr = x.row_ptr(t);
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dx = xr[c] - mu;
            var += dx * dx;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_sigma[t] = is;
        double* outr = out.row_ptr(t);
        double* xhr = xhat.row_ptr(t);
        for (std::size_t c = 0; c < d; ++c) {
            xhr[c] = (xr[c] - mu) * is;
            outr[c] = scale(0, c) * xhr[c] + shift(0, c);
        }
    }
}

void layer_norm_backward(const Mat& xhat, const Vec& inv_sigma, const Mat& scale,
                         const Mat& d_out, Mat& d_x, Mat& d_scale, Mat& d_shift) {
    const std::size_t rows = xhat.rows(), d = xhat.cols();
    Vec g(d);
    for (std::size_t t = 0; t < rows; ++t) {
        const double* go = d_out.row_ptr(t);
        const double* xhr = xhat.row_ptr(t);
        double g_mean = 0.0, gx_mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            d_scale(0, c) += go[c] * xhr[c];
            d_shift(0, c) += go[c];
            g[c] = go[c] * scale(0, c);
            g_mean += g[c];
            gx_mean += g[c] * xhr[c];
        }
        g_mean /= static_cast<double>(d);
        gx_mean /= static_cast<double>(d);
        double* dxr = d_x.row_ptr(t);
        const double is = inv_sigma[t];
        for (std::size_t c = 0; c < d; ++c)
            dxr[c] += is * (g[c] - g_mean - xhr[c] * gx_mean);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(const std::string& name, std::size_t rows, std::size_t cols) {
    params_.push_back(Param{name, Mat(rows, cols), Mat(rows, cols)});
    return params_.size() - 1;
}

Mat& ParamStore::value_mut(std::size_t h) {
    assert_writable();
    return params_[h].value;
}

Mat& ParamStore::grad(std::size_t h) {
    assert_writable();
    return params_[h].grad;
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

void ParamStore::zero_grads() {
    assert_writable();
    for (auto& p : params_) p.grad.fill(0.0);
}

double ParamStore::grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
        for (double g : p.grad.data()) s += g * g;
    return std::sqrt(s);
}

void ParamStore::scale_grads(double f) {
    assert_writable();
    for (auto& p : params_)
        for (double& g : p.grad.data()) g *= f;
}

void ParamStore::assert_writable() const {
    if (lock_depth_ > 0)
        throw ModeError("parameters are write-locked (validation or frozen evaluation)");
}

int ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return static_cast<int>(i);
    return -1;
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    if (feature_count < 1) throw ConfigError("model: feature_count must be >= 1");
    if (window_len < 1) throw ConfigError("model: window_len must be >= 1");
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (state_size < 1) throw ConfigError("model: state_size must be >= 1");
    if (mixture_count < 1) throw ConfigError("model: mixture_count must be >= 1");
    if (latent_dim < 1) throw ConfigError("model: latent_dim must be >= 1");
    if (!(glu_ratio > 0.0 && glu_ratio < 2.0)) throw ConfigError("model: glu_ratio must be in (0, 2)");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
    if (output_dim != 1 && output_dim != feature_count)
        throw ConfigError("model: output_dim must be 1 or F");
    if (tap_length() < 1) throw ConfigError("model: tap length must be >= 1");
}

std::string ModelConfig::to_json_string() const {
    nlohmann::json j;
    j["feature_count"] = feature_count;
    j["window_len"] = window_len;
    j["embed_dim"] = embed_dim;
    j["layer_count"] = layer_count;
    j["state_size"] = state_size;
    j["mixture_count"] = mixture_count;
    j["tap_len"] = tap_len;
    j["glu_ratio"] = glu_ratio;
    j["dropout"] = dropout;
    j["latent_dim"] = latent_dim;
    j["output_dim"] = output_dim;
    j["heteroscedastic"] = heteroscedastic;
    j["causal_gate"] = causal_gate;
    j["ar_hidden"] = ar_hidden;
    j["init_seed"] = init_seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.feature_count = j.at("feature_count").get<std::size_t>();
    c.window_len = j.at("window_len").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.layer_count = j.at("layer_count").get<std::size_t>();
    c.state_size = j.at("state_size").get<std::size_t>();
    c.mixture_count = j.at("mixture_count").get<std::size_t>();
    c.tap_len = j.at("tap_len").get<std::size_t>();
    c.glu_ratio = j.at("glu_ratio").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.output_dim = j.at("output_dim").get<std::size_t>();
    c.heteroscedastic = j.at("heteroscedastic").get<bool>();
    c.causal_gate = j.at("causal_gate").get<bool>();
    c.ar_hidden = j.at("ar_hidden").get<std::size_t>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// TrainingMode

TrainingMode::TrainingMode(WorldModel& m) : m_(m) { ++m_.training_depth_; }
TrainingMode::~TrainingMode() { --m_.training_depth_; }

// ---------------------------------------------------------------------------
// WorldModel

WorldModel::WorldModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    hippo_ = ssm::build_hippo(cfg_.state_size);

    const std::size_t f = cfg_.feature_count, d = cfg_.embed_dim;
    const std::size_t dse = cfg_.se_hidden(), h = cfg_.glu_hidden();
    const std::size_t dz = cfg_.latent_dim, o = cfg_.output_dim;

    w_in_ = store_.add("w_in", f + 1, d);
    layers_.resize(cfg_.layer_count);
    for (std::size_t l = 0; l < cfg_.layer_count; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        auto& lh = layers_[l];
        lh.ssm_b = store_.add(p + "ssm_b", d, cfg_.state_size);
        lh.ssm_c = store_.add(p + "ssm_c", d, cfg_.state_size);
        lh.ssm_d = store_.add(p + "ssm_d", 1, d);
        lh.ssm_tau = store_.add(p + "ssm_tau", 1, cfg_.mixture_count);
        lh.se_w1 = store_.add(p + "se_w1", d, dse);
        lh.se_b1 = store_.add(p + "se_b1", 1, dse);
        lh.se_w2 = store_.add(p + "se_w2", dse, d);
        lh.se_b2 = store_.add(p + "se_b2", 1, d);
        lh.glu_wa = store_.add(p + "glu_wa", d, h);
        lh.glu_ba = store_.add(p + "glu_ba", 1, h);
        lh.glu_wg = store_.add(p + "glu_wg", d, h);
        lh.glu_bg = store_.add(p + "glu_bg", 1, h);
        lh.glu_wd = store_.add(p + "glu_wd", h, d);
        lh.glu_bd = store_.add(p + "glu_bd", 1, d);
        lh.ln1_scale = store_.add(p + "ln1_scale", 1, d);
        lh.ln1_shift = store_.add(p + "ln1_shift", 1, d);
        lh.ln2_scale = store_.add(p + "ln2_scale", 1, d);
        lh.ln2_shift = store_.add(p + "ln2_shift", 1, d);
    }

    const auto add_mlp = [&](const std::string& name, std::size_t in, std::size_t hidden,
                             std::size_t out) {
        MlpHandles hm;
        hm.w1 = store_.add(name + ".w1", in, hidden);
        hm.b1 = store_.add(name + ".b1", 1, hidden);
        hm.w2 = store_.add(name + ".w2", hidden, out);
        hm.b2 = store_.add(name + ".b2", 1, out);
        return hm;
    };
    prior_ = add_mlp("prior", d, d, 2 * dz);
    posterior_ = add_mlp("posterior", d + f, d, 2 * dz);
    dec_full_ = add_mlp("dec_full", d + dz, d, f);
    dec_target_ = add_mlp("dec_target", d + dz, d, cfg_.target_head_width());
    f_ar_ = add_mlp("f_ar", f, cfg_.ar_hidden, o);
    kappa_ = store_.add("kappa", 1, 1);

    init_params();
}

void WorldModel::init_params() {
    Rng rng = Rng::stream(cfg_.init_seed, {0x1417});
    for (std::size_t i = 0; i < store_.count(); ++i) {
        auto& p = store_.at(i);
        const auto& name = p.name;
        const auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (name == "kappa") {
            p.value(0, 0) = 0.5;
        } else if (ends_with("ln1_scale") || ends_with("ln2_scale")) {
            p.value.fill(1.0);
        } else if (ends_with("ln1_shift") || ends_with("ln2_shift")) {
            p.value.fill(0.0);
        } else if (ends_with("ssm_tau")) {
            // Multi-scale init: discretization steps log-spaced in [0.1, 10].
            const std::size_t m = p.value.cols();
            for (std::size_t k = 0; k < m; ++k) {
                const double frac = m == 1 ? 0.5 : static_cast<double>(k) / static_cast<double>(m - 1);
                const double dt = std::exp(std::log(0.1) + frac * (std::log(10.0) - std::log(0.1)));
                p.value(0, k) = std::log(std::expm1(std::max(dt - ssm::kEpsilonDt, 1e-8)));
            }
        } else if (ends_with("ssm_d")) {
            p.value.fill(0.0);
        } else if (ends_with(".b1") || ends_with(".b2") || ends_with("se_b1") ||
                   ends_with("se_b2") || ends_with("glu_ba") || ends_with("glu_bg") ||
                   ends_with("glu_bd")) {
            p.value.fill(0.0);
        } else {
            const double scale = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
            for (auto& x : p.value.data()) x = rng.normal(0.0, scale);
        }
    }
}

ssm::SsmComponentParams WorldModel::layer_ssm_params(const LayerHandles& lh) const {
    ssm::SsmComponentParams p;
    p.b = store_.value(lh.ssm_b);
    p.c = store_.value(lh.ssm_c);
    p.d = store_.value(lh.ssm_d).data();
    p.tau = store_.value(lh.ssm_tau).data();
    return p;
}

TapSet WorldModel::make_tap_set() const {
    TapSet taps;
    taps.per_layer.reserve(layers_.size());
    for (const auto& lh : layers_)
        taps.per_layer.push_back(ssm::make_taps(hippo_, layer_ssm_params(lh), cfg_.tap_length()));
    return taps;
}

const TapSet& WorldModel::cached_taps() const {
    if (!tap_cache_valid_) {
        tap_cache_ = make_tap_set();
        tap_cache_valid_ = true;
    }
    return tap_cache_;
}

void WorldModel::invalidate_taps() { tap_cache_valid_ = false; }

Vec WorldModel::mlp_forward(const MlpHandles& h, const Vec& in, MlpWs& ws) const {
    const Mat& w1 = store_.value(h.w1);
    const Mat& w2 = store_.value(h.w2);
    if (in.size() != w1.rows()) throw ShapeError("mlp: input width mismatch");
    ws.in = in;
    ws.a1.assign(w1.cols(), 0.0);
    num::vec_mat(in.data(), w1, ws.a1.data());
    const Mat& b1 = store_.value(h.b1);
    for (std::size_t i = 0; i < ws.a1.size(); ++i) ws.a1[i] += b1(0, i);
    ws.h1.resize(ws.a1.size());
    for (std::size_t i = 0; i < ws.a1.size(); ++i) ws.h1[i] = num::gelu(ws.a1[i]);
    ws.out.assign(w2.cols(), 0.0);
    num::vec_mat(ws.h1.data(), w2, ws.out.data());
    const Mat& b2 = store_.value(h.b2);
    for (std::size_t i = 0; i < ws.out.size(); ++i) ws.out[i] += b2(0, i);
    return ws.out;
}

Vec WorldModel::mlp_backward(const MlpHandles& h, const MlpWs& ws, const Vec& d_out) {
    store_.assert_writable();
    Mat& dw2 = store_.grad(h.w2);
    Mat& db2 = store_.grad(h.b2);
    for (std::size_t j = 0; j < d_out.size(); ++j) db2(0, j) += d_out[j];
    for (std::size_t i = 0; i < ws.h1.size(); ++i) {
        const double hi = ws.h1[i];
        double* row = dw2.row_ptr(i);
        for (std::size_t j = 0; j < d_out.size(); ++j) row[j] += hi * d_out[j];
    }
    Vec d_h1(ws.h1.size());
    num::vec_mat_t(d_out.data(), store_.value(h.w2), d_h1.data());
    Vec d_a1(ws.a1.size());
    for (std::size_t i = 0; i < d_a1.size(); ++i) d_a1[i] = d_h1[i] * num::gelu_grad(ws.a1[i]);

    Mat& dw1 = store_.grad(h.w1);
    Mat& db1 = store_.grad(h.b1);
    for (std::size_t j = 0; j < d_a1.size(); ++j) db1(0, j) += d_a1[j];
    for (std::size_t i = 0; i < ws.in.size(); ++i) {
        const double xi = ws.in[i];
        if (xi == 0.0) continue;
        double* row = dw1.row_ptr(i);
        for (std::size_t j = 0; j < d_a1.size(); ++j) row[j] += xi * d_a1[j];
    }
    Vec d_in(ws.in.size());
    num::vec_mat_t(d_a1.data(), store_.value(h.w1), d_in.data());
    return d_in;
}

void WorldModel::layer_forward(const LayerHandles& lh, const Mat& taps, const Mat& h_in,
                               LayerWs& ws, Rng* dropout_rng) const {
    const std::size_t len = h_in.rows(), d = h_in.cols();
    const std::size_t dse = cfg_.se_hidden(), h = cfg_.glu_hidden();
    ws.h_in = h_in;
    ssm::causal_depthwise_conv_into(h_in, taps, ws.u);

    const Mat& se_w1 = store_.value(lh.se_w1);
    const Mat& se_b1 = store_.value(lh.se_b1);
    const Mat& se_w2 = store_.value(lh.se_w2);
    const Mat& se_b2 = store_.value(lh.se_b2);

    const std::size_t gate_rows = cfg_.causal_gate ? len : 1;
    ensure_shape(ws.s, gate_rows, d);
    ensure_shape(ws.a1, gate_rows, dse);
    ensure_shape(ws.h1, gate_rows, dse);
    ensure_shape(ws.a2, gate_rows, d);
    ensure_shape(ws.g, gate_rows, d);

    if (cfg_.causal_gate) {
        // Running mean over rows <= t keeps the gate per-step causal.
        Vec acc(d, 0.0);
        for (std::size_t t = 0; t < len; ++t) {
            const double* hr = h_in.row_ptr(t);
            for (std::size_t c = 0; c < d; ++c) acc[c] += hr[c];
            for (std::size_t c = 0; c < d; ++c)
                ws.s(t, c) = acc[c] / static_cast<double>(t + 1);
        }
    } else {
        ws.s.fill(0.0);
        for (std::size_t t = 0; t < len; ++t) {
            const double* hr = h_in.row_ptr(t);
            for (std::size_t c = 0; c < d; ++c) ws.s(0, c) += hr[c];
        }
        for (std::size_t c = 0; c < d; ++c) ws.s(0, c) /= static_cast<double>(len);
    }
    for (std::size_t r = 0; r < gate_rows; ++r) {
        num::vec_mat(ws.s.row_ptr(r), se_w1, ws.a1.row_ptr(r));
        for (std::size_t i = 0; i < dse; ++i) {
            ws.a1(r, i) += se_b1(0, i);
            ws.h1(r, i) = num::gelu(ws.a1(r, i));
        }
        num::vec_mat(ws.h1.row_ptr(r), se_w2, ws.a2.row_ptr(r));
        for (std::size_t c = 0; c < d; ++c) {
            ws.a2(r, c) += se_b2(0, c);
            ws.g(r, c) = num::sigmoid(ws.a2(r, c));
        }
    }

    ensure_shape(ws.sum1, len, d);
    for (std::size_t t = 0; t < len; ++t) {
        const std::size_t r = cfg_.causal_gate ? t : 0;
        for (std::size_t c = 0; c < d; ++c)
            ws.sum1(t, c) = h_in(t, c) + ws.u(t, c) * ws.g(r, c);
    }
    layer_norm_forward(ws.sum1, store_.value(lh.ln1_scale), store_.value(lh.ln1_shift), ws.y,
                       ws.xhat1, ws.inv_sigma1);

    const Mat& wa = store_.value(lh.glu_wa);
    const Mat& ba = store_.value(lh.glu_ba);
    const Mat& wg = store_.value(lh.glu_wg);
    const Mat& bg = store_.value(lh.glu_bg);
    const Mat& wd = store_.value(lh.glu_wd);
    const Mat& bd = store_.value(lh.glu_bd);

    ensure_shape(ws.ga, len, h);
    ensure_shape(ws.gg, len, h);
    ensure_shape(ws.act, len, h);
    ensure_shape(ws.gate2, len, h);
    ensure_shape(ws.prod, len, h);
    ensure_shape(ws.z, len, d);
    for (std::size_t t = 0; t < len; ++t) {
        num::vec_mat(ws.y.row_ptr(t), wa, ws.ga.row_ptr(t));
        num::vec_mat(ws.y.row_ptr(t), wg, ws.gg.row_ptr(t));
        for (std::size_t i = 0; i < h; ++i) {
            ws.ga(t, i) += ba(0, i);
            ws.gg(t, i) += bg(0, i);
            ws.act(t, i) = num::gelu(ws.ga(t, i));
            ws.gate2(t, i) = num::sigmoid(ws.gg(t, i));
            ws.prod(t, i) = ws.act(t, i) * ws.gate2(t, i);
        }
        num::vec_mat(ws.prod.row_ptr(t), wd, ws.z.row_ptr(t));
        for (std::size_t c = 0; c < d; ++c) ws.z(t, c) += bd(0, c);
    }

    if (dropout_rng != nullptr && cfg_.dropout > 0.0) {
        const double keep = 1.0 - cfg_.dropout;
        ws.drop_mask = Mat(len, d);
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t c = 0; c < d; ++c) {
                const double m = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
                ws.drop_mask(t, c) = m;
                ws.z(t, c) *= m;
            }
    } else {
        ws.drop_mask = Mat();
    }

    ensure_shape(ws.sum2, len, d);
    for (std::size_t i = 0; i < ws.sum2.data().size(); ++i)
        ws.sum2.data()[i] = ws.y.data()[i] + ws.z.data()[i];
    layer_norm_forward(ws.sum2, store_.value(lh.ln2_scale), store_.value(lh.ln2_shift), ws.out,
                       ws.xhat2, ws.inv_sigma2);
}

void WorldModel::layer_backward(const LayerHandles& lh, const LayerWs& ws, const Mat& taps,
                                const Mat& d_out, Mat& d_in, Mat& d_taps) {
    store_.assert_writable();
    const std::size_t len = ws.h_in.rows(), d = ws.h_in.cols();
    const std::size_t h = cfg_.glu_hidden();

    Mat d_sum2(len, d);
    layer_norm_backward(ws.xhat2, ws.inv_sigma2, store_.value(lh.ln2_scale), d_out, d_sum2,
                        store_.grad(lh.ln2_scale), store_.grad(lh.ln2_shift));

    Mat d_y = d_sum2; // residual branch
    Mat d_z = d_sum2;
    if (!ws.drop_mask.empty())
        for (std::size_t i = 0; i < d_z.data().size(); ++i)
            d_z.data()[i] *= ws.drop_mask.data()[i];

    const Mat& wa = store_.value(lh.glu_wa);
    const Mat& wg = store_.value(lh.glu_wg);
    const Mat& wd = store_.value(lh.glu_wd);
    Mat& dwa = store_.grad(lh.glu_wa);
    Mat& dba = store_.grad(lh.glu_ba);
    Mat& dwg = store_.grad(lh.glu_wg);
    Mat& dbg = store_.grad(lh.glu_bg);
    Mat& dwd = store_.grad(lh.glu_wd);
    Mat& dbd = store_.grad(lh.glu_bd);

    Vec d_prod(h), d_ga(h), d_gg(h), d_row(d);
    for (std::size_t t = 0; t < len; ++t) {
        const double* dzr = d_z.row_ptr(t);
        for (std::size_t c = 0; c < d; ++c) dbd(0, c) += dzr[c];
        for (std::size_t i = 0; i < h; ++i) {
            const double pi = ws.prod(t, i);
            double* row = dwd.row_ptr(i);
            for (std::size_t c = 0; c < d; ++c) row[c] += pi * dzr[c];
        }
        num::vec_mat_t(dzr, wd, d_prod.data());
        for (std::size_t i = 0; i < h; ++i) {
            const double da = d_prod[i] * ws.gate2(t, i);
            const double dg = d_prod[i] * ws.act(t, i);
            d_ga[i] = da * num::gelu_grad(ws.ga(t, i));
            const double sg = ws.gate2(t, i);
            d_gg[i] = dg * sg * (1.0 - sg);
        }
        const double* yr = ws.y.row_ptr(t);
        for (std::size_t i = 0; i < h; ++i) {
            dba(0, i) += d_ga[i];
            dbg(0, i) += d_gg[i];
        }
        for (std::size_t c = 0; c < d; ++c) {
            const double yc = yr[c];
            if (yc != 0.0) {
                double* rwa = dwa.row_ptr(c);
                double* rwg = dwg.row_ptr(c);
                for (std::size_t i = 0; i < h; ++i) {
                    rwa[i] += yc * d_ga[i];
                    rwg[i] += yc * d_gg[i];
                }
            }
        }
        num::vec_mat_t(d_ga.data(), wa, d_row.data());
        double* dyr = d_y.row_ptr(t);
        for (std::size_t c = 0; c < d; ++c) dyr[c] += d_row[c];
        num::vec_mat_t(d_gg.data(), wg, d_row.data());
        for (std::size_t c = 0; c < d; ++c) dyr[c] += d_row[c];
    }

    Mat d_sum1(len, d);
    layer_norm_backward(ws.xhat1, ws.inv_sigma1, store_.value(lh.ln1_scale), d_y, d_sum1,
                        store_.grad(lh.ln1_scale), store_.grad(lh.ln1_shift));

    if (d_in.rows() != len || d_in.cols() != d) d_in = Mat(len, d);
    for (std::size_t i = 0; i < d_in.data().size(); ++i) d_in.data()[i] += d_sum1.data()[i];

    // Gate branch: hhat = u * g
    const std::size_t gate_rows = cfg_.causal_gate ? len : 1;
    Mat d_u(len, d);
    Mat d_g(gate_rows, d);
    for (std::size_t t = 0; t < len; ++t) {
        const std::size_t r = cfg_.causal_gate ? t : 0;
        for (std::size_t c = 0; c < d; ++c) {
            const double ds = d_sum1(t, c);
            d_u(t, c) = ds * ws.g(r, c);
            d_g(r, c) += ds * ws.u(t, c);
        }
    }

    const Mat& se_w1 = store_.value(lh.se_w1);
    const Mat& se_w2 = store_.value(lh.se_w2);
    Mat& dse_w1 = store_.grad(lh.se_w1);
    Mat& dse_b1 = store_.grad(lh.se_b1);
    Mat& dse_w2 = store_.grad(lh.se_w2);
    Mat& dse_b2 = store_.grad(lh.se_b2);
    const std::size_t dse = cfg_.se_hidden();

    Mat d_s(gate_rows, d);
    Vec d_a2(d), d_h1(dse), d_a1(dse), d_srow(d);
    for (std::size_t r = 0; r < gate_rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            const double g = ws.g(r, c);
            d_a2[c] = d_g(r, c) * g * (1.0 - g);
            dse_b2(0, c) += d_a2[c];
        }
        for (std::size_t i = 0; i < dse; ++i) {
            const double hi = ws.h1(r, i);
            double* row = dse_w2.row_ptr(i);
            for (std::size_t c = 0; c < d; ++c) row[c] += hi * d_a2[c];
        }
        num::vec_mat_t(d_a2.data(), se_w2, d_h1.data());
        for (std::size_t i = 0; i < dse; ++i) {
            d_a1[i] = d_h1[i] * num::gelu_grad(ws.a1(r, i));
            dse_b1(0, i) += d_a1[i];
        }
        const double* sr = ws.s.row_ptr(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double sc = sr[c];
            if (sc != 0.0) {
                double* row = dse_w1.row_ptr(c);
                for (std::size_t i = 0; i < dse; ++i) row[i] += sc * d_a1[i];
            }
        }
        num::vec_mat_t(d_a1.data(), se_w1, d_srow.data());
        for (std::size_t c = 0; c < d; ++c) d_s(r, c) = d_srow[c];
    }

    if (cfg_.causal_gate) {
        // s(t) = mean of rows <= t: suffix-accumulate ds(t)/(t+1).
        Vec acc(d, 0.0);
        for (std::size_t t = len; t-- > 0;) {
            for (std::size_t c = 0; c < d; ++c) acc[c] += d_s(t, c) / static_cast<double>(t + 1);
            double* dir = d_in.row_ptr(t);
            for (std::size_t c = 0; c < d; ++c) dir[c] += acc[c];
        }
    } else {
        for (std::size_t t = 0; t < len; ++t) {
            double* dir = d_in.row_ptr(t);
            for (std::size_t c = 0; c < d; ++c)
                dir[c] += d_s(0, c) / static_cast<double>(len);
        }
    }

    ssm::causal_depthwise_conv_backward(ws.h_in, taps, d_u, d_in, d_taps);
}

Vec WorldModel::encode(const Mat& inputs, const Vec& actions, const TapSet& taps, EncodeWs& ws,
                       Rng* dropout_rng) const {
    const std::size_t len = cfg_.window_len, f = cfg_.feature_count, d = cfg_.embed_dim;
    if (inputs.rows() != len || inputs.cols() != f)
        throw ShapeError("encode: inputs must be L x F");
    if (actions.size() != len) throw ShapeError("encode: actions must have length L");
    if (taps.per_layer.size() != layers_.size()) throw ShapeError("encode: tap set mismatch");

    ensure_shape(ws.x_aug, len, f + 1);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t j = 0; j < f; ++j) ws.x_aug(t, j) = inputs(t, j);
        ws.x_aug(t, f) = actions[t];
    }
    const Mat& w_in = store_.value(w_in_);
    ensure_shape(ws.h0, len, d);
    for (std::size_t t = 0; t < len; ++t) num::vec_mat(ws.x_aug.row_ptr(t), w_in, ws.h0.row_ptr(t));

    ws.layers.resize(layers_.size());
    const Mat* cur = &ws.h0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layer_forward(layers_[l], taps.per_layer[l], *cur, ws.layers[l], dropout_rng);
        cur = &ws.layers[l].out;
    }
    return cur->row(len - 1);
}

void WorldModel::encode_backward(const EncodeWs& ws, const TapSet& taps, const Mat& d_out_rows,
                                 std::vector<Mat>& d_taps, Mat* d_inputs, Vec* d_actions) {
    store_.assert_writable();
    const std::size_t len = cfg_.window_len, f = cfg_.feature_count;
    if (d_taps.size() != layers_.size()) {
        d_taps.assign(layers_.size(), Mat());
        for (std::size_t l = 0; l < layers_.size(); ++l)
            d_taps[l] = Mat(taps.per_layer[l].rows(), taps.per_layer[l].cols());
    }

    Mat d_cur = d_out_rows;
    for (std::size_t l = layers_.size(); l-- > 0;) {
        Mat d_prev;
        layer_backward(layers_[l], ws.layers[l], taps.per_layer[l], d_cur, d_prev, d_taps[l]);
        d_cur = std::move(d_prev);
    }

    // Embed backward: h0 = x_aug * w_in.
    const Mat& w_in = store_.value(w_in_);
    Mat& dw_in = store_.grad(w_in_);
    for (std::size_t t = 0; t < len; ++t) {
        const double* xr = ws.x_aug.row_ptr(t);
        const double* dr = d_cur.row_ptr(t);
        for (std::size_t i = 0; i < f + 1; ++i) {
            const double xi = xr[i];
            if (xi == 0.0) continue;
            double* row = dw_in.row_ptr(i);
            for (std::size_t c = 0; c < cfg_.embed_dim; ++c) row[c] += xi * dr[c];
        }
    }
    if (d_inputs != nullptr || d_actions != nullptr) {
        Vec d_xaug(f + 1);
        for (std::size_t t = 0; t < len; ++t) {
            num::vec_mat_t(d_cur.row_ptr(t), w_in, d_xaug.data());
            if (d_inputs != nullptr)
                for (std::size_t j = 0; j < f; ++j) (*d_inputs)(t, j) += d_xaug[j];
            if (d_actions != nullptr) (*d_actions)[t] += d_xaug[f];
        }
    }
}

void WorldModel::apply_tap_gradients(const std::vector<Mat>& d_taps) {
    store_.assert_writable();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& lh = layers_[l];
        ssm::TapGrads tg;
        tg.b = Mat(cfg_.embed_dim, cfg_.state_size);
        tg.c = Mat(cfg_.embed_dim, cfg_.state_size);
        tg.d.assign(cfg_.embed_dim, 0.0);
        tg.tau.assign(cfg_.mixture_count, 0.0);
        ssm::taps_backward(hippo_, layer_ssm_params(lh), cfg_.tap_length(), d_taps[l], tg);
        Mat& gb = store_.grad(lh.ssm_b);
        Mat& gc = store_.grad(lh.ssm_c);
        Mat& gd = store_.grad(lh.ssm_d);
        Mat& gt = store_.grad(lh.ssm_tau);
        for (std::size_t i = 0; i < gb.data().size(); ++i) gb.data()[i] += tg.b.data()[i];
        for (std::size_t i = 0; i < gc.data().size(); ++i) gc.data()[i] += tg.c.data()[i];
        for (std::size_t c = 0; c < cfg_.embed_dim; ++c) gd(0, c) += tg.d[c];
        for (std::size_t m = 0; m < cfg_.mixture_count; ++m) gt(0, m) += tg.tau[m];
    }
}

Mat WorldModel::layer_output(std::size_t layer, const Mat& taps, const Mat& h_in) const {
    LayerWs ws;
    layer_forward(layers_.at(layer), taps, h_in, ws, nullptr);
    return ws.out;
}

Mat WorldModel::se_gate_values(std::size_t layer, const Mat& h_in) const {
    LayerWs ws;
    const Mat zero_taps(cfg_.embed_dim, cfg_.tap_length());
    layer_forward(layers_.at(layer), zero_taps, h_in, ws, nullptr);
    return ws.g;
}

LatentGaussian WorldModel::prior(const Vec& summary, MlpWs& ws) const {
    const Vec out = mlp_forward(prior_, summary, ws);
    const std::size_t dz = cfg_.latent_dim;
    return LatentGaussian{Vec(out.begin(), out.begin() + dz), Vec(out.begin() + dz, out.end())};
}

Vec WorldModel::prior_backward(const MlpWs& ws, const Vec& d_mu, const Vec& d_logvar) {
    Vec d_out(2 * cfg_.latent_dim);
    for (std::size_t i = 0; i < cfg_.latent_dim; ++i) {
        d_out[i] = d_mu[i];
        d_out[cfg_.latent_dim + i] = d_logvar[i];
    }
    return mlp_backward(prior_, ws, d_out);
}

LatentGaussian WorldModel::posterior(const Vec& summary, const Vec& y_full_std,
                                     const TrainingMode&, MlpWs& ws) const {
    if (training_depth_ <= 0)
        throw ModeError("posterior encoder is unavailable outside training (leakage guard)");
    Vec in(summary);
    in.insert(in.end(), y_full_std.begin(), y_full_std.end());
    const Vec out = mlp_forward(posterior_, in, ws);
    const std::size_t dz = cfg_.latent_dim;
    return LatentGaussian{Vec(out.begin(), out.begin() + dz), Vec(out.begin() + dz, out.end())};
}

Vec WorldModel::posterior_backward(const MlpWs& ws, const Vec& d_mu, const Vec& d_logvar) {
    Vec d_out(2 * cfg_.latent_dim);
    for (std::size_t i = 0; i < cfg_.latent_dim; ++i) {
        d_out[i] = d_mu[i];
        d_out[cfg_.latent_dim + i] = d_logvar[i];
    }
    Vec d_in = mlp_backward(posterior_, ws, d_out);
    d_in.resize(cfg_.embed_dim); // gradient w.r.t. the label part is unused
    return d_in;
}

Vec WorldModel::sample(const LatentGaussian& g, const Vec& noise) {
    if (noise.size() != g.mu.size()) throw ShapeError("sample: noise width mismatch");
    Vec z(g.mu.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = g.mu[i] + std::exp(0.5 * g.logvar[i]) * noise[i];
    return z;
}

void WorldModel::sample_backward(const LatentGaussian& g, const Vec& noise, const Vec& d_z,
                                 Vec& d_mu, Vec& d_logvar) {
    for (std::size_t i = 0; i < d_z.size(); ++i) {
        d_mu[i] += d_z[i];
        d_logvar[i] += d_z[i] * noise[i] * 0.5 * std::exp(0.5 * g.logvar[i]);
    }
}

Vec WorldModel::decode_full(const Vec& summary, const Vec& z, MlpWs& ws) const {
    Vec in(summary);
    in.insert(in.end(), z.begin(), z.end());
    return mlp_forward(dec_full_, in, ws);
}

Vec WorldModel::decode_full_backward(const MlpWs& ws, const Vec& d_out, Vec& d_z) {
    Vec d_in = mlp_backward(dec_full_, ws, d_out);
    for (std::size_t i = 0; i < cfg_.latent_dim; ++i) d_z[i] += d_in[cfg_.embed_dim + i];
    d_in.resize(cfg_.embed_dim);
    return d_in;
}

TargetPrediction WorldModel::decode_target(const Vec& summary, const Vec& z, const Vec& last_row,
                                           MlpWs& dec_ws, MlpWs& ar_ws) const {
    Vec in(summary);
    in.insert(in.end(), z.begin(), z.end());
    const Vec out = mlp_forward(dec_target_, in, dec_ws);
    const Vec b = mlp_forward(f_ar_, last_row, ar_ws);

    const std::size_t o = cfg_.output_dim;
    TargetPrediction pred;
    pred.gain_raw = store_.value(kappa_)(0, 0);
    pred.ar_skip = b;
    pred.mean.resize(o);
    const double gain = std::tanh(pred.gain_raw);
    for (std::size_t i = 0; i < o; ++i) pred.mean[i] = out[i] + gain * b[i];
    if (cfg_.heteroscedastic) {
        pred.logvar.resize(o);
        for (std::size_t i = 0; i < o; ++i)
            pred.logvar[i] = num::clamp(out[o + i], kLogVarLo, kLogVarHi);
    }
    return pred;
}

Vec WorldModel::decode_target_backward(const TargetPrediction& pred, const MlpWs& dec_ws,
                                       const MlpWs& ar_ws, const Vec& d_mean,
                                       const Vec& d_logvar, Vec& d_z, Vec* d_last_row) {
    store_.assert_writable();
    const std::size_t o = cfg_.output_dim;
    Vec d_out(dec_ws.out.size(), 0.0);
    for (std::size_t i = 0; i < o; ++i) d_out[i] = d_mean[i];
    if (cfg_.heteroscedastic && !d_logvar.empty()) {
        for (std::size_t i = 0; i < o; ++i) {
            const double raw = dec_ws.out[o + i];
            const bool inside = raw > kLogVarLo && raw < kLogVarHi;
            d_out[o + i] = inside ? d_logvar[i] : 0.0;
        }
    }

    const double gain = std::tanh(pred.gain_raw);
    double d_kappa = 0.0;
    Vec d_b(o);
    for (std::size_t i = 0; i < o; ++i) {
        d_b[i] = d_mean[i] * gain;
        d_kappa += d_mean[i] * pred.ar_skip[i];
    }
    store_.grad(kappa_)(0, 0) += d_kappa * (1.0 - gain * gain);

    const Vec d_ar_in = mlp_backward(f_ar_, ar_ws, d_b);
    if (d_last_row != nullptr)
        for (std::size_t j = 0; j < d_ar_in.size(); ++j) (*d_last_row)[j] += d_ar_in[j];

    Vec d_in = mlp_backward(dec_target_, dec_ws, d_out);
    for (std::size_t i = 0; i < cfg_.latent_dim; ++i) d_z[i] += d_in[cfg_.embed_dim + i];
    d_in.resize(cfg_.embed_dim);
    return d_in;
}

std::string WorldModel::checkpoint_json(const std::string& scaler_json,
                                        const std::string& bounds_json) const {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["model_config"] = nlohmann::json::parse(cfg_.to_json_string());
    nlohmann::json params;
    for (std::size_t i = 0; i < store_.count(); ++i) {
        const auto& p = store_.at(i);
        params[p.name] = p.value.data();
    }
    j["params"] = std::move(params);
    if (!scaler_json.empty()) j["scaler"] = nlohmann::json::parse(scaler_json);
    if (!bounds_json.empty()) j["bounds"] = nlohmann::json::parse(bounds_json);
    return j.dump();
}

WorldModel WorldModel::from_checkpoint_json(const std::string& text, std::string* scaler_json,
                                            std::string* bounds_json) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format_version", 0) != kCheckpointVersion)
        throw VersionError("unsupported checkpoint format version");
    WorldModel m(ModelConfig::from_json_string(j.at("model_config").dump()));
    const auto& params = j.at("params");
    for (std::size_t i = 0; i < m.store_.count(); ++i) {
        auto& p = m.store_.at(i);
        const auto it = params.find(p.name);
        if (it == params.end()) throw VersionError("checkpoint missing parameter " + p.name);
        const auto vals = it->get<Vec>();
        if (vals.size() != p.value.size())
            throw VersionError("checkpoint parameter size mismatch for " + p.name);
        std::copy(vals.begin(), vals.end(), p.value.data().begin());
    }
    if (scaler_json != nullptr)
        *scaler_json = j.contains("scaler") ? j.at("scaler").dump() : std::string();
    if (bounds_json != nullptr)
        *bounds_json = j.contains("bounds") ? j.at("bounds").dump() : std::string();
    return m;
}

double kl_diag(const LatentGaussian& q, const LatentGaussian& p) {
    double kl = 0.0;
    for (std::size_t i = 0; i < q.mu.size(); ++i) {
        const double vq = std::exp(q.logvar[i]);
        const double vp = std::exp(p.logvar[i]);
        const double dm = p.mu[i] - q.mu[i];
        kl += vq / vp + dm * dm / vp - 1.0 + p.logvar[i] - q.logvar[i];
    }
    return 0.5 * kl;
}

void kl_diag_backward(const LatentGaussian& q, const LatentGaussian& p, double d_kl, Vec& d_mu_q,
                      Vec& d_logvar_q, Vec& d_mu_p, Vec& d_logvar_p) {
    for (std::size_t i = 0; i < q.mu.size(); ++i) {
        const double vq = std::exp(q.logvar[i]);
        const double vp = std::exp(p.logvar[i]);
        const double dm = p.mu[i] - q.mu[i];
        d_mu_q[i] += d_kl * (-dm / vp);
        d_mu_p[i] += d_kl * (dm / vp);
        d_logvar_q[i] += d_kl * 0.5 * (vq / vp - 1.0);
        d_logvar_p[i] += d_kl * 0.5 * (1.0 - vq / vp - dm * dm / vp);
    }
}

} // namespace kpiwm::model
