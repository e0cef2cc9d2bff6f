#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kpiwm/errors.hpp"
#include "kpiwm/model.hpp"
#include "kpiwm/rng.hpp"
#include "oracles.hpp"

using namespace kpiwm;
using namespace kpiwm::model;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.feature_count = 3;
    c.window_len = 6;
    c.embed_dim = 8;
    c.layer_count = 2;
    c.state_size = 4;
    c.mixture_count = 2;
    c.glu_ratio = 1.0;
    c.dropout = 0.0;
    c.latent_dim = 4;
    c.output_dim = 1;
    c.heteroscedastic = true;
    c.init_seed = 7;
    return c;
}

void zero_all_params(WorldModel& m) {
    for (std::size_t i = 0; i < m.params().count(); ++i) m.params().at(i).value.fill(0.0);
}

Mat random_inputs(Rng& rng, std::size_t rows, std::size_t cols) {
    Mat x(rows, cols);
    for (auto& v : x.data()) v = rng.normal();
    return x;
}

} // namespace

TEST_CASE("embed acts as a linear map: selector column") {
    auto cfg = small_config();
    cfg.layer_count = 0;
    WorldModel m(cfg);
    zero_all_params(m);
    m.params().at(m.params().find("w_in")).value(0, 0) = 1.0;

    Rng rng(1);
    const Mat inputs = random_inputs(rng, cfg.window_len, cfg.feature_count);
    const Vec actions = rng.normal_vec(cfg.window_len);
    EncodeWs ws;
    const Vec summary = m.encode(inputs, actions, m.make_tap_set(), ws);
    CHECK(summary[0] == inputs(cfg.window_len - 1, 0));
    for (std::size_t t = 0; t < cfg.window_len; ++t) CHECK(ws.h0(t, 0) == inputs(t, 0));
}

TEST_CASE("zero inputs and actions give a zero embedding") {
    auto cfg = small_config();
    cfg.layer_count = 0;
    WorldModel m(cfg);
    const Mat inputs(cfg.window_len, cfg.feature_count);
    const Vec actions(cfg.window_len, 0.0);
    EncodeWs ws;
    const Vec summary = m.encode(inputs, actions, m.make_tap_set(), ws);
    for (double v : summary) CHECK(v == 0.0);
}

TEST_CASE("encode output shape follows the config") {
    ModelConfig cfg;
    cfg.feature_count = 3;
    cfg.window_len = 4;
    cfg.embed_dim = 5;
    cfg.layer_count = 1;
    cfg.state_size = 2;
    cfg.mixture_count = 1;
    cfg.latent_dim = 2;
    cfg.dropout = 0.0;
    WorldModel m(cfg);
    Rng rng(2);
    EncodeWs ws;
    const Vec summary =
        m.encode(random_inputs(rng, 4, 3), rng.normal_vec(4), m.make_tap_set(), ws);
    CHECK(summary.size() == 5);
    CHECK(ws.final_rows().rows() == 4);
    CHECK(ws.final_rows().cols() == 5);
}

TEST_CASE("se gate is 0.5 per channel at zero weights and permutation invariant") {
    auto cfg = small_config();
    WorldModel m(cfg);
    Rng rng(3);
    const Mat h = random_inputs(rng, cfg.window_len, cfg.embed_dim);

    WorldModel zeroed(cfg);
    zero_all_params(zeroed);
    const Mat gate0 = zeroed.se_gate_values(0, h);
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) CHECK(gate0(0, c) == 0.5);

    const Mat gate = m.se_gate_values(0, h);
    Mat permuted(h.rows(), h.cols());
    for (std::size_t t = 0; t < h.rows(); ++t)
        permuted.set_row(t, h.row((t + 3) % h.rows()));
    const Mat gate_perm = m.se_gate_values(0, permuted);
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
        CHECK(gate(0, c) == doctest::Approx(gate_perm(0, c)).epsilon(1e-15));
        CHECK(gate(0, c) > 0.0);
        CHECK(gate(0, c) < 1.0);
    }
}

TEST_CASE("gate range holds over random inputs") {
    auto cfg = small_config();
    WorldModel m(cfg);
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const Mat h = random_inputs(rng, cfg.window_len, cfg.embed_dim);
        const Mat g = m.se_gate_values(1, h);
        for (double v : g.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("layer with zero taps and zero GLU weights is LN(LN(h))") {
    auto cfg = small_config();
    WorldModel m(cfg);
    zero_all_params(m);
    // Layer norms need their scales back.
    for (std::size_t i = 0; i < m.params().count(); ++i) {
        auto& p = m.params().at(i);
        if (p.name.find("ln") != std::string::npos && p.name.find("scale") != std::string::npos)
            p.value.fill(1.0);
    }
    Rng rng(5);
    const Mat h = random_inputs(rng, cfg.window_len, cfg.embed_dim);
    const Mat zero_taps(cfg.embed_dim, cfg.tap_length());
    const Mat out = m.layer_output(0, zero_taps, h);

    // Reference: row-wise layer norm applied twice.
    const auto ln = [&](const Mat& x) {
        Mat o(x.rows(), x.cols());
        for (std::size_t t = 0; t < x.rows(); ++t) {
            double mu = 0.0, var = 0.0;
            for (std::size_t c = 0; c < x.cols(); ++c) mu += x(t, c);
            mu /= static_cast<double>(x.cols());
            for (std::size_t c = 0; c < x.cols(); ++c)
                var += (x(t, c) - mu) * (x(t, c) - mu);
            var /= static_cast<double>(x.cols());
            for (std::size_t c = 0; c < x.cols(); ++c)
                o(t, c) = (x(t, c) - mu) / std::sqrt(var + 1e-5);
        }
        return o;
    };
    const Mat ref = ln(ln(h));
    for (std::size_t i = 0; i < out.data().size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("layer preserves shape") {
    auto cfg = small_config();
    WorldModel m(cfg);
    Rng rng(6);
    const Mat h = random_inputs(rng, cfg.window_len, cfg.embed_dim);
    const Mat out = m.layer_output(1, m.make_tap_set().per_layer[1], h);
    CHECK(out.rows() == cfg.window_len);
    CHECK(out.cols() == cfg.embed_dim);
}

TEST_CASE("encode is deterministic without augmentation") {
    auto cfg = small_config();
    WorldModel m(cfg);
    Rng rng(8);
    const Mat inputs = random_inputs(rng, cfg.window_len, cfg.feature_count);
    const Vec actions = rng.normal_vec(cfg.window_len);
    const auto taps = m.make_tap_set();
    EncodeWs ws1, ws2;
    const Vec a = m.encode(inputs, actions, taps, ws1);
    const Vec b = m.encode(inputs, actions, taps, ws2);
    CHECK(a == b);
}

TEST_CASE("causal gate makes the full stack strictly causal bitwise") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        ModelConfig cfg;
        cfg.feature_count = 1 + rng.index(4);
        cfg.window_len = 3 + rng.index(6);
        cfg.embed_dim = 2 + rng.index(8);
        cfg.layer_count = 1 + rng.index(3);
        cfg.state_size = 1 + rng.index(4);
        cfg.mixture_count = 1 + rng.index(2);
        cfg.latent_dim = 2;
        cfg.dropout = 0.0;
        cfg.causal_gate = true;
        cfg.init_seed = rng.next_u64();
        WorldModel m(cfg);

        const Mat inputs = random_inputs(rng, cfg.window_len, cfg.feature_count);
        const Vec actions = rng.normal_vec(cfg.window_len);
        const auto taps = m.make_tap_set();
        EncodeWs base;
        m.encode(inputs, actions, taps, base);

        const std::size_t t0 = rng.index(cfg.window_len);
        Mat perturbed = inputs;
        Vec actions2 = actions;
        perturbed(t0, rng.index(cfg.feature_count)) += 5.0;
        actions2[t0] -= 3.0;
        EncodeWs ws;
        m.encode(perturbed, actions2, taps, ws);
        for (std::size_t t = 0; t < t0; ++t)
            for (std::size_t c = 0; c < cfg.embed_dim; ++c)
                CHECK(ws.final_rows()(t, c) == base.final_rows()(t, c));
    }
}

TEST_CASE("prior at zero weights is a standard normal; shapes hold") {
    auto cfg = small_config();
    WorldModel m(cfg);
    zero_all_params(m);
    MlpWs ws;
    const auto g = m.prior(Vec(cfg.embed_dim, 0.3), ws);
    CHECK(g.mu.size() == cfg.latent_dim);
    CHECK(g.logvar.size() == cfg.latent_dim);
    for (std::size_t i = 0; i < cfg.latent_dim; ++i) {
        CHECK(g.mu[i] == 0.0);
        CHECK(g.logvar[i] == 0.0);
    }
}

TEST_CASE("posterior is gated by the training token") {
    auto cfg = small_config();
    WorldModel m(cfg);
    MlpWs ws;
    const Vec summary(cfg.embed_dim, 0.1);
    const Vec label(cfg.feature_count, 0.2);

    WorldModel other(cfg);
    TrainingMode stale(other); // token for a different model
    CHECK_THROWS_AS(m.posterior(summary, label, stale, ws), ModeError);

    TrainingMode token(m);
    const auto g = m.posterior(summary, label, token, ws);
    CHECK(g.mu.size() == cfg.latent_dim);
}

TEST_CASE("distinct labels give distinct posteriors") {
    auto cfg = small_config();
    WorldModel m(cfg);
    TrainingMode token(m);
    MlpWs ws1, ws2;
    const Vec summary(cfg.embed_dim, 0.1);
    const auto a = m.posterior(summary, Vec(cfg.feature_count, 0.0), token, ws1);
    const auto b = m.posterior(summary, Vec(cfg.feature_count, 1.0), token, ws2);
    bool differs = false;
    for (std::size_t i = 0; i < a.mu.size(); ++i)
        if (a.mu[i] != b.mu[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("reparameterized sampling") {
    LatentGaussian g{{0.5, -1.0}, {0.0, 2.0}};
    const Vec z0 = WorldModel::sample(g, {0.0, 0.0});
    CHECK(z0[0] == 0.5);
    CHECK(z0[1] == -1.0);

    LatentGaussian tight{{1.0, 1.0}, {-8.0, -8.0}};
    const Vec zt = WorldModel::sample(tight, {2.0, -2.0});
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(std::abs(zt[i] - 1.0) <= std::exp(-4.0) * 2.0 + 1e-15);

    // MC mean converges to mu.
    Rng rng(10);
    LatentGaussian p{{0.3}, {0.4}};
    double sum = 0.0;
    const int draws = 100000;
    for (int s = 0; s < draws; ++s) sum += WorldModel::sample(p, {rng.normal()})[0];
    const double std = std::exp(0.2);
    CHECK(std::abs(sum / draws - 0.3) < 3.0 * std / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("sample gradients match finite differences") {
    LatentGaussian g{{0.2, -0.4, 0.7}, {0.1, -0.3, 0.5}};
    const Vec noise{0.8, -1.2, 0.3};
    const Vec w{1.0, 2.0, -1.5};
    const auto loss = [&]() { return num::dot(WorldModel::sample(g, noise), w); };
    Vec d_mu(3, 0.0), d_lv(3, 0.0);
    WorldModel::sample_backward(g, noise, w, d_mu, d_lv);
    CHECK(oracle::max_grad_rel_err(loss, g.mu.data(), d_mu.data(), 3) < 1e-6);
    CHECK(oracle::max_grad_rel_err(loss, g.logvar.data(), d_lv.data(), 3) < 1e-6);
}

TEST_CASE("kl closed form") {
    LatentGaussian q{{1.0}, {0.0}};
    LatentGaussian p{{0.0}, {0.0}};
    CHECK(kl_diag(q, p) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(kl_diag(q, q) == 0.0);

    Rng rng(11);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t dz = 1 + rng.index(6);
        LatentGaussian a{rng.normal_vec(dz), rng.normal_vec(dz, 0.0, 0.7)};
        LatentGaussian b{rng.normal_vec(dz), rng.normal_vec(dz, 0.0, 0.7)};
        const double kl = kl_diag(a, b);
        CHECK(kl >= 0.0);
        if (a.mu == b.mu && a.logvar == b.logvar) CHECK(kl == 0.0);
    }
}

TEST_CASE("kl matches a Monte-Carlo estimate") {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t dz = 1 + rng.index(4);
        LatentGaussian q{rng.normal_vec(dz), rng.normal_vec(dz, 0.0, 0.5)};
        LatentGaussian p{rng.normal_vec(dz), rng.normal_vec(dz, 0.0, 0.5)};
        const double closed = kl_diag(q, p);

        const int draws = 200000;
        double sum = 0.0, sumsq = 0.0;
        for (int s = 0; s < draws; ++s) {
            double ratio = 0.0;
            for (std::size_t i = 0; i < dz; ++i) {
                const double eps = rng.normal();
                const double z = q.mu[i] + std::exp(0.5 * q.logvar[i]) * eps;
                const double dq = z - q.mu[i];
                const double dp = z - p.mu[i];
                ratio += -0.5 * (q.logvar[i] + dq * dq / std::exp(q.logvar[i])) +
                         0.5 * (p.logvar[i] + dp * dp / std::exp(p.logvar[i]));
            }
            sum += ratio;
            sumsq += ratio * ratio;
        }
        const double mc = sum / draws;
        const double se =
            std::sqrt((sumsq / draws - mc * mc) / static_cast<double>(draws));
        CHECK(std::abs(closed - mc) < 3.0 * se + 1e-9);
    }
}

TEST_CASE("kl gradients match finite differences") {
    LatentGaussian q{{0.3, -0.2}, {0.1, -0.4}};
    LatentGaussian p{{-0.1, 0.5}, {0.2, 0.3}};
    const auto loss = [&]() { return kl_diag(q, p); };
    Vec dmq(2, 0.0), dlq(2, 0.0), dmp(2, 0.0), dlp(2, 0.0);
    kl_diag_backward(q, p, 1.0, dmq, dlq, dmp, dlp);
    CHECK(oracle::max_grad_rel_err(loss, q.mu.data(), dmq.data(), 2) < 1e-6);
    CHECK(oracle::max_grad_rel_err(loss, q.logvar.data(), dlq.data(), 2) < 1e-6);
    CHECK(oracle::max_grad_rel_err(loss, p.mu.data(), dmp.data(), 2) < 1e-6);
    CHECK(oracle::max_grad_rel_err(loss, p.logvar.data(), dlp.data(), 2) < 1e-6);
}

TEST_CASE("decode_full shapes and zero case") {
    auto cfg = small_config();
    WorldModel m(cfg);
    MlpWs ws;
    const Vec frame = m.decode_full(Vec(cfg.embed_dim, 0.2), Vec(cfg.latent_dim, -0.1), ws);
    CHECK(frame.size() == cfg.feature_count);

    WorldModel z(cfg);
    zero_all_params(z);
    MlpWs ws2;
    const Vec zero = z.decode_full(Vec(cfg.embed_dim, 0.2), Vec(cfg.latent_dim, -0.1), ws2);
    for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("decode_target skip gain and log-variance clamp") {
    auto cfg = small_config();
    WorldModel m(cfg);
    const Vec summary(cfg.embed_dim, 0.3);
    const Vec z(cfg.latent_dim, 0.1);
    const Vec last(cfg.feature_count, 0.5);

    // kappa = 0 turns the skip off.
    m.params().at(m.params().find("kappa")).value(0, 0) = 0.0;
    MlpWs dec1, ar1;
    const auto off = m.decode_target(summary, z, last, dec1, ar1);
    CHECK(off.mean[0] == dec1.out[0]);

    // Force a huge raw log-variance through the bias.
    auto& b2 = m.params().at(m.params().find("dec_target.b2")).value;
    b2(0, cfg.output_dim) = 10.0;
    MlpWs dec2, ar2;
    const auto clamped = m.decode_target(summary, z, last, dec2, ar2);
    CHECK(clamped.logvar[0] == 8.0);
    // Clamping twice is clamping once.
    CHECK(num::clamp(clamped.logvar[0], -8.0, 8.0) == clamped.logvar[0]);

    // Gain approaches but never exceeds 1 in magnitude.
    for (double kappa : {-50.0, -2.0, 0.7, 3.0, 80.0}) {
        m.params().at(m.params().find("kappa")).value(0, 0) = kappa;
        MlpWs d3, a3;
        const auto pred = m.decode_target(summary, z, last, d3, a3);
        CHECK(std::abs(std::tanh(pred.gain_raw)) <= 1.0);
        if (std::abs(kappa) <= 3.0) CHECK(std::abs(std::tanh(pred.gain_raw)) < 1.0);
    }
}

TEST_CASE("encode gradients match finite differences for every group") {
    auto cfg = small_config();
    WorldModel m(cfg);
    Rng rng(13);
    const Mat inputs = random_inputs(rng, cfg.window_len, cfg.feature_count);
    const Vec actions = rng.normal_vec(cfg.window_len);
    Mat w(cfg.window_len, cfg.embed_dim);
    for (auto& v : w.data()) v = rng.normal();

    const auto loss = [&]() {
        EncodeWs ws;
        m.encode(inputs, actions, m.make_tap_set(), ws);
        return num::frobenius_dot(ws.final_rows(), w);
    };

    m.params().zero_grads();
    EncodeWs ws;
    const auto taps = m.make_tap_set();
    m.encode(inputs, actions, taps, ws);
    std::vector<Mat> d_taps;
    m.encode_backward(ws, taps, w, d_taps, nullptr, nullptr);
    m.apply_tap_gradients(d_taps);

    for (std::size_t i = 0; i < m.params().count(); ++i) {
        auto& p = m.params().at(i);
        const double err = oracle::max_grad_rel_err(loss, p.value.data().data(),
                                                    p.grad.data().data(), p.value.size());
        INFO("param group ", p.name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("input gradients flow through encode") {
    auto cfg = small_config();
    cfg.causal_gate = true;
    WorldModel m(cfg);
    Rng rng(14);
    Mat inputs = random_inputs(rng, cfg.window_len, cfg.feature_count);
    Vec actions = rng.normal_vec(cfg.window_len);
    Mat w(cfg.window_len, cfg.embed_dim);
    for (auto& v : w.data()) v = rng.normal();

    const auto loss = [&]() {
        EncodeWs ws;
        m.encode(inputs, actions, m.make_tap_set(), ws);
        return num::frobenius_dot(ws.final_rows(), w);
    };

    m.params().zero_grads();
    EncodeWs ws;
    const auto taps = m.make_tap_set();
    m.encode(inputs, actions, taps, ws);
    std::vector<Mat> d_taps;
    Mat d_inputs(cfg.window_len, cfg.feature_count);
    Vec d_actions(cfg.window_len, 0.0);
    m.encode_backward(ws, taps, w, d_taps, &d_inputs, &d_actions);

    CHECK(oracle::max_grad_rel_err(loss, inputs.data().data(), d_inputs.data().data(),
                                   inputs.size()) < 1e-4);
    CHECK(oracle::max_grad_rel_err(loss, actions.data(), d_actions.data(), actions.size()) <
          1e-4);
}

TEST_CASE("write lock blocks gradient and value mutation") {
    auto cfg = small_config();
    WorldModel m(cfg);
    ParamStore::WriteLock lock(m.params());
    CHECK_THROWS_AS(m.params().zero_grads(), ModeError);
    CHECK_THROWS_AS(m.params().value_mut(0), ModeError);
    Rng rng(15);
    EncodeWs ws;
    const auto taps = m.make_tap_set();
    m.encode(random_inputs(rng, cfg.window_len, cfg.feature_count),
             rng.normal_vec(cfg.window_len), taps, ws); // forward still fine
    std::vector<Mat> d_taps;
    CHECK_THROWS_AS(
        m.encode_backward(ws, taps, Mat(cfg.window_len, cfg.embed_dim), d_taps, nullptr, nullptr),
        ModeError);
}

TEST_CASE("checkpoint round trip preserves parameters and config") {
    auto cfg = small_config();
    WorldModel m(cfg);
    const std::string text = m.checkpoint_json("", "");
    const WorldModel back = WorldModel::from_checkpoint_json(text, nullptr, nullptr);
    CHECK(back.parameter_count() == m.parameter_count());
    for (std::size_t i = 0; i < m.params().count(); ++i)
        CHECK(m.params().at(i).value == back.params().at(i).value);
    CHECK(back.config().heteroscedastic == cfg.heteroscedastic);
}
