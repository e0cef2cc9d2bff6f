#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "kpiwm/data.hpp"
#include "kpiwm/errors.hpp"
#include "kpiwm/rng.hpp"
#include "oracles.hpp"

using namespace kpiwm;
using namespace kpiwm::data;

namespace {

std::string write_temp_csv(const std::string& name, const std::string& body) {
    const std::string path = "/tmp/" + name;
    std::ofstream out(path);
    out << body;
    return path;
}

CsvSchema basic_schema() {
    CsvSchema s;
    s.timestamp_column = "ts";
    s.target_column = "rsrp";
    s.action_column = "prb";
    return s;
}

// Trace with a chosen PRB column and simple ramps elsewhere.
KpiTrace ramp_trace(std::size_t t_len, Vec prb = {}) {
    KpiTrace trace;
    trace.timestamps.resize(t_len);
    trace.values = Mat(t_len, 3);
    trace.feature_names = {"rsrp", "sinr", "prb"};
    trace.target_index = 0;
    trace.action_index = 2;
    for (std::size_t t = 0; t < t_len; ++t) {
        trace.timestamps[t] = static_cast<std::int64_t>(t);
        trace.values(t, 0) = static_cast<double>(t);
        trace.values(t, 1) = 10.0 - 0.1 * static_cast<double>(t);
        trace.values(t, 2) = prb.empty() ? 30.0 + static_cast<double>(t % 7) : prb[t];
    }
    return trace;
}

} // namespace

TEST_CASE("ingest_csv maps schema columns") {
    const auto path = write_temp_csv("ingest_basic.csv",
                                     "ts,rsrp,sinr,prb\n"
                                     "0,-90.5,12.0,40\n"
                                     "1,-91.0,11.5,42\n"
                                     "2,-90.0,12.5,44\n");
    const auto trace = ingest_csv(path, basic_schema());
    CHECK(trace.length() == 3);
    CHECK(trace.feature_count() == 3);
    CHECK(trace.target_index == 0);
    CHECK(trace.action_index == 2);
    CHECK(trace.dropped_rows == 0);
    CHECK(trace.values(1, 2) == 42.0);
    std::remove(path.c_str());
}

TEST_CASE("ingest_csv drops non-finite rows and counts them") {
    const auto path = write_temp_csv("ingest_nan.csv",
                                     "ts,rsrp,sinr,prb\n"
                                     "0,-90.5,12.0,40\n"
                                     "1,-91.0,NaN,42\n"
                                     "2,-90.0,12.5,44\n");
    const auto trace = ingest_csv(path, basic_schema());
    CHECK(trace.length() == 2);
    CHECK(trace.dropped_rows == 1);
    CHECK(trace.timestamps[1] == 2);
    std::remove(path.c_str());
}

TEST_CASE("ingest_csv reports the missing column by name") {
    const auto path = write_temp_csv("ingest_missing.csv",
                                     "ts,rsrp,sinr\n"
                                     "0,-90.5,12.0\n");
    try {
        ingest_csv(path, basic_schema());
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("prb") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("ingest_csv rejects an empty file") {
    const auto path = write_temp_csv("ingest_empty.csv", "ts,rsrp,sinr,prb\n");
    CHECK_THROWS_AS(ingest_csv(path, basic_schema()), SchemaError);
    std::remove(path.c_str());
}

TEST_CASE("make_split uses floor of cumulative fractions") {
    const auto trace = ramp_trace(100);
    const auto plan = make_split(trace, {0.7, 0.1, 0.2}, 4);
    CHECK(plan.train_begin == 0);
    CHECK(plan.train_end == 70);
    CHECK(plan.val_begin == 70);
    CHECK(plan.val_end == 80);
    CHECK(plan.test_begin == 80);
    CHECK(plan.test_end == 100);
}

TEST_CASE("make_split rejects splits too small for one window") {
    const auto trace = ramp_trace(10);
    CHECK_THROWS_AS(make_split(trace, {0.7, 0.1, 0.2}, 9), SizingError);
}

TEST_CASE("make_split quarters example") {
    const auto trace = ramp_trace(8);
    const auto plan = make_split(trace, {0.5, 0.25, 0.25}, 2);
    CHECK(plan.train_end == 4);
    CHECK(plan.val_end == 6);
    CHECK(plan.test_end == 8);
}

TEST_CASE("fit_scaler uses the population convention") {
    auto trace = ramp_trace(12);
    trace.values(0, 1) = 0.0;
    trace.values(1, 1) = 2.0;
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 2;
    plan.val_begin = 2;
    plan.val_end = 7;
    plan.test_begin = 7;
    plan.test_end = 12;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    CHECK(scaler.mean()[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(scaler.stdev()[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("fit_scaler floors the std of constant columns") {
    auto trace = ramp_trace(12);
    for (std::size_t t = 0; t < 3; ++t) trace.values(t, 1) = 5.0;
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 3;
    plan.val_begin = 3;
    plan.val_end = 7;
    plan.test_begin = 7;
    plan.test_end = 12;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    CHECK(scaler.mean()[1] == 5.0);
    CHECK(scaler.stdev()[1] == StandardScaler::kEpsilonFloor);
}

TEST_CASE("scaler and bounds ignore validation and test rows bitwise") {
    auto trace = ramp_trace(60);
    const auto plan = make_split(trace, {0.5, 0.25, 0.25}, 4);
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    const auto bounds = compute_action_bounds(trace, plan, scaler);
    const auto train = build_windows(trace, plan, scaler, 4, Split::Train, 1);

    auto perturbed = trace;
    Rng rng(7);
    for (std::size_t t = plan.val_begin; t < plan.test_end; ++t)
        for (std::size_t j = 0; j < perturbed.feature_count(); ++j)
            perturbed.values(t, j) += rng.normal() * 100.0;

    const auto scaler2 = StandardScaler::fit(perturbed, plan, 1);
    const auto bounds2 = compute_action_bounds(perturbed, plan, scaler2);
    const auto train2 = build_windows(perturbed, plan, scaler2, 4, Split::Train, 1);

    CHECK(scaler == scaler2);
    CHECK(bounds.lo == bounds2.lo);
    CHECK(bounds.hi == bounds2.hi);
    CHECK(bounds.lo_std == bounds2.lo_std);
    CHECK(bounds.hi_std == bounds2.hi_std);
    CHECK(train == train2);
}

TEST_CASE("scaler round trip is the identity within 1e-10") {
    auto trace = ramp_trace(50);
    const auto plan = make_split(trace, {0.6, 0.2, 0.2}, 4);
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        Vec x = {rng.normal(0, 50), rng.normal(0, 50), rng.normal(40, 20)};
        const Vec back = scaler.inverse_transform(scaler.transform(x));
        for (std::size_t j = 0; j < x.size(); ++j)
            CHECK(oracle::rel_err(back[j], x[j], 1e-12) < 1e-10);
    }
}

TEST_CASE("build_windows enumerates anchors with stride 1") {
    const auto trace = ramp_trace(40);
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 10;
    plan.val_begin = 10;
    plan.val_end = 25;
    plan.test_begin = 25;
    plan.test_end = 40;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    const auto batch = build_windows(trace, plan, scaler, 3, Split::Train, 1);
    CHECK(batch.size() == 7);
    // First window covers rows 0..2, target row 3.
    CHECK(batch.anchors.front() == 2);
    CHECK(batch.anchors.back() == 8);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        CHECK(batch.inputs[b].rows() == 3);
        for (std::size_t r = 0; r < 3; ++r)
            CHECK(batch.actions[b][r] == batch.inputs[b](r, 2));
    }
}

TEST_CASE("build_windows rejects L >= split length") {
    const auto trace = ramp_trace(40);
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 10;
    plan.val_begin = 10;
    plan.val_end = 25;
    plan.test_begin = 25;
    plan.test_end = 40;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    CHECK_THROWS_AS(build_windows(trace, plan, scaler, 10, Split::Train, 1), SizingError);
}

TEST_CASE("windows are causal: rows beyond the anchor are never read") {
    auto trace = ramp_trace(40);
    const auto plan = make_split(trace, {0.5, 0.25, 0.25}, 4);
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    const auto batch = build_windows(trace, plan, scaler, 4, Split::Val, 1);

    auto perturbed = trace;
    const std::size_t anchor = batch.anchors[0];
    perturbed.values(anchor + 2, 0) += 1234.5;
    const auto batch2 = build_windows(perturbed, plan, scaler, 4, Split::Val, 1);
    CHECK(batch.inputs[0] == batch2.inputs[0]);
    CHECK(batch.targets[0] == batch2.targets[0]);
}

TEST_CASE("action bounds are the train 5th/95th percentiles") {
    Vec prb(101);
    for (std::size_t i = 0; i < prb.size(); ++i) prb[i] = static_cast<double>(i);
    auto trace = ramp_trace(101, prb);
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 101;
    plan.val_begin = 101;
    plan.val_end = 101;
    plan.test_begin = 101;
    plan.test_end = 101;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    const auto bounds = compute_action_bounds(trace, plan, scaler);
    CHECK(bounds.lo == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(bounds.hi == doctest::Approx(95.0).epsilon(1e-12));
}

TEST_CASE("constant PRB column raises a bounds error") {
    auto trace = ramp_trace(30, Vec(30, 55.0));
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = 30;
    plan.val_begin = 30;
    plan.val_end = 30;
    plan.test_begin = 30;
    plan.test_end = 30;
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    CHECK_THROWS_AS(compute_action_bounds(trace, plan, scaler), BoundsError);
}

TEST_CASE("standardized bounds follow the affine map") {
    // Scaler with PRB mean 50, std 25: lo_std of 5 is (5-50)/25 = -1.8.
    const std::string json = R"({
      "format_version": 1,
      "mean": [0.0, 0.0, 50.0],
      "std": [1.0, 1.0, 25.0],
      "target_mean": [0.0],
      "target_std": [1.0],
      "epsilon_floor": 1e-6
    })";
    const auto scaler = StandardScaler::from_json_string(json);
    CHECK(scaler.transform_feature(2, 5.0) == doctest::Approx(-1.8).epsilon(1e-15));
}

TEST_CASE("percentile matches an independent reference on random traces") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.index(200);
        Vec v(n);
        for (auto& x : v) x = rng.normal(50, 20);
        const double p = rng.uniform(0.0, 100.0);
        CHECK(percentile_linear(v, p) ==
              doctest::Approx(oracle::percentile_reference(v, p)).epsilon(1e-12));
    }
}

TEST_CASE("synthetic trace follows the closed-form decay with zero noise") {
    SyntheticConfig cfg;
    cfg.length = 16;
    cfg.seed = 1;
    cfg.state_transition = Mat(1, 1);
    cfg.state_transition(0, 0) = 0.5;
    cfg.action_gain = Mat(1, 1);
    cfg.observation = Mat(1, 1);
    cfg.observation(0, 0) = 1.0;
    cfg.initial_state = {1.0};
    cfg.process_noise = 0.0;
    cfg.observation_noise = 0.0;
    cfg.feature_names = {"y", "prb"};
    cfg.target_index = 0;
    cfg.action_index = 1;
    cfg.action_schedule = "hold";
    cfg.action_min = 0.0;
    cfg.action_max = 0.0;
    const auto trace = generate_synthetic_trace(cfg);
    for (std::size_t t = 0; t < trace.length(); ++t)
        CHECK(trace.values(t, 0) ==
              doctest::Approx(std::pow(0.5, static_cast<double>(t))).epsilon(1e-12));
}

TEST_CASE("synthetic trace is deterministic given the seed") {
    auto cfg = SyntheticConfig::preset("kpi4");
    cfg.length = 200;
    cfg.seed = 42;
    const auto a = generate_synthetic_trace(cfg);
    const auto b = generate_synthetic_trace(cfg);
    CHECK(a.values == b.values);
    CHECK(a.timestamps == b.timestamps);
}

TEST_CASE("unstable synthetic dynamics are rejected") {
    auto cfg = SyntheticConfig::preset("kpi4");
    cfg.state_transition = Mat(2, 2);
    cfg.state_transition(0, 0) = 1.2;
    cfg.state_transition(1, 1) = 0.5;
    CHECK_THROWS_AS(generate_synthetic_trace(cfg), ConfigError);
}

TEST_CASE("kpi6 preset resolves all reward roles") {
    auto cfg = SyntheticConfig::preset("kpi6");
    cfg.length = 100;
    const auto trace = generate_synthetic_trace(cfg);
    CHECK(trace.has_reward_indices());
    CHECK(trace.reward_index(RewardRole::Prb) == trace.action_index);
    CHECK(trace.reward_index(RewardRole::Rsrp) == trace.target_index);
}

TEST_CASE("scaler serialization round trips") {
    auto trace = ramp_trace(50);
    const auto plan = make_split(trace, {0.6, 0.2, 0.2}, 4);
    const auto scaler = StandardScaler::fit(trace, plan, 1);
    const auto back = StandardScaler::from_json_string(scaler.to_json_string());
    CHECK(scaler == back);
}
