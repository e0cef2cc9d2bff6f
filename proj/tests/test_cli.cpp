#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include <json.hpp>

#include "kpiwm/config.hpp"
#include "kpiwm/errors.hpp"
#include "kpiwm/toml.hpp"

using namespace kpiwm;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(KPIWM_BIN) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

const char* kSmokeToml = R"(
# synthetic smoke run
seed = 7
threads = 1
output_dir = "/tmp/kpiwm_cli_run"

[data]
synthetic = true
synthetic_preset = "kpi6"
synthetic_length = 300
synthetic_seed = 4
window_len = 6
target_mode = "single"

[model]
embed_dim = 10
layer_count = 1
state_size = 3
mixture_count = 1
latent_dim = 3
dropout = 0.0

[train]
batch_size = 64
max_epochs = 2
patience = 5

[plan]
horizon = 3
population = 16
iterations = 2

[eval]
samples = 2
)";

} // namespace

TEST_CASE("toml parser handles tables, arrays, and comments") {
    const auto text = R"(
top = 3            # inline comment
name = "hello # not a comment"
flag = true
ratio = 0.25
list = [1, 2, 3]
mixed = ["a", "b"]

[table]
key = -4

[table.sub]
deep = 1.5e-3
)";
    const auto j = json::parse(toml::parse_text_to_json(text));
    CHECK(j.at("top").get<int>() == 3);
    CHECK(j.at("name").get<std::string>() == "hello # not a comment");
    CHECK(j.at("flag").get<bool>() == true);
    CHECK(j.at("ratio").get<double>() == 0.25);
    CHECK(j.at("list").get<std::vector<int>>() == std::vector<int>{1, 2, 3});
    CHECK(j.at("table").at("key").get<int>() == -4);
    CHECK(j.at("table").at("sub").at("deep").get<double>() == doctest::Approx(1.5e-3));
}

TEST_CASE("toml parser rejects malformed input") {
    CHECK_THROWS_AS(toml::parse_text_to_json("key"), ConfigError);
    CHECK_THROWS_AS(toml::parse_text_to_json("[table\nkey = 1"), ConfigError);
    CHECK_THROWS_AS(toml::parse_text_to_json("k = \"unterminated"), ConfigError);
    CHECK_THROWS_AS(toml::parse_text_to_json("k = [1,\n2]"), ConfigError);
}

TEST_CASE("run config defaults and seed derivation") {
    auto cfg = cli::RunConfig::from_json_text(R"({"seed": 99})");
    CHECK(cfg.data.fractions[0] == 0.7);
    CHECK(cfg.train.lr == 2e-3);
    CHECK(cfg.plan.horizon == 8);
    CHECK(cfg.plan.population == 256);
    CHECK(cfg.eval_samples == 8);
    CHECK(cfg.seeds_explicit);
    // Sub-seeds derive deterministically from the master seed.
    const auto cfg2 = cli::RunConfig::from_json_text(R"({"seed": 99})");
    CHECK(cfg.train.seed == cfg2.train.seed);
    CHECK(cfg.model.init_seed == cfg2.model.init_seed);

    CHECK_THROWS_AS(
        cli::RunConfig::from_json_text(R"({"seed": 1, "train": {"seed": 5}})"),
        ConfigError); // partial pinning is ambiguous
}

TEST_CASE("resolved config reloads to the same resolved text") {
    write_file("/tmp/kpiwm_cli_cfg.toml", kSmokeToml);
    auto cfg = cli::RunConfig::load("/tmp/kpiwm_cli_cfg.toml");
    const std::string once = cfg.resolved_json_text();
    auto back = cli::RunConfig::from_json_text(once);
    CHECK(back.resolved_json_text() == once);
}

TEST_CASE("cli end to end: train, artifacts, rerun reproducibility") {
    write_file("/tmp/kpiwm_cli_cfg.toml", kSmokeToml);
    REQUIRE(run_cli("train -c /tmp/kpiwm_cli_cfg.toml") == 0);

    const auto paths = cli::run_paths("/tmp/kpiwm_cli_run");
    const std::string checkpoint_a = cli::read_text_file(paths.checkpoint);
    const std::string log_a = cli::read_text_file(paths.training_log);

    // Re-running from the resolved config reproduces the checkpoint bitwise.
    REQUIRE(run_cli("train -c " + paths.resolved_config +
                    " --output-dir /tmp/kpiwm_cli_rerun") == 0);
    const auto rerun = cli::run_paths("/tmp/kpiwm_cli_rerun");
    CHECK(cli::read_text_file(rerun.checkpoint) == checkpoint_a);

    // Logs agree except for wall-clock fields.
    std::stringstream sa(log_a), sb(cli::read_text_file(rerun.training_log));
    std::string la, lb;
    while (std::getline(sa, la) && std::getline(sb, lb)) {
        auto ja = json::parse(la);
        auto jb = json::parse(lb);
        ja["wall_clock_s"] = jb["wall_clock_s"] = 0.0;
        CHECK(ja.dump() == jb.dump());
    }

    CHECK(run_cli("evaluate --run /tmp/kpiwm_cli_run") == 0);
    CHECK(run_cli("predict --run /tmp/kpiwm_cli_run --samples 3") == 0);
    CHECK(run_cli("plan --run /tmp/kpiwm_cli_run") == 0);
    CHECK(run_cli("whatif --run /tmp/kpiwm_cli_run") == 0);
    CHECK(run_cli("bench --run /tmp/kpiwm_cli_run --latency-windows 5 --sweep-repeats 3 "
                  "--sweep 8 16 --dump-taps /tmp/kpiwm_cli_taps.csv") == 0);
    const std::string taps_csv = cli::read_text_file("/tmp/kpiwm_cli_taps.csv");
    CHECK(taps_csv.rfind("layer,channel,lag,value", 0) == 0);

    const auto metrics = json::parse(cli::read_text_file(paths.metrics));
    CHECK(metrics.contains("rmse"));
    const auto pred = json::parse(cli::read_text_file(paths.prediction));
    CHECK(pred.at("samples").get<int>() == 3);
    CHECK(pred.contains("aleatoric"));
    CHECK(pred.contains("epistemic"));

    // What-if: one summary row per scenario, H step rows each.
    const std::string steps = cli::read_text_file(paths.whatif_steps);
    const std::string summary = cli::read_text_file(paths.whatif_summary);
    const auto count_lines = [](const std::string& s) {
        std::size_t n = 0;
        for (char c : s)
            if (c == '\n') ++n;
        return n;
    };
    CHECK(count_lines(summary) == 1 + 5);
    CHECK(count_lines(steps) == 1 + 5 * 3);
}

TEST_CASE("cli default plan diagnostics expose the elite count") {
    write_file("/tmp/kpiwm_cli_cfg.toml", kSmokeToml);
    REQUIRE(run_cli("train -c /tmp/kpiwm_cli_cfg.toml --output-dir /tmp/kpiwm_cli_elites") == 0);
    // Default population 256 at elite fraction 0.1 -> 25 elites.
    REQUIRE(run_cli("plan --run /tmp/kpiwm_cli_elites --population 256 --horizon 2 "
                    "--iterations 1") == 0);
    const auto plan_json =
        json::parse(cli::read_text_file("/tmp/kpiwm_cli_elites/plan.json"));
    CHECK(plan_json.at("elites").get<int>() == 25);
}

TEST_CASE("cli exit codes: schema 2, missing artifact 3, version mismatch 4") {
    // Schema error: CSV missing the action column.
    write_file("/tmp/kpiwm_cli_bad.csv", "ts,rsrp,sinr\n0,1,2\n1,2,3\n");
    write_file("/tmp/kpiwm_cli_bad.toml", R"(
output_dir = "/tmp/kpiwm_cli_badrun"
[data]
csv_path = "/tmp/kpiwm_cli_bad.csv"
window_len = 4
[data.schema]
timestamp = "ts"
target = "rsrp"
action = "prb"
)");
    CHECK(run_cli("ingest -c /tmp/kpiwm_cli_bad.toml") == 2);
    CHECK(run_cli("train -c /tmp/kpiwm_cli_bad.toml") == 2);

    // Missing artifacts.
    CHECK(run_cli("predict --run /tmp/kpiwm_cli_nowhere") == 3);

    // Version mismatch: tamper with the scaler sidecar.
    write_file("/tmp/kpiwm_cli_cfg.toml", kSmokeToml);
    REQUIRE(run_cli("train -c /tmp/kpiwm_cli_cfg.toml --output-dir /tmp/kpiwm_cli_stale") == 0);
    const auto paths = cli::run_paths("/tmp/kpiwm_cli_stale");
    auto sidecar = json::parse(cli::read_text_file(paths.scaler_sidecar));
    sidecar["scaler"]["mean"][0] = sidecar["scaler"]["mean"][0].get<double>() + 1.0;
    write_file(paths.scaler_sidecar, sidecar.dump(2));
    CHECK(run_cli("predict --run /tmp/kpiwm_cli_stale") == 4);
}

TEST_CASE("output root environment variable applies to relative paths") {
    write_file("/tmp/kpiwm_cli_env.toml", std::string(kSmokeToml));
    // Point output_dir at a relative location and set the root.
    std::string cfg(kSmokeToml);
    const auto pos = cfg.find("output_dir = \"/tmp/kpiwm_cli_run\"");
    cfg.replace(pos, std::string("output_dir = \"/tmp/kpiwm_cli_run\"").size(),
                "output_dir = \"rooted_run\"");
    write_file("/tmp/kpiwm_cli_env.toml", cfg);
    setenv("KPIWM_OUT_ROOT", "/tmp/kpiwm_cli_root", 1);
    const int rc = run_cli("train -c /tmp/kpiwm_cli_env.toml");
    unsetenv("KPIWM_OUT_ROOT");
    REQUIRE(rc == 0);
    CHECK_NOTHROW(cli::read_text_file("/tmp/kpiwm_cli_root/rooted_run/checkpoint.json"));
}
