#include "kpiwm/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kpiwm/errors.hpp"
#include "kpiwm/toml.hpp"

namespace kpiwm::cli {

namespace {

using nlohmann::json;

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void load_data_section(const json& j, DataSection& d) {
    maybe(j, "csv_path", d.csv_path);
    maybe(j, "synthetic", d.synthetic);
    maybe(j, "synthetic_preset", d.synthetic_preset);
    maybe(j, "synthetic_length", d.synthetic_length);
    maybe(j, "synthetic_seed", d.synthetic_seed);
    maybe(j, "synthetic_schedule", d.synthetic_schedule);
    if (j.contains("fractions")) {
        const auto f = j.at("fractions").get<std::vector<double>>();
        if (f.size() != 3) throw ConfigError("data.fractions must have 3 entries");
        d.fractions = {f[0], f[1], f[2]};
    }
    maybe(j, "window_len", d.window_len);
    maybe(j, "target_mode", d.target_mode);
    if (d.target_mode != "single" && d.target_mode != "full")
        throw ConfigError("data.target_mode must be \"single\" or \"full\"");
    if (j.contains("schema")) {
        const auto& s = j.at("schema");
        maybe(s, "timestamp", d.schema.timestamp_column);
        maybe(s, "target", d.schema.target_column);
        maybe(s, "action", d.schema.action_column);
        maybe(s, "features", d.schema.feature_columns);
        if (s.contains("reward"))
            for (const auto& [role, col] : s.at("reward").items())
                d.schema.reward_columns[role] = col.get<std::string>();
    }
}

void load_model_section(const json& j, model::ModelConfig& m, bool& seed_set) {
    maybe(j, "embed_dim", m.embed_dim);
    maybe(j, "layer_count", m.layer_count);
    maybe(j, "state_size", m.state_size);
    maybe(j, "mixture_count", m.mixture_count);
    maybe(j, "tap_len", m.tap_len);
    maybe(j, "glu_ratio", m.glu_ratio);
    maybe(j, "dropout", m.dropout);
    maybe(j, "latent_dim", m.latent_dim);
    maybe(j, "heteroscedastic", m.heteroscedastic);
    maybe(j, "causal_gate", m.causal_gate);
    maybe(j, "ar_hidden", m.ar_hidden);
    if (j.contains("init_seed")) {
        m.init_seed = j.at("init_seed").get<std::uint64_t>();
        seed_set = true;
    }
}

void load_train_section(const json& j, train::TrainConfig& t, bool& seed_set) {
    maybe(j, "lr", t.lr);
    maybe(j, "lr_min", t.lr_min);
    maybe(j, "weight_decay", t.weight_decay);
    maybe(j, "batch_size", t.batch_size);
    maybe(j, "grad_clip", t.grad_clip);
    maybe(j, "max_epochs", t.max_epochs);
    maybe(j, "patience", t.patience);
    maybe(j, "tolerance", t.tolerance);
    maybe(j, "beta_start", t.beta_start);
    maybe(j, "beta_end", t.beta_end);
    maybe(j, "kl_epochs", t.kl_epochs);
    maybe(j, "pi_start", t.pi_start);
    maybe(j, "pi_end", t.pi_end);
    maybe(j, "input_noise", t.input_noise);
    maybe(j, "channel_drop", t.channel_drop);
    maybe(j, "rollout_steps", t.rollout_steps);
    maybe(j, "restart_period", t.restart_period);
    maybe(j, "restart_mult", t.restart_mult);
    if (j.contains("seed")) {
        t.seed = j.at("seed").get<std::uint64_t>();
        seed_set = true;
    }
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        maybe(w, "recon", t.weights.recon);
        maybe(w, "target", t.weights.target);
        maybe(w, "huber", t.weights.huber);
        maybe(w, "consistency", t.weights.consistency);
        maybe(w, "rollout", t.weights.rollout);
        maybe(w, "huber_delta", t.weights.huber_delta);
    }
}

void load_plan_section(const json& j, plan::PlanConfig& p, bool& seed_set) {
    maybe(j, "horizon", p.horizon);
    maybe(j, "population", p.population);
    maybe(j, "elite_fraction", p.elite_fraction);
    maybe(j, "iterations", p.iterations);
    maybe(j, "smoothness", p.smoothness);
    maybe(j, "sigma_init", p.sigma_init);
    maybe(j, "overwrite_action_column", p.overwrite_action_column);
    if (j.contains("reward_weights")) {
        const auto w = j.at("reward_weights").get<std::vector<double>>();
        if (w.size() != data::kRewardRoleCount)
            throw ConfigError("plan.reward_weights must have 6 entries");
        for (std::size_t i = 0; i < w.size(); ++i) p.reward_weights[i] = w[i];
    }
    if (j.contains("seed")) {
        p.seed = j.at("seed").get<std::uint64_t>();
        seed_set = true;
    }
}

} // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse failure: ") + e.what());
    }
    RunConfig cfg;
    bool model_seed = false, train_seed = false, plan_seed = false;
    if (j.contains("data")) load_data_section(j.at("data"), cfg.data);
    if (j.contains("model")) load_model_section(j.at("model"), cfg.model, model_seed);
    if (j.contains("train")) load_train_section(j.at("train"), cfg.train, train_seed);
    if (j.contains("plan")) load_plan_section(j.at("plan"), cfg.plan, plan_seed);
    if (j.contains("eval")) {
        maybe(j.at("eval"), "samples", cfg.eval_samples);
        maybe(j.at("eval"), "interval_z", cfg.interval_z);
    }
    maybe(j, "seed", cfg.seed);
    maybe(j, "threads", cfg.threads);
    maybe(j, "output_dir", cfg.output_dir);
    cfg.seeds_explicit = model_seed && train_seed && plan_seed;
    if (!cfg.seeds_explicit) {
        if (model_seed || train_seed || plan_seed)
            throw ConfigError("pin either all of model/train/plan seeds or none");
        cfg.finalize_seeds();
    }
    return cfg;
}

void RunConfig::finalize_seeds() {
    model.init_seed = Rng::mix(seed, 0x11);
    train.seed = Rng::mix(seed, 0x22);
    plan.seed = Rng::mix(seed, 0x33);
    seeds_explicit = true;
}

RunConfig RunConfig::load(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "toml") return from_json_text(toml::parse_file_to_json(path));
    if (ext == "json") return from_json_text(read_text_file(path));
    throw ConfigError("config files must end in .toml or .json: " + path);
}

std::string RunConfig::resolved_json_text() const {
    json j;
    j["format_version"] = kResolvedConfigVersion;
    j["seed"] = seed;
    j["threads"] = threads;
    j["output_dir"] = output_dir;

    json d;
    d["csv_path"] = data.csv_path;
    d["synthetic"] = data.synthetic;
    d["synthetic_preset"] = data.synthetic_preset;
    d["synthetic_length"] = data.synthetic_length;
    d["synthetic_seed"] = data.synthetic_seed;
    d["synthetic_schedule"] = data.synthetic_schedule;
    d["fractions"] = std::vector<double>{data.fractions[0], data.fractions[1], data.fractions[2]};
    d["window_len"] = data.window_len;
    d["target_mode"] = data.target_mode;
    json schema;
    schema["timestamp"] = data.schema.timestamp_column;
    schema["target"] = data.schema.target_column;
    schema["action"] = data.schema.action_column;
    if (!data.schema.feature_columns.empty()) schema["features"] = data.schema.feature_columns;
    if (!data.schema.reward_columns.empty()) {
        json reward;
        for (const auto& [role, col] : data.schema.reward_columns) reward[role] = col;
        schema["reward"] = reward;
    }
    d["schema"] = schema;
    j["data"] = d;

    j["model"] = json::parse(model.to_json_string());

    json t;
    t["lr"] = train.lr;
    t["lr_min"] = train.lr_min;
    t["weight_decay"] = train.weight_decay;
    t["batch_size"] = train.batch_size;
    t["grad_clip"] = train.grad_clip;
    t["max_epochs"] = train.max_epochs;
    t["patience"] = train.patience;
    t["tolerance"] = train.tolerance;
    t["beta_start"] = train.beta_start;
    t["beta_end"] = train.beta_end;
    t["kl_epochs"] = train.kl_epochs;
    t["pi_start"] = train.pi_start;
    t["pi_end"] = train.pi_end;
    t["input_noise"] = train.input_noise;
    t["channel_drop"] = train.channel_drop;
    t["rollout_steps"] = train.rollout_steps;
    t["restart_period"] = train.restart_period;
    t["restart_mult"] = train.restart_mult;
    t["seed"] = train.seed;
    json w;
    w["recon"] = train.weights.recon;
    w["target"] = train.weights.target;
    w["huber"] = train.weights.huber;
    w["consistency"] = train.weights.consistency;
    w["rollout"] = train.weights.rollout;
    w["huber_delta"] = train.weights.huber_delta;
    t["weights"] = w;
    j["train"] = t;

    json p;
    p["horizon"] = plan.horizon;
    p["population"] = plan.population;
    p["elite_fraction"] = plan.elite_fraction;
    p["iterations"] = plan.iterations;
    p["smoothness"] = plan.smoothness;
    p["sigma_init"] = plan.sigma_init;
    p["overwrite_action_column"] = plan.overwrite_action_column;
    p["reward_weights"] = std::vector<double>(plan.reward_weights.begin(),
                                              plan.reward_weights.end());
    p["seed"] = plan.seed;
    j["plan"] = p;

    json e;
    e["samples"] = eval_samples;
    e["interval_z"] = interval_z;
    j["eval"] = e;
    return j.dump(2);
}

RunPaths run_paths(const std::string& dir) {
    RunPaths p;
    p.dir = dir;
    p.resolved_config = dir + "/resolved_config.json";
    p.checkpoint = dir + "/checkpoint.json";
    p.scaler_sidecar = dir + "/scaler.json";
    p.training_log = dir + "/training_log.jsonl";
    p.train_summary = dir + "/train_summary.json";
    p.metrics = dir + "/metrics.json";
    p.predictions_csv = dir + "/predictions.csv";
    p.prediction = dir + "/prediction.json";
    p.plan_json = dir + "/plan.json";
    p.whatif_steps = dir + "/whatif_steps.csv";
    p.whatif_summary = dir + "/whatif_summary.csv";
    p.bench_json = dir + "/bench.json";
    return p;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ArtifactError("cannot create directory " + dir + ": " + ec.message());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path);
    out << text;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

data::KpiTrace load_trace(const DataSection& section) {
    if (section.synthetic) {
        auto sc = data::SyntheticConfig::preset(section.synthetic_preset);
        sc.length = section.synthetic_length;
        sc.seed = section.synthetic_seed;
        if (!section.synthetic_schedule.empty()) sc.action_schedule = section.synthetic_schedule;
        return data::generate_synthetic_trace(sc);
    }
    if (section.csv_path.empty())
        throw ConfigError("data section needs either csv_path or synthetic = true");
    if (section.schema.timestamp_column.empty() || section.schema.target_column.empty() ||
        section.schema.action_column.empty())
        throw ConfigError("data.schema must name timestamp, target, and action columns");
    return data::ingest_csv(section.csv_path, section.schema);
}

LoadedData prepare_data(RunConfig& cfg) {
    LoadedData out{load_trace(cfg.data), {}, {}, {}};
    out.split = data::make_split(out.trace, cfg.data.fractions, cfg.data.window_len);
    const int output_dim = cfg.data.target_mode == "full"
                               ? static_cast<int>(out.trace.feature_count())
                               : 1;
    out.scaler = data::StandardScaler::fit(out.trace, out.split, output_dim);
    out.bounds = data::compute_action_bounds(out.trace, out.split, out.scaler);
    cfg.model.feature_count = out.trace.feature_count();
    cfg.model.window_len = cfg.data.window_len;
    cfg.model.output_dim = static_cast<std::size_t>(output_dim);
    cfg.model.validate();
    return out;
}

} // namespace kpiwm::cli
