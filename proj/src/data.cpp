#include "kpiwm/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kpiwm/errors.hpp"
#include "kpiwm/linalg.hpp"
#include "kpiwm/rng.hpp"

namespace kpiwm::data {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size();
}

bool parse_int64(const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtoll(s.c_str(), &end, 10);
    return end == s.c_str() + s.size();
}

int find_column(const std::vector<std::string>& names, const std::string& wanted) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == wanted) return static_cast<int>(i);
    return -1;
}

std::optional<RewardRole> parse_reward_role(std::string name) {
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (int i = 0; i < static_cast<int>(kRewardRoleCount); ++i)
        if (name == reward_role_name(static_cast<RewardRole>(i))) return static_cast<RewardRole>(i);
    return std::nullopt;
}

void validate_trace(const KpiTrace& t) {
    const std::size_t n = t.length();
    if (n == 0) throw SchemaError("empty trace: no usable rows");
    if (t.values.rows() != n) throw ShapeError("trace row count mismatch");
    const std::size_t f = t.feature_count();
    if (t.feature_names.size() != f) throw ShapeError("feature name count mismatch");
    if (t.action_index < 0 || t.action_index >= static_cast<int>(f))
        throw SchemaError("action index out of range");
    if (t.target_index < 0 || t.target_index >= static_cast<int>(f))
        throw SchemaError("target index out of range");
    for (std::size_t i = 1; i < n; ++i)
        if (t.timestamps[i] <= t.timestamps[i - 1])
            throw SchemaError("timestamps not strictly increasing at row " + std::to_string(i));
    for (double x : t.values.data())
        if (!std::isfinite(x)) throw NumericalError("trace contains non-finite values");
}

} // namespace

const char* reward_role_name(RewardRole r) {
    switch (r) {
        case RewardRole::Sinr: return "sinr";
        case RewardRole::Se: return "se";
        case RewardRole::Bler: return "bler";
        case RewardRole::Delay: return "delay";
        case RewardRole::Prb: return "prb";
        case RewardRole::Rsrp: return "rsrp";
    }
    return "?";
}

bool KpiTrace::has_reward_indices() const {
    for (int idx : reward_indices)
        if (idx < 0) return false;
    return true;
}

KpiTrace ingest_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open CSV file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw SchemaError("empty trace: file has no header: " + path);
    const auto header = split_csv_line(line);

    const int ts_col = find_column(header, schema.timestamp_column);
    if (ts_col < 0) throw SchemaError("missing column \"" + schema.timestamp_column + "\"");

    std::vector<std::string> feature_names;
    if (schema.feature_columns.empty()) {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (static_cast<int>(i) != ts_col) feature_names.push_back(header[i]);
    } else {
        feature_names = schema.feature_columns;
    }
    std::vector<int> feature_cols;
    for (const auto& name : feature_names) {
        const int c = find_column(header, name);
        if (c < 0) throw SchemaError("missing column \"" + name + "\"");
        feature_cols.push_back(c);
    }

    KpiTrace trace;
    trace.feature_names = feature_names;
    trace.target_index = find_column(feature_names, schema.target_column);
    if (trace.target_index < 0) throw SchemaError("missing column \"" + schema.target_column + "\"");
    trace.action_index = find_column(feature_names, schema.action_column);
    if (trace.action_index < 0) throw SchemaError("missing column \"" + schema.action_column + "\"");

    if (!schema.reward_columns.empty()) {
        for (const auto& [role_name, col_name] : schema.reward_columns) {
            const auto role = parse_reward_role(role_name);
            if (!role) throw SchemaError("unknown reward role \"" + role_name + "\"");
            const int idx = find_column(feature_names, col_name);
            if (idx < 0) throw SchemaError("missing column \"" + col_name + "\"");
            trace.reward_indices[static_cast<int>(*role)] = idx;
        }
        if (!trace.has_reward_indices())
            throw SchemaError("reward map must name all of sinr, se, bler, delay, prb, rsrp");
        auto sorted = trace.reward_indices;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw SchemaError("reward roles must map to distinct columns");
    }

    std::vector<std::int64_t> timestamps;
    std::vector<Vec> rows;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto fields = split_csv_line(line);
        bool ok = fields.size() == header.size();
        std::int64_t ts = 0;
        Vec row(feature_cols.size());
        if (ok) ok = parse_int64(fields[ts_col], ts);
        for (std::size_t j = 0; ok && j < feature_cols.size(); ++j) {
            double x = 0.0;
            ok = parse_double(fields[feature_cols[j]], x) && std::isfinite(x);
            row[j] = x;
        }
        if (!ok) {
            ++trace.dropped_rows;
            continue;
        }
        timestamps.push_back(ts);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw SchemaError("empty trace: no usable rows in " + path);

    trace.timestamps = std::move(timestamps);
    trace.values = Mat(rows.size(), feature_cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i) trace.values.set_row(i, rows[i]);
    validate_trace(trace);
    return trace;
}

void write_trace_csv(const KpiTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write CSV file: " + path);
    out << "ts";
    for (const auto& n : trace.feature_names) out << ',' << n;
    out << '\n';
    char buf[40];
    for (std::size_t t = 0; t < trace.length(); ++t) {
        out << trace.timestamps[t];
        for (std::size_t j = 0; j < trace.feature_count(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", trace.values(t, j));
            out << ',' << buf;
        }
        out << '\n';
    }
}

std::pair<std::size_t, std::size_t> SplitPlan::range(int split) const {
    switch (split) {
        case 0: return {train_begin, train_end};
        case 1: return {val_begin, val_end};
        default: return {test_begin, test_end};
    }
}

SplitPlan make_split(const KpiTrace& trace, const std::array<double, 3>& fractions,
                     std::size_t window_len) {
    for (double f : fractions)
        if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    const double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

    const std::size_t n = trace.length();
    const double tf = static_cast<double>(n);
    // Guard floor() against cumulative-sum representation error (0.7 + 0.1).
    const auto cut = [&](double cum) {
        return static_cast<std::size_t>(std::floor(cum * tf + 1e-9));
    };
    SplitPlan plan;
    plan.train_begin = 0;
    plan.train_end = cut(fractions[0]);
    plan.val_begin = plan.train_end;
    plan.val_end = cut(fractions[0] + fractions[1]);
    plan.test_begin = plan.val_end;
    plan.test_end = n;

    // The training split must hold at least one window plus its target; a
    // val/test split too short for windows is reported by build_windows.
    const std::size_t need = window_len + 1;
    const std::size_t train_len = plan.train_end - plan.train_begin;
    if (train_len < need) {
        const auto min_t = static_cast<std::size_t>(
            std::ceil(static_cast<double>(need) / fractions[0]));
        throw SizingError("train split of " + std::to_string(train_len) +
                          " rows cannot hold a window of L=" + std::to_string(window_len) +
                          " plus a target; need at least T = " + std::to_string(min_t));
    }
    return plan;
}

StandardScaler StandardScaler::fit(const KpiTrace& trace, const SplitPlan& plan, int output_dim) {
    if (plan.train_end <= plan.train_begin) throw SizingError("empty training range");
    if (output_dim != 1 && output_dim != static_cast<int>(trace.feature_count()))
        throw ConfigError("output_dim must be 1 or F");

    const std::size_t f = trace.feature_count();
    const auto n = static_cast<double>(plan.train_end - plan.train_begin);
    StandardScaler s;
    s.mean_.assign(f, 0.0);
    s.std_.assign(f, 0.0);
    for (std::size_t t = plan.train_begin; t < plan.train_end; ++t)
        for (std::size_t j = 0; j < f; ++j) s.mean_[j] += trace.values(t, j);
    for (std::size_t j = 0; j < f; ++j) s.mean_[j] /= n;
    for (std::size_t t = plan.train_begin; t < plan.train_end; ++t)
        for (std::size_t j = 0; j < f; ++j) {
            const double d = trace.values(t, j) - s.mean_[j];
            s.std_[j] += d * d;
        }
    // Population convention; constant features floor at epsilon.
    for (std::size_t j = 0; j < f; ++j)
        s.std_[j] = std::max(std::sqrt(s.std_[j] / n), kEpsilonFloor);

    if (output_dim == 1) {
        s.target_mean_ = {s.mean_[trace.target_index]};
        s.target_std_ = {s.std_[trace.target_index]};
    } else {
        s.target_mean_ = s.mean_;
        s.target_std_ = s.std_;
    }
    return s;
}

StandardScaler StandardScaler::identity(std::size_t feature_count, int output_dim) {
    StandardScaler s;
    s.mean_.assign(feature_count, 0.0);
    s.std_.assign(feature_count, 1.0);
    const std::size_t o = output_dim == 1 ? 1 : feature_count;
    s.target_mean_.assign(o, 0.0);
    s.target_std_.assign(o, 1.0);
    return s;
}

Vec StandardScaler::transform(const Vec& row) const {
    if (row.size() != mean_.size()) throw ShapeError("scaler transform: row width mismatch");
    Vec out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) out[j] = (row[j] - mean_[j]) / std_[j];
    return out;
}

Vec StandardScaler::inverse_transform(const Vec& row) const {
    if (row.size() != mean_.size()) throw ShapeError("scaler inverse: row width mismatch");
    Vec out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) out[j] = mean_[j] + std_[j] * row[j];
    return out;
}

Mat StandardScaler::transform(const Mat& rows) const {
    Mat out(rows.rows(), rows.cols());
    for (std::size_t t = 0; t < rows.rows(); ++t)
        for (std::size_t j = 0; j < rows.cols(); ++j)
            out(t, j) = (rows(t, j) - mean_[j]) / std_[j];
    return out;
}

double StandardScaler::transform_feature(std::size_t j, double x) const {
    return (x - mean_[j]) / std_[j];
}

double StandardScaler::inverse_feature(std::size_t j, double x) const {
    return mean_[j] + std_[j] * x;
}

Vec StandardScaler::transform_target(const Vec& y) const {
    if (y.size() != target_mean_.size()) throw ShapeError("scaler target transform: width mismatch");
    Vec out(y.size());
    for (std::size_t j = 0; j < y.size(); ++j) out[j] = (y[j] - target_mean_[j]) / target_std_[j];
    return out;
}

Vec StandardScaler::inverse_target(const Vec& y) const {
    if (y.size() != target_mean_.size()) throw ShapeError("scaler target inverse: width mismatch");
    Vec out(y.size());
    for (std::size_t j = 0; j < y.size(); ++j) out[j] = target_mean_[j] + target_std_[j] * y[j];
    return out;
}

std::string StandardScaler::to_json_string() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["mean"] = mean_;
    j["std"] = std_;
    j["target_mean"] = target_mean_;
    j["target_std"] = target_std_;
    j["epsilon_floor"] = epsilon_floor_;
    return j.dump(2);
}

StandardScaler StandardScaler::from_json_string(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format_version", 0) != 1) throw VersionError("unsupported scaler format version");
    StandardScaler s;
    s.mean_ = j.at("mean").get<Vec>();
    s.std_ = j.at("std").get<Vec>();
    s.target_mean_ = j.at("target_mean").get<Vec>();
    s.target_std_ = j.at("target_std").get<Vec>();
    s.epsilon_floor_ = j.value("epsilon_floor", kEpsilonFloor);
    return s;
}

WindowBatch build_windows(const KpiTrace& trace, const SplitPlan& plan,
                          const StandardScaler& scaler, std::size_t window_len, Split split,
                          int output_dim) {
    const auto [begin, end] = plan.range(static_cast<int>(split));
    const std::size_t len = end - begin;
    if (len < window_len + 1)
        throw SizingError("split of " + std::to_string(len) + " rows cannot hold a window of L=" +
                          std::to_string(window_len) + " plus a target");
    if (output_dim != scaler.output_dim()) throw ConfigError("output_dim mismatch with scaler");

    WindowBatch batch;
    batch.window_len = window_len;
    batch.output_dim = static_cast<std::size_t>(output_dim);
    batch.action_index = trace.action_index;
    const std::size_t f = trace.feature_count();
    const auto ia = static_cast<std::size_t>(trace.action_index);
    const auto istar = static_cast<std::size_t>(trace.target_index);

    for (std::size_t t = begin + window_len - 1; t + 1 < end; ++t) {
        Mat in(window_len, f);
        for (std::size_t r = 0; r < window_len; ++r) {
            const std::size_t src = t + 1 - window_len + r;
            for (std::size_t j = 0; j < f; ++j)
                in(r, j) = scaler.transform_feature(j, trace.values(src, j));
        }
        // Action channel extracted after standardization.
        batch.actions.push_back(in.col(ia));
        Vec yfull(f);
        for (std::size_t j = 0; j < f; ++j)
            yfull[j] = scaler.transform_feature(j, trace.values(t + 1, j));
        if (output_dim == 1)
            batch.targets.push_back(scaler.transform_target({trace.values(t + 1, istar)}));
        else
            batch.targets.push_back(scaler.transform_target(trace.values.row(t + 1)));
        batch.targets_full.push_back(std::move(yfull));
        batch.inputs.push_back(std::move(in));
        batch.anchors.push_back(t);
    }
    return batch;
}

double percentile_linear(Vec values, double p) {
    if (values.empty()) throw ArgumentError("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double h = (p / 100.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= values.size()) return values.back();
    const double frac = h - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

ActionBounds compute_action_bounds(const KpiTrace& trace, const SplitPlan& plan,
                                   const StandardScaler& scaler) {
    if (plan.train_end <= plan.train_begin) throw SizingError("empty training range");
    Vec prb;
    prb.reserve(plan.train_end - plan.train_begin);
    for (std::size_t t = plan.train_begin; t < plan.train_end; ++t)
        prb.push_back(trace.values(t, trace.action_index));
    ActionBounds b;
    b.lo = percentile_linear(prb, 5.0);
    b.hi = percentile_linear(prb, 95.0);
    if (!(b.lo < b.hi))
        throw BoundsError("degenerate PRB bounds: trace is constant in the action column");
    const auto ia = static_cast<std::size_t>(trace.action_index);
    b.lo_std = scaler.transform_feature(ia, b.lo);
    b.hi_std = scaler.transform_feature(ia, b.hi);
    return b;
}

std::string bounds_to_json_string(const ActionBounds& b) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["lo"] = b.lo;
    j["hi"] = b.hi;
    j["lo_std"] = b.lo_std;
    j["hi_std"] = b.hi_std;
    return j.dump(2);
}

ActionBounds bounds_from_json_string(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format_version", 0) != 1) throw VersionError("unsupported bounds format version");
    ActionBounds b;
    b.lo = j.at("lo").get<double>();
    b.hi = j.at("hi").get<double>();
    b.lo_std = j.at("lo_std").get<double>();
    b.hi_std = j.at("hi_std").get<double>();
    return b;
}

SyntheticConfig SyntheticConfig::preset(const std::string& name) {
    SyntheticConfig c;
    const double rot = 0.7, decay = 0.95;
    c.state_transition = Mat(2, 2);
    c.state_transition(0, 0) = decay * std::cos(rot);
    c.state_transition(0, 1) = -decay * std::sin(rot);
    c.state_transition(1, 0) = decay * std::sin(rot);
    c.state_transition(1, 1) = decay * std::cos(rot);
    c.action_gain = Mat(2, 1);
    c.action_gain(0, 0) = 0.004;
    c.initial_state = {1.0, 0.0};
    c.process_noise = 0.2;
    c.observation_noise = 0.05;
    if (name == "kpi4") {
        c.feature_names = {"rsrp", "sinr", "load", "prb"};
        c.target_index = 0;
        c.action_index = 3;
        c.observation = Mat(3, 2);
        c.observation(0, 0) = 1.0;
        c.observation(1, 0) = 0.5;
        c.observation(1, 1) = 0.5;
        c.observation(2, 1) = 1.0;
    } else if (name == "kpi6") {
        c.feature_names = {"sinr", "se", "bler", "delay", "prb", "rsrp"};
        c.target_index = 5;
        c.action_index = 4;
        c.observation = Mat(5, 2);
        const double rows[5][2] = {{1.0, 0.3}, {0.5, 0.2}, {-0.3, 0.1}, {-0.2, -0.4}, {0.8, -0.1}};
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 2; ++j) c.observation(i, j) = rows[i][j];
        for (int r = 0; r < static_cast<int>(kRewardRoleCount); ++r) {
            const char* n = reward_role_name(static_cast<RewardRole>(r));
            c.reward_columns[n] = n;
        }
    } else {
        throw ConfigError("unknown synthetic preset \"" + name + "\"");
    }
    return c;
}

KpiTrace generate_synthetic_trace(const SyntheticConfig& config) {
    if (config.length < 10) throw ConfigError("synthetic trace needs T >= 10");
    const std::size_t n = config.state_transition.rows();
    if (config.state_transition.cols() != n) throw ConfigError("state transition must be square");
    if (config.action_gain.rows() != n || config.action_gain.cols() != 1)
        throw ConfigError("action gain must be n x 1");
    if (config.observation.cols() != n) throw ConfigError("observation matrix width mismatch");
    if (config.initial_state.size() != n) throw ConfigError("initial state length mismatch");
    const std::size_t f = config.observation.rows() + 1;
    if (config.feature_names.size() != f) throw ConfigError("feature name count must be F");
    if (config.action_index < 0 || config.action_index >= static_cast<int>(f))
        throw ConfigError("synthetic action index out of range");
    if (config.target_index < 0 || config.target_index >= static_cast<int>(f))
        throw ConfigError("synthetic target index out of range");

    const double rho = linalg::spectral_radius(config.state_transition);
    if (rho >= 1.0)
        throw ConfigError("unstable state transition: spectral radius " + std::to_string(rho) +
                          " >= 1");

    Rng process = Rng::stream(config.seed, {0xA1});
    Rng obs = Rng::stream(config.seed, {0xA2});
    Rng action = Rng::stream(config.seed, {0xA3});

    const double mid = 0.5 * (config.action_min + config.action_max);
    const double amp = 0.5 * (config.action_max - config.action_min);
    double u = mid;

    KpiTrace trace;
    trace.timestamps.resize(config.length);
    trace.values = Mat(config.length, f);
    trace.feature_names = config.feature_names;
    trace.action_index = config.action_index;
    trace.target_index = config.target_index;
    for (const auto& [role_name, col_name] : config.reward_columns) {
        const auto role = parse_reward_role(role_name);
        if (!role) throw ConfigError("unknown reward role \"" + role_name + "\"");
        const int idx = find_column(config.feature_names, col_name);
        if (idx < 0) throw ConfigError("reward column \"" + col_name + "\" not a feature");
        trace.reward_indices[static_cast<int>(*role)] = idx;
    }

    Vec x = config.initial_state;
    for (std::size_t t = 0; t < config.length; ++t) {
        trace.timestamps[t] = static_cast<std::int64_t>(t);
        if (config.action_schedule == "sine") {
            u = mid + amp * std::sin(2.0 * M_PI * static_cast<double>(t) / config.action_period);
        } else if (config.action_schedule == "walk") {
            u = num::clamp(u + config.action_walk_step * action.normal(), config.action_min,
                           config.action_max);
        } else if (config.action_schedule == "hold") {
            u = mid;
        } else {
            throw ConfigError("unknown action schedule \"" + config.action_schedule + "\"");
        }
        std::size_t col = 0;
        for (std::size_t j = 0; j < f; ++j) {
            if (static_cast<int>(j) == config.action_index) {
                trace.values(t, j) = u;
            } else {
                const double y =
                    num::dot(config.observation.row_ptr(col), x.data(), n) +
                    config.observation_noise * obs.normal();
                trace.values(t, j) = y;
                ++col;
            }
        }
        Vec xn = num::mat_vec(config.state_transition, x);
        for (std::size_t i = 0; i < n; ++i)
            xn[i] += config.action_gain(i, 0) * u + config.process_noise * process.normal();
        x = std::move(xn);
    }
    validate_trace(trace);
    return trace;
}

} // namespace kpiwm::data
