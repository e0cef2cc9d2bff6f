#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "kpiwm/data.hpp"
#include "kpiwm/model.hpp"
#include "kpiwm/plan.hpp"
#include "kpiwm/train.hpp"

namespace kpiwm::cli {

constexpr int kResolvedConfigVersion = 1;

struct DataSection {
    std::string csv_path;
    data::CsvSchema schema;
    bool synthetic = false;
    std::string synthetic_preset = "kpi4";
    std::size_t synthetic_length = 2000;
    std::uint64_t synthetic_seed = 1;
    std::string synthetic_schedule; // empty keeps the preset default
    std::array<double, 3> fractions{0.7, 0.1, 0.2};
    std::size_t window_len = 16;
    std::string target_mode = "single"; // single | full
};

// Fully resolvable run description; the resolved echo reproduces the run
// bitwise when fed back in.
struct RunConfig {
    DataSection data;
    model::ModelConfig model;
    train::TrainConfig train;
    plan::PlanConfig plan;
    std::size_t eval_samples = 8;
    double interval_z = 1.96;
    unsigned threads = 1;
    std::uint64_t seed = 0;
    bool seeds_explicit = false; // set when sub-seeds came from the file
    std::string output_dir = "runs/out";

    static RunConfig load(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string resolved_json_text() const;

    // Derives sub-seeds from the master seed unless the file pinned them.
    void finalize_seeds();
};

struct RunPaths {
    std::string dir;
    std::string resolved_config;
    std::string checkpoint;
    std::string scaler_sidecar;
    std::string training_log;
    std::string train_summary;
    std::string metrics;
    std::string predictions_csv;
    std::string prediction;
    std::string plan_json;
    std::string whatif_steps;
    std::string whatif_summary;
    std::string bench_json;
};

RunPaths run_paths(const std::string& dir);
void ensure_dir(const std::string& dir);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

std::uint64_t fnv1a64(const std::string& text);

struct LoadedData {
    data::KpiTrace trace;
    data::SplitPlan split;
    data::StandardScaler scaler;
    data::ActionBounds bounds;
};

data::KpiTrace load_trace(const DataSection& section);

// Splits, fits the train-only scaler, and records PRB bounds; also resolves
// model feature/window/output dimensions from the data.
LoadedData prepare_data(RunConfig& cfg);

} // namespace kpiwm::cli
