#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uvit/config.hpp"
#include "uvit/data.hpp"
#include "uvit/eval.hpp"
#include "uvit/samplers.hpp"
#include "uvit/trainer.hpp"

namespace uvit {

enum class DatasetKind { shapes, shapes_text, gaussian, cifar10 };
std::string to_string(DatasetKind k);
DatasetKind parse_dataset_kind(std::string_view s);

// Everything a command needs, read from one flat key=value file.
struct RunConfig {
    UViTConfig model;
    TrainConfig train;
    std::uint64_t model_seed = 0;

    DatasetKind dataset = DatasetKind::shapes;
    std::int64_t dataset_size = 1024;
    std::uint64_t dataset_seed = 0;
    std::vector<ToyShape> shape_kinds{ToyShape::square, ToyShape::cross};
    double gaussian_mean = 0.0;
    double gaussian_std = 1.0;
    std::filesystem::path cifar_dir;
    std::string cifar_split = "train";
    std::uint64_t vocab_seed = 0;

    SamplerKind sampler = SamplerKind::dpm_solver;
    std::int64_t sampling_steps = 50;
    int solver_order = 2;
    StepPlacement step_placement = StepPlacement::uniform_lambda;
    std::optional<double> guidance_strength;
    std::uint64_t sample_seed = 0;

    std::int64_t eval_every = 500;
    std::int64_t eval_samples = 1000;
    FeatureExtractor::Kind feature_extractor = FeatureExtractor::Kind::pooled_pixels;
    std::filesystem::path feature_net;

    std::filesystem::path output_dir = "uvit_run";
    std::int64_t threads = 0;  // 0 = UVIT_THREADS or hardware concurrency

    // Throws ConfigError for unknown keys or bad values.
    void apply(const std::string& key, const std::string& value);
    std::vector<std::pair<std::string, std::string>> to_key_values() const;
    void validate() const;
    SamplerSpec sampler_spec() const;
};

struct ConfigKey {
    std::string name;
    std::string help;
};
// Every key accepted by RunConfig::apply, in documentation order.
const std::vector<ConfigKey>& run_config_keys();

// Lines are `key = value`; blank lines and `#` comments are skipped.
// Errors carry the 1-based line number.
RunConfig parse_run_config(std::istream& in, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
// "key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);

Dataset build_dataset(const RunConfig& cfg);
FeatureExtractor build_extractor(const RunConfig& cfg);
// UVIT_THREADS if set, else cfg.threads; 0 means hardware concurrency.
std::int64_t resolve_threads(const RunConfig& cfg);

// Command-line entry point. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uvit
