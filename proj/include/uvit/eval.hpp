#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "uvit/config.hpp"
#include "uvit/samplers.hpp"
#include "uvit/schedule.hpp"
#include "uvit/tensor.hpp"
#include "uvit/trainer.hpp"

namespace uvit {

struct Dataset;

struct FeatureStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    std::int64_t n = 0;
};

// Frozen conv feature network: 3x3 conv, GELU, 2x2 average pool, 3x3 conv,
// GELU, global average pool. Tensors conv1.weight/bias, conv2.weight/bias.
struct SmallCnn {
    Tensor conv1_weight, conv1_bias, conv2_weight, conv2_bias;

    static SmallCnn random(std::int64_t channels, std::int64_t width, std::uint64_t seed);
    static SmallCnn load(const std::filesystem::path& checkpoint);
    void save(const std::filesystem::path& checkpoint) const;
    // [n, H, W, C] -> [n, width]
    Tensor features(const Tensor& images) const;
};

class FeatureExtractor {
public:
    enum class Kind { raw_pixels, pooled_pixels, small_cnn };

    static FeatureExtractor raw_pixels();
    static FeatureExtractor pooled_pixels();
    static FeatureExtractor small_cnn(SmallCnn net);

    Kind kind() const { return kind_; }
    std::string name() const;
    // [n, H, W, C] -> [n, d]
    Tensor extract(const Tensor& images) const;

private:
    explicit FeatureExtractor(Kind kind) : kind_(kind) {}
    Kind kind_;
    std::shared_ptr<const SmallCnn> cnn_;
};

// Mean and (n-1)-normalised covariance of the rows of features [n, d].
FeatureStats stats_from_features(const Tensor& features);
FeatureStats feature_stats(const Tensor& images, const FeatureExtractor& extractor);

double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Binary PPM bytes for a rows x cols tiling of the first rows*cols images.
std::string encode_grid(const Tensor& images, std::int64_t rows, std::int64_t cols);
void sample_grid(const Tensor& images, std::int64_t rows, std::int64_t cols, const std::filesystem::path& path);
// [-1, 1] -> {0..255}, clamped, ties to even.
unsigned char pixel_byte(double v);

enum class AblationAxis { skip_mode, time_mode, conv_mode, patch_embed_mode, pos_embed_mode, depth, width, patch_size };
std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(std::string_view s);
// Throws ConfigError listing valid values when the variant cannot apply.
UViTConfig apply_variant(UViTConfig base, AblationAxis axis, const std::string& variant);

struct AblationProtocol {
    AblationAxis axis = AblationAxis::skip_mode;
    std::vector<std::string> variants;
    std::int64_t eval_every = 500;
    std::int64_t eval_samples = 1000;
    std::int64_t total_iterations = 0;  // 0 keeps train_cfg.total_iterations
    SamplerSpec sampler{SamplerKind::dpm_solver, 20, 2, StepPlacement::uniform_lambda, std::nullopt, 0};
    FeatureExtractor extractor = FeatureExtractor::pooled_pixels();
    std::uint64_t model_seed = 0;
    std::int64_t threads = 1;  // 0 = hardware concurrency
};

struct AblationRow {
    std::string variant;
    std::int64_t iteration = 0;
    double metric = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::map<std::string, double> final_loss;  // mean over the last 100 iterations
    std::map<std::string, std::vector<double>> losses;
    std::map<std::string, std::string> errors;  // variants that failed
};

AblationReport run_ablation(const AblationProtocol& protocol, const UViTConfig& base, const Dataset& dataset,
                            const TrainConfig& train_cfg, const NoiseSchedule& schedule);
void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path);

}  // namespace uvit
