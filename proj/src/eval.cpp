#include "uvit/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "uvit/autodiff.hpp"
#include "uvit/data.hpp"
#include "uvit/errors.hpp"

namespace uvit {

// ---- Feature extraction ----

SmallCnn SmallCnn::random(std::int64_t channels, std::int64_t width, std::uint64_t seed) {
    if (channels < 1 || width < 1) throw ParameterError("small_cnn needs positive channels and width");
    Rng rng(seed);
    SmallCnn net;
    // He-style scale keeps activations O(1) through the GELUs.
    net.conv1_weight = Tensor::randn({width, 3, 3, channels}, rng) * std::sqrt(2.0 / static_cast<double>(9 * channels));
    net.conv1_bias = Tensor({width});
    net.conv2_weight = Tensor::randn({width, 3, 3, width}, rng) * std::sqrt(2.0 / static_cast<double>(9 * width));
    net.conv2_bias = Tensor({width});
    return net;
}

SmallCnn SmallCnn::load(const std::filesystem::path& checkpoint) {
    const auto ckpt = load_checkpoint(checkpoint);
    auto get = [&](const char* name) {
        const auto* t = ckpt.tensor(name);
        if (!t) throw PersistenceError(checkpoint.string() + ": feature network is missing '" + name + "'");
        return t->value;
    };
    SmallCnn net{get("conv1.weight"), get("conv1.bias"), get("conv2.weight"), get("conv2.bias")};
    const auto w = net.conv1_weight.rank() == 4 ? net.conv1_weight.dim(0) : -1;
    if (w < 1 || net.conv1_bias.shape() != Shape{w} || net.conv2_weight.shape() != Shape{w, 3, 3, w} ||
        net.conv2_bias.shape() != Shape{w} || net.conv1_weight.dim(1) != 3 || net.conv1_weight.dim(2) != 3) {
        throw PersistenceError(checkpoint.string() + ": inconsistent feature network shapes");
    }
    return net;
}

void SmallCnn::save(const std::filesystem::path& checkpoint) const {
    Checkpoint ckpt;
    ckpt.metadata.emplace_back("feature_net", "small_cnn");
    ckpt.tensors = {{"conv1.weight", conv1_weight}, {"conv1.bias", conv1_bias},
                    {"conv2.weight", conv2_weight}, {"conv2.bias", conv2_bias}};
    save_checkpoint(ckpt, checkpoint);
}

Tensor SmallCnn::features(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(3) != conv1_weight.dim(3)) {
        throw ShapeError("small_cnn expects [n, H, W, " + std::to_string(conv1_weight.dim(3)) + "], got " +
                         shape_string(images.shape()));
    }
    if (images.dim(1) % 2 != 0 || images.dim(2) % 2 != 0) throw ShapeError("small_cnn needs even image sides");
    ad::NoGradGuard no_grad;
    const auto n = images.dim(0), H = images.dim(1), W = images.dim(2), F = conv1_weight.dim(0);
    const Tensor h1 = ad::gelu(ad::conv2d(ad::Var::constant(images), ad::Var::constant(conv1_weight),
                                          ad::Var::constant(conv1_bias)))
                          .value();
    Tensor pooled({n, H / 2, W / 2, F});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t r = 0; r < H / 2; ++r)
            for (std::int64_t c = 0; c < W / 2; ++c)
                for (std::int64_t f = 0; f < F; ++f) {
                    double s = 0.0;
                    for (int dr = 0; dr < 2; ++dr)
                        for (int dc = 0; dc < 2; ++dc) s += h1[((b * H + 2 * r + dr) * W + 2 * c + dc) * F + f];
                    pooled[((b * (H / 2) + r) * (W / 2) + c) * F + f] = 0.25 * s;
                }
    const Tensor h2 = ad::gelu(ad::conv2d(ad::Var::constant(pooled), ad::Var::constant(conv2_weight),
                                          ad::Var::constant(conv2_bias)))
                          .value();
    const auto cells = (H / 2) * (W / 2);
    Tensor out({n, F});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t p = 0; p < cells; ++p)
            for (std::int64_t f = 0; f < F; ++f) out[b * F + f] += h2[(b * cells + p) * F + f] / static_cast<double>(cells);
    return out;
}

FeatureExtractor FeatureExtractor::raw_pixels() { return FeatureExtractor(Kind::raw_pixels); }
FeatureExtractor FeatureExtractor::pooled_pixels() { return FeatureExtractor(Kind::pooled_pixels); }
FeatureExtractor FeatureExtractor::small_cnn(SmallCnn net) {
    FeatureExtractor e(Kind::small_cnn);
    e.cnn_ = std::make_shared<const SmallCnn>(std::move(net));
    return e;
}

std::string FeatureExtractor::name() const {
    switch (kind_) {
        case Kind::raw_pixels: return "raw_pixels";
        case Kind::pooled_pixels: return "pooled_pixels";
        case Kind::small_cnn: return "small_cnn";
    }
    return "?";
}

Tensor FeatureExtractor::extract(const Tensor& images) const {
    if (images.rank() != 4) throw ShapeError("feature extraction expects [n, H, W, C], got " + shape_string(images.shape()));
    const auto n = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
    switch (kind_) {
        case Kind::raw_pixels:
            return images.reshaped({n, H * W * C});
        case Kind::pooled_pixels: {
            if (H % 4 != 0 || W % 4 != 0) throw ShapeError("pooled_pixels needs sides divisible by 4");
            const auto h = H / 4, w = W / 4;
            Tensor out({n, h * w * C});
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t r = 0; r < H; ++r)
                    for (std::int64_t c = 0; c < W; ++c)
                        for (std::int64_t ch = 0; ch < C; ++ch) {
                            out[((b * h + r / 4) * w + c / 4) * C + ch] += images[((b * H + r) * W + c) * C + ch] / 16.0;
                        }
            return out;
        }
        case Kind::small_cnn:
            return cnn_->features(images);
    }
    throw LogicError("unhandled extractor");
}

FeatureStats stats_from_features(const Tensor& features) {
    if (features.rank() != 2) throw ShapeError("features must be [n, d]");
    const auto n = features.dim(0), d = features.dim(1);
    if (n < 2) throw ParameterError("feature statistics need at least 2 samples, got " + std::to_string(n));
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(features.ptr(), n, d);
    FeatureStats s;
    s.n = n;
    s.mu = X.colwise().mean().transpose();
    const Eigen::MatrixXd centered = X.rowwise() - s.mu.transpose();
    s.sigma = (centered.transpose() * centered) / static_cast<double>(n - 1);
    s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
    return s;
}

FeatureStats feature_stats(const Tensor& images, const FeatureExtractor& extractor) {
    if (images.rank() != 4 || images.dim(0) < 2) throw ParameterError("feature statistics need at least 2 images");
    return stats_from_features(extractor.extract(images));
}

namespace {

constexpr double kEigenClamp = 1e-10;

// Symmetric PSD square root with eigenvalues below the relative clamp zeroed.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] <= kEigenClamp * top ? 0.0 : std::sqrt(ev[i]);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    const auto d = a.mu.size();
    if (b.mu.size() != d || a.sigma.rows() != d || a.sigma.cols() != d || b.sigma.rows() != d || b.sigma.cols() != d) {
        throw ShapeError("frechet_distance: feature dimensions differ (" + std::to_string(a.mu.size()) + " vs " +
                         std::to_string(b.mu.size()) + ")");
    }
    if (!a.mu.allFinite() || !b.mu.allFinite() || !a.sigma.allFinite() || !b.sigma.allFinite()) {
        throw NumericError("frechet_distance: non-finite statistics");
    }
    if (a.mu == b.mu && a.sigma == b.sigma) return 0.0;
    const Eigen::MatrixXd ra = psd_sqrt(a.sigma);
    Eigen::MatrixXd inner = ra * b.sigma * ra;
    inner = 0.5 * (inner + inner.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] > kEigenClamp * top) tr_sqrt += std::sqrt(ev[i]);
    }
    const double fd = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    return std::max(fd, 0.0);
}

// ---- Image export ----

unsigned char pixel_byte(double v) {
    const double c = std::clamp(v, -1.0, 1.0);
    return static_cast<unsigned char>(std::nearbyint((c + 1.0) * 127.5));
}

std::string encode_grid(const Tensor& images, std::int64_t rows, std::int64_t cols) {
    if (images.rank() != 4) throw ShapeError("sample_grid expects [n, H, W, C], got " + shape_string(images.shape()));
    const auto n = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
    if (rows < 1 || cols < 1 || rows * cols > n) {
        throw ParameterError("grid " + std::to_string(rows) + "x" + std::to_string(cols) + " needs more than " +
                             std::to_string(n) + " images");
    }
    if (C != 1 && C != 3) throw ShapeError("sample_grid supports 1 or 3 channels, got " + std::to_string(C));
    const auto out_w = cols * W, out_h = rows * H;
    std::string out = "P6\n" + std::to_string(out_w) + " " + std::to_string(out_h) + "\n255\n";
    const auto header = out.size();
    out.resize(header + static_cast<std::size_t>(out_w * out_h * 3));
    for (std::int64_t y = 0; y < out_h; ++y) {
        for (std::int64_t x = 0; x < out_w; ++x) {
            const auto img = (y / H) * cols + x / W;
            const auto base = ((img * H + y % H) * W + x % W) * C;
            for (int ch = 0; ch < 3; ++ch) {
                out[header + static_cast<std::size_t>((y * out_w + x) * 3 + ch)] =
                    static_cast<char>(pixel_byte(images[base + (C == 1 ? 0 : ch)]));
            }
        }
    }
    return out;
}

void sample_grid(const Tensor& images, std::int64_t rows, std::int64_t cols, const std::filesystem::path& path) {
    const auto bytes = encode_grid(images, rows, cols);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw PersistenceError("write failed for " + path.string());
}

// ---- Ablation harness ----

std::string to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::skip_mode: return "skip_mode";
        case AblationAxis::time_mode: return "time_mode";
        case AblationAxis::conv_mode: return "conv_mode";
        case AblationAxis::patch_embed_mode: return "patch_embed_mode";
        case AblationAxis::pos_embed_mode: return "pos_embed_mode";
        case AblationAxis::depth: return "depth";
        case AblationAxis::width: return "width";
        case AblationAxis::patch_size: return "patch_size";
    }
    return "?";
}

AblationAxis parse_ablation_axis(std::string_view s) {
    for (auto a : {AblationAxis::skip_mode, AblationAxis::time_mode, AblationAxis::conv_mode,
                   AblationAxis::patch_embed_mode, AblationAxis::pos_embed_mode, AblationAxis::depth,
                   AblationAxis::width, AblationAxis::patch_size}) {
        if (s == to_string(a)) return a;
    }
    throw ConfigError("unknown ablation axis '" + std::string(s) +
                      "' (valid: skip_mode, time_mode, conv_mode, patch_embed_mode, pos_embed_mode, depth, width, "
                      "patch_size)");
}

UViTConfig apply_variant(UViTConfig cfg, AblationAxis axis, const std::string& v) {
    switch (axis) {
        case AblationAxis::skip_mode: cfg.skip_mode = parse_skip_mode(v); break;
        case AblationAxis::time_mode: cfg.time_mode = parse_time_mode(v); break;
        case AblationAxis::conv_mode: cfg.conv_mode = parse_conv_mode(v); break;
        case AblationAxis::patch_embed_mode: cfg.patch_embed_mode = parse_patch_embed_mode(v); break;
        case AblationAxis::pos_embed_mode: cfg.pos_embed_mode = parse_pos_embed_mode(v); break;
        case AblationAxis::depth: cfg.depth = parse_int("depth", v); break;
        case AblationAxis::width:
            // MLP keeps its 4x ratio to the hidden size.
            cfg.hidden_size = parse_int("width", v);
            cfg.mlp_size = 4 * cfg.hidden_size;
            break;
        case AblationAxis::patch_size: cfg.patch_size = parse_int("patch_size", v); break;
    }
    cfg.validate();
    return cfg;
}

namespace {

std::int64_t thread_count(std::int64_t requested, std::size_t jobs) {
    std::int64_t n = requested;
    if (n <= 0) n = std::max<std::int64_t>(1, std::thread::hardware_concurrency());
    return std::clamp<std::int64_t>(n, 1, static_cast<std::int64_t>(jobs));
}

struct VariantResult {
    std::vector<AblationRow> rows;
    std::vector<double> losses;
    std::string error;
};

}  // namespace

AblationReport run_ablation(const AblationProtocol& protocol, const UViTConfig& base, const Dataset& dataset,
                            const TrainConfig& train_cfg, const NoiseSchedule& schedule) {
    if (protocol.variants.empty()) throw ConfigError("ablation needs at least one variant");
    TrainConfig tc = train_cfg;
    if (protocol.total_iterations > 0) tc.total_iterations = protocol.total_iterations;
    tc.validate();
    if (protocol.eval_every < 1 || protocol.eval_every > tc.total_iterations) {
        throw ConfigError("eval_every must lie in [1, total_iterations]");
    }
    if (protocol.eval_samples < 2) throw ConfigError("eval_samples must be at least 2");
    // Configs are checked up front so a typo fails before any training.
    std::vector<UViTConfig> configs;
    for (const auto& v : protocol.variants) configs.push_back(apply_variant(base, protocol.axis, v));

    const FeatureStats reference = feature_stats(dataset.images, protocol.extractor);
    std::vector<ConditionInput> eval_conditions;
    if (base.condition_kind == ConditionKind::class_label && dataset.num_classes > 0) {
        for (std::int64_t i = 0; i < protocol.eval_samples; ++i) eval_conditions.push_back(ClassLabel{i % dataset.num_classes});
    }

    std::vector<VariantResult> results(protocol.variants.size());
    auto run_one = [&](std::size_t k) {
        VariantResult& out = results[k];
        try {
            UViTModel model(configs[k], protocol.model_seed);
            TrainCallbacks cb;
            cb.on_step = [&](const TrainEvent& e) {
                if (e.iteration % protocol.eval_every != 0) return;
                const Tensor samples =
                    sample_model(model, schedule, protocol.sampler, protocol.eval_samples, eval_conditions);
                const double metric = frechet_distance(feature_stats(samples, protocol.extractor), reference);
                out.rows.push_back({protocol.variants[k], e.iteration, metric});
            };
            out.losses = train(model, dataset, schedule, tc, cb);
        } catch (const std::exception& e) {
            out.error = e.what();
        }
    };

    const auto workers = thread_count(protocol.threads, results.size());
    if (workers == 1) {
        for (std::size_t k = 0; k < results.size(); ++k) run_one(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::int64_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (auto k = next++; k < results.size(); k = next++) run_one(k);
            });
        }
    }

    AblationReport report;
    for (std::size_t k = 0; k < results.size(); ++k) {
        const auto& name = protocol.variants[k];
        auto& r = results[k];
        report.rows.insert(report.rows.end(), r.rows.begin(), r.rows.end());
        if (!r.error.empty()) report.errors[name] = r.error;
        if (!r.losses.empty()) {
            const auto tail = std::min<std::size_t>(100, r.losses.size());
            report.final_loss[name] =
                std::accumulate(r.losses.end() - static_cast<std::ptrdiff_t>(tail), r.losses.end(), 0.0) /
                static_cast<double>(tail);
        }
        report.losses[name] = std::move(r.losses);
    }
    return report;
}

void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PersistenceError("cannot open " + path.string() + " for writing");
    out.precision(17);
    out << "variant,iteration,metric\n";
    for (const auto& r : report.rows) out << r.variant << ',' << r.iteration << ',' << r.metric << '\n';
    if (!out) throw PersistenceError("write failed for " + path.string());
}

}  // namespace uvit
