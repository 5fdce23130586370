#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "uvit/cli.hpp"
#include "uvit/errors.hpp"

namespace uvit {

std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::shapes: return "shapes";
        case DatasetKind::shapes_text: return "shapes_text";
        case DatasetKind::gaussian: return "gaussian";
        case DatasetKind::cifar10: return "cifar10";
    }
    return "?";
}

DatasetKind parse_dataset_kind(std::string_view s) {
    if (s == "shapes") return DatasetKind::shapes;
    if (s == "shapes_text") return DatasetKind::shapes_text;
    if (s == "gaussian") return DatasetKind::gaussian;
    if (s == "cifar10") return DatasetKind::cifar10;
    throw ConfigError("unknown dataset '" + std::string(s) + "' (valid: shapes, shapes_text, gaussian, cifar10)");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_seed(std::string_view key, std::string_view value) {
    const auto v = parse_int(key, value);
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::uint64_t>(v);
}

FeatureExtractor::Kind parse_extractor(std::string_view s) {
    if (s == "raw_pixels") return FeatureExtractor::Kind::raw_pixels;
    if (s == "pooled_pixels") return FeatureExtractor::Kind::pooled_pixels;
    if (s == "small_cnn") return FeatureExtractor::Kind::small_cnn;
    throw ConfigError("unknown feature_extractor '" + std::string(s) + "' (valid: raw_pixels, pooled_pixels, small_cnn)");
}

std::string extractor_name(FeatureExtractor::Kind k) {
    switch (k) {
        case FeatureExtractor::Kind::raw_pixels: return "raw_pixels";
        case FeatureExtractor::Kind::pooled_pixels: return "pooled_pixels";
        case FeatureExtractor::Kind::small_cnn: return "small_cnn";
    }
    return "?";
}

std::string real_string(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

const std::vector<ConfigKey>& run_config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"image_size", "square image side (sets image_height and image_width)"},
        {"image_height", "image height in pixels"},
        {"image_width", "image width in pixels"},
        {"channels", "image channels"},
        {"patch_size", "patch side P"},
        {"depth", "number of transformer blocks (odd)"},
        {"hidden_size", "token width D"},
        {"mlp_size", "MLP hidden width"},
        {"num_heads", "attention heads"},
        {"skip_mode", "long skip: concat_linear, add, linear_add, add_linear, none"},
        {"time_mode", "time input: token, adaln"},
        {"conv_mode", "output conv: after_linear, before_linear, none"},
        {"patch_embed_mode", "patch embedding: linear, conv_stack"},
        {"pos_embed_mode", "position embedding: learnable_1d, sinusoidal_2d, none"},
        {"condition_kind", "conditioning: none, class, context"},
        {"num_classes", "class count K (class conditioning)"},
        {"context_dim", "context embedding width (context conditioning)"},
        {"max_context_len", "maximum context tokens (context conditioning)"},
        {"diffusion_steps", "number of diffusion steps T"},
        {"learning_rate", "AdamW learning rate"},
        {"weight_decay", "AdamW decoupled weight decay"},
        {"beta1", "AdamW first-moment decay"},
        {"beta2", "AdamW second-moment decay"},
        {"adam_epsilon", "AdamW epsilon"},
        {"batch_size", "training batch size"},
        {"total_iterations", "training iterations"},
        {"warmup_steps", "linear learning-rate warmup steps"},
        {"p_uncond", "probability of replacing the condition by Null"},
        {"seed", "training seed (batch order and noise)"},
        {"checkpoint_every", "iterations between checkpoints"},
        {"model_seed", "parameter initialisation seed"},
        {"dataset", "shapes, shapes_text, gaussian, cifar10"},
        {"dataset_size", "number of toy images"},
        {"dataset_seed", "toy dataset seed"},
        {"shape_kinds", "comma list of square, cross, ring, diagonal"},
        {"gaussian_mean", "gaussian toy mean"},
        {"gaussian_std", "gaussian toy standard deviation"},
        {"cifar_dir", "directory holding the CIFAR-10 binary batches"},
        {"cifar_split", "train or test"},
        {"vocab_seed", "toy text vocabulary seed"},
        {"sampler", "ddpm_ancestral, euler_maruyama, dpm_solver"},
        {"sampling_steps", "sampler steps"},
        {"solver_order", "dpm_solver order (1 or 2)"},
        {"step_placement", "dpm_solver time points: uniform_lambda, uniform_time"},
        {"guidance_strength", "guidance strength s, or none"},
        {"sample_seed", "sampling seed"},
        {"eval_every", "ablation evaluation interval"},
        {"eval_samples", "samples per ablation evaluation"},
        {"feature_extractor", "raw_pixels, pooled_pixels, small_cnn"},
        {"feature_net", "small_cnn checkpoint path"},
        {"output_dir", "directory for logs, checkpoints and reports"},
        {"threads", "worker threads (0 = auto; UVIT_THREADS overrides)"},
    };
    return keys;
}

void RunConfig::apply(const std::string& key, const std::string& v) {
    if (model.apply(key, v)) return;
    if (key == "learning_rate") train.learning_rate = parse_real(key, v);
    else if (key == "weight_decay") train.weight_decay = parse_real(key, v);
    else if (key == "beta1") train.beta1 = parse_real(key, v);
    else if (key == "beta2") train.beta2 = parse_real(key, v);
    else if (key == "adam_epsilon") train.adam_epsilon = parse_real(key, v);
    else if (key == "batch_size") train.batch_size = parse_int(key, v);
    else if (key == "total_iterations") train.total_iterations = parse_int(key, v);
    else if (key == "warmup_steps") train.warmup_steps = parse_int(key, v);
    else if (key == "p_uncond") train.p_uncond = parse_real(key, v);
    else if (key == "seed") train.seed = parse_seed(key, v);
    else if (key == "checkpoint_every") train.checkpoint_every = parse_int(key, v);
    else if (key == "model_seed") model_seed = parse_seed(key, v);
    else if (key == "dataset") dataset = parse_dataset_kind(v);
    else if (key == "dataset_size") dataset_size = parse_int(key, v);
    else if (key == "dataset_seed") dataset_seed = parse_seed(key, v);
    else if (key == "shape_kinds") {
        shape_kinds.clear();
        std::istringstream parts(v);
        std::string item;
        while (std::getline(parts, item, ',')) shape_kinds.push_back(parse_toy_shape(trim(item)));
    } else if (key == "gaussian_mean") gaussian_mean = parse_real(key, v);
    else if (key == "gaussian_std") gaussian_std = parse_real(key, v);
    else if (key == "cifar_dir") cifar_dir = v;
    else if (key == "cifar_split") cifar_split = v;
    else if (key == "vocab_seed") vocab_seed = parse_seed(key, v);
    else if (key == "sampler") sampler = parse_sampler_kind(v);
    else if (key == "sampling_steps") sampling_steps = parse_int(key, v);
    else if (key == "solver_order") solver_order = static_cast<int>(parse_int(key, v));
    else if (key == "step_placement") step_placement = parse_step_placement(v);
    else if (key == "guidance_strength") {
        if (v == "none") guidance_strength.reset();
        else guidance_strength = parse_real(key, v);
    } else if (key == "sample_seed") sample_seed = parse_seed(key, v);
    else if (key == "eval_every") eval_every = parse_int(key, v);
    else if (key == "eval_samples") eval_samples = parse_int(key, v);
    else if (key == "feature_extractor") feature_extractor = parse_extractor(v);
    else if (key == "feature_net") feature_net = v;
    else if (key == "output_dir") output_dir = v;
    else if (key == "threads") threads = parse_int(key, v);
    else throw ConfigError("unknown key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_key_values() const {
    auto kv = model.to_key_values();
    std::string kinds;
    for (auto k : shape_kinds) kinds += (kinds.empty() ? "" : ",") + to_string(k);
    const std::vector<std::pair<std::string, std::string>> rest = {
        {"learning_rate", real_string(train.learning_rate)},
        {"weight_decay", real_string(train.weight_decay)},
        {"beta1", real_string(train.beta1)},
        {"beta2", real_string(train.beta2)},
        {"adam_epsilon", real_string(train.adam_epsilon)},
        {"batch_size", std::to_string(train.batch_size)},
        {"total_iterations", std::to_string(train.total_iterations)},
        {"warmup_steps", std::to_string(train.warmup_steps)},
        {"p_uncond", real_string(train.p_uncond)},
        {"seed", std::to_string(train.seed)},
        {"checkpoint_every", std::to_string(train.checkpoint_every)},
        {"model_seed", std::to_string(model_seed)},
        {"dataset", to_string(dataset)},
        {"dataset_size", std::to_string(dataset_size)},
        {"dataset_seed", std::to_string(dataset_seed)},
        {"shape_kinds", kinds},
        {"gaussian_mean", real_string(gaussian_mean)},
        {"gaussian_std", real_string(gaussian_std)},
        {"cifar_dir", cifar_dir.string()},
        {"cifar_split", cifar_split},
        {"vocab_seed", std::to_string(vocab_seed)},
        {"sampler", to_string(sampler)},
        {"sampling_steps", std::to_string(sampling_steps)},
        {"solver_order", std::to_string(solver_order)},
        {"step_placement", to_string(step_placement)},
        {"guidance_strength", guidance_strength ? real_string(*guidance_strength) : "none"},
        {"sample_seed", std::to_string(sample_seed)},
        {"eval_every", std::to_string(eval_every)},
        {"eval_samples", std::to_string(eval_samples)},
        {"feature_extractor", extractor_name(feature_extractor)},
        {"feature_net", feature_net.string()},
        {"output_dir", output_dir.string()},
        {"threads", std::to_string(threads)},
    };
    kv.insert(kv.end(), rest.begin(), rest.end());
    return kv;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (dataset_size < 1) throw ConfigError("dataset_size must be positive");
    if (sampling_steps < 1) throw ConfigError("sampling_steps must be positive");
    if (solver_order != 1 && solver_order != 2) throw ConfigError("solver_order must be 1 or 2");
    if (eval_every < 1 || eval_samples < 2) throw ConfigError("eval_every must be >= 1 and eval_samples >= 2");
    if (threads < 0) throw ConfigError("threads must be non-negative");
    if (dataset == DatasetKind::shapes || dataset == DatasetKind::shapes_text) {
        if (shape_kinds.empty()) throw ConfigError("shape_kinds must list at least one shape");
        if (model.image_height != model.image_width || (model.image_height != 8 && model.image_height != 16) ||
            model.channels != 1) {
            throw ConfigError("shapes datasets need 8x8 or 16x16 single-channel images");
        }
    }
    if (dataset == DatasetKind::shapes && model.condition_kind == ConditionKind::class_label &&
        model.num_classes != static_cast<std::int64_t>(shape_kinds.size())) {
        throw ConfigError("num_classes must equal the number of shape_kinds");
    }
    if (dataset == DatasetKind::shapes && model.condition_kind == ConditionKind::context) {
        throw ConfigError("context conditioning needs dataset=shapes_text");
    }
    if (dataset == DatasetKind::shapes_text && model.condition_kind != ConditionKind::context) {
        throw ConfigError("dataset=shapes_text needs condition_kind=context");
    }
    if (dataset == DatasetKind::cifar10) {
        if (model.image_height != 32 || model.image_width != 32 || model.channels != 3) {
            throw ConfigError("cifar10 needs 32x32x3 images");
        }
        if (model.condition_kind == ConditionKind::class_label && model.num_classes != 10) {
            throw ConfigError("cifar10 class conditioning needs num_classes=10");
        }
        if (cifar_dir.empty()) throw ConfigError("dataset=cifar10 needs cifar_dir");
    }
    if (feature_extractor == FeatureExtractor::Kind::small_cnn && feature_net.empty()) {
        throw ConfigError("feature_extractor=small_cnn needs feature_net");
    }
}

SamplerSpec RunConfig::sampler_spec() const {
    SamplerSpec s;
    s.kind = sampler;
    s.steps = sampling_steps;
    s.order = solver_order;
    s.placement = step_placement;
    s.seed = sample_seed;
    return s;
}

RunConfig parse_run_config(std::istream& in, RunConfig cfg) {
    std::string line;
    std::int64_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        const auto body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(number) + ": expected key = value, got '" + body + "'");
        }
        const auto key = trim(std::string_view(body).substr(0, eq));
        const auto value = trim(std::string_view(body).substr(eq + 1));
        try {
            cfg.apply(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(number) + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return parse_run_config(in);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    cfg.apply(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

Dataset build_dataset(const RunConfig& cfg) {
    const bool class_cond = cfg.model.condition_kind == ConditionKind::class_label;
    switch (cfg.dataset) {
        case DatasetKind::shapes:
        case DatasetKind::shapes_text: {
            ToySpec spec;
            spec.kind = ToySpec::Kind::shapes;
            spec.shapes.kinds = cfg.shape_kinds;
            spec.shapes.size = cfg.model.image_height;
            spec.shapes.conditional = class_cond || cfg.dataset == DatasetKind::shapes_text;
            Dataset d = make_toy_dataset(spec, cfg.dataset_size, cfg.dataset_seed);
            if (cfg.dataset == DatasetKind::shapes_text) {
                const auto vocab = ToyVocab::standard(cfg.model.context_dim, cfg.vocab_seed);
                for (auto& c : d.conditions) {
                    const auto label = std::get<ClassLabel>(c).label;
                    c = toy_text_encode("a " + to_string(cfg.shape_kinds[static_cast<std::size_t>(label)]), vocab,
                                        cfg.model.context_dim, cfg.model.max_context_len);
                }
                d.name = "shapes_text";
            }
            return d;
        }
        case DatasetKind::gaussian: {
            ToySpec spec;
            spec.kind = ToySpec::Kind::gaussian;
            spec.gaussian = {cfg.gaussian_mean, cfg.gaussian_std, cfg.model.image_height, cfg.model.image_width,
                             cfg.model.channels};
            return make_toy_dataset(spec, cfg.dataset_size, cfg.dataset_seed);
        }
        case DatasetKind::cifar10:
            return load_cifar10(cfg.cifar_dir, cfg.cifar_split, class_cond);
    }
    throw LogicError("unhandled dataset kind");
}

FeatureExtractor build_extractor(const RunConfig& cfg) {
    switch (cfg.feature_extractor) {
        case FeatureExtractor::Kind::raw_pixels: return FeatureExtractor::raw_pixels();
        case FeatureExtractor::Kind::pooled_pixels: return FeatureExtractor::pooled_pixels();
        case FeatureExtractor::Kind::small_cnn: return FeatureExtractor::small_cnn(SmallCnn::load(cfg.feature_net));
    }
    throw LogicError("unhandled extractor");
}

std::int64_t resolve_threads(const RunConfig& cfg) {
    if (const char* env = std::getenv("UVIT_THREADS"); env && *env) {
        const auto n = parse_int("UVIT_THREADS", env);
        if (n < 0) throw ConfigError("UVIT_THREADS must be non-negative");
        return n;
    }
    return cfg.threads;
}

}  // namespace uvit
