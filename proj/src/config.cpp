#include "uvit/config.hpp"

#include <array>
#include <charconv>
#include <cstdlib>
#include <string>
#include <utility>

#include "uvit/errors.hpp"

namespace uvit {
namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view what, std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table) {
    for (const auto& [name, value] : table)
        if (name == s) return value;
    std::string valid;
    for (const auto& [name, value] : table) {
        if (!valid.empty()) valid += ", ";
        valid += name;
    }
    throw ConfigError("invalid " + std::string(what) + " '" + std::string(s) + "' (valid: " + valid + ")");
}

template <typename E, std::size_t N>
std::string name_of(E v, const std::array<std::pair<std::string_view, E>, N>& table) {
    for (const auto& [name, value] : table)
        if (value == v) return std::string(name);
    throw LogicError("unnamed enum value");
}

constexpr std::array<std::pair<std::string_view, SkipMode>, 5> kSkip{{{"concat_linear", SkipMode::concat_linear},
                                                                       {"add", SkipMode::add},
                                                                       {"linear_add", SkipMode::linear_add},
                                                                       {"add_linear", SkipMode::add_linear},
                                                                       {"none", SkipMode::none}}};
constexpr std::array<std::pair<std::string_view, TimeMode>, 2> kTime{{{"token", TimeMode::token},
                                                                       {"adaln", TimeMode::adaln}}};
constexpr std::array<std::pair<std::string_view, ConvMode>, 3> kConv{{{"after_linear", ConvMode::after_linear},
                                                                       {"before_linear", ConvMode::before_linear},
                                                                       {"none", ConvMode::none}}};
constexpr std::array<std::pair<std::string_view, PatchEmbedMode>, 2> kPatch{
    {{"linear", PatchEmbedMode::linear}, {"conv_stack", PatchEmbedMode::conv_stack}}};
constexpr std::array<std::pair<std::string_view, PosEmbedMode>, 3> kPos{{{"learnable_1d", PosEmbedMode::learnable_1d},
                                                                          {"sinusoidal_2d", PosEmbedMode::sinusoidal_2d},
                                                                          {"none", PosEmbedMode::none}}};
constexpr std::array<std::pair<std::string_view, ConditionKind>, 3> kCond{
    {{"none", ConditionKind::none}, {"class", ConditionKind::class_label}, {"context", ConditionKind::context}}};

}  // namespace

std::string to_string(SkipMode m) { return name_of(m, kSkip); }
std::string to_string(TimeMode m) { return name_of(m, kTime); }
std::string to_string(ConvMode m) { return name_of(m, kConv); }
std::string to_string(PatchEmbedMode m) { return name_of(m, kPatch); }
std::string to_string(PosEmbedMode m) { return name_of(m, kPos); }
std::string to_string(ConditionKind k) { return name_of(k, kCond); }

SkipMode parse_skip_mode(std::string_view s) { return parse_enum("skip_mode", s, kSkip); }
TimeMode parse_time_mode(std::string_view s) { return parse_enum("time_mode", s, kTime); }
ConvMode parse_conv_mode(std::string_view s) { return parse_enum("conv_mode", s, kConv); }
PatchEmbedMode parse_patch_embed_mode(std::string_view s) { return parse_enum("patch_embed_mode", s, kPatch); }
PosEmbedMode parse_pos_embed_mode(std::string_view s) { return parse_enum("pos_embed_mode", s, kPos); }
ConditionKind parse_condition_kind(std::string_view s) { return parse_enum("condition_kind", s, kCond); }

std::int64_t parse_int(std::string_view key, std::string_view value) {
    std::int64_t out = 0;
    const auto* end = value.data() + value.size();
    auto [p, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || p != end) {
        throw ConfigError("key '" + std::string(key) + "' expects an integer, got '" + std::string(value) + "'");
    }
    return out;
}

double parse_real(std::string_view key, std::string_view value) {
    const std::string s(value);
    char* end = nullptr;
    const double out = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw ConfigError("key '" + std::string(key) + "' expects a number, got '" + s + "'");
    }
    return out;
}

std::int64_t UViTConfig::prefix_slots() const {
    std::int64_t n = time_mode == TimeMode::token ? 1 : 0;
    if (condition_kind == ConditionKind::class_label) n += 1;
    if (condition_kind == ConditionKind::context) n += max_context_len;
    return n;
}

void UViTConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid U-ViT config: " + msg); };
    if (image_height <= 0 || image_width <= 0 || channels <= 0) fail("image dimensions must be positive");
    if (patch_size <= 0) fail("patch_size must be positive");
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
        fail("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
             " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (depth <= 0 || depth % 2 == 0) fail("depth must be a positive odd number, got " + std::to_string(depth));
    if (diffusion_steps <= 0) fail("diffusion_steps must be positive");
    if (hidden_size <= 0 || mlp_size <= 0) fail("hidden_size and mlp_size must be positive");
    if (num_heads <= 0 || hidden_size % num_heads != 0) fail("num_heads must divide hidden_size");
    if (hidden_size % 2 != 0) fail("hidden_size must be even for sinusoidal embeddings");
    if (pos_embed_mode == PosEmbedMode::sinusoidal_2d && hidden_size % 4 != 0) {
        fail("sinusoidal_2d position embedding needs hidden_size divisible by 4");
    }
    if (patch_embed_mode == PatchEmbedMode::conv_stack && hidden_size < 2) fail("conv_stack needs hidden_size >= 2");
    if (condition_kind == ConditionKind::class_label && num_classes <= 0) fail("class conditioning needs num_classes > 0");
    if (condition_kind == ConditionKind::context && (context_dim <= 0 || max_context_len <= 0)) {
        fail("context conditioning needs context_dim > 0 and max_context_len > 0");
    }
}

std::vector<std::pair<std::string, std::string>> UViTConfig::to_key_values() const {
    return {
        {"image_height", std::to_string(image_height)},
        {"image_width", std::to_string(image_width)},
        {"channels", std::to_string(channels)},
        {"patch_size", std::to_string(patch_size)},
        {"depth", std::to_string(depth)},
        {"hidden_size", std::to_string(hidden_size)},
        {"mlp_size", std::to_string(mlp_size)},
        {"num_heads", std::to_string(num_heads)},
        {"skip_mode", to_string(skip_mode)},
        {"time_mode", to_string(time_mode)},
        {"conv_mode", to_string(conv_mode)},
        {"patch_embed_mode", to_string(patch_embed_mode)},
        {"pos_embed_mode", to_string(pos_embed_mode)},
        {"condition_kind", to_string(condition_kind)},
        {"num_classes", std::to_string(num_classes)},
        {"context_dim", std::to_string(context_dim)},
        {"max_context_len", std::to_string(max_context_len)},
        {"diffusion_steps", std::to_string(diffusion_steps)},
    };
}

bool UViTConfig::apply(std::string_view key, std::string_view value) {
    if (key == "image_size") {
        image_height = image_width = parse_int(key, value);
    } else if (key == "image_height") {
        image_height = parse_int(key, value);
    } else if (key == "image_width") {
        image_width = parse_int(key, value);
    } else if (key == "channels") {
        channels = parse_int(key, value);
    } else if (key == "patch_size") {
        patch_size = parse_int(key, value);
    } else if (key == "depth") {
        depth = parse_int(key, value);
    } else if (key == "hidden_size") {
        hidden_size = parse_int(key, value);
    } else if (key == "mlp_size") {
        mlp_size = parse_int(key, value);
    } else if (key == "num_heads") {
        num_heads = parse_int(key, value);
    } else if (key == "skip_mode") {
        skip_mode = parse_skip_mode(value);
    } else if (key == "time_mode") {
        time_mode = parse_time_mode(value);
    } else if (key == "conv_mode") {
        conv_mode = parse_conv_mode(value);
    } else if (key == "patch_embed_mode") {
        patch_embed_mode = parse_patch_embed_mode(value);
    } else if (key == "pos_embed_mode") {
        pos_embed_mode = parse_pos_embed_mode(value);
    } else if (key == "condition_kind") {
        condition_kind = parse_condition_kind(value);
    } else if (key == "num_classes") {
        num_classes = parse_int(key, value);
    } else if (key == "context_dim") {
        context_dim = parse_int(key, value);
    } else if (key == "max_context_len") {
        max_context_len = parse_int(key, value);
    } else if (key == "diffusion_steps") {
        diffusion_steps = parse_int(key, value);
    } else {
        return false;
    }
    return true;
}

UViTConfig uvit_small() { return UViTConfig{}; }

UViTConfig uvit_small_deep() {
    UViTConfig c;
    c.depth = 17;
    return c;
}

UViTConfig uvit_mid() {
    UViTConfig c;
    c.image_height = c.image_width = 64;
    c.patch_size = 4;
    c.depth = 17;
    c.hidden_size = 768;
    c.mlp_size = 3072;
    c.num_heads = 12;
    // ImageNet 64x64 models are class-conditional.
    c.condition_kind = ConditionKind::class_label;
    c.num_classes = 1000;
    return c;
}

UViTConfig uvit_large() {
    UViTConfig c = uvit_mid();
    c.depth = 21;
    c.hidden_size = 1024;
    c.mlp_size = 4096;
    c.num_heads = 16;
    return c;
}

}  // namespace uvit
