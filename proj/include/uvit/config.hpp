#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace uvit {

enum class SkipMode { concat_linear, add, linear_add, add_linear, none };
enum class TimeMode { token, adaln };
enum class ConvMode { after_linear, before_linear, none };
enum class PatchEmbedMode { linear, conv_stack };
enum class PosEmbedMode { learnable_1d, sinusoidal_2d, none };
enum class ConditionKind { none, class_label, context };

std::string to_string(SkipMode m);
std::string to_string(TimeMode m);
std::string to_string(ConvMode m);
std::string to_string(PatchEmbedMode m);
std::string to_string(PosEmbedMode m);
std::string to_string(ConditionKind k);

// Parsers throw ConfigError listing the valid names.
SkipMode parse_skip_mode(std::string_view s);
TimeMode parse_time_mode(std::string_view s);
ConvMode parse_conv_mode(std::string_view s);
PatchEmbedMode parse_patch_embed_mode(std::string_view s);
PosEmbedMode parse_pos_embed_mode(std::string_view s);
ConditionKind parse_condition_kind(std::string_view s);

struct UViTConfig {
    std::int64_t image_height = 32;
    std::int64_t image_width = 32;
    std::int64_t channels = 3;
    std::int64_t patch_size = 2;
    std::int64_t depth = 13;
    std::int64_t hidden_size = 512;
    std::int64_t mlp_size = 2048;
    std::int64_t num_heads = 8;

    SkipMode skip_mode = SkipMode::concat_linear;
    TimeMode time_mode = TimeMode::token;
    ConvMode conv_mode = ConvMode::after_linear;
    PatchEmbedMode patch_embed_mode = PatchEmbedMode::linear;
    PosEmbedMode pos_embed_mode = PosEmbedMode::learnable_1d;

    ConditionKind condition_kind = ConditionKind::none;
    std::int64_t num_classes = 0;      // K, class mode
    std::int64_t context_dim = 0;      // context mode
    std::int64_t max_context_len = 0;  // context mode

    // Number of diffusion steps T; bounds the timestep inputs.
    std::int64_t diffusion_steps = 1000;

    std::int64_t grid_height() const { return image_height / patch_size; }
    std::int64_t grid_width() const { return image_width / patch_size; }
    std::int64_t num_patches() const { return grid_height() * grid_width(); }
    std::int64_t patch_dim() const { return patch_size * patch_size * channels; }
    std::int64_t half_depth() const { return (depth - 1) / 2; }
    // Tokens that precede the patches in the layout (time + condition slots).
    std::int64_t prefix_slots() const;
    std::int64_t max_tokens() const { return prefix_slots() + num_patches(); }

    // Throws ConfigError naming the first violated invariant.
    void validate() const;

    // Flat key=value form shared by checkpoints and run configs.
    std::vector<std::pair<std::string, std::string>> to_key_values() const;
    // Applies one key; returns false when the key is not a model key.
    bool apply(std::string_view key, std::string_view value);

    bool operator==(const UViTConfig&) const = default;
};

// Table 2 presets. Small uses CIFAR-10 geometry (32x32x3, patch 2);
// Mid and Large use 64x64x3 with patch 4.
UViTConfig uvit_small();
UViTConfig uvit_small_deep();
UViTConfig uvit_mid();
UViTConfig uvit_large();

std::int64_t parse_int(std::string_view key, std::string_view value);
double parse_real(std::string_view key, std::string_view value);

}  // namespace uvit
