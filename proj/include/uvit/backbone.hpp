#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "uvit/autodiff.hpp"
#include "uvit/conditioning.hpp"
#include "uvit/config.hpp"
#include "uvit/tensor.hpp"

namespace uvit {

// [B, H, W, C] -> [B, (H/P)(W/P), P*P*C]. Patches are row-major over the
// grid; each patch is flattened in (row, column, channel) order.
Tensor patchify(const Tensor& images, std::int64_t patch);
Tensor unpatchify(const Tensor& patches, std::int64_t patch, std::int64_t height, std::int64_t width,
                  std::int64_t channels);
// Flat source index, for every output element of patchify. unpatchify is the
// inverse permutation.
std::vector<std::int64_t> patchify_index(std::int64_t batch, std::int64_t height, std::int64_t width,
                                         std::int64_t channels, std::int64_t patch);

struct LinearParams {
    ad::Var weight;  // [out, in]
    ad::Var bias;    // [out]
};

struct NormParams {
    ad::Var gain;
    ad::Var bias;
};

struct ConvParams {
    ad::Var weight;  // [out, k, k, in]
    ad::Var bias;
};

struct BlockParams {
    NormParams norm1, norm2;  // unused under AdaLN
    LinearParams ada1, ada2;  // D -> 2D scale|shift, AdaLN only
    LinearParams qkv, proj;
    LinearParams fc1, fc2;
};

enum class ParamGroup { weight, bias, norm, embedding, position };

struct NamedParameter {
    std::string name;
    ad::Var var;
    ParamGroup group;
};

// h_m and h_s are [tokens, D]. add needs no parameters; the linear variants
// read params.weight / params.bias. SkipMode::none is a LogicError here.
ad::Var combine_skip(const ad::Var& h_m, const ad::Var& h_s, SkipMode mode, const LinearParams& params);

// y_s * LayerNorm(h) + y_b with [y_s | y_b] = projection(t_emb). h is
// [tokens, D]; t_emb is [B, D]; row_sample maps each token row to its batch
// entry.
ad::Var ada_layer_norm(const ad::Var& h, const ad::Var& t_emb, const LinearParams& projection,
                       std::span<const std::int64_t> row_sample);

// Test hooks threaded through forward. Layers are numbered 0..L-1 in
// execution order; decoder index j runs 1..(L-1)/2.
struct ForwardHooks {
    std::function<ad::Var(std::int64_t layer, const ad::Var& h)> block_override;
    std::function<void(std::int64_t layer, const ad::Var& out)> on_encoder_output;
    std::function<void(std::int64_t decoder_index, const ad::Var& h_m, const ad::Var& h_s, const ad::Var& combined)>
        on_skip;
};

class UViTModel {
public:
    // Deterministic in (config, seed). Throws ConfigError on invalid configs.
    UViTModel(UViTConfig config, std::uint64_t seed);

    const UViTConfig& config() const { return config_; }
    std::vector<NamedParameter>& parameters() { return params_; }
    const std::vector<NamedParameter>& parameters() const { return params_; }
    const NamedParameter* find(const std::string& name) const;
    std::int64_t count_params() const;

    // Predicted noise for x_t of shape [B, H, W, C].
    ad::Var forward(const Tensor& x_t, std::span<const std::int64_t> t, std::span<const ConditionInput> cond,
                    const ForwardHooks* hooks = nullptr) const;
    // forward() without gradient recording.
    Tensor predict(const Tensor& x_t, std::span<const std::int64_t> t, std::span<const ConditionInput> cond) const;

    void zero_grad();

    // Parameter access used by the conditioning layer.
    const LinearParams& time_embed() const { return time_embed_; }
    const ad::Var& class_table() const { return class_table_; }
    const LinearParams& context_proj() const { return context_proj_; }
    const ad::Var& null_context() const { return null_context_; }

private:
    ad::Var& add_param(std::string name, Tensor value, ParamGroup group);
    void build(std::uint64_t seed);
    ad::Var transformer_block(const ad::Var& h, const BlockParams& p, const ad::Var& t_emb,
                              std::span<const std::int64_t> offsets, std::span<const std::int64_t> row_sample) const;
    ad::Var embed_patches(const Tensor& x_t) const;

    UViTConfig config_;
    std::vector<NamedParameter> params_;

    LinearParams patch_linear_;
    ConvParams embed_conv1_, embed_conv2_, embed_conv3_;  // conv_stack
    ad::Var pos_embed_;                                    // learnable_1d
    Tensor sinusoidal_pos_;                                // sinusoidal_2d, fixed
    LinearParams time_embed_;
    ad::Var class_table_;  // [K + 1, D], last row is Null
    LinearParams context_proj_;
    ad::Var null_context_;  // [1, D]
    std::vector<BlockParams> blocks_;
    std::vector<LinearParams> skips_;
    NormParams final_norm_;
    ConvParams pre_head_conv_;  // before_linear
    LinearParams head_;
    ConvParams out_conv_;  // after_linear
};

UViTModel build_uvit(const UViTConfig& config, std::uint64_t seed);
std::int64_t count_params(const UViTModel& model);

}  // namespace uvit
