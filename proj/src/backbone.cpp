#include "uvit/backbone.hpp"

#include <numeric>

#include "uvit/errors.hpp"

namespace uvit {
namespace {

constexpr double kInitStd = 0.02;

void check_images(const Tensor& images, const char* what) {
    if (images.rank() != 4) throw ShapeError(std::string(what) + ": expected [B, H, W, C], got " + shape_string(images.shape()));
}

}  // namespace

// ---- patches ------------------------------------------------------------------

std::vector<std::int64_t> patchify_index(std::int64_t batch, std::int64_t height, std::int64_t width,
                                         std::int64_t channels, std::int64_t patch) {
    if (patch <= 0 || height % patch != 0 || width % patch != 0) {
        throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch size " + std::to_string(patch));
    }
    const auto gh = height / patch;
    const auto gw = width / patch;
    std::vector<std::int64_t> index;
    index.reserve(static_cast<std::size_t>(batch * height * width * channels));
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t gi = 0; gi < gh; ++gi)
            for (std::int64_t gj = 0; gj < gw; ++gj)
                for (std::int64_t pi = 0; pi < patch; ++pi)
                    for (std::int64_t pj = 0; pj < patch; ++pj)
                        for (std::int64_t c = 0; c < channels; ++c)
                            index.push_back(((b * height + gi * patch + pi) * width + gj * patch + pj) * channels + c);
    return index;
}

Tensor patchify(const Tensor& images, std::int64_t patch) {
    check_images(images, "patchify");
    const auto B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
    const auto index = patchify_index(B, H, W, C, patch);
    Tensor out(Shape{B, (H / patch) * (W / patch), patch * patch * C});
    for (std::size_t i = 0; i < index.size(); ++i) out[static_cast<std::int64_t>(i)] = images[index[i]];
    return out;
}

Tensor unpatchify(const Tensor& patches, std::int64_t patch, std::int64_t height, std::int64_t width,
                  std::int64_t channels) {
    if (patches.rank() != 3) throw ShapeError("unpatchify: expected [B, N, P*P*C], got " + shape_string(patches.shape()));
    const auto B = patches.dim(0);
    const auto index = patchify_index(B, height, width, channels, patch);
    if (patches.dim(1) != (height / patch) * (width / patch) || patches.dim(2) != patch * patch * channels) {
        throw ShapeError("unpatchify: patch tensor " + shape_string(patches.shape()) + " does not match " +
                         std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels) +
                         " with patch " + std::to_string(patch));
    }
    Tensor out(Shape{B, height, width, channels});
    for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] = patches[static_cast<std::int64_t>(i)];
    return out;
}

// ---- building blocks -------------------------------------------------------------

ad::Var combine_skip(const ad::Var& h_m, const ad::Var& h_s, SkipMode mode, const LinearParams& params) {
    if (h_m.shape() != h_s.shape()) {
        throw ShapeError("combine_skip: " + shape_string(h_m.shape()) + " vs " + shape_string(h_s.shape()));
    }
    switch (mode) {
        case SkipMode::concat_linear:
            return ad::linear(ad::concat_cols(h_m, h_s), params.weight, params.bias);
        case SkipMode::add:
            return ad::add(h_m, h_s);
        case SkipMode::linear_add:
            return ad::add(h_m, ad::linear(h_s, params.weight, params.bias));
        case SkipMode::add_linear:
            return ad::linear(ad::add(h_m, h_s), params.weight, params.bias);
        case SkipMode::none:
            break;
    }
    throw LogicError("combine_skip called with skip_mode=none");
}

ad::Var ada_layer_norm(const ad::Var& h, const ad::Var& t_emb, const LinearParams& projection,
                       std::span<const std::int64_t> row_sample) {
    if (h.value().rank() != 2 || t_emb.value().rank() != 2) throw ShapeError("ada_layer_norm: expected 2-D inputs");
    const auto rows = h.dim(0);
    const auto D = h.dim(1);
    if (t_emb.dim(1) != D) throw ShapeError("ada_layer_norm: time embedding width differs from tokens");
    if (static_cast<std::int64_t>(row_sample.size()) != rows) throw ShapeError("ada_layer_norm: row map size");
    const ad::Var mod = ad::linear(t_emb, projection.weight, projection.bias);  // [B, 2D]
    if (mod.dim(1) != 2 * D) throw ShapeError("ada_layer_norm: projection must map D -> 2D");

    std::vector<std::int64_t> scale_idx(static_cast<std::size_t>(rows * D));
    std::vector<std::int64_t> shift_idx(scale_idx.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const auto b = row_sample[static_cast<std::size_t>(r)];
        if (b < 0 || b >= mod.dim(0)) throw IndexError("ada_layer_norm: row maps outside the batch");
        for (std::int64_t d = 0; d < D; ++d) {
            scale_idx[static_cast<std::size_t>(r * D + d)] = b * 2 * D + d;
            shift_idx[static_cast<std::size_t>(r * D + d)] = b * 2 * D + D + d;
        }
    }
    const ad::Var scale = ad::gather(mod, std::move(scale_idx), Shape{rows, D});
    const ad::Var shift = ad::gather(mod, std::move(shift_idx), Shape{rows, D});
    return ad::add(ad::mul(ad::layer_norm(h), scale), shift);
}

// ---- model ----------------------------------------------------------------------------

UViTModel::UViTModel(UViTConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    build(seed);
}

ad::Var& UViTModel::add_param(std::string name, Tensor value, ParamGroup group) {
    params_.push_back(NamedParameter{std::move(name), ad::Var::parameter(std::move(value)), group});
    return params_.back().var;
}

void UViTModel::build(std::uint64_t seed) {
    const auto& c = config_;
    const auto D = c.hidden_size;
    Rng rng(seed);
    params_.reserve(static_cast<std::size_t>(64 + 16 * c.depth));

    auto linear = [&](const std::string& name, std::int64_t in, std::int64_t out, bool zero = false) {
        LinearParams p;
        p.weight = add_param(name + ".weight", zero ? Tensor(Shape{out, in}) : Tensor::trunc_normal(Shape{out, in}, kInitStd, rng),
                             ParamGroup::weight);
        p.bias = add_param(name + ".bias", Tensor(Shape{out}), ParamGroup::bias);
        return p;
    };
    auto conv = [&](const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, bool zero = false) {
        ConvParams p;
        Shape shape{out, k, k, in};
        p.weight = add_param(name + ".weight", zero ? Tensor(shape) : Tensor::trunc_normal(shape, kInitStd, rng),
                             ParamGroup::weight);
        p.bias = add_param(name + ".bias", Tensor(Shape{out}), ParamGroup::bias);
        return p;
    };
    auto norm = [&](const std::string& name) {
        NormParams p;
        p.gain = add_param(name + ".gain", Tensor(Shape{D}, 1.0), ParamGroup::norm);
        p.bias = add_param(name + ".bias", Tensor(Shape{D}), ParamGroup::norm);
        return p;
    };
    auto ada = [&](const std::string& name) {
        LinearParams p = linear(name, D, 2 * D);
        // Start as a plain layer norm: scale 1, shift 0.
        auto& b = p.bias.mutable_value();
        for (std::int64_t d = 0; d < D; ++d) b[d] = 1.0;
        return p;
    };

    if (c.patch_embed_mode == PatchEmbedMode::linear) {
        patch_linear_ = linear("patch_embed", c.patch_dim(), D);
    } else {
        embed_conv1_ = conv("patch_embed.conv1", c.patch_dim(), D / 2, 3);
        embed_conv2_ = conv("patch_embed.conv2", D / 2, D / 2, 3);
        embed_conv3_ = conv("patch_embed.conv3", D / 2, D, 1);
    }
    time_embed_ = linear("time_embed", D, D);
    if (c.condition_kind == ConditionKind::class_label) {
        class_table_ = add_param("class_embed", Tensor::trunc_normal(Shape{c.num_classes + 1, D}, kInitStd, rng),
                                 ParamGroup::embedding);
    } else if (c.condition_kind == ConditionKind::context) {
        context_proj_ = linear("context_proj", c.context_dim, D);
        null_context_ = add_param("null_context", Tensor::trunc_normal(Shape{1, D}, kInitStd, rng), ParamGroup::embedding);
    }

    if (c.pos_embed_mode == PosEmbedMode::learnable_1d) {
        pos_embed_ = add_param("pos_embed", Tensor::trunc_normal(Shape{c.max_tokens(), D}, kInitStd, rng),
                               ParamGroup::position);
    } else if (c.pos_embed_mode == PosEmbedMode::sinusoidal_2d) {
        sinusoidal_pos_ = Tensor(Shape{c.max_tokens(), D});
        const auto prefix = c.prefix_slots();
        for (std::int64_t i = 0; i < c.grid_height(); ++i)
            for (std::int64_t j = 0; j < c.grid_width(); ++j) {
                const Tensor row_part = sinusoidal_embedding(static_cast<double>(i), D / 2);
                const Tensor col_part = sinusoidal_embedding(static_cast<double>(j), D / 2);
                double* dst = sinusoidal_pos_.ptr() + (prefix + i * c.grid_width() + j) * D;
                std::copy(row_part.data().begin(), row_part.data().end(), dst);
                std::copy(col_part.data().begin(), col_part.data().end(), dst + D / 2);
            }
    }

    blocks_.resize(static_cast<std::size_t>(c.depth));
    for (std::int64_t l = 0; l < c.depth; ++l) {
        const std::string name = "blocks." + std::to_string(l);
        auto& b = blocks_[static_cast<std::size_t>(l)];
        if (c.time_mode == TimeMode::token) {
            b.norm1 = norm(name + ".norm1");
        } else {
            b.ada1 = ada(name + ".ada1");
        }
        b.qkv = linear(name + ".attn.qkv", D, 3 * D);
        b.proj = linear(name + ".attn.proj", D, D);
        if (c.time_mode == TimeMode::token) {
            b.norm2 = norm(name + ".norm2");
        } else {
            b.ada2 = ada(name + ".ada2");
        }
        b.fc1 = linear(name + ".mlp.fc1", D, c.mlp_size);
        b.fc2 = linear(name + ".mlp.fc2", c.mlp_size, D);
    }

    skips_.resize(static_cast<std::size_t>(c.half_depth()));
    for (std::int64_t j = 0; j < c.half_depth(); ++j) {
        const std::string name = "skips." + std::to_string(j + 1);
        auto& s = skips_[static_cast<std::size_t>(j)];
        switch (c.skip_mode) {
            case SkipMode::concat_linear:
                s = linear(name, 2 * D, D);
                break;
            case SkipMode::linear_add:
            case SkipMode::add_linear:
                s = linear(name, D, D);
                break;
            case SkipMode::add:
            case SkipMode::none:
                break;
        }
    }

    final_norm_ = norm("final_norm");
    // The last op before the output starts at zero so the network is
    // initially the zero function.
    if (c.conv_mode == ConvMode::before_linear) pre_head_conv_ = conv("head_conv", D, D, 3);
    head_ = linear("head", D, c.patch_dim(), c.conv_mode != ConvMode::after_linear);
    if (c.conv_mode == ConvMode::after_linear) out_conv_ = conv("out_conv", c.channels, c.channels, 3, true);
}

const NamedParameter* UViTModel::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

std::int64_t UViTModel::count_params() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
}

void UViTModel::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

ad::Var UViTModel::embed_patches(const Tensor& x_t) const {
    const auto& c = config_;
    const auto B = x_t.dim(0);
    const Tensor patches = patchify(x_t, c.patch_size);
    if (c.patch_embed_mode == PatchEmbedMode::linear) {
        const auto input = ad::Var::constant(patches.reshaped(Shape{B * c.num_patches(), c.patch_dim()}));
        return ad::linear(input, patch_linear_.weight, patch_linear_.bias);
    }
    // Space-to-depth: the patch tensor is already the (H/P)x(W/P) grid with P*P*C channels.
    const auto grid = ad::Var::constant(patches.reshaped(Shape{B, c.grid_height(), c.grid_width(), c.patch_dim()}));
    ad::Var h = ad::conv2d(grid, embed_conv1_.weight, embed_conv1_.bias);
    h = ad::gelu(h);
    h = ad::conv2d(h, embed_conv2_.weight, embed_conv2_.bias);
    h = ad::conv2d(h, embed_conv3_.weight, embed_conv3_.bias);
    return ad::reshape(h, Shape{B * c.num_patches(), c.hidden_size});
}

ad::Var UViTModel::transformer_block(const ad::Var& h, const BlockParams& p, const ad::Var& t_emb,
                                     std::span<const std::int64_t> offsets,
                                     std::span<const std::int64_t> row_sample) const {
    const bool adaln = config_.time_mode == TimeMode::adaln;
    const ad::Var n1 = adaln ? ada_layer_norm(h, t_emb, p.ada1, row_sample) : ad::layer_norm(h, p.norm1.gain, p.norm1.bias);
    const ad::Var attn = ad::self_attention(ad::linear(n1, p.qkv.weight, p.qkv.bias), offsets, config_.num_heads);
    const ad::Var x = ad::add(h, ad::linear(attn, p.proj.weight, p.proj.bias));
    const ad::Var n2 = adaln ? ada_layer_norm(x, t_emb, p.ada2, row_sample) : ad::layer_norm(x, p.norm2.gain, p.norm2.bias);
    const ad::Var mlp = ad::linear(ad::gelu(ad::linear(n2, p.fc1.weight, p.fc1.bias)), p.fc2.weight, p.fc2.bias);
    return ad::add(x, mlp);
}

ad::Var UViTModel::forward(const Tensor& x_t, std::span<const std::int64_t> t, std::span<const ConditionInput> cond,
                           const ForwardHooks* hooks) const {
    const auto& c = config_;
    check_images(x_t, "forward");
    if (x_t.dim(1) != c.image_height || x_t.dim(2) != c.image_width || x_t.dim(3) != c.channels) {
        throw ShapeError("forward: input " + shape_string(x_t.shape()) + " does not match the configured image");
    }
    const auto B = x_t.dim(0);
    if (static_cast<std::int64_t>(t.size()) != B || static_cast<std::int64_t>(cond.size()) != B) {
        throw ShapeError("forward: batch of " + std::to_string(B) + " needs as many timesteps and conditions");
    }
    for (auto step : t) {
        if (step < 1 || step > c.diffusion_steps) {
            throw IndexError("timestep " + std::to_string(step) + " outside 1.." + std::to_string(c.diffusion_steps));
        }
    }
    const auto D = c.hidden_size;
    const auto Np = c.num_patches();
    const bool time_token = c.time_mode == TimeMode::token;

    // Pool every token source into one matrix, then gather into
    // [time][condition...][patches...] order per sample.
    std::vector<ad::Var> parts;
    parts.push_back(embed_patches(x_t));
    const ad::Var t_emb = timestep_embedding(*this, t);
    std::int64_t pool_rows = B * Np;
    const std::int64_t time_base = pool_rows;
    if (time_token) {
        parts.push_back(t_emb);
        pool_rows += B;
    }
    std::vector<std::int64_t> cond_start(static_cast<std::size_t>(B)), cond_count(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        const ad::Var tokens = embed_condition(cond[static_cast<std::size_t>(b)], *this);
        cond_start[static_cast<std::size_t>(b)] = pool_rows;
        if (tokens.defined()) {
            cond_count[static_cast<std::size_t>(b)] = tokens.dim(0);
            pool_rows += tokens.dim(0);
            parts.push_back(tokens);
        }
    }
    const ad::Var pool = ad::concat_rows(parts);

    std::vector<std::int64_t> order, pos_index, row_sample, offsets{0}, patch_rows;
    order.reserve(static_cast<std::size_t>(pool_rows));
    const std::int64_t cond_slot0 = time_token ? 1 : 0;
    for (std::int64_t b = 0; b < B; ++b) {
        if (time_token) {
            order.push_back(time_base + b);
            pos_index.push_back(0);
        }
        for (std::int64_t k = 0; k < cond_count[static_cast<std::size_t>(b)]; ++k) {
            order.push_back(cond_start[static_cast<std::size_t>(b)] + k);
            pos_index.push_back(cond_slot0 + k);
        }
        for (std::int64_t p = 0; p < Np; ++p) {
            patch_rows.push_back(static_cast<std::int64_t>(order.size()));
            order.push_back(b * Np + p);
            pos_index.push_back(c.prefix_slots() + p);
        }
        while (static_cast<std::int64_t>(row_sample.size()) < static_cast<std::int64_t>(order.size())) row_sample.push_back(b);
        offsets.push_back(static_cast<std::int64_t>(order.size()));
    }

    ad::Var h = ad::gather_rows(pool, std::move(order));
    if (c.pos_embed_mode == PosEmbedMode::learnable_1d) {
        h = ad::add(h, ad::gather_rows(pos_embed_, pos_index));
    } else if (c.pos_embed_mode == PosEmbedMode::sinusoidal_2d) {
        Tensor pe(Shape{static_cast<std::int64_t>(pos_index.size()), D});
        for (std::size_t r = 0; r < pos_index.size(); ++r)
            std::copy_n(sinusoidal_pos_.ptr() + pos_index[r] * D, D, pe.ptr() + static_cast<std::int64_t>(r) * D);
        h = ad::add(h, ad::Var::constant(std::move(pe)));
    }

    auto run_block = [&](std::int64_t layer, const ad::Var& in) {
        if (hooks && hooks->block_override) return hooks->block_override(layer, in);
        return transformer_block(in, blocks_[static_cast<std::size_t>(layer)], t_emb, offsets, row_sample);
    };

    const auto half = c.half_depth();
    std::vector<ad::Var> skip_stack;
    skip_stack.reserve(static_cast<std::size_t>(half));
    for (std::int64_t l = 0; l < half; ++l) {
        h = run_block(l, h);
        if (hooks && hooks->on_encoder_output) hooks->on_encoder_output(l, h);
        skip_stack.push_back(h);
    }
    h = run_block(half, h);
    for (std::int64_t j = 1; j <= half; ++j) {
        const ad::Var h_s = skip_stack.back();
        skip_stack.pop_back();
        if (c.skip_mode != SkipMode::none) {
            const ad::Var combined = combine_skip(h, h_s, c.skip_mode, skips_[static_cast<std::size_t>(j - 1)]);
            if (hooks && hooks->on_skip) hooks->on_skip(j, h, h_s, combined);
            h = combined;
        }
        h = run_block(half + j, h);
    }

    h = ad::layer_norm(h, final_norm_.gain, final_norm_.bias);
    h = ad::gather_rows(h, std::move(patch_rows));  // time/condition tokens are dropped here
    if (c.conv_mode == ConvMode::before_linear) {
        h = ad::reshape(h, Shape{B, c.grid_height(), c.grid_width(), D});
        h = ad::conv2d(h, pre_head_conv_.weight, pre_head_conv_.bias);
        h = ad::reshape(h, Shape{B * Np, D});
    }
    h = ad::linear(h, head_.weight, head_.bias);

    // Unpatchify: image element i reads patch element inverse[i].
    const auto forward_index = patchify_index(B, c.image_height, c.image_width, c.channels, c.patch_size);
    std::vector<std::int64_t> inverse(forward_index.size());
    for (std::size_t i = 0; i < forward_index.size(); ++i)
        inverse[static_cast<std::size_t>(forward_index[i])] = static_cast<std::int64_t>(i);
    h = ad::gather(h, std::move(inverse), Shape{B, c.image_height, c.image_width, c.channels});

    if (c.conv_mode == ConvMode::after_linear) h = ad::conv2d(h, out_conv_.weight, out_conv_.bias);
    return h;
}

Tensor UViTModel::predict(const Tensor& x_t, std::span<const std::int64_t> t,
                          std::span<const ConditionInput> cond) const {
    ad::NoGradGuard guard;
    return forward(x_t, t, cond).value();
}

UViTModel build_uvit(const UViTConfig& config, std::uint64_t seed) { return UViTModel(config, seed); }

std::int64_t count_params(const UViTModel& model) { return model.count_params(); }

}  // namespace uvit
