#include "uvit/conditioning.hpp"

#include <cmath>

#include "uvit/backbone.hpp"
#include "uvit/errors.hpp"

namespace uvit {

bool is_null(const ConditionInput& c) { return std::holds_alternative<NullCondition>(c); }

Tensor sinusoidal_embedding(double t, std::int64_t dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal embedding needs an even dimension, got " + std::to_string(dim));
    const auto half = dim / 2;
    Tensor out(Shape{dim});
    for (std::int64_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        out[k] = std::sin(t * freq);
        out[half + k] = std::cos(t * freq);
    }
    return out;
}

ad::Var timestep_embedding(const UViTModel& model, std::span<const std::int64_t> t) {
    const auto D = model.config().hidden_size;
    Tensor feats(Shape{static_cast<std::int64_t>(t.size()), D});
    for (std::size_t i = 0; i < t.size(); ++i) {
        const Tensor e = sinusoidal_embedding(static_cast<double>(t[i]), D);
        std::copy(e.data().begin(), e.data().end(), feats.ptr() + static_cast<std::int64_t>(i) * D);
    }
    const auto& p = model.time_embed();
    return ad::linear(ad::Var::constant(std::move(feats)), p.weight, p.bias);
}

ad::Var embed_condition(const ConditionInput& c, const UViTModel& model) {
    const auto& cfg = model.config();
    switch (cfg.condition_kind) {
        case ConditionKind::none:
            if (std::holds_alternative<Unconditional>(c)) return {};
            throw ConditioningError("model is unconditional but received a condition");
        case ConditionKind::class_label:
            if (const auto* label = std::get_if<ClassLabel>(&c)) {
                if (label->label < 0 || label->label >= cfg.num_classes) {
                    throw ConditioningError("class label " + std::to_string(label->label) + " outside [0, " +
                                            std::to_string(cfg.num_classes) + ")");
                }
                return ad::gather_rows(model.class_table(), {label->label});
            }
            if (is_null(c)) return ad::gather_rows(model.class_table(), {cfg.num_classes});
            throw ConditioningError("class-conditional model needs a class label or the null condition");
        case ConditionKind::context:
            if (is_null(c)) return ad::gather_rows(model.null_context(), {0});
            if (const auto* ctx = std::get_if<Context>(&c)) {
                if (ctx->embeddings.shape() != Shape{cfg.max_context_len, cfg.context_dim}) {
                    throw ConditioningError("context embeddings " + shape_string(ctx->embeddings.shape()) +
                                            " do not match [" + std::to_string(cfg.max_context_len) + "x" +
                                            std::to_string(cfg.context_dim) + "]");
                }
                if (ctx->valid_len < 0 || ctx->valid_len > cfg.max_context_len) {
                    throw ConditioningError("context valid_len out of range");
                }
                // An empty prompt behaves like the null condition.
                if (ctx->valid_len == 0) return ad::gather_rows(model.null_context(), {0});
                const auto rows = ctx->valid_len * cfg.context_dim;
                Tensor valid(Shape{ctx->valid_len, cfg.context_dim},
                             std::vector<double>(ctx->embeddings.data().begin(), ctx->embeddings.data().begin() + rows));
                const auto& p = model.context_proj();
                return ad::linear(ad::Var::constant(std::move(valid)), p.weight, p.bias);
            }
            throw ConditioningError("context-conditional model needs a context or the null condition");
    }
    throw LogicError("unknown condition kind");
}

Tensor guided_eps(const UViTModel& model, const Tensor& x_t, std::span<const std::int64_t> t,
                  std::span<const ConditionInput> conditions, double strength) {
    for (const auto& c : conditions)
        if (is_null(c)) throw ParameterError("guided_eps needs a real condition, got the null condition");
    const Tensor cond = model.predict(x_t, t, conditions);
    const std::vector<ConditionInput> nulls(conditions.size(), NullCondition{});
    const Tensor uncond = model.predict(x_t, t, nulls);
    Tensor out(cond.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = (1.0 + strength) * cond[i] - strength * uncond[i];
    return out;
}

}  // namespace uvit
