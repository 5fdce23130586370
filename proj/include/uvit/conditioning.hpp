#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "uvit/autodiff.hpp"
#include "uvit/tensor.hpp"

namespace uvit {

class UViTModel;

struct Unconditional {
    bool operator==(const Unconditional&) const = default;
};

struct ClassLabel {
    std::int64_t label = 0;
    bool operator==(const ClassLabel&) const = default;
};

// The dropped-condition symbol used by classifier-free guidance.
struct NullCondition {
    bool operator==(const NullCondition&) const = default;
};

// Pre-encoded token sequence: embeddings is [max_context_len, context_dim],
// rows at or beyond valid_len are zero.
struct Context {
    Tensor embeddings;
    std::int64_t valid_len = 0;
    bool operator==(const Context&) const = default;
};

using ConditionInput = std::variant<Unconditional, ClassLabel, NullCondition, Context>;

bool is_null(const ConditionInput& c);

// [sin(t f_0) .. sin(t f_{D/2-1}), cos(t f_0) .. cos(t f_{D/2-1})] with
// f_k = 10000^(-k / (D/2)). Throws ConfigError for odd D.
Tensor sinusoidal_embedding(double t, std::int64_t dim);

// Sinusoidal features of each step mapped by the model's learned time
// projection; returns [B, D].
ad::Var timestep_embedding(const UViTModel& model, std::span<const std::int64_t> t);

// Tokens contributed by one condition: [k, D] with k = 0 for Unconditional
// (returned Var is undefined in that case).
ad::Var embed_condition(const ConditionInput& c, const UViTModel& model);

// (1 + s) eps(x, t, c) - s eps(x, t, Null), evaluated without recording
// gradients. conditions holds one entry per batch element; none may be Null.
Tensor guided_eps(const UViTModel& model, const Tensor& x_t, std::span<const std::int64_t> t,
                  std::span<const ConditionInput> conditions, double strength);

}  // namespace uvit
