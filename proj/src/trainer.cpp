#include "uvit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uvit/data.hpp"
#include "uvit/errors.hpp"

namespace uvit {

void TrainConfig::validate() const {
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ConfigError("p_uncond must lie in [0, 1]");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (total_iterations <= 0) throw ConfigError("total_iterations must be positive");
    if (warmup_steps < 0 || warmup_steps > total_iterations) {
        throw ConfigError("warmup_steps must lie in [0, total_iterations]");
    }
    if (checkpoint_every <= 0) throw ConfigError("checkpoint_every must be positive");
    if (learning_rate < 0.0 || weight_decay < 0.0 || adam_epsilon < 0.0) {
        throw ConfigError("learning_rate, weight_decay and adam_epsilon must be non-negative");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must lie in [0, 1)");
}

bool decays(ParamGroup group) { return group != ParamGroup::norm && group != ParamGroup::position; }

LossGraph noise_prediction_loss(UViTModel& model, const Tensor& x0, std::span<const ConditionInput> conditions,
                                const NoiseSchedule& schedule, double p_uncond, Rng& rng,
                                const NoisePredictor& predictor_override) {
    if (x0.rank() != 4 || x0.dim(0) == 0) throw ParameterError("training_loss needs a non-empty [B, H, W, C] batch");
    const auto B = x0.dim(0);
    if (static_cast<std::int64_t>(conditions.size()) != B) throw ShapeError("training_loss: one condition per image");
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ParameterError("p_uncond must lie in [0, 1]");
    const auto per_image = x0.size() / B;

    LossGraph g;
    g.timesteps.resize(static_cast<std::size_t>(B));
    g.conditions.assign(conditions.begin(), conditions.end());
    Tensor eps(x0.shape());
    Tensor x_t(x0.shape());
    for (std::int64_t b = 0; b < B; ++b) {
        const auto t = uniform_int(rng, 1, schedule.steps());
        g.timesteps[static_cast<std::size_t>(b)] = t;
        for (std::int64_t i = 0; i < per_image; ++i) eps[b * per_image + i] = standard_normal(rng);
        const double a = std::sqrt(schedule.alpha_bar(t));
        const double s = std::sqrt(1.0 - schedule.alpha_bar(t));
        for (std::int64_t i = 0; i < per_image; ++i) {
            const auto k = b * per_image + i;
            x_t[k] = a * x0[k] + s * eps[k];
        }
        if (p_uncond > 0.0 && uniform01(rng) < p_uncond) g.conditions[static_cast<std::size_t>(b)] = NullCondition{};
    }

    const ad::Var pred = predictor_override ? predictor_override(x_t, g.timesteps, g.conditions, eps)
                                            : model.forward(x_t, g.timesteps, g.conditions);
    g.loss = ad::mse(pred, eps);
    return g;
}

LossResult training_loss(UViTModel& model, const Tensor& x0, std::span<const ConditionInput> conditions,
                         const NoiseSchedule& schedule, double p_uncond, Rng& rng,
                         const NoisePredictor& predictor_override) {
    LossGraph g = noise_prediction_loss(model, x0, conditions, schedule, p_uncond, rng, predictor_override);
    if (g.loss.requires_grad()) g.loss.backward();
    return {g.loss.value()[0], std::move(g.timesteps), std::move(g.conditions)};
}

void adamw_step(std::span<NamedParameter> params, OptimizerState& state, const TrainConfig& cfg, double lr_now) {
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.var.shape());
            state.second_moment.emplace_back(p.var.shape());
        }
    }
    if (state.first_moment.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        Tensor& value = p.var.mutable_value();
        const Tensor& g = p.var.grad();
        Tensor& m = state.first_moment[k];
        Tensor& v = state.second_moment[k];
        if (m.shape() != value.shape() || g.shape() != value.shape()) {
            throw ShapeError("adamw_step: shape mismatch for " + p.name);
        }
        const double wd = decays(p.group) ? cfg.weight_decay : 0.0;
        for (std::int64_t i = 0; i < value.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            value[i] -= lr_now * (m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon) + wd * value[i]);
        }
    }
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
    return cfg.learning_rate * static_cast<double>(std::max<std::int64_t>(step, 0)) /
           static_cast<double>(cfg.warmup_steps);
}

std::vector<double> train(UViTModel& model, const Dataset& dataset, const NoiseSchedule& schedule,
                          const TrainConfig& cfg, const TrainCallbacks& callbacks, OptimizerState* state) {
    cfg.validate();
    const auto n = dataset.size();
    if (n == 0) throw ParameterError("training needs a non-empty dataset");
    if (n < cfg.batch_size) {
        throw ParameterError("dataset of " + std::to_string(n) + " images is smaller than batch_size " +
                             std::to_string(cfg.batch_size));
    }
    if (model.config().diffusion_steps != schedule.steps()) {
        throw ConfigError("model expects " + std::to_string(model.config().diffusion_steps) +
                          " diffusion steps but the schedule has " + std::to_string(schedule.steps()));
    }

    OptimizerState local_state;
    OptimizerState& opt = state ? *state : local_state;
    Rng rng(cfg.seed);
    const auto per_image = dataset.images.size() / n;
    Shape batch_shape = dataset.images.shape();
    batch_shape[0] = cfg.batch_size;

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::int64_t cursor = n;  // forces a shuffle on the first batch
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(cfg.total_iterations));

    for (std::int64_t it = 1; it <= cfg.total_iterations; ++it) {
        if (cursor + cfg.batch_size > n) {
            std::iota(order.begin(), order.end(), 0);
            for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(uniform_int(rng, 0, i))]);
            cursor = 0;
        }
        Tensor x0(batch_shape);
        std::vector<ConditionInput> conds;
        conds.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
            const auto src = order[static_cast<std::size_t>(cursor + b)];
            std::copy_n(dataset.images.ptr() + src * per_image, per_image, x0.ptr() + b * per_image);
            conds.push_back(dataset.conditions[static_cast<std::size_t>(src)]);
        }
        cursor += cfg.batch_size;

        model.zero_grad();
        const auto result = training_loss(model, x0, conds, schedule, cfg.p_uncond, rng);
        const double lr = lr_at(it, cfg);
        adamw_step(model.parameters(), opt, cfg, lr);
        losses.push_back(result.loss);
        if (!std::isfinite(result.loss)) throw NumericError("training loss diverged at iteration " + std::to_string(it));
        if (callbacks.on_step) callbacks.on_step(TrainEvent{it, result.loss, lr});
        if (callbacks.on_checkpoint && (it % cfg.checkpoint_every == 0 || it == cfg.total_iterations)) {
            callbacks.on_checkpoint(it, opt);
        }
    }
    return losses;
}

}  // namespace uvit
