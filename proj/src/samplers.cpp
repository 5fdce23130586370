#include "uvit/samplers.hpp"

#include <algorithm>
#include <cmath>

#include "uvit/errors.hpp"

namespace uvit {

std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::ddpm_ancestral: return "ddpm_ancestral";
        case SamplerKind::euler_maruyama: return "euler_maruyama";
        case SamplerKind::dpm_solver: return "dpm_solver";
    }
    return "?";
}

std::string to_string(StepPlacement p) {
    return p == StepPlacement::uniform_lambda ? "uniform_lambda" : "uniform_time";
}

SamplerKind parse_sampler_kind(std::string_view s) {
    if (s == "ddpm_ancestral") return SamplerKind::ddpm_ancestral;
    if (s == "euler_maruyama") return SamplerKind::euler_maruyama;
    if (s == "dpm_solver") return SamplerKind::dpm_solver;
    throw ConfigError("unknown sampler '" + std::string(s) + "' (valid: ddpm_ancestral, euler_maruyama, dpm_solver)");
}

StepPlacement parse_step_placement(std::string_view s) {
    if (s == "uniform_lambda") return StepPlacement::uniform_lambda;
    if (s == "uniform_time") return StepPlacement::uniform_time;
    throw ConfigError("unknown step placement '" + std::string(s) + "' (valid: uniform_lambda, uniform_time)");
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.size() != 4 || shape_numel(shape) <= 0) {
        throw ShapeError("sampler shape must be a non-empty [n, H, W, C], got " + shape_string(shape));
    }
}

Tensor checked_eps(const EpsFn& eps, const Tensor& x, std::int64_t t) {
    Tensor e = eps(x, t);
    if (e.shape() != x.shape()) {
        throw ShapeError("noise predictor returned " + shape_string(e.shape()) + " for input " +
                         shape_string(x.shape()));
    }
    return e;
}

void report(const SamplerHooks* hooks, std::int64_t step, const Tensor& x) {
    if (hooks && hooks->on_step) hooks->on_step(step, x);
}

}  // namespace

Tensor ddpm_ancestral(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                      const SamplerHooks* hooks) {
    check_shape(shape);
    const auto T = schedule.steps();
    if (spec.steps != T) {
        throw ConfigError("ddpm_ancestral runs the full chain: steps must equal T = " + std::to_string(T) + ", got " +
                          std::to_string(spec.steps));
    }
    Rng rng(spec.seed);
    Tensor x = Tensor::randn(shape, rng);
    for (std::int64_t t = T; t >= 1; --t) {
        x = posterior_mean(x, checked_eps(eps, x, t), t, schedule);
        if (t > 1) {
            const double sigma = std::sqrt(schedule.beta(t));
            for (auto& v : x.data()) v += sigma * standard_normal(rng);
        }
        report(hooks, T - t, x);
    }
    return x;
}

Tensor euler_maruyama(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                      const SamplerHooks* hooks) {
    check_shape(shape);
    if (spec.steps < 1) throw ConfigError("euler_maruyama needs steps >= 1");
    const auto T = schedule.steps();
    const auto N = spec.steps;
    const double dt = 1.0 / static_cast<double>(N);
    Rng rng(spec.seed);
    Tensor x = Tensor::randn(shape, rng);
    for (std::int64_t k = 0; k < N; ++k) {
        const double tau = 1.0 - static_cast<double>(k) * dt;
        const auto t = std::clamp<std::int64_t>(std::llround(tau * static_cast<double>(T)), 1, T);
        const double beta = static_cast<double>(T) * schedule.beta(t);
        const bool last = k == N - 1;
        // Reverse VP-SDE, integrated backwards: dx = [-b/2 x - b score] dtau + sqrt(b) dW.
        Tensor score(shape);
        if (!(hooks && hooks->zero_score)) score = score_from_eps(checked_eps(eps, x, t), t, schedule);
        const double noise = last ? 0.0 : std::sqrt(beta * dt);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            x[i] += dt * (0.5 * beta * x[i] + beta * score[i]);
        }
        if (!last) {
            for (auto& v : x.data()) v += noise * standard_normal(rng);
        }
        report(hooks, k, x);
    }
    return x;
}

std::vector<std::int64_t> dpm_time_points(const NoiseSchedule& schedule, std::int64_t steps, StepPlacement placement) {
    if (steps < 1) throw ConfigError("dpm_solver needs steps >= 1");
    const auto T = schedule.steps();
    std::vector<std::int64_t> points;
    if (steps == 1) return {T};
    for (std::int64_t i = 0; i < steps; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
        std::int64_t t = 1;
        if (placement == StepPlacement::uniform_time) {
            t = std::llround(static_cast<double>(T) - frac * static_cast<double>(T - 1));
        } else {
            const double target = schedule.log_snr(T) + frac * (schedule.log_snr(1) - schedule.log_snr(T));
            // log_snr is decreasing in t; pick the nearest grid point.
            double best = std::abs(schedule.log_snr(1) - target);
            for (std::int64_t s = 2; s <= T; ++s) {
                const double d = std::abs(schedule.log_snr(s) - target);
                if (d < best) {
                    best = d;
                    t = s;
                }
            }
        }
        if (points.empty() || t < points.back()) points.push_back(t);
    }
    if (points.back() != 1) points.push_back(1);
    return points;
}

namespace {

// Nearest grid step to a target log-SNR strictly between two points, or 0 if
// none lies strictly inside.
std::int64_t interior_step(const NoiseSchedule& schedule, std::int64_t t_hi, std::int64_t t_lo, double target) {
    std::int64_t best_t = 0;
    double best = 0.0;
    for (std::int64_t s = t_lo + 1; s < t_hi; ++s) {
        const double d = std::abs(schedule.log_snr(s) - target);
        if (best_t == 0 || d < best) {
            best = d;
            best_t = s;
        }
    }
    return best_t;
}

}  // namespace

Tensor dpm_solver_from(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, Tensor x,
                       const SamplerHooks* hooks) {
    check_shape(x.shape());
    if (spec.order != 1 && spec.order != 2) {
        throw ConfigError("dpm_solver order must be 1 or 2, got " + std::to_string(spec.order));
    }
    const auto points = dpm_time_points(schedule, spec.steps, spec.placement);
    auto a = [&](std::int64_t t) { return std::sqrt(schedule.alpha_bar(t)); };
    auto s = [&](std::int64_t t) { return std::sqrt(1.0 - schedule.alpha_bar(t)); };
    auto lam = [&](std::int64_t t) { return schedule.log_snr(t); };

    std::int64_t step = 0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        const auto t_prev = points[i - 1];
        const auto t_next = points[i];
        const double h = lam(t_next) - lam(t_prev);
        const double phi = std::expm1(h);
        const Tensor e_prev = checked_eps(eps, x, t_prev);
        const double ratio = a(t_next) / a(t_prev);
        const auto mid = spec.order == 2 ? interior_step(schedule, t_prev, t_next, lam(t_prev) + 0.5 * h) : 0;
        Tensor next(x.shape());
        if (mid == 0) {
            for (std::int64_t k = 0; k < x.size(); ++k) next[k] = ratio * x[k] - s(t_next) * phi * e_prev[k];
        } else {
            const double h1 = lam(mid) - lam(t_prev);
            const double r1 = h1 / h;
            Tensor u(x.shape());
            const double ratio_u = a(mid) / a(t_prev);
            const double phi_u = std::expm1(h1);
            for (std::int64_t k = 0; k < x.size(); ++k) u[k] = ratio_u * x[k] - s(mid) * phi_u * e_prev[k];
            const Tensor e_mid = checked_eps(eps, u, mid);
            const double c = s(t_next) * phi;
            for (std::int64_t k = 0; k < x.size(); ++k) {
                next[k] = ratio * x[k] - c * e_prev[k] - c / (2.0 * r1) * (e_mid[k] - e_prev[k]);
            }
        }
        x = std::move(next);
        report(hooks, step++, x);
    }
    // Final data estimate at t = 1 (alpha_bar_0 = 1).
    const auto t_last = points.back();
    const Tensor e = checked_eps(eps, x, t_last);
    for (std::int64_t k = 0; k < x.size(); ++k) x[k] = (x[k] - s(t_last) * e[k]) / a(t_last);
    report(hooks, step, x);
    return x;
}

Tensor dpm_solver(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                  const SamplerHooks* hooks) {
    check_shape(shape);
    Rng rng(spec.seed);
    return dpm_solver_from(eps, schedule, spec, Tensor::randn(shape, rng), hooks);
}

Tensor sample(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
              const SamplerHooks* hooks) {
    switch (spec.kind) {
        case SamplerKind::ddpm_ancestral: return ddpm_ancestral(eps, schedule, spec, shape, hooks);
        case SamplerKind::euler_maruyama: return euler_maruyama(eps, schedule, spec, shape, hooks);
        case SamplerKind::dpm_solver: return dpm_solver(eps, schedule, spec, shape, hooks);
    }
    throw LogicError("unhandled sampler kind");
}

EpsFn model_eps(const UViTModel& model, std::vector<ConditionInput> conditions,
                std::optional<double> guidance_strength) {
    return [&model, conditions = std::move(conditions), guidance_strength](const Tensor& x, std::int64_t t) {
        const auto n = x.dim(0);
        std::vector<ConditionInput> conds;
        if (conditions.size() == 1) {
            conds.assign(static_cast<std::size_t>(n), conditions.front());
        } else if (static_cast<std::int64_t>(conditions.size()) == n) {
            conds = conditions;
        } else if (conditions.empty()) {
            conds.assign(static_cast<std::size_t>(n), Unconditional{});
        } else {
            throw ShapeError("model_eps: " + std::to_string(conditions.size()) + " conditions for a batch of " +
                             std::to_string(n));
        }
        const std::vector<std::int64_t> ts(static_cast<std::size_t>(n), t);
        if (guidance_strength) return guided_eps(model, x, ts, conds, *guidance_strength);
        return model.predict(x, ts, conds);
    };
}

Tensor sample_model(const UViTModel& model, const NoiseSchedule& schedule, const SamplerSpec& spec, std::int64_t n,
                    std::vector<ConditionInput> conditions) {
    if (n < 1) throw ParameterError("sample count must be positive");
    const auto& c = model.config();
    if (c.diffusion_steps != schedule.steps()) {
        throw ConfigError("model expects " + std::to_string(c.diffusion_steps) + " diffusion steps but the schedule has " +
                          std::to_string(schedule.steps()));
    }
    std::optional<double> strength;
    if (spec.guidance) {
        if (c.condition_kind == ConditionKind::none) throw ConfigError("guidance needs a conditional model");
        strength = spec.guidance->strength;
        if (conditions.empty()) conditions.push_back(spec.guidance->condition);
    }
    const Shape shape{n, c.image_height, c.image_width, c.channels};
    return sample(model_eps(model, std::move(conditions), strength), schedule, spec, shape);
}

}  // namespace uvit
