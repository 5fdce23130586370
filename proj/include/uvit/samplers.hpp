#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uvit/backbone.hpp"
#include "uvit/conditioning.hpp"
#include "uvit/schedule.hpp"
#include "uvit/tensor.hpp"

namespace uvit {

// Noise prediction for the whole batch x at discrete step t in 1..T.
using EpsFn = std::function<Tensor(const Tensor& x, std::int64_t t)>;

enum class SamplerKind { ddpm_ancestral, euler_maruyama, dpm_solver };
// Where dpm_solver puts its time points: uniform in log-SNR, or uniform in t
// (steps = T then visits every grid point).
enum class StepPlacement { uniform_lambda, uniform_time };

std::string to_string(SamplerKind k);
std::string to_string(StepPlacement p);
SamplerKind parse_sampler_kind(std::string_view s);
StepPlacement parse_step_placement(std::string_view s);

struct Guidance {
    ConditionInput condition;
    double strength = 0.0;
};

struct SamplerSpec {
    SamplerKind kind = SamplerKind::dpm_solver;
    std::int64_t steps = 50;
    int order = 2;  // dpm_solver only
    StepPlacement placement = StepPlacement::uniform_lambda;
    std::optional<Guidance> guidance;
    std::uint64_t seed = 0;
};

struct SamplerHooks {
    bool zero_score = false;  // euler_maruyama: drop the score term
    // After each update, with the step index (0-based) and the state.
    std::function<void(std::int64_t step, const Tensor& x)> on_step;
};

// shape is [n, H, W, C]. Outputs are not clamped.
Tensor ddpm_ancestral(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                      const SamplerHooks* hooks = nullptr);
Tensor euler_maruyama(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                      const SamplerHooks* hooks = nullptr);
Tensor dpm_solver(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
                  const SamplerHooks* hooks = nullptr);
// Same as dpm_solver but starting from a given x_T.
Tensor dpm_solver_from(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, Tensor x_T,
                       const SamplerHooks* hooks = nullptr);
Tensor sample(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerSpec& spec, const Shape& shape,
              const SamplerHooks* hooks = nullptr);

// Decreasing discrete time points used by dpm_solver, ending at 1.
std::vector<std::int64_t> dpm_time_points(const NoiseSchedule& schedule, std::int64_t steps, StepPlacement placement);

// Model-backed predictor. Conditions hold one entry per sample, or a single
// entry broadcast to the batch; guidance (when set) routes every call
// through guided_eps.
EpsFn model_eps(const UViTModel& model, std::vector<ConditionInput> conditions,
                std::optional<double> guidance_strength = std::nullopt);

// Draws n images from the model. With spec.guidance and no explicit
// conditions, every sample uses the guidance condition.
Tensor sample_model(const UViTModel& model, const NoiseSchedule& schedule, const SamplerSpec& spec, std::int64_t n,
                    std::vector<ConditionInput> conditions = {});

}  // namespace uvit
