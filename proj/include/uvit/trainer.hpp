#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "uvit/backbone.hpp"
#include "uvit/conditioning.hpp"
#include "uvit/schedule.hpp"

namespace uvit {

struct Dataset;

struct TrainConfig {
    double learning_rate = 2e-4;
    double weight_decay = 0.03;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double adam_epsilon = 1e-8;
    std::int64_t batch_size = 128;
    std::int64_t total_iterations = 1000;
    std::int64_t warmup_steps = 0;
    double p_uncond = 0.0;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 1000;

    void validate() const;
};

struct OptimizerState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::int64_t step = 0;
};

// Layer-norm parameters and position embeddings are exempt from decay.
bool decays(ParamGroup group);

struct LossResult {
    double loss = 0.0;
    std::vector<std::int64_t> timesteps;
    std::vector<ConditionInput> conditions;  // after CFG dropout
};

// Replaces the network in training_loss; receives (x_t, t, conditions, eps).
using NoisePredictor = std::function<ad::Var(const Tensor&, std::span<const std::int64_t>,
                                             std::span<const ConditionInput>, const Tensor&)>;

struct LossGraph {
    ad::Var loss;
    std::vector<std::int64_t> timesteps;
    std::vector<ConditionInput> conditions;
};

// Draws t ~ U{1..T}, eps ~ N(0, I) and the CFG dropout coin per sample (in
// that order) and builds mean((eps_hat - eps)^2) without running backward.
LossGraph noise_prediction_loss(UViTModel& model, const Tensor& x0, std::span<const ConditionInput> conditions,
                                const NoiseSchedule& schedule, double p_uncond, Rng& rng,
                                const NoisePredictor& predictor_override = {});

// noise_prediction_loss followed by backward: accumulates d loss / d theta
// into the model parameters.
LossResult training_loss(UViTModel& model, const Tensor& x0, std::span<const ConditionInput> conditions,
                         const NoiseSchedule& schedule, double p_uncond, Rng& rng,
                         const NoisePredictor& predictor_override = {});

// Decoupled-weight-decay Adam with bias correction; one call per step.
void adamw_step(std::span<NamedParameter> params, OptimizerState& state, const TrainConfig& cfg, double lr_now);

// Linear warmup from 0 to learning_rate over warmup_steps, then constant.
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct TrainEvent {
    std::int64_t iteration = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainCallbacks {
    std::function<void(const TrainEvent&)> on_step;
    // Called every checkpoint_every iterations and after the final one.
    // Exceptions propagate and stop training.
    std::function<void(std::int64_t iteration, const OptimizerState&)> on_checkpoint;
};

// Runs total_iterations updates. Epochs are shuffled by a seeded permutation
// and the last partial batch is dropped. Returns the loss of every iteration.
std::vector<double> train(UViTModel& model, const Dataset& dataset, const NoiseSchedule& schedule,
                          const TrainConfig& cfg, const TrainCallbacks& callbacks = {},
                          OptimizerState* state = nullptr);

}  // namespace uvit
