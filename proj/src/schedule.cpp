#include "uvit/schedule.hpp"

#include <cmath>
#include <string>

#include "uvit/errors.hpp"

namespace uvit {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw ParameterError("noise schedule needs at least one step");
    alpha_.reserve(beta_.size());
    alpha_bar_.reserve(beta_.size());
    double running = 1.0;
    for (double b : beta_) {
        if (!(b > 0.0 && b < 1.0)) throw ParameterError("beta values must lie in (0, 1), got " + std::to_string(b));
        const double a = 1.0 - b;
        running *= a;
        alpha_.push_back(a);
        alpha_bar_.push_back(running);
    }
}

void NoiseSchedule::check_step(std::int64_t t) const {
    if (t < 1 || t > steps()) {
        throw IndexError("step index " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
    }
}

double NoiseSchedule::log_snr(std::int64_t t) const {
    const double ab = alpha_bar(t);
    return 0.5 * std::log(ab / (1.0 - ab));
}

NoiseSchedule linear_beta_schedule(std::int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ParameterError("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ParameterError("linear schedule requires 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (std::int64_t i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule default_schedule() { return linear_beta_schedule(1000, 1e-4, 0.02); }

Tensor add_noise(const Tensor& x0, const Tensor& eps, std::int64_t t, const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    require_same_shape(x0, eps, "add_noise");
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Tensor out(x0.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_hat, std::int64_t t, const NoiseSchedule& s) {
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    require_same_shape(x_t, eps_hat, "posterior_mean");
    Tensor out(x_t.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
    return out;
}

Tensor score_from_eps(const Tensor& eps_hat, std::int64_t t, const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    if (ab >= 1.0) throw NumericError("score undefined where alpha_bar = 1");
    return eps_hat * (-1.0 / std::sqrt(1.0 - ab));
}

}  // namespace uvit
