#pragma once

#include <cstdint>
#include <vector>

#include "uvit/tensor.hpp"

namespace uvit {

// Discrete-time variance-preserving noise schedule over steps t = 1..T.
// Vectors are stored 0-based; the accessors take the 1-based step index.
class NoiseSchedule {
public:
    explicit NoiseSchedule(std::vector<double> betas);

    std::int64_t steps() const { return static_cast<std::int64_t>(beta_.size()); }
    double beta(std::int64_t t) const { return beta_[index(t)]; }
    double alpha(std::int64_t t) const { return alpha_[index(t)]; }
    double alpha_bar(std::int64_t t) const { return alpha_bar_[index(t)]; }
    // Log signal-to-noise ratio 0.5 * log(alpha_bar / (1 - alpha_bar)).
    double log_snr(std::int64_t t) const;

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alphas() const { return alpha_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    void check_step(std::int64_t t) const;

private:
    std::size_t index(std::int64_t t) const {
        check_step(t);
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
};

NoiseSchedule linear_beta_schedule(std::int64_t steps, double beta_start, double beta_end);
// 1000 steps, beta from 1e-4 to 0.02.
NoiseSchedule default_schedule();

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
Tensor add_noise(const Tensor& x0, const Tensor& eps, std::int64_t t, const NoiseSchedule& s);

// (1 / sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat)
Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_hat, std::int64_t t, const NoiseSchedule& s);

// -eps_hat / sqrt(1 - alpha_bar_t)
Tensor score_from_eps(const Tensor& eps_hat, std::int64_t t, const NoiseSchedule& s);

}  // namespace uvit
