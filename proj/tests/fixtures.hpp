#pragma once

// Small configs and oracles shared by several suites.

#include <cmath>
#include <cstdint>

#include "uvit/backbone.hpp"
#include "uvit/samplers.hpp"
#include "uvit/schedule.hpp"

namespace uvit::testing {

// 8x8x1 images, P=4, L=3, D=16, two heads, T=100.
inline UViTConfig tiny_config() {
    UViTConfig c;
    c.image_height = c.image_width = 8;
    c.channels = 1;
    c.patch_size = 4;
    c.depth = 3;
    c.hidden_size = 16;
    c.mlp_size = 32;
    c.num_heads = 2;
    c.diffusion_steps = 100;
    return c;
}

inline Tensor random_images(std::int64_t b, const UViTConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(Shape{b, c.image_height, c.image_width, c.channels}, rng);
}

// Draws every parameter at random so no branch is silenced by zero init.
inline void randomize(UViTModel& m, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto& p : m.parameters()) p.var.mutable_value() = Tensor::randn(p.var.shape(), rng) * scale;
}

// Optimal noise predictor for data x0 ~ N(mu0, sigma0^2 I):
// eps*(x_t, t) = sqrt(1 - ab) (x_t - sqrt(ab) mu0) / (ab sigma0^2 + 1 - ab).
inline EpsFn gaussian_oracle(const NoiseSchedule& s, double mu0, double sigma0) {
    return [&s, mu0, sigma0](const Tensor& x, std::int64_t t) {
        const double ab = s.alpha_bar(t);
        const double k = std::sqrt(1.0 - ab) / (ab * sigma0 * sigma0 + 1.0 - ab);
        Tensor e(x.shape());
        for (std::int64_t i = 0; i < x.size(); ++i) e[i] = k * (x[i] - std::sqrt(ab) * mu0);
        return e;
    };
}

}  // namespace uvit::testing
