#include <cmath>

#include "doctest.h"
#include "uvit/errors.hpp"
#include "uvit/schedule.hpp"

using namespace uvit;

TEST_CASE("small schedules by hand") {
    const auto one = linear_beta_schedule(1, 0.5, 0.5);
    CHECK(one.alpha_bar(1) == 0.5);

    const NoiseSchedule two({0.1, 0.2});
    CHECK(two.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(two.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));
}

TEST_CASE("default schedule end point against a scalar product") {
    const auto s = default_schedule();
    REQUIRE(s.steps() == 1000);
    // Independent oracle: accumulate the product directly.
    double prod = 1.0;
    for (int i = 0; i < 1000; ++i) {
        const double beta = 1e-4 + (0.02 - 1e-4) * i / 999.0;
        prod *= 1.0 - beta;
    }
    CHECK(s.alpha_bar(1000) == doctest::Approx(prod).epsilon(1e-12));
    CHECK(s.alpha_bar(1000) == doctest::Approx(4.04e-5).epsilon(0.01));
    CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-14));
    CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-14));
}

TEST_CASE("schedule invariants") {
    for (const auto& s : {default_schedule(), linear_beta_schedule(50, 0.001, 0.3), linear_beta_schedule(7, 0.2, 0.2)}) {
        for (std::int64_t t = 1; t <= s.steps(); ++t) {
            CHECK(s.alpha(t) + s.beta(t) == 1.0);
            CHECK(s.alpha_bar(t) > 0.0);
            CHECK(s.alpha_bar(t) < 1.0);
            if (t >= 2) {
                CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
                CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
                CHECK(s.log_snr(t) < s.log_snr(t - 1));
            }
        }
    }
}

TEST_CASE("schedule construction errors") {
    CHECK_THROWS_AS(linear_beta_schedule(0, 0.1, 0.2), ParameterError);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.0, 0.2), ParameterError);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.3, 0.2), ParameterError);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.1, 1.0), ParameterError);
    CHECK_THROWS_AS(NoiseSchedule({0.5, 1.5}), ParameterError);
    const auto s = default_schedule();
    CHECK_THROWS_AS(s.alpha_bar(0), IndexError);
    CHECK_THROWS_AS(s.alpha_bar(1001), IndexError);
}

TEST_CASE("add_noise examples and errors") {
    // alpha_bar = 0.25 with a single step of beta 0.75.
    const NoiseSchedule s({0.75});
    const Tensor out = add_noise(Tensor({2, 2}, 1.0), Tensor({2, 2}, 0.0), 1, s);
    CHECK(out == Tensor({2, 2}, 0.5));
    CHECK_THROWS_AS(add_noise(Tensor({2}), Tensor({3}), 1, s), ShapeError);
    CHECK_THROWS_AS(add_noise(Tensor({2}), Tensor({2}), 2, s), IndexError);

    // Near the two limits the output approaches x0 and eps.
    const NoiseSchedule tiny({1e-14});
    const NoiseSchedule huge({1.0 - 1e-14});
    const Tensor x0({3}, {1.0, -2.0, 3.0});
    const Tensor eps({3}, {0.5, 0.25, -1.0});
    CHECK(max_abs_diff(add_noise(x0, eps, 1, tiny), x0) < 1e-6);
    CHECK(max_abs_diff(add_noise(x0, eps, 1, huge), eps) < 1e-6);
}

TEST_CASE("add_noise marginal statistics") {
    const auto s = default_schedule();
    const std::int64_t n = 20000;
    const Tensor x0({4}, {1.0, -1.0, 0.5, 0.0});
    Rng rng(42);
    for (std::int64_t t : {1, 500, 1000}) {
        std::vector<double> sum(4, 0.0), sq(4, 0.0);
        for (std::int64_t k = 0; k < n; ++k) {
            const Tensor y = add_noise(x0, Tensor::randn({4}, rng), t, s);
            for (int i = 0; i < 4; ++i) {
                sum[i] += y[i];
                sq[i] += y[i] * y[i];
            }
        }
        for (int i = 0; i < 4; ++i) {
            const double mean = sum[i] / n;
            const double sd = std::sqrt((sq[i] - n * mean * mean) / (n - 1));
            const double expected_sd = std::sqrt(1.0 - s.alpha_bar(t));
            CHECK(std::abs(mean - std::sqrt(s.alpha_bar(t)) * x0[i]) < 4.0 * expected_sd / std::sqrt(double(n)));
            CHECK(std::abs(sd / expected_sd - 1.0) < 0.05);
        }
    }
}

TEST_CASE("posterior_mean examples") {
    // Two steps with alpha_2 = 0.99 and alpha_bar_2 = 0.9.
    const NoiseSchedule s({1.0 - 0.9 / 0.99, 0.01});
    const Tensor one({1}, 1.0);
    const double expected = (1.0 / std::sqrt(0.99)) * (1.0 - 0.01 / std::sqrt(0.1));
    CHECK(posterior_mean(one, one, 2, s)[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.9733).epsilon(1e-4));

    const Tensor x({3}, {0.3, -0.7, 2.0});
    const Tensor e({3}, {1.0, 0.5, -0.25});
    const Tensor zero_eps = posterior_mean(x, Tensor({3}), 2, s);
    for (int i = 0; i < 3; ++i) CHECK(zero_eps[i] == doctest::Approx(x[i] / std::sqrt(0.99)));

    const Tensor diff = posterior_mean(x, e * 2.0, 2, s) - posterior_mean(x, e, 2, s);
    const double coef = -(1.0 / std::sqrt(s.alpha(2))) * s.beta(2) / std::sqrt(1.0 - s.alpha_bar(2));
    for (int i = 0; i < 3; ++i) CHECK(diff[i] == doctest::Approx(coef * e[i]).epsilon(1e-12));
    CHECK_THROWS_AS(posterior_mean(x, e, 3, s), IndexError);
}

TEST_CASE("score_from_eps examples") {
    const NoiseSchedule s({0.25});  // alpha_bar = 0.75
    CHECK(score_from_eps(Tensor({1}, 1.0), 1, s)[0] == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK(score_from_eps(Tensor({5}), 1, s) == Tensor({5}));
    Rng rng(3);
    const Tensor e = Tensor::randn({6}, rng);
    const auto d = default_schedule();
    CHECK(score_from_eps(e * -1.0, 300, d) == score_from_eps(e, 300, d) * -1.0);
}
