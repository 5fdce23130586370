#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "uvit/autodiff.hpp"
#include "uvit/errors.hpp"

using namespace uvit;
using uvit::testing::check_gradients;

namespace {

ad::Var param(Shape shape, Rng& rng, double scale = 1.0) { return ad::Var::parameter(Tensor::randn(std::move(shape), rng) * scale); }

// Reduces any tensor to a scalar with non-uniform weights so every output
// element contributes a distinct gradient.
ad::Var weighted_sum(const ad::Var& y) {
    Tensor target(y.shape());
    for (std::int64_t i = 0; i < target.size(); ++i) target[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    return ad::mse(y, target);
}

}  // namespace

TEST_CASE("linear forward matches hand computation") {
    const auto x = ad::Var::constant(Tensor(Shape{1, 2}, {1.0, 2.0}));
    const auto w = ad::Var::constant(Tensor(Shape{3, 2}, {1, 0, 0, 1, 1, 1}));
    const auto b = ad::Var::constant(Tensor(Shape{3}, {0.5, -0.5, 0.0}));
    const auto y = ad::linear(x, w, b);
    CHECK(y.value() == Tensor(Shape{1, 3}, {1.5, 1.5, 3.0}));
    CHECK_THROWS_AS(ad::linear(x, ad::Var::constant(Tensor(Shape{3, 3})), b), ShapeError);
}

TEST_CASE("layer norm of a constant row is zero") {
    const auto x = ad::Var::constant(Tensor(Shape{2, 4}, 3.0));
    const auto y = ad::layer_norm(x);
    for (double v : y.value().data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("attention rows are convex combinations of values") {
    Rng rng(3);
    const std::int64_t D = 4;
    Tensor qkv = Tensor::randn(Shape{5, 3 * D}, rng);
    // Identical value rows must come back unchanged.
    for (std::int64_t r = 0; r < 5; ++r)
        for (std::int64_t d = 0; d < D; ++d) qkv[r * 3 * D + 2 * D + d] = static_cast<double>(d);
    const std::vector<std::int64_t> offsets{0, 2, 5};
    const auto out = ad::self_attention(ad::Var::constant(qkv), offsets, 2);
    for (std::int64_t r = 0; r < 5; ++r)
        for (std::int64_t d = 0; d < D; ++d) CHECK(out.value()[r * D + d] == doctest::Approx(static_cast<double>(d)));
}

TEST_CASE("attention keeps sequences independent") {
    Rng rng(5);
    const std::int64_t D = 4;
    Tensor qkv = Tensor::randn(Shape{5, 3 * D}, rng);
    const std::vector<std::int64_t> offsets{0, 2, 5};
    const auto full = ad::self_attention(ad::Var::constant(qkv), offsets, 2).value();
    Tensor first(Shape{2, 3 * D}, std::vector<double>(qkv.data().begin(), qkv.data().begin() + 2 * 3 * D));
    const std::vector<std::int64_t> single{0, 2};
    const auto alone = ad::self_attention(ad::Var::constant(first), single, 2).value();
    for (std::int64_t i = 0; i < alone.size(); ++i) CHECK(alone[i] == full[i]);
}

TEST_CASE("conv2d with a centred delta kernel is the identity") {
    Rng rng(1);
    const Tensor x = Tensor::randn(Shape{2, 3, 4, 2}, rng);
    Tensor w(Shape{2, 3, 3, 2});
    // out channel c reads in channel c at the kernel centre
    for (std::int64_t c = 0; c < 2; ++c) w[((c * 3 + 1) * 3 + 1) * 2 + c] = 1.0;
    const auto y = ad::conv2d(ad::Var::constant(x), ad::Var::constant(w));
    CHECK(max_abs_diff(y.value(), x) == 0.0);
}

TEST_CASE("gradients of each op match central differences") {
    Rng rng(42);
    SUBCASE("linear") {
        auto x = param({3, 4}, rng), w = param({5, 4}, rng), b = param({5}, rng);
        auto r = check_gradients([&] { return weighted_sum(ad::linear(x, w, b)); }, {{"x", x}, {"w", w}, {"b", b}});
        CHECK(r.worst_rel_error < 1e-6);
    }
    SUBCASE("layer norm with affine") {
        auto x = param({3, 6}, rng), g = param({6}, rng), b = param({6}, rng);
        auto r = check_gradients([&] { return weighted_sum(ad::layer_norm(x, g, b)); }, {{"x", x}, {"g", g}, {"b", b}});
        CHECK(r.worst_rel_error < 1e-6);
    }
    SUBCASE("gelu, mul, sub, scale") {
        auto a = param({2, 5}, rng), b = param({2, 5}, rng);
        auto r = check_gradients([&] { return weighted_sum(ad::scale(ad::sub(ad::gelu(a), ad::mul(a, b)), 1.7)); },
                                 {{"a", a}, {"b", b}});
        CHECK(r.worst_rel_error < 1e-6);
    }
    SUBCASE("self attention") {
        auto qkv = param({7, 12}, rng);
        const std::vector<std::int64_t> offsets{0, 3, 7};
        auto r = check_gradients([&] { return weighted_sum(ad::self_attention(qkv, offsets, 2)); }, {{"qkv", qkv}});
        CHECK(r.worst_rel_error < 1e-6);
    }
    SUBCASE("conv2d 3x3 and 1x1") {
        auto x = param({2, 3, 4, 2}, rng), w3 = param({3, 3, 3, 2}, rng), b3 = param({3}, rng);
        auto w1 = param({2, 1, 1, 3}, rng);
        auto r = check_gradients([&] { return weighted_sum(ad::conv2d(ad::conv2d(x, w3, b3), w1)); },
                                 {{"x", x}, {"w3", w3}, {"b3", b3}, {"w1", w1}});
        CHECK(r.worst_rel_error < 1e-6);
    }
    SUBCASE("structural ops") {
        auto a = param({3, 2}, rng), b = param({3, 3}, rng), c = param({2, 2}, rng);
        auto r = check_gradients(
            [&] {
                const std::vector<ad::Var> parts{a, c};
                auto rows = ad::concat_rows(parts);                      // [5, 2]
                auto picked = ad::gather_rows(rows, {4, 0, 0, 2, 1});    // repeated rows
                auto cols = ad::concat_cols(picked, ad::gather_rows(b, {0, 1, 2, 2, 1}));
                auto flat = ad::gather(cols, {0, 5, 7, 7, 24, 13}, Shape{2, 3});
                return weighted_sum(ad::reshape(flat, Shape{3, 2}));
            },
            {{"a", a}, {"b", b}, {"c", c}});
        CHECK(r.worst_rel_error < 1e-6);
    }
}

TEST_CASE("no-grad mode records nothing") {
    auto w = ad::Var::parameter(Tensor(Shape{2, 2}, 1.0));
    ad::NoGradGuard guard;
    const auto y = ad::linear(ad::Var::constant(Tensor(Shape{1, 2}, 1.0)), w);
    CHECK_FALSE(y.requires_grad());
    CHECK_FALSE(ad::grad_enabled());
}

TEST_CASE("backward needs a scalar") {
    auto w = ad::Var::parameter(Tensor(Shape{2}, 1.0));
    CHECK_THROWS_AS(ad::scale(w, 2.0).backward(), ShapeError);
}
