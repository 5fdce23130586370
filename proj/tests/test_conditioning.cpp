#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvit/conditioning.hpp"
#include "uvit/data.hpp"
#include "uvit/errors.hpp"

using namespace uvit;
using namespace uvit::testing;

namespace {

UViTConfig class_config(std::int64_t k) {
    UViTConfig c = tiny_config();
    c.condition_kind = ConditionKind::class_label;
    c.num_classes = k;
    return c;
}

UViTConfig context_config() {
    UViTConfig c = tiny_config();
    c.condition_kind = ConditionKind::context;
    c.context_dim = 6;
    c.max_context_len = 5;
    return c;
}

}  // namespace

TEST_CASE("sinusoidal features") {
    const Tensor z = sinusoidal_embedding(0.0, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(z[i] == 0.0);
        CHECK(z[4 + i] == 1.0);
    }
    CHECK(sinusoidal_embedding(17.0, 8) == sinusoidal_embedding(17.0, 8));
    CHECK_THROWS_AS(sinusoidal_embedding(1.0, 7), ConfigError);
    // Hand value of the second frequency: f_1 = 10000^(-1/4) = 0.1.
    CHECK(sinusoidal_embedding(3.0, 8)[1] == doctest::Approx(std::sin(0.3)).epsilon(1e-14));
}

TEST_CASE("timestep embeddings are deterministic and distinct") {
    UViTModel m(tiny_config(), 1);
    randomize(m, 2);
    const std::vector<std::int64_t> t{1, 2, 1};
    const Tensor e = timestep_embedding(m, t).value();
    const auto D = m.config().hidden_size;
    double diff12 = 0.0, diff13 = 0.0;
    for (std::int64_t i = 0; i < D; ++i) {
        diff12 = std::max(diff12, std::abs(e[i] - e[D + i]));
        diff13 = std::max(diff13, std::abs(e[i] - e[2 * D + i]));
    }
    CHECK(diff12 > 1e-6);
    CHECK(diff13 == 0.0);
}

TEST_CASE("class conditioning tokens") {
    UViTModel m(class_config(10), 3);
    randomize(m, 4);
    REQUIRE(m.class_table().shape() == Shape{11, 16});
    const Tensor a = embed_condition(ClassLabel{3}, m).value();
    const Tensor b = embed_condition(ClassLabel{7}, m).value();
    const Tensor null = embed_condition(NullCondition{}, m).value();
    CHECK(a.shape() == Shape{1, 16});
    CHECK(max_abs_diff(a, b) > 0.0);
    const auto& table = m.class_table().value();
    for (std::int64_t i = 0; i < 16; ++i) {
        CHECK(null[i] == table[10 * 16 + i]);
        CHECK(a[i] == table[3 * 16 + i]);
    }
    CHECK_THROWS_AS(embed_condition(Unconditional{}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(ClassLabel{10}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(ClassLabel{-1}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(Context{Tensor({5, 6}), 1}, m), ConditioningError);
}

TEST_CASE("unconditional models reject conditions") {
    UViTModel m(tiny_config(), 3);
    CHECK_FALSE(embed_condition(Unconditional{}, m).defined());
    CHECK_THROWS_AS(embed_condition(ClassLabel{0}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(NullCondition{}, m), ConditioningError);
}

TEST_CASE("context conditioning tokens") {
    UViTModel m(context_config(), 5);
    randomize(m, 6);
    Rng rng(1);
    Context ctx{Tensor({5, 6}), 5};
    ctx.embeddings = Tensor::randn({5, 6}, rng);
    CHECK(embed_condition(ctx, m).shape() == Shape{5, 16});
    ctx.valid_len = 2;
    CHECK(embed_condition(ctx, m).shape() == Shape{2, 16});
    const Tensor null = embed_condition(NullCondition{}, m).value();
    CHECK(null == m.null_context().value());
    CHECK(embed_condition(Context{Tensor({5, 6}), 0}, m).value() == null);
    CHECK_THROWS_AS(embed_condition(Context{Tensor({5, 6}), 6}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(Context{Tensor({4, 6}), 1}, m), ConditioningError);
    CHECK_THROWS_AS(embed_condition(ClassLabel{0}, m), ConditioningError);
}

TEST_CASE("toy text prompts give one token per word") {
    UViTModel m(context_config(), 5);
    const auto vocab = ToyVocab::standard(6, 11);
    for (const auto& [prompt, words] : std::vector<std::pair<std::string, std::int64_t>>{
             {"red square", 2}, {"a big blue ring on top", 5}, {"cross", 1}, {"qwerty zxcv", 2}}) {
        const Context c = toy_text_encode(prompt, vocab, 6, 5);
        CHECK(c.valid_len == words);
        CHECK(embed_condition(c, m).dim(0) == words);
    }
}

TEST_CASE("guided_eps follows (1 + s) cond - s uncond") {
    UViTConfig c = class_config(3);
    UViTModel m(c, 7);
    randomize(m, 8);
    const Tensor x = random_images(2, c, 9);
    const std::vector<std::int64_t> t{5, 60};
    const std::vector<ConditionInput> cond{ClassLabel{0}, ClassLabel{2}};
    const std::vector<ConditionInput> nulls(2, NullCondition{});
    const Tensor a = m.predict(x, t, cond);
    const Tensor b = m.predict(x, t, nulls);

    CHECK(guided_eps(m, x, t, cond, 0.0) == a);
    const Tensor g1 = guided_eps(m, x, t, cond, 1.0);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(g1[i] == doctest::Approx(2.0 * a[i] - b[i]).epsilon(1e-14));

    // Affine in s with slope cond - uncond.
    const Tensor g3 = guided_eps(m, x, t, cond, 3.0);
    const Tensor g2 = guided_eps(m, x, t, cond, 2.0);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(g3[i] - g2[i] == doctest::Approx(a[i] - b[i]).epsilon(1e-9));

    const std::vector<ConditionInput> with_null{ClassLabel{0}, NullCondition{}};
    CHECK_THROWS_AS(guided_eps(m, x, t, with_null, 1.0), ParameterError);
}

TEST_CASE("guidance is inert when the model ignores the condition") {
    UViTConfig c = class_config(3);
    UViTModel m(c, 7);
    randomize(m, 8);
    // Every table row identical: cond and uncond predictions coincide.
    for (auto& p : m.parameters()) {
        if (p.name == "class_embed") {
            Tensor& v = p.var.mutable_value();
            for (std::int64_t r = 1; r < v.dim(0); ++r)
                for (std::int64_t i = 0; i < v.dim(1); ++i) v[r * v.dim(1) + i] = v[i];
        }
    }
    const Tensor x = random_images(1, c, 3);
    const std::vector<std::int64_t> t{40};
    const std::vector<ConditionInput> cond{ClassLabel{1}};
    const Tensor plain = m.predict(x, t, cond);
    CHECK(max_abs_diff(guided_eps(m, x, t, cond, 4.0), plain) < 1e-12);
}
