#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvit/data.hpp"
#include "uvit/errors.hpp"
#include "uvit/eval.hpp"

using namespace uvit;
using namespace uvit::testing;
namespace fs = std::filesystem;

namespace {

FeatureStats make_stats(Eigen::VectorXd mu, Eigen::MatrixXd sigma) {
    FeatureStats s;
    s.mu = std::move(mu);
    s.sigma = std::move(sigma);
    s.n = 100;
    return s;
}

Eigen::MatrixXd random_spd(int d, std::uint64_t seed) {
    Rng rng(seed);
    const Tensor a = Tensor::randn({d, d}, rng);
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = a[i * d + j];
    return m * m.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// Tr((A B)^{1/2}) by the Denman-Beavers iteration on the product directly.
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd y = a * b;
    Eigen::MatrixXd z = Eigen::MatrixXd::Identity(a.rows(), a.cols());
    for (int k = 0; k < 100; ++k) {
        const Eigen::MatrixXd y1 = 0.5 * (y + z.inverse());
        const Eigen::MatrixXd z1 = 0.5 * (z + y.inverse());
        y = y1;
        z = z1;
    }
    return y.trace();
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("frechet distance reference cases") {
    const auto I2 = Eigen::MatrixXd::Identity(2, 2);
    CHECK(frechet_distance(make_stats(Eigen::Vector2d(0, 0), I2), make_stats(Eigen::Vector2d(3, 4), I2)) ==
          doctest::Approx(25.0).epsilon(1e-12));

    Eigen::MatrixXd one(1, 1), four(1, 1);
    one << 1.0;
    four << 4.0;
    CHECK(frechet_distance(make_stats(Eigen::VectorXd::Zero(1), one), make_stats(Eigen::VectorXd::Zero(1), four)) ==
          doctest::Approx(1.0).epsilon(1e-12));

    const auto a = make_stats(Eigen::VectorXd::LinSpaced(5, -1, 1), random_spd(5, 1));
    CHECK(frechet_distance(a, a) == 0.0);
}

TEST_CASE("frechet distance against an independent square root") {
    for (std::uint64_t seed : {2, 3, 4}) {
        const auto sa = random_spd(4, seed), sb = random_spd(4, seed + 10);
        const Eigen::Vector4d ma(0.1, -0.2, 0.3, 0.0), mb(0.0, 0.5, -0.1, 0.2);
        const double expected =
            (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(sa, sb);
        const auto a = make_stats(ma, sa), b = make_stats(mb, sb);
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        CHECK(ab == doctest::Approx(expected).epsilon(1e-8));
        CHECK(std::abs(ab - ba) <= 1e-8 * std::max(ab, ba));
        CHECK(ab >= 0.0);
    }
}

TEST_CASE("frechet distance errors") {
    const auto a = make_stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
    const auto b = make_stats(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
    CHECK_THROWS_AS(frechet_distance(a, b), ShapeError);
    auto c = a;
    c.mu[1] = std::nan("");
    CHECK_THROWS_AS(frechet_distance(a, c), NumericError);
    auto d = a;
    d.sigma(0, 0) = INFINITY;
    CHECK_THROWS_AS(frechet_distance(d, a), NumericError);
}

TEST_CASE("feature statistics") {
    Rng rng(1);
    const Tensor one = Tensor::randn({1, 4, 4, 3}, rng);
    Tensor two({2, 4, 4, 3});
    for (std::int64_t i = 0; i < 48; ++i) two[i] = two[48 + i] = one[i];
    const FeatureStats s = feature_stats(two, FeatureExtractor::raw_pixels());
    CHECK(s.n == 2);
    CHECK(s.sigma.cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(feature_stats(one, FeatureExtractor::raw_pixels()), ParameterError);

    // (n - 1) normalisation by hand.
    const FeatureStats h = stats_from_features(Tensor({3, 1}, {1.0, 2.0, 6.0}));
    CHECK(h.mu[0] == doctest::Approx(3.0));
    CHECK(h.sigma(0, 0) == doctest::Approx(7.0));

    const std::int64_t n = 10000;
    const Tensor noise = Tensor::randn({n, 2, 2, 2}, rng);
    const FeatureStats g = feature_stats(noise, FeatureExtractor::raw_pixels());
    REQUIRE(g.mu.size() == 8);
    for (int j = 0; j < 8; ++j) CHECK(std::abs(g.mu[j]) < 4.0 / std::sqrt(double(n)));
    CHECK((g.sigma - g.sigma.transpose()).cwiseAbs().maxCoeff() == 0.0);

    const Tensor cifar_like({3, 32, 32, 3});
    CHECK(FeatureExtractor::pooled_pixels().extract(cifar_like).shape() == Shape{3, 192});
    CHECK(FeatureExtractor::raw_pixels().extract(cifar_like).shape() == Shape{3, 3072});
}

TEST_CASE("pooled pixels average 4x4 blocks") {
    Tensor x({1, 4, 8, 1});
    for (std::int64_t r = 0; r < 4; ++r)
        for (std::int64_t c = 0; c < 8; ++c) x[r * 8 + c] = c < 4 ? 1.0 : static_cast<double>(r);
    const Tensor f = FeatureExtractor::pooled_pixels().extract(x);
    REQUIRE(f.shape() == Shape{1, 2});
    CHECK(f[0] == 1.0);
    CHECK(f[1] == doctest::Approx(1.5));
}

TEST_CASE("small cnn features and persistence") {
    const SmallCnn net = SmallCnn::random(3, 6, 4);
    Rng rng(2);
    const Tensor x = Tensor::randn({5, 8, 8, 3}, rng);
    const auto ex = FeatureExtractor::small_cnn(net);
    const Tensor f = ex.extract(x);
    CHECK(f.shape() == Shape{5, 6});
    const auto dir = fs::temp_directory_path() / "uvit_test_eval_cnn";
    fs::create_directories(dir);
    net.save(dir / "net.uvtc");
    CHECK(FeatureExtractor::small_cnn(SmallCnn::load(dir / "net.uvtc")).extract(x) == f);
    CHECK_THROWS_AS(ex.extract(Tensor({2, 8, 8, 1})), ShapeError);
}

TEST_CASE("disjoint halves of one i.i.d. set get closer with more samples") {
    ToySpec spec;
    spec.kind = ToySpec::Kind::gaussian;
    spec.gaussian = {0.0, 1.0, 4, 4, 1};
    const auto ex = FeatureExtractor::raw_pixels();
    double prev = INFINITY;
    for (std::int64_t n : {200, 2000, 20000}) {
        const Dataset d = make_toy_dataset(spec, 2 * n, 5);
        const double fd = frechet_distance(feature_stats(d.subset(0, n).images, ex),
                                           feature_stats(d.subset(n, 2 * n).images, ex));
        CHECK(fd < prev);
        prev = fd;
    }
    CHECK(prev < 0.01);
}

TEST_CASE("pixel bytes") {
    CHECK(pixel_byte(-1.0) == 0);
    CHECK(pixel_byte(1.0) == 255);
    CHECK(pixel_byte(0.0) == 128);
    CHECK(pixel_byte(-7.0) == 0);
    CHECK(pixel_byte(3.0) == 255);
    CHECK(pixel_byte(1.0 / 127.5 - 1.0) == 1);
}

TEST_CASE("sample grids") {
    Rng rng(3);
    const Tensor img = Tensor::randn({4, 32, 32, 3}, rng) * 0.5;
    const std::string one = encode_grid(img, 1, 1);
    const std::string head1 = "P6\n32 32\n255\n";
    REQUIRE(one.substr(0, head1.size()) == head1);
    REQUIRE(one.size() == head1.size() + 32 * 32 * 3);
    bool same = true;
    for (std::int64_t i = 0; i < 32 * 32 * 3; ++i)
        same = same && static_cast<unsigned char>(one[head1.size() + i]) == pixel_byte(img[i]);
    CHECK(same);

    const std::string four = encode_grid(img, 2, 2);
    const std::string head4 = "P6\n64 64\n255\n";
    REQUIRE(four.substr(0, head4.size()) == head4);
    CHECK(four.size() == head4.size() + 64 * 64 * 3);
    // Image 3 sits in the bottom-right tile.
    const std::int64_t y = 40, x = 50, k = 1;
    CHECK(static_cast<unsigned char>(four[head4.size() + (y * 64 + x) * 3 + k]) ==
          pixel_byte(img[3 * 3072 + ((y - 32) * 32 + (x - 32)) * 3 + k]));

    // Grey images fill all three channels.
    const std::string grey = encode_grid(Tensor({1, 2, 2, 1}, 1.0), 1, 1);
    CHECK(grey.substr(grey.size() - 12) == std::string(12, '\xff'));

    CHECK_THROWS_AS(encode_grid(img, 3, 2), ParameterError);
    const auto path = fs::temp_directory_path() / "uvit_test_grid.ppm";
    sample_grid(img, 2, 2, path);
    CHECK(read_all(path) == four);
    CHECK_THROWS_AS(sample_grid(img, 1, 1, "/nonexistent_dir/x.ppm"), PersistenceError);
}

TEST_CASE("ablation variants") {
    UViTConfig base = tiny_config();
    CHECK(apply_variant(base, AblationAxis::skip_mode, "none").skip_mode == SkipMode::none);
    CHECK(apply_variant(base, AblationAxis::width, "32").mlp_size == 128);
    CHECK(apply_variant(base, AblationAxis::patch_size, "2").patch_size == 2);
    CHECK_THROWS_AS(apply_variant(base, AblationAxis::skip_mode, "sideways"), ConfigError);
    CHECK_THROWS_AS(apply_variant(base, AblationAxis::patch_size, "3"), ConfigError);
    for (auto a : {AblationAxis::skip_mode, AblationAxis::time_mode, AblationAxis::conv_mode,
                   AblationAxis::patch_embed_mode, AblationAxis::pos_embed_mode, AblationAxis::depth,
                   AblationAxis::width, AblationAxis::patch_size})
        CHECK(parse_ablation_axis(to_string(a)) == a);
    CHECK_THROWS_AS(parse_ablation_axis("dropout"), ConfigError);
}

TEST_CASE("ablation harness rows and reproducibility") {
    UViTConfig base = tiny_config();
    base.condition_kind = ConditionKind::class_label;
    base.num_classes = 2;
    base.diffusion_steps = 1000;
    const Dataset data = make_toy_dataset(ToySpec{}, 32, 1);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.total_iterations = 6;
    tc.learning_rate = 1e-3;
    AblationProtocol p;
    p.axis = AblationAxis::skip_mode;
    p.variants = {"concat_linear"};
    p.eval_every = 6;
    p.eval_samples = 8;
    p.sampler.steps = 5;
    p.extractor = FeatureExtractor::raw_pixels();
    const auto s = default_schedule();

    const AblationReport r = run_ablation(p, base, data, tc, s);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].iteration == 6);
    CHECK(std::isfinite(r.rows[0].metric));
    CHECK(r.losses.at("concat_linear").size() == 6);

    p.variants = {"concat_linear", "none"};
    p.eval_every = 3;
    p.threads = 2;
    const AblationReport a = run_ablation(p, base, data, tc, s);
    const AblationReport b = run_ablation(p, base, data, tc, s);
    REQUIRE(a.rows.size() == 4);
    CHECK(a.rows[0].variant == "concat_linear");
    CHECK(a.rows[3].variant == "none");
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].variant == b.rows[i].variant);
        CHECK(a.rows[i].iteration == b.rows[i].iteration);
        CHECK(a.rows[i].metric == b.rows[i].metric);
    }
    CHECK(a.losses == b.losses);
    // The single-variant run and the pair share the same seed and data order.
    CHECK(a.losses.at("concat_linear") == r.losses.at("concat_linear"));

    const auto path = fs::temp_directory_path() / "uvit_test_ablation.csv";
    write_ablation_csv(a, path);
    std::istringstream csv(read_all(path));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "variant,iteration,metric");
    int n = 0;
    while (std::getline(csv, line))
        if (!line.empty() && line[0] != '#') ++n;
    CHECK(n == 4);

    p.eval_every = 7;
    CHECK_THROWS_AS(run_ablation(p, base, data, tc, s), ConfigError);
    p.eval_every = 3;
    p.variants = {};
    CHECK_THROWS_AS(run_ablation(p, base, data, tc, s), ConfigError);
}
