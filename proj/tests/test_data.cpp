#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvit/data.hpp"
#include "uvit/errors.hpp"

using namespace uvit;
using namespace uvit::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("uvit_test_data_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Record i: label i % 10, red plane all 0, green all 255, blue = pixel index mod 256.
std::string cifar_bytes(int records) {
    std::string s;
    for (int i = 0; i < records; ++i) {
        s.push_back(static_cast<char>(i % 10));
        s.append(1024, '\0');
        s.append(1024, '\xff');
        for (int p = 0; p < 1024; ++p) s.push_back(static_cast<char>(p % 256));
    }
    return s;
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <class T>
void put(std::string& s, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));  // little-endian host
    s.append(b, sizeof(T));
}

std::string error_of(auto&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("cifar batch parsing on a synthetic file") {
    const auto dir = scratch_dir("cifar");
    write_file(dir / "two.bin", cifar_bytes(2));
    const Dataset d = load_cifar10_file(dir / "two.bin");
    REQUIRE(d.size() == 2);
    CHECK(d.images.shape() == Shape{2, 32, 32, 3});
    CHECK(std::get<ClassLabel>(d.conditions[0]).label == 0);
    CHECK(std::get<ClassLabel>(d.conditions[1]).label == 1);
    // HWC layout: pixel (r, c) channel k sits at (r * 32 + c) * 3 + k.
    for (std::int64_t p : {0, 1, 300, 1023}) {
        CHECK(d.images[p * 3 + 0] == -1.0);
        CHECK(d.images[p * 3 + 1] == 1.0);
        CHECK(d.images[p * 3 + 2] == (p % 256) / 127.5 - 1.0);
    }
    const Dataset u = load_cifar10_file(dir / "two.bin", false);
    CHECK(std::holds_alternative<Unconditional>(u.conditions[0]));
    CHECK(u.images == d.images);
}

TEST_CASE("cifar ingestion errors name the file and offset") {
    const auto dir = scratch_dir("cifar_bad");
    write_file(dir / "short.bin", cifar_bytes(2).substr(0, 2 * kCifarRecordBytes - 5));
    const std::string msg = error_of([&] { load_cifar10_file(dir / "short.bin"); });
    CHECK(msg.find("short.bin") != std::string::npos);
    CHECK(msg.find(std::to_string(kCifarRecordBytes)) != std::string::npos);
    CHECK_THROWS_AS(load_cifar10_file(dir / "short.bin"), IngestionError);
    CHECK_THROWS_AS(load_cifar10_file(dir / "absent.bin"), IngestionError);
    CHECK_THROWS_AS(load_cifar10(dir, "train"), IngestionError);

    std::string bad = cifar_bytes(1);
    bad[0] = 10;
    write_file(dir / "label.bin", bad);
    CHECK_THROWS_AS(load_cifar10_file(dir / "label.bin"), IngestionError);
    CHECK_THROWS_AS(load_cifar10(dir, "valid"), ParameterError);
}

TEST_CASE("cifar train split concatenates five batches") {
    const auto dir = scratch_dir("cifar_split");
    for (int i = 1; i <= 5; ++i) write_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), cifar_bytes(3));
    write_file(dir / "test_batch.bin", cifar_bytes(4));
    const Dataset train = load_cifar10(dir, "train");
    CHECK(train.size() == 15);
    CHECK(train.num_classes == 10);
    CHECK(load_cifar10(dir, "test").size() == 4);
}

TEST_CASE("gaussian toy moments") {
    ToySpec spec;
    spec.kind = ToySpec::Kind::gaussian;
    spec.gaussian = {0.0, 1.0, 4, 4, 2};
    const std::int64_t n = 4096;
    const Dataset d = make_toy_dataset(spec, n, 7);
    REQUIRE(d.images.shape() == Shape{n, 4, 4, 2});
    const std::int64_t e = 32;
    for (std::int64_t j = 0; j < e; ++j) {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i) s += d.images[i * e + j];
        CHECK(std::abs(s / n) < 4.0 / std::sqrt(double(n)));
    }
    spec.gaussian.stddev = -1.0;
    CHECK_THROWS_AS(make_toy_dataset(spec, 4, 7), ParameterError);
}

TEST_CASE("shapes toy data") {
    ToySpec spec;
    const Dataset d = make_toy_dataset(spec, 100, 3);
    REQUIRE(d.size() == 100);
    CHECK(d.num_classes == 2);
    std::set<std::int64_t> labels;
    for (const auto& c : d.conditions) labels.insert(std::get<ClassLabel>(c).label);
    CHECK(labels == std::set<std::int64_t>{0, 1});
    for (double v : d.images.data()) CHECK((v == 1.0 || v == -1.0));

    const Dataset again = make_toy_dataset(spec, 100, 3);
    CHECK(again.images == d.images);
    CHECK(again.conditions == d.conditions);
    CHECK(make_toy_dataset(spec, 100, 4).images != d.images);

    // Every image is exactly some shifted template of its own class.
    for (std::int64_t i = 0; i < d.size(); ++i) {
        const Tensor img = d.subset(i, i + 1).images.reshaped({8, 8, 1});
        CHECK(nearest_template(img, spec.shapes.kinds) == std::get<ClassLabel>(d.conditions[i]).label);
    }

    spec.shapes.kinds = {};
    CHECK_THROWS_AS(make_toy_dataset(spec, 10, 1), ParameterError);
    spec.shapes.kinds = {ToyShape::ring};
    spec.shapes.size = 12;
    CHECK_THROWS_AS(make_toy_dataset(spec, 10, 1), ParameterError);
}

TEST_CASE("shape templates") {
    for (auto k : {ToyShape::square, ToyShape::cross, ToyShape::ring, ToyShape::diagonal}) {
        CHECK(parse_toy_shape(to_string(k)) == k);
        for (std::int64_t size : {8, 16}) {
            const Tensor t = shape_template(k, size);
            CHECK(t.shape() == Shape{size, size, 1});
            CHECK(shifted_template(k, size, 0, 0) == t);
            const std::vector<ToyShape> all{ToyShape::square, ToyShape::cross, ToyShape::ring, ToyShape::diagonal};
            CHECK(all[nearest_template(shifted_template(k, size, 1, -1), all)] == k);
        }
    }
    CHECK_THROWS_AS(parse_toy_shape("triangle"), ConfigError);
}

TEST_CASE("toy text encoding") {
    const auto vocab = ToyVocab::standard(6, 11);
    const Context empty = toy_text_encode("", vocab, 6, 4);
    CHECK(empty.valid_len == 0);
    const Context rs = toy_text_encode("red square", vocab, 6, 4);
    CHECK(rs.valid_len == 2);
    CHECK(rs.embeddings.shape() == Shape{4, 6});
    CHECK(toy_text_encode("red square", vocab, 6, 4).embeddings == rs.embeddings);
    CHECK(toy_text_encode("RED  Square", vocab, 6, 4).embeddings == rs.embeddings);
    CHECK(toy_text_encode("a b c d e f", vocab, 6, 4).valid_len == 4);
    // Unknown words share one vector.
    CHECK(vocab.embedding("zzz") == vocab.embedding("qqq"));
    CHECK(vocab.embedding("red") != vocab.embedding("zzz"));
    CHECK_THROWS_AS(toy_text_encode("red", vocab, 5, 4), ParameterError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    UViTConfig c = tiny_config();
    c.condition_kind = ConditionKind::class_label;
    c.num_classes = 3;
    UViTModel m(c, 1);
    randomize(m, 2);
    OptimizerState st;
    for (const auto& p : m.parameters()) {
        Rng rng(p.name.size());
        st.first_moment.push_back(Tensor::randn(p.var.shape(), rng));
        st.second_moment.push_back(Tensor::randn(p.var.shape(), rng) * 0.1);
    }
    st.step = 17;
    Checkpoint ck = make_checkpoint(m, 42, &st);
    ck.metadata.emplace_back("learning_rate", "0.0002");

    const auto dir = scratch_dir("ckpt");
    save_checkpoint(ck, dir / "a.uvtc");
    CHECK_FALSE(fs::exists(dir / "a.uvtc.tmp"));
    const Checkpoint back = load_checkpoint(dir / "a.uvtc");
    CHECK(back.iteration == 42);
    CHECK(back.config == c);
    REQUIRE(back.meta("learning_rate") != nullptr);
    CHECK(*back.meta("learning_rate") == "0.0002");
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == ck.tensors[i].name);
        CHECK(back.tensors[i].value == ck.tensors[i].value);
    }

    const UViTModel m2 = model_from_checkpoint(back);
    CHECK(count_params(m2) == count_params(m));
    const Tensor x = random_images(2, c, 5);
    const std::vector<std::int64_t> t{3, 90};
    const std::vector<ConditionInput> cond{ClassLabel{2}, NullCondition{}};
    CHECK(m2.predict(x, t, cond) == m.predict(x, t, cond));

    const OptimizerState st2 = optimizer_from_checkpoint(back, m2);
    CHECK(st2.step == 17);
    for (std::size_t i = 0; i < st.first_moment.size(); ++i) {
        CHECK(st2.first_moment[i] == st.first_moment[i]);
        CHECK(st2.second_moment[i] == st.second_moment[i]);
    }
    CHECK(optimizer_from_checkpoint(make_checkpoint(m, 0), m).first_moment.empty());
}

TEST_CASE("small preset round trip keeps the parameter count") {
    const UViTModel m = build_uvit(uvit_small(), 3);
    std::stringstream buf;
    write_checkpoint(make_checkpoint(m, 0), buf);
    const Checkpoint back = read_checkpoint(buf);
    const UViTModel m2 = model_from_checkpoint(back);
    CHECK(count_params(m2) == count_params(m));
    bool same = true;
    for (std::size_t i = 0; i < m.parameters().size(); ++i)
        same = same && m.parameters()[i].var.value() == m2.parameters()[i].var.value();
    CHECK(same);
}

TEST_CASE("checkpoint bytes follow the documented layout") {
    // Hand-assembled file: one 2x1 tensor stored as 32-bit floats.
    UViTConfig c = tiny_config();
    std::string text;
    for (const auto& [k, v] : c.to_key_values()) text += k + "=" + v + "\n";
    text += "note=hello\n";
    std::string s = "UVTC";
    put<std::uint32_t>(s, 1);
    put<std::uint32_t>(s, static_cast<std::uint32_t>(text.size()));
    s += text;
    put<std::uint64_t>(s, 9);
    put<std::uint32_t>(s, 1);
    put<std::uint16_t>(s, 3);
    s += "w.x";
    put<std::uint8_t>(s, 0);
    put<std::uint8_t>(s, 2);
    put<std::uint64_t>(s, 2);
    put<std::uint64_t>(s, 1);
    put<float>(s, 1.5f);
    put<float>(s, -0.25f);

    std::istringstream in(s);
    const Checkpoint ck = read_checkpoint(in);
    CHECK(ck.iteration == 9);
    CHECK(ck.config == c);
    REQUIRE(ck.meta("note") != nullptr);
    CHECK(*ck.meta("note") == "hello");
    REQUIRE(ck.tensors.size() == 1);
    CHECK(ck.tensors[0].value == Tensor({2, 1}, {1.5, -0.25}));

    // Writing the same content with 64-bit data: header bytes agree up to the dtype.
    std::ostringstream out;
    write_checkpoint(ck, out);
    const std::string w = out.str();
    CHECK(w.substr(0, 8) == s.substr(0, 8));
    CHECK(w.size() == s.size() + 2 * 4);
}

TEST_CASE("checkpoint faults are named") {
    const UViTModel m(tiny_config(), 1);
    std::ostringstream out;
    write_checkpoint(make_checkpoint(m, 5), out);
    const std::string good = out.str();

    auto read = [](std::string bytes) {
        std::istringstream in(bytes);
        return read_checkpoint(in);
    };
    std::string bad = good;
    bad[0] = 'X';
    CHECK(error_of([&] { read(bad); }) == "bad magic");
    bad = good;
    bad[4] = 2;
    CHECK(error_of([&] { read(bad); }).find("version mismatch") != std::string::npos);
    const std::string cut = error_of([&] { read(good.substr(0, good.size() - 3)); });
    CHECK(cut.find("truncated") != std::string::npos);
    CHECK(cut.find("offset") != std::string::npos);
    CHECK_THROWS_AS(read(good.substr(0, 2)), PersistenceError);

    Checkpoint dup = make_checkpoint(m, 0);
    dup.tensors.push_back(dup.tensors.front());
    std::ostringstream o2;
    CHECK(error_of([&] { write_checkpoint(dup, o2); }).find("duplicate tensor name") != std::string::npos);

    const auto dir = scratch_dir("ckpt_bad");
    write_file(dir / "bad.uvtc", "not a checkpoint");
    const std::string msg = error_of([&] { load_checkpoint(dir / "bad.uvtc"); });
    CHECK(msg.find("bad.uvtc") != std::string::npos);
    CHECK(msg.find("bad magic") != std::string::npos);
    CHECK_THROWS_AS(load_checkpoint(dir / "none.uvtc"), PersistenceError);

    Checkpoint missing = make_checkpoint(m, 0);
    missing.tensors.pop_back();
    CHECK_THROWS_AS(model_from_checkpoint(missing), PersistenceError);
}
