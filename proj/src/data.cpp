#include "uvit/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include "uvit/errors.hpp"

namespace uvit {

Dataset Dataset::subset(std::int64_t begin, std::int64_t end) const {
    if (begin < 0 || end > size() || begin > end) throw IndexError("dataset subset out of range");
    Dataset out;
    out.name = name;
    out.split = split;
    out.num_classes = num_classes;
    Shape shape = images.shape();
    shape[0] = end - begin;
    const auto per = size() == 0 ? 0 : images.size() / size();
    out.images = Tensor(shape);
    std::copy_n(images.ptr() + begin * per, (end - begin) * per, out.images.ptr());
    out.conditions.assign(conditions.begin() + begin, conditions.begin() + end);
    return out;
}

// ---- CIFAR-10 ----

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string() + " at offset 0");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append_cifar(const std::filesystem::path& path, bool conditional, std::vector<double>& pixels,
                  std::vector<ConditionInput>& conds) {
    const auto bytes = read_all(path);
    const auto n = static_cast<std::int64_t>(bytes.size()) / kCifarRecordBytes;
    if (bytes.empty() || static_cast<std::int64_t>(bytes.size()) % kCifarRecordBytes != 0) {
        throw IngestionError(path.string() + ": truncated record at offset " + std::to_string(n * kCifarRecordBytes) +
                             " (file size " + std::to_string(bytes.size()) + ")");
    }
    pixels.reserve(pixels.size() + static_cast<std::size_t>(n * 3072));
    for (std::int64_t r = 0; r < n; ++r) {
        const auto* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw IngestionError(path.string() + ": label " + std::to_string(rec[0]) + " out of range at offset " +
                                 std::to_string(r * kCifarRecordBytes));
        }
        conds.push_back(conditional ? ConditionInput{ClassLabel{rec[0]}} : ConditionInput{Unconditional{}});
        // Planes are R, G, B of 1024 bytes each; output is HWC.
        for (int p = 0; p < 1024; ++p) {
            for (int c = 0; c < 3; ++c) pixels.push_back(rec[1 + c * 1024 + p] / 127.5 - 1.0);
        }
    }
}

Dataset finish_cifar(std::vector<double> pixels, std::vector<ConditionInput> conds, std::string split) {
    Dataset d;
    const auto n = static_cast<std::int64_t>(conds.size());
    d.images = Tensor({n, 32, 32, 3}, std::move(pixels));
    d.conditions = std::move(conds);
    d.name = "cifar10";
    d.split = std::move(split);
    d.num_classes = 10;
    return d;
}

}  // namespace

Dataset load_cifar10_file(const std::filesystem::path& path, bool conditional) {
    std::vector<double> pixels;
    std::vector<ConditionInput> conds;
    append_cifar(path, conditional, pixels, conds);
    return finish_cifar(std::move(pixels), std::move(conds), path.filename().string());
}

Dataset load_cifar10(const std::filesystem::path& directory, const std::string& split, bool conditional) {
    std::vector<std::string> files;
    if (split == "train") {
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else if (split == "test") {
        files.push_back("test_batch.bin");
    } else {
        throw ParameterError("unknown CIFAR-10 split '" + split + "' (valid: train, test)");
    }
    std::vector<double> pixels;
    std::vector<ConditionInput> conds;
    for (const auto& f : files) append_cifar(directory / f, conditional, pixels, conds);
    return finish_cifar(std::move(pixels), std::move(conds), split);
}

// ---- Toy data ----

std::string to_string(ToyShape s) {
    switch (s) {
        case ToyShape::square: return "square";
        case ToyShape::cross: return "cross";
        case ToyShape::ring: return "ring";
        case ToyShape::diagonal: return "diagonal";
    }
    return "?";
}

ToyShape parse_toy_shape(std::string_view s) {
    if (s == "square") return ToyShape::square;
    if (s == "cross") return ToyShape::cross;
    if (s == "ring") return ToyShape::ring;
    if (s == "diagonal") return ToyShape::diagonal;
    throw ConfigError("unknown toy shape '" + std::string(s) + "' (valid: square, cross, ring, diagonal)");
}

namespace {

bool foreground(ToyShape kind, std::int64_t s, std::int64_t r, std::int64_t c) {
    const auto q = s / 4;
    const auto mid = s / 2;
    switch (kind) {
        case ToyShape::square:
            return r >= q && r < s - q && c >= q && c < s - q;
        case ToyShape::cross: {
            const bool bar_r = (r == mid - 1 || r == mid) && c >= 1 && c < s - 1;
            const bool bar_c = (c == mid - 1 || c == mid) && r >= 1 && r < s - 1;
            return bar_r || bar_c;
        }
        case ToyShape::ring: {
            const bool inside = r >= 1 && r < s - 1 && c >= 1 && c < s - 1;
            return inside && (r == 1 || r == s - 2 || c == 1 || c == s - 2);
        }
        case ToyShape::diagonal:
            return r == c || r == c + 1;
    }
    return false;
}

void check_size(std::int64_t size) {
    if (size != 8 && size != 16) throw ParameterError("toy shape size must be 8 or 16");
}

}  // namespace

Tensor shifted_template(ToyShape kind, std::int64_t size, std::int64_t dy, std::int64_t dx) {
    check_size(size);
    Tensor out({size, size, 1}, -1.0);
    for (std::int64_t r = 0; r < size; ++r) {
        for (std::int64_t c = 0; c < size; ++c) {
            const auto sr = r - dy;
            const auto sc = c - dx;
            if (sr >= 0 && sr < size && sc >= 0 && sc < size && foreground(kind, size, sr, sc)) {
                out[r * size + c] = 1.0;
            }
        }
    }
    return out;
}

Tensor shape_template(ToyShape kind, std::int64_t size) { return shifted_template(kind, size, 0, 0); }

std::int64_t nearest_template(const Tensor& image, const std::vector<ToyShape>& kinds) {
    if (kinds.empty()) throw ParameterError("nearest_template needs at least one kind");
    const auto size = image.rank() == 3 ? image.dim(0) : 0;
    if (image.rank() != 3 || image.dim(1) != size || image.dim(2) != 1) {
        throw ShapeError("nearest_template expects [size, size, 1], got " + shape_string(image.shape()));
    }
    std::int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const Tensor t = shifted_template(kinds[k], size, dy, dx);
                double d = 0.0;
                for (std::int64_t i = 0; i < t.size(); ++i) d += (t[i] - image[i]) * (t[i] - image[i]);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<std::int64_t>(k);
                }
            }
        }
    }
    return best;
}

Dataset make_toy_dataset(const ToySpec& spec, std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw ParameterError("toy dataset needs n >= 1");
    Rng rng(seed);
    Dataset d;
    d.split = "train";
    if (spec.kind == ToySpec::Kind::gaussian) {
        const auto& g = spec.gaussian;
        if (!(g.stddev >= 0.0) || g.height < 1 || g.width < 1 || g.channels < 1) {
            throw ParameterError("gaussian toy spec needs stddev >= 0 and positive dimensions");
        }
        d.images = Tensor({n, g.height, g.width, g.channels});
        for (auto& v : d.images.data()) v = g.mean + g.stddev * standard_normal(rng);
        d.conditions.assign(static_cast<std::size_t>(n), Unconditional{});
        d.name = "gaussian";
        return d;
    }
    const auto& s = spec.shapes;
    check_size(s.size);
    if (s.kinds.empty()) throw ParameterError("shapes toy spec needs at least one kind");
    if (std::set<ToyShape>(s.kinds.begin(), s.kinds.end()).size() != s.kinds.size()) {
        throw ParameterError("shapes toy spec lists a kind twice");
    }
    const auto k = static_cast<std::int64_t>(s.kinds.size());
    const auto pixels = s.size * s.size;
    d.images = Tensor({n, s.size, s.size, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        const auto label = i % k;
        const auto dy = uniform_int(rng, -1, 1);
        const auto dx = uniform_int(rng, -1, 1);
        const Tensor img = shifted_template(s.kinds[static_cast<std::size_t>(label)], s.size, dy, dx);
        std::copy_n(img.ptr(), pixels, d.images.ptr() + i * pixels);
        d.conditions.push_back(s.conditional ? ConditionInput{ClassLabel{label}} : ConditionInput{Unconditional{}});
    }
    d.name = "shapes";
    d.num_classes = s.conditional ? k : 0;
    return d;
}

// ---- Toy text ----

namespace {

std::string lower(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

}  // namespace

ToyVocab::ToyVocab(std::vector<std::string> words, std::int64_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw ParameterError("vocab dimension must be positive");
    Rng rng(seed);
    auto draw = [&] {
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (auto& x : v) x = standard_normal(rng);
        return v;
    };
    unk_ = draw();
    for (auto& w : words) {
        auto key = lower(w);
        if (!table_.contains(key)) table_.emplace(std::move(key), draw());
    }
}

ToyVocab ToyVocab::standard(std::int64_t dim, std::uint64_t seed) {
    return ToyVocab({"a", "the", "red", "green", "blue", "white", "black", "big", "small", "square", "cross", "ring",
                     "diagonal", "circle", "line", "on", "left", "right", "top", "bottom"},
                    dim, seed);
}

const std::vector<double>& ToyVocab::embedding(const std::string& word) const {
    const auto it = table_.find(lower(word));
    return it == table_.end() ? unk_ : it->second;
}

Context toy_text_encode(const std::string& prompt, const ToyVocab& vocab, std::int64_t context_dim,
                        std::int64_t max_len) {
    if (context_dim != vocab.dim()) {
        throw ParameterError("context_dim " + std::to_string(context_dim) + " does not match vocab dimension " +
                             std::to_string(vocab.dim()));
    }
    if (max_len < 0) throw ParameterError("max_len must be non-negative");
    Context ctx{Tensor({max_len, context_dim}), 0};
    std::istringstream words(prompt);
    std::string w;
    while (ctx.valid_len < max_len && words >> w) {
        const auto& e = vocab.embedding(w);
        std::copy(e.begin(), e.end(), ctx.embeddings.ptr() + ctx.valid_len * context_dim);
        ++ctx.valid_len;
    }
    return ctx;
}

// ---- Checkpoints ----

const std::string* Checkpoint::meta(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
        if (k == key) return &v;
    }
    return nullptr;
}

const NamedTensor* Checkpoint::tensor(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

Checkpoint make_checkpoint(const UViTModel& model, std::uint64_t iteration, const OptimizerState* state) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.iteration = iteration;
    for (const auto& p : model.parameters()) ckpt.tensors.push_back({p.name, p.var.value()});
    if (state && !state->first_moment.empty()) {
        const auto& params = model.parameters();
        if (state->first_moment.size() != params.size()) throw ShapeError("optimizer state does not match the model");
        for (std::size_t i = 0; i < params.size(); ++i) {
            ckpt.tensors.push_back({"optim.m." + params[i].name, state->first_moment[i]});
            ckpt.tensors.push_back({"optim.v." + params[i].name, state->second_moment[i]});
        }
        ckpt.metadata.emplace_back("optim_step", std::to_string(state->step));
    }
    return ckpt;
}

UViTModel model_from_checkpoint(const Checkpoint& ckpt) {
    UViTModel model(ckpt.config, 0);
    for (auto& p : model.parameters()) {
        const auto* t = ckpt.tensor(p.name);
        if (!t) throw PersistenceError("checkpoint is missing parameter '" + p.name + "'");
        if (t->value.shape() != p.var.shape()) {
            throw PersistenceError("checkpoint parameter '" + p.name + "' has shape " + shape_string(t->value.shape()) +
                                   ", model expects " + shape_string(p.var.shape()));
        }
        p.var.mutable_value() = t->value;
    }
    return model;
}

OptimizerState optimizer_from_checkpoint(const Checkpoint& ckpt, const UViTModel& model) {
    OptimizerState state;
    const auto* step = ckpt.meta("optim_step");
    if (!step) return state;
    state.step = parse_int("optim_step", *step);
    for (const auto& p : model.parameters()) {
        const auto* m = ckpt.tensor("optim.m." + p.name);
        const auto* v = ckpt.tensor("optim.v." + p.name);
        if (!m || !v) throw PersistenceError("checkpoint is missing optimizer moments for '" + p.name + "'");
        state.first_moment.push_back(m->value);
        state.second_moment.push_back(v->value);
    }
    return state;
}

namespace {

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}
    template <typename U>
    void uint(U v) {
        unsigned char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
        out_.write(reinterpret_cast<const char*>(buf), sizeof(U));
    }
    void bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

private:
    std::ostream& out_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}
    template <typename U>
    U uint(const char* what) {
        unsigned char buf[sizeof(U)];
        read(buf, sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        std::string s(n, '\0');
        read(s.data(), n, what);
        return s;
    }
    std::uint64_t offset() const { return offset_; }

private:
    void read(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw PersistenceError("truncated checkpoint: reading " + std::string(what) + " at offset " +
                                   std::to_string(offset_));
        }
        offset_ += n;
    }
    std::istream& in_;
    std::uint64_t offset_ = 0;
};

constexpr char kMagic[4] = {'U', 'V', 'T', 'C'};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
    std::set<std::string> seen;
    for (const auto& t : ckpt.tensors) {
        if (!seen.insert(t.name).second) throw PersistenceError("duplicate tensor name '" + t.name + "'");
        if (t.name.size() > 0xFFFF) throw PersistenceError("tensor name too long: " + t.name.substr(0, 32));
        if (t.value.rank() > 255) throw PersistenceError("tensor rank too large for '" + t.name + "'");
    }
    std::string text;
    auto line = [&](const std::string& k, const std::string& v) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw PersistenceError("checkpoint metadata key or value contains a separator: " + k);
        }
        text += k + "=" + v + "\n";
    };
    for (const auto& [k, v] : ckpt.config.to_key_values()) line(k, v);
    for (const auto& [k, v] : ckpt.metadata) line(k, v);

    Writer w(out);
    w.bytes(std::string_view(kMagic, 4));
    w.uint<std::uint32_t>(ckpt.version);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
    w.uint<std::uint64_t>(ckpt.iteration);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        w.uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.bytes(t.name);
        w.uint<std::uint8_t>(1);  // 64-bit float
        w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
        for (auto d : t.value.shape()) w.uint<std::uint64_t>(static_cast<std::uint64_t>(d));
        for (double v : t.value.data()) w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw PersistenceError("write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
    Reader r(in);
    if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw PersistenceError("bad magic");
    Checkpoint ckpt;
    ckpt.version = r.uint<std::uint32_t>("version");
    if (ckpt.version != kCheckpointVersion) {
        throw PersistenceError("version mismatch: file has " + std::to_string(ckpt.version) + ", expected " +
                               std::to_string(kCheckpointVersion));
    }
    const auto text_len = r.uint<std::uint32_t>("config length");
    std::istringstream text(r.bytes(text_len, "config"));
    std::string ln;
    while (std::getline(text, ln)) {
        if (ln.empty()) continue;
        const auto eq = ln.find('=');
        if (eq == std::string::npos) throw PersistenceError("malformed config line '" + ln + "'");
        const auto key = ln.substr(0, eq);
        const auto value = ln.substr(eq + 1);
        try {
            if (!ckpt.config.apply(key, value)) ckpt.metadata.emplace_back(key, value);
        } catch (const ConfigError& e) {
            throw PersistenceError(std::string("bad config entry: ") + e.what());
        }
    }
    ckpt.iteration = r.uint<std::uint64_t>("iteration");
    const auto count = r.uint<std::uint32_t>("tensor count");
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.uint<std::uint16_t>("name length");
        auto name = r.bytes(name_len, "name");
        if (!seen.insert(name).second) throw PersistenceError("duplicate tensor name '" + name + "'");
        const auto dtype = r.uint<std::uint8_t>("dtype");
        if (dtype > 1) throw PersistenceError("unknown dtype code " + std::to_string(dtype) + " for '" + name + "'");
        const auto rank = r.uint<std::uint8_t>("rank");
        Shape shape;
        std::uint64_t numel = 1;
        for (int k = 0; k < rank; ++k) {
            const auto d = r.uint<std::uint64_t>("dims");
            if (d > (std::uint64_t{1} << 40) || (d != 0 && numel > (std::uint64_t{1} << 40) / d)) {
                throw PersistenceError("implausible dimensions for '" + name + "'");
            }
            numel *= d;
            shape.push_back(static_cast<std::int64_t>(d));
        }
        Tensor value(shape);
        for (std::uint64_t j = 0; j < numel; ++j) {
            value[static_cast<std::int64_t>(j)] =
                dtype == 1 ? std::bit_cast<double>(r.uint<std::uint64_t>("data"))
                           : static_cast<double>(std::bit_cast<float>(r.uint<std::uint32_t>("data")));
        }
        ckpt.tensors.push_back({std::move(name), std::move(value)});
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw PersistenceError("cannot open " + tmp.string() + " for writing");
        write_checkpoint(ckpt, out);
        out.flush();
        if (!out) throw PersistenceError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw PersistenceError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open " + path.string());
    try {
        return read_checkpoint(in);
    } catch (const PersistenceError& e) {
        throw PersistenceError(path.string() + ": " + e.what());
    }
}

}  // namespace uvit
