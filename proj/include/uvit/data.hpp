#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "uvit/backbone.hpp"
#include "uvit/conditioning.hpp"
#include "uvit/config.hpp"
#include "uvit/tensor.hpp"
#include "uvit/trainer.hpp"

namespace uvit {

struct Dataset {
    Tensor images;  // [n, H, W, C] in [-1, 1]
    std::vector<ConditionInput> conditions;
    std::string name;
    std::string split;
    std::int64_t num_classes = 0;

    std::int64_t size() const { return images.rank() == 0 ? 0 : images.dim(0); }
    // Copies of the selected rows.
    Dataset subset(std::int64_t begin, std::int64_t end) const;
};

// ---- CIFAR-10 binary batches ----

inline constexpr std::int64_t kCifarRecordBytes = 3073;

// Parses one binary batch file. Labels become ClassLabel conditions unless
// conditional is false.
Dataset load_cifar10_file(const std::filesystem::path& path, bool conditional = true);
// data_batch_1..5.bin for "train", test_batch.bin for "test".
Dataset load_cifar10(const std::filesystem::path& directory, const std::string& split = "train",
                     bool conditional = true);

// ---- Procedural toy data ----

enum class ToyShape { square, cross, ring, diagonal };
std::string to_string(ToyShape s);
ToyShape parse_toy_shape(std::string_view s);

struct GaussianToy {
    double mean = 0.0;
    double stddev = 1.0;
    std::int64_t height = 8;
    std::int64_t width = 8;
    std::int64_t channels = 1;
};

// Single-channel size x size binary images of the listed kinds, class label
// = index in kinds, each randomly shifted by up to one pixel per axis.
struct ShapesToy {
    std::vector<ToyShape> kinds{ToyShape::square, ToyShape::cross};
    std::int64_t size = 8;  // 8 or 16
    bool conditional = true;
};

struct ToySpec {
    enum class Kind { gaussian, shapes } kind = Kind::shapes;
    GaussianToy gaussian;
    ShapesToy shapes;
};

Dataset make_toy_dataset(const ToySpec& spec, std::int64_t n, std::uint64_t seed);

// Unshifted template, [size, size, 1] with foreground +1 and background -1.
Tensor shape_template(ToyShape kind, std::int64_t size);
// Template shifted by (dy, dx); vacated pixels become background.
Tensor shifted_template(ToyShape kind, std::int64_t size, std::int64_t dy, std::int64_t dx);
// Index into kinds of the template (over all one-pixel shifts) nearest in L2
// to image [size, size, 1].
std::int64_t nearest_template(const Tensor& image, const std::vector<ToyShape>& kinds);

// ---- Toy text conditioning ----

class ToyVocab {
public:
    ToyVocab(std::vector<std::string> words, std::int64_t dim, std::uint64_t seed);
    static ToyVocab standard(std::int64_t dim, std::uint64_t seed);

    std::int64_t dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }
    // Lower-cased lookup; unknown words share one vector.
    const std::vector<double>& embedding(const std::string& word) const;

private:
    std::int64_t dim_;
    std::uint64_t seed_;
    std::map<std::string, std::vector<double>> table_;
    std::vector<double> unk_;
};

Context toy_text_encode(const std::string& prompt, const ToyVocab& vocab, std::int64_t context_dim,
                        std::int64_t max_len);

// ---- Checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    UViTConfig config;
    // Extra key=value lines stored after the model config (train settings,
    // rng state, vocab seed).
    std::vector<std::pair<std::string, std::string>> metadata;
    std::uint64_t iteration = 0;
    std::vector<NamedTensor> tensors;

    const std::string* meta(const std::string& key) const;
    const NamedTensor* tensor(const std::string& name) const;
};

// Model parameters, plus "optim.m.*"/"optim.v.*" moments and the optim_step
// metadata entry when state is given.
Checkpoint make_checkpoint(const UViTModel& model, std::uint64_t iteration, const OptimizerState* state = nullptr);
// Rebuilds the model from the stored config and copies every parameter.
UViTModel model_from_checkpoint(const Checkpoint& ckpt);
// Empty state if the checkpoint carries none.
OptimizerState optimizer_from_checkpoint(const Checkpoint& ckpt, const UViTModel& model);

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
Checkpoint read_checkpoint(std::istream& in);
// Writes through a temporary sibling file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace uvit
