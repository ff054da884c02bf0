#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metamorph/rng.hpp"
#include "metamorph/tensor.hpp"

// SynthShapes: a deterministic, procedurally generated 16x16 grayscale
// classification task (4 classes), plus a loader for the NMIM/NMLB raw
// formats so external data can be brought in.

namespace metamorph {

enum class Split { kTrain, kTest };

struct SynthSpec {
    int image_size = 16;
    int num_classes = 4;
    int train_count = 4096;
    int test_count = 1024;
    double noise_amplitude = 0.3;    // uniform noise spans [-a/2, a/2)
    double brightness_low = 0.7;
    double brightness_high = 1.3;
    double blob_sigma = 3.0;         // class 2: centered Gaussian blob
    int checker_cell = 4;            // class 3: cell edge in pixels

    int split_count(Split s) const { return s == Split::kTrain ? train_count : test_count; }
};

struct Dataset {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> images;   // [count, C, H, W] row-major
    std::vector<uint8_t> labels;

    int64_t count() const { return int64_t(labels.size()); }
    int64_t image_numel() const { return int64_t(channels) * height * width; }
    const float* image(int64_t i) const { return images.data() + i * image_numel(); }
};

// One (image, label) pair, bit-identical per (seed, split, index) key.
// Pixels are quantized to 8 bits, so NMIM round-trips are exact.
std::pair<std::vector<float>, int> generate(uint64_t seed, Split split, int index,
                                            const SynthSpec& spec = {});

Dataset make_synth_shapes(uint64_t seed, Split split, const SynthSpec& spec = {});

// NMIM/NMLB raw formats (little-endian headers, 8-bit pixels/labels)
Dataset load_raw(const std::string& images_path, const std::string& labels_path);
void save_raw(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Training-time augmentation: random crop after a 2-pixel zero pad, then
// horizontal flip with probability 1/2. Draw order per image: offset y,
// offset x, flip.
void augment_crop_flip(const float* src, float* dst, int channels, int height, int width,
                       int pad, RngStream& rng);

// Batch assembly in [B,C,H,W] layout; augmentation only when requested.
Tensor make_batch(const Dataset& ds, const std::vector<int64_t>& indices, bool augment,
                  RngStream& rng);
std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& indices);

}  // namespace metamorph
