#include "metamorph/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "metamorph/io.hpp"

namespace metamorph {

namespace {

float quantize(double v) {
    double clamped = std::clamp(v, 0.0, 1.0);
    return float(std::lround(clamped * 255.0)) / 255.0f;
}

double base_pixel(int label, int x, int y, const SynthSpec& spec) {
    int n = spec.image_size;
    switch (label) {
        case 0:
            return double(x) / (n - 1);
        case 1:
            return double(y) / (n - 1);
        case 2: {
            double cx = (n - 1) / 2.0, cy = (n - 1) / 2.0;
            double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            return std::exp(-d2 / (2.0 * spec.blob_sigma * spec.blob_sigma));
        }
        default: {
            int cell = spec.checker_cell;
            return ((x / cell + y / cell) % 2 == 0) ? 1.0 : 0.0;
        }
    }
}

}  // namespace

std::pair<std::vector<float>, int> generate(uint64_t seed, Split split, int index,
                                            const SynthSpec& spec) {
    if (index < 0 || index >= spec.split_count(split))
        throw ContractError("generate: index out of range for split");
    int label = index % spec.num_classes;
    RngStream rng = RngStream(seed)
                        .split(split == Split::kTrain ? "train" : "test")
                        .split(uint64_t(index));
    double brightness = rng.uniform(spec.brightness_low, spec.brightness_high);

    int n = spec.image_size;
    std::vector<float> img(size_t(n) * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double v = brightness * base_pixel(label, x, y, spec);
            v += (rng.uniform() - 0.5) * spec.noise_amplitude;
            img[size_t(y * n + x)] = quantize(v);
        }
    return {std::move(img), label};
}

Dataset make_synth_shapes(uint64_t seed, Split split, const SynthSpec& spec) {
    Dataset ds;
    ds.height = spec.image_size;
    ds.width = spec.image_size;
    ds.channels = 1;
    int count = spec.split_count(split);
    ds.images.reserve(size_t(count) * size_t(ds.image_numel()));
    ds.labels.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        auto [img, label] = generate(seed, split, i, spec);
        ds.images.insert(ds.images.end(), img.begin(), img.end());
        ds.labels.push_back(uint8_t(label));
    }
    return ds;
}

Dataset load_raw(const std::string& images_path, const std::string& labels_path) {
    auto ibuf = io::read_file(images_path);
    io::Reader ir(ibuf);
    ir.expect_magic("NMIM");
    uint32_t count = ir.u32(), h = ir.u32(), w = ir.u32(), c = ir.u32();
    uint64_t pixels = uint64_t(count) * h * w * c;
    if (ir.remaining() != pixels)
        throw FormatError("NMIM payload size mismatch: header says " + std::to_string(pixels) +
                          " bytes, file has " + std::to_string(ir.remaining()));
    const uint8_t* praw = pixels ? ir.bytes(size_t(pixels)) : nullptr;

    auto lbuf = io::read_file(labels_path);
    io::Reader lr(lbuf);
    lr.expect_magic("NMLB");
    uint32_t lcount = lr.u32();
    if (lcount != count)
        throw FormatError("NMLB count " + std::to_string(lcount) + " does not match NMIM count " +
                          std::to_string(count));
    if (lr.remaining() != lcount) throw FormatError("NMLB payload size mismatch");
    const uint8_t* lraw = lcount ? lr.bytes(lcount) : nullptr;

    Dataset ds;
    ds.height = int(h);
    ds.width = int(w);
    ds.channels = int(c);
    ds.images.resize(size_t(pixels));
    for (uint64_t i = 0; i < pixels; ++i) ds.images[size_t(i)] = float(praw[i]) / 255.0f;
    ds.labels.assign(lraw, lraw + lcount);
    return ds;
}

void save_raw(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    std::vector<uint8_t> ibuf;
    ibuf.reserve(16 + ds.images.size());
    ibuf.insert(ibuf.end(), {'N', 'M', 'I', 'M'});
    io::append_u32(ibuf, uint32_t(ds.count()));
    io::append_u32(ibuf, uint32_t(ds.height));
    io::append_u32(ibuf, uint32_t(ds.width));
    io::append_u32(ibuf, uint32_t(ds.channels));
    for (float v : ds.images)
        ibuf.push_back(uint8_t(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)));
    io::write_file_atomic(images_path, ibuf);

    std::vector<uint8_t> lbuf;
    lbuf.insert(lbuf.end(), {'N', 'M', 'L', 'B'});
    io::append_u32(lbuf, uint32_t(ds.count()));
    lbuf.insert(lbuf.end(), ds.labels.begin(), ds.labels.end());
    io::write_file_atomic(labels_path, lbuf);
}

void augment_crop_flip(const float* src, float* dst, int channels, int height, int width,
                       int pad, RngStream& rng) {
    int oy = int(rng.uniform_int(uint64_t(2 * pad + 1))) - pad;
    int ox = int(rng.uniform_int(uint64_t(2 * pad + 1))) - pad;
    bool flip = rng.uniform_int(2) == 1;
    for (int c = 0; c < channels; ++c) {
        const float* sc = src + int64_t(c) * height * width;
        float* dc = dst + int64_t(c) * height * width;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                int sx = flip ? width - 1 - x : x;
                int iy = y + oy, ix = sx + ox;
                dc[y * width + x] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                        ? sc[iy * width + ix]
                                        : 0.f;
            }
    }
}

Tensor make_batch(const Dataset& ds, const std::vector<int64_t>& indices, bool augment,
                  RngStream& rng) {
    if (indices.empty()) throw ContractError("make_batch: empty index list");
    int64_t numel = ds.image_numel();
    Tensor batch = Tensor::zeros({int(indices.size()), ds.channels, ds.height, ds.width});
    float* out = batch.data().data();
    for (size_t i = 0; i < indices.size(); ++i) {
        int64_t idx = indices[i];
        if (idx < 0 || idx >= ds.count()) throw ContractError("make_batch: index out of range");
        const float* src = ds.image(idx);
        float* dst = out + int64_t(i) * numel;
        if (augment)
            augment_crop_flip(src, dst, ds.channels, ds.height, ds.width, 2, rng);
        else
            std::copy(src, src + numel, dst);
    }
    return batch;
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= ds.count()) throw ContractError("batch_labels: index out of range");
        out.push_back(int(ds.labels[size_t(idx)]));
    }
    return out;
}

}  // namespace metamorph
