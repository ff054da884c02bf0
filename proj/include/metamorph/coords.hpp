#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "metamorph/errors.hpp"
#include "metamorph/rng.hpp"

// Coordinate construction for the weight-manifold hypernetwork. Every weight
// location is addressed by six normalized coordinates combining the sampled
// indices (l, c_in, c_out) with the reference architecture proportions, and
// the vector is lifted by a Fourier positional embedding before entering the
// hypernetwork.

namespace metamorph {

// Location of one generated weight relative to the reference architecture.
// Layer and channel indices are 1-based so unperturbed normalized entries are
// strictly positive.
struct LayerIndexRef {
    int layer = 1;        // l: base-layer index being generated
    int num_layers = 1;   // L: total base layers of the reference network
    int in_index = 1;     // c_in: sampled input-channel index
    int in_ref = 1;       // C_in: reference input-channel count
    int out_index = 1;    // c_out: sampled output-channel index
    int out_ref = 1;      // C_out: reference output-channel count
    int normalizer = 1;   // N: max channel count over all base layers

    void validate() const {
        if (num_layers < 1 || layer < 1 || layer > num_layers)
            throw ContractError("LayerIndexRef: layer index out of range");
        if (in_ref < 1 || in_index < 1 || in_index > in_ref)
            throw ContractError("LayerIndexRef: input channel index out of range");
        if (out_ref < 1 || out_index < 1 || out_index > out_ref)
            throw ContractError("LayerIndexRef: output channel index out of range");
        if (normalizer < in_ref || normalizer < out_ref)
            throw ContractError("LayerIndexRef: normalizer smaller than channel counts");
    }
};

struct CoordinateVector {
    std::array<double, 6> v{};
    bool perturbed = false;
};

enum class PerturbMode {
    kPreNormalization,   // epsilon added to the integer indices, then normalized
    kPostNormalization,  // epsilon added to all six normalized entries
};

struct PerturbationSpec {
    bool enabled = true;
    double low = -0.5;
    double high = 0.5;
    PerturbMode mode = PerturbMode::kPreNormalization;
};

struct FourierSpec {
    int num_frequencies = 32;

    int embedding_length() const { return 6 * 2 * num_frequencies; }
};

inline CoordinateVector build_coordinate(const LayerIndexRef& ref) {
    ref.validate();
    CoordinateVector cv;
    double n = double(ref.normalizer);
    cv.v = {double(ref.layer) / ref.num_layers,
            double(ref.in_index) / ref.in_ref,
            double(ref.out_index) / ref.out_ref,
            double(ref.num_layers) / n,
            double(ref.in_ref) / n,
            double(ref.out_ref) / n};
    return cv;
}

// Cross-network smoothing: an independent epsilon ~ U(low, high) per index
// coordinate. In pre-normalization mode (the default) epsilon lands on the
// raw integer indices so one unit of epsilon span equals one index spacing;
// the post-normalization variant perturbs the already-normalized entries.
inline CoordinateVector perturb(const LayerIndexRef& ref, const PerturbationSpec& spec,
                                RngStream& rng) {
    if (!spec.enabled) return build_coordinate(ref);
    ref.validate();
    CoordinateVector cv;
    cv.perturbed = true;
    if (spec.mode == PerturbMode::kPreNormalization) {
        double el = rng.uniform(spec.low, spec.high);
        double ei = rng.uniform(spec.low, spec.high);
        double eo = rng.uniform(spec.low, spec.high);
        double n = double(ref.normalizer);
        cv.v = {(double(ref.layer) + el) / ref.num_layers,
                (double(ref.in_index) + ei) / ref.in_ref,
                (double(ref.out_index) + eo) / ref.out_ref,
                double(ref.num_layers) / n,
                double(ref.in_ref) / n,
                double(ref.out_ref) / n};
    } else {
        cv = build_coordinate(ref);
        cv.perturbed = true;
        for (auto& x : cv.v) x += rng.uniform(spec.low, spec.high);
    }
    return cv;
}

// [sin(2^f pi v_i), cos(2^f pi v_i)] for every entry and frequency,
// entry-major. Length 6 * 2 * num_frequencies.
inline void fourier_embed_into(const CoordinateVector& cv, const FourierSpec& spec, float* out) {
    constexpr double kPi = 3.14159265358979323846;
    int f = spec.num_frequencies;
    for (int i = 0; i < 6; ++i) {
        double base = kPi * cv.v[size_t(i)];
        for (int j = 0; j < f; ++j) {
            double arg = std::ldexp(base, j);  // 2^j * pi * v_i
            out[(i * f + j) * 2] = float(std::sin(arg));
            out[(i * f + j) * 2 + 1] = float(std::cos(arg));
        }
    }
}

inline std::vector<float> fourier_embed(const CoordinateVector& cv, const FourierSpec& spec) {
    std::vector<float> out(size_t(spec.embedding_length()));
    fourier_embed_into(cv, spec, out.data());
    return out;
}

}  // namespace metamorph
