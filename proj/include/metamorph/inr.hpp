#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metamorph/coords.hpp"
#include "metamorph/tensor.hpp"

// The hypernetwork F(.;W): residual MLPs mapping coordinate embeddings to
// base-layer weights. Each metamorphosed base layer owns either a kernel-INR
// plus a bias-INR (disentangled, the default) or a single shared-head INR
// whose output is reinterpreted per target (legacy mode).

namespace metamorph {

struct INRConfig {
    int depth = 8;        // total linear layers, input and output included
    int width = 512;
    int input_dim = 384;  // Fourier embedding length
    int output_dim = 9;   // D
    bool residual = true;

    bool operator==(const INRConfig&) const = default;
};

class INRModel {
public:
    INRModel() = default;
    INRModel(const INRConfig& cfg, RngStream& rng);

    // embeddings [n, input_dim] -> outputs [n, output_dim]
    Tensor forward(const Tensor& embeddings) const;

    const INRConfig& config() const { return cfg_; }
    bool initialized() const { return !weights_.empty(); }

    std::vector<Tensor> parameters() const;
    int64_t param_count() const;

    // value copy; the two models remain independently trainable
    void copy_parameters_from(const INRModel& other);

    std::vector<Tensor>& weights() { return weights_; }
    std::vector<Tensor>& biases() { return biases_; }
    const std::vector<Tensor>& weights() const { return weights_; }
    const std::vector<Tensor>& biases() const { return biases_; }

private:
    INRConfig cfg_;
    std::vector<Tensor> weights_;  // one [out,in] per layer
    std::vector<Tensor> biases_;   // one [out] per layer
};

// Pre-initialization from the previously trained INR (identical architecture).
void init_from_predecessor(INRModel& fresh, const INRModel& predecessor);

// Legacy shared-head interpretation: reshape a length-D output to d x d
// (d odd, d >= k) and return the central k x k window, row-major.
template <typename T>
std::vector<T> extract_kernel(const std::vector<T>& output, int k) {
    int64_t d64 = int64_t(std::llround(std::sqrt(double(output.size()))));
    int d = int(d64);
    if (int64_t(d) * d != int64_t(output.size()) || d % 2 == 0 || d < k)
        throw ContractError("extract_kernel: output length must be an odd square >= k*k");
    int off = (d - k) / 2;
    std::vector<T> window(size_t(k) * k);
    for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c)
            window[size_t(r * k + c)] = output[size_t((off + r) * d + (off + c))];
    return window;
}

// Static description of one metamorphosed base layer within the reference
// network, fixing its Eq. 1 denominators.
struct LayerCoordInfo {
    std::string name;     // e.g. "layer1.block2.conv1"
    int layer_index = 1;  // l: 1-based position among all base layers
    int num_layers = 1;   // L
    int in_ref = 1;       // C_in of the reference layer
    int out_ref = 1;      // C_out of the reference layer
    int normalizer = 1;   // N: max channel count over all base layers
    int kernel_size = 3;
};

// One metamorphosed base layer: its coordinate info plus its INR head(s).
struct LayerINR {
    LayerCoordInfo info;
    INRModel kernel_inr;  // D = k*k, or the shared head in legacy mode
    INRModel bias_inr;    // D = 1; unused in legacy mode
    bool disentangled = true;
};

struct GeneratedLayer {
    Tensor kernel;  // [c_out, c_in, k, k]
    Tensor bias;    // [c_out]
};

// Generates the layer's weights for sampled widths (out_cfg, in_cfg) <=
// (out_ref, in_ref). All (c_out x c_in) kernel coordinates are embedded and
// evaluated as one batched forward; bias coordinates likewise. Gradients
// flow into the INR parameters through the generated tensors.
GeneratedLayer generate_layer_weights(const LayerINR& entry, int out_cfg, int in_cfg,
                                      const PerturbationSpec& perturbation, RngStream& rng,
                                      const FourierSpec& fourier = {});

// Legacy generation for a linear layer: one shared-head forward per (out, in)
// projection weight, value = mean of the D outputs; bias = first value of the
// bias-coordinate forward.
GeneratedLayer generate_linear_weights(const LayerINR& entry, int out_cfg, int in_cfg,
                                       const PerturbationSpec& perturbation, RngStream& rng,
                                       const FourierSpec& fourier = {});

// Builds the embedding matrix for the layer's kernel (and bias) coordinate
// grid; exposed for tests that count evaluations.
Tensor embed_kernel_grid(const LayerCoordInfo& info, int out_cfg, int in_cfg,
                         const PerturbationSpec& perturbation, RngStream& rng,
                         const FourierSpec& fourier);
Tensor embed_bias_grid(const LayerCoordInfo& info, int out_cfg, int in_cfg,
                       const PerturbationSpec& perturbation, RngStream& rng,
                       const FourierSpec& fourier);

}  // namespace metamorph
