#pragma once

#include <string>
#include <vector>

#include "metamorph/prior.hpp"

// Width selection from the compression ratio, the alpha-scaled metamorphic
// block, and assembly of generated + shared weights into a runnable network.

namespace metamorph {

struct BlockId {
    int stage = 0;
    int index = 0;

    bool operator==(const BlockId&) const = default;
    std::string str() const {
        return "layer" + std::to_string(stage) + ".block" + std::to_string(index);
    }
};

// Blocks eligible for weight generation, in network order. First-in-stage
// blocks (projection shortcuts) are never metamorphosed; the network's last
// block stays shared unless explicitly included.
std::vector<BlockId> metamorphic_candidates(const ArchSpec& arch, bool include_last = false);

double gamma_from_width(int width, int reference);
int width_from_gamma(int reference, double gamma);  // round half away from zero, clamp >= 1

struct BlockConfig {
    BlockId block;
    int reference = 0;
    int width = 0;

    double gamma() const { return gamma_from_width(width, reference); }
};

struct NetworkConfig {
    std::vector<BlockConfig> blocks;

    bool uncompressed() const;
    void validate() const;
};

// One shared ratio applied to every listed block.
NetworkConfig instantiate_config(const std::vector<BlockId>& blocks,
                                 const std::vector<int>& references, double gamma);

struct ConfigurationPool {
    int reference = 0;
    std::vector<int> widths;  // {ceil(C/2), ..., C}

    static ConfigurationPool from_reference(int reference);
    bool contains(int width) const;
};

struct MetaBlockWeights {
    Tensor conv1_kernel, conv1_bias;  // [c, C, 3, 3], [c]
    Tensor conv2_kernel, conv2_bias;  // [C, c, 3, 3], [C]

    int64_t kernel_entries() const {
        return conv1_kernel.numel() + conv2_kernel.numel();
    }
    int64_t param_entries() const {
        return kernel_entries() + conv1_bias.numel() + conv2_bias.numel();
    }
};

// y = x + alpha * conv2(relu(conv1(x))); no normalization, no post-add relu
Tensor metamorphic_block_forward(const Tensor& x, const MetaBlockWeights& w, const Tensor& alpha);

// Forward through the folded base with the listed blocks replaced by
// generated weights. Gradients flow into `generated`, `alphas`, and any base
// tensor marked as requiring them.
Tensor morph_forward(PriorNetwork& base, const std::vector<BlockId>& meta_blocks,
                     const std::vector<Tensor>& alphas,
                     const std::vector<MetaBlockWeights>& generated, const Tensor& x);

// A self-contained sampled network: no hypernetwork needed at inference.
struct MorphModel {
    PriorNetwork base;  // folded
    std::vector<BlockId> meta_blocks;
    std::vector<Tensor> alphas;
    std::vector<MetaBlockWeights> weights;
    NetworkConfig config;

    Tensor forward(const Tensor& x);
    int64_t param_count() const;
};

Checkpoint to_checkpoint(const MorphModel& model);
MorphModel morph_from_checkpoint(const Checkpoint& ckpt);

EvalResult evaluate(MorphModel& model, const Dataset& ds, int batch_size = 256);

}  // namespace metamorph
