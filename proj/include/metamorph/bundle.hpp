#pragma once

#include <utility>
#include <vector>

#include "metamorph/checkpoint.hpp"
#include "metamorph/inr.hpp"
#include "metamorph/morphnet.hpp"

// Bridges the hypernetwork heads to the network architecture: per
// metamorphosed block, one INR pair for conv1 and one for conv2, addressed by
// their positions in the reference layer enumeration.

namespace metamorph {

// Coordinate descriptors (Eq.-1 denominators) for a block's two convolutions.
// Layers are enumerated 1-based in forward order: stem, then conv1/conv2
// (and the projection, where present) of every block, then the classifier.
std::pair<LayerCoordInfo, LayerCoordInfo> block_layer_infos(const ArchSpec& arch, BlockId id);

struct BlockINR {
    BlockId block;
    int reference = 0;  // intermediate width at gamma = 0
    LayerINR conv1, conv2;
};

struct INRBundle {
    ArchSpec arch;
    INRConfig kernel_cfg, bias_cfg;
    FourierSpec fourier;
    bool disentangled = true;
    std::vector<BlockINR> blocks;  // network order

    std::vector<BlockId> block_ids() const;
    std::vector<int> references() const;
    std::vector<Tensor> block_parameters(size_t i) const;
    std::vector<Tensor> parameters() const;
};

// Builds the INR pair for one block. A non-null predecessor provides the
// initial parameter values (incremental pre-initialization); otherwise the
// heads start from their own random draw.
BlockINR make_block_inr(const ArchSpec& arch, BlockId id, const INRConfig& kernel_cfg,
                        const INRConfig& bias_cfg, bool disentangled, RngStream& rng,
                        const BlockINR* predecessor = nullptr);

// One configuration's generated weights for the block (differentiable
// w.r.t. the INR parameters).
MetaBlockWeights generate_block_weights(const BlockINR& entry, int width,
                                        const PerturbationSpec& perturbation, RngStream& rng,
                                        const FourierSpec& fourier);

// Reconstruction targets / generated tensors flattened in a fixed order.
std::vector<Tensor> prior_block_tensors(const PriorNetwork& prior, BlockId id);
std::vector<Tensor> generated_tensors(const MetaBlockWeights& w);

Checkpoint bundle_to_checkpoint(const INRBundle& bundle, const std::vector<Tensor>& alphas);
void bundle_from_checkpoint(const Checkpoint& ckpt, INRBundle& bundle,
                            std::vector<Tensor>& alphas);

}  // namespace metamorph
