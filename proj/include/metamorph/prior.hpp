#pragma once

#include <string>
#include <utility>
#include <vector>

#include "metamorph/checkpoint.hpp"
#include "metamorph/dataset.hpp"
#include "metamorph/tensor.hpp"

// The prior model: a small residual network trained conventionally, then
// BN-folded and permutation-aligned so its weight tensors are smooth along
// channel axes (the reconstruction target for the hypernetwork).

namespace metamorph {

struct ArchSpec {
    std::vector<int> widths = {8, 16, 32};  // stream width per stage
    int blocks_per_layer = 3;
    int num_classes = 4;
    int in_channels = 1;

    bool operator==(const ArchSpec&) const = default;
};

// Convolution with an optional trailing batch-normalization. After folding,
// the BN is absorbed into kernel and bias and has_bn turns false.
struct ConvBN {
    Tensor kernel;  // [Cout, Cin, k, k]
    Tensor bias;    // [Cout]
    int stride = 1;
    int padding = 1;
    bool has_bn = true;
    Tensor bn_scale, bn_shift;
    std::vector<float> bn_mean, bn_var;
    float bn_eps = 1e-5f;

    Tensor forward(const Tensor& x, bool training);
    ConvBN clone_values() const;
};

struct ResBlock {
    ConvBN conv1, conv2;
    bool has_projection = false;
    ConvBN projection;  // 1x1, stride equal to conv1's

    Tensor forward(const Tensor& x, bool training);
    ResBlock clone_values() const;
};

struct PriorNetwork {
    ArchSpec arch;
    ConvBN stem;
    std::vector<std::vector<ResBlock>> layers;
    Tensor fc_weight, fc_bias;
    bool folded = false;

    static PriorNetwork random_init(const ArchSpec& arch, RngStream& rng);

    Tensor forward(const Tensor& x, bool training = false);
    std::vector<Tensor> parameters();
    void set_requires_grad(bool on);
    int64_t param_count() const;
    PriorNetwork clone_values() const;
};

Checkpoint to_checkpoint(const PriorNetwork& net, const std::string& model_kind);
PriorNetwork prior_from_checkpoint(const Checkpoint& ckpt);

struct PriorTrainSpec {
    int epochs = 30;
    int batch_size = 128;
    float learning_rate = 1e-3f;
    float weight_decay = 1e-4f;
    bool augment = true;
};

// Conventional supervised training; returns the network in inference mode.
PriorNetwork train_prior(const Dataset& train, const ArchSpec& arch, const PriorTrainSpec& spec,
                         uint64_t seed);

struct EvalResult {
    double accuracy = 0.0;
    double ce_loss = 0.0;
};
EvalResult evaluate(PriorNetwork& net, const Dataset& ds, int batch_size = 256);

// ---------------------------------------------------------------------------
// BN folding

// w'_c = w_c * s_c / sqrt(var_c + eps); b'_c = t_c + (b_c - mean_c) * s_c / sqrt(var_c + eps)
std::pair<Tensor, Tensor> fold_batchnorm(const Tensor& kernel, const Tensor& bias,
                                         const Tensor& scale, const Tensor& shift,
                                         const std::vector<float>& mean,
                                         const std::vector<float>& var, float eps);

void fold_batchnorm_inplace(ConvBN& cb);
void fold_network(PriorNetwork& net);

// ---------------------------------------------------------------------------
// Total variation and permutation alignment

// W viewed as [C_out, C_in, rest...]: sum of absolute differences between
// adjacent input-channel slices plus adjacent output-channel slices.
double total_variation(const Tensor& w);

// Per-channel feature rows [C, F]; cost of an ordering is the sum of L1
// distances between consecutive rows.
double ordering_cost(const Tensor& features, const std::vector<int>& order);

// Exhaustive (exactly optimal) for C <= 8, greedy nearest-neighbor plus 2-opt
// beyond. The result never costs more than the identity ordering.
std::vector<int> find_permutation(const Tensor& features);

std::vector<int> invert_permutation(const std::vector<int>& order);
bool is_permutation(const std::vector<int>& order);

// Intermediate channels of one block (conv1 outputs / conv2 inputs): feature
// rows, application, and the TV objective both share.
Tensor block_channel_features(const ResBlock& block);
void apply_block_permutation(ResBlock& block, const std::vector<int>& order);

// Residual-stream channels of one stage, propagated through every producer
// and consumer of that stream (experimental scope).
Tensor stage_channel_features(const PriorNetwork& net, int stage);
void apply_stage_permutation(PriorNetwork& net, int stage, const std::vector<int>& order);

struct SmoothReport {
    std::string name;
    double tv_before = 0.0;
    double tv_after = 0.0;
};

enum class SmoothScope { kIntraBlock, kStageWide };

// Folds all batch normalization, then permutes channels to minimize TV.
std::vector<SmoothReport> smooth_network(PriorNetwork& net,
                                         SmoothScope scope = SmoothScope::kIntraBlock);

}  // namespace metamorph
